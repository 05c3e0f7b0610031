use serde::{Deserialize, Serialize};

use crate::error::{Result, TallError};
use crate::tall::LayoutSpec;

/// Geometry and width of the hierarchical window-attention network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Thumbnail `[height, width]`.
    pub image_size: [usize; 2],
    pub in_channels: usize,
    pub patch: usize,
    pub dims: Vec<usize>,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    /// Window side per stage, in tokens.
    pub windows: Vec<usize>,
    pub mlp_ratio: usize,
    /// Width of the graph affinity projections.
    pub grb_key_dim: usize,
    pub num_classes: usize,
    /// Slot geometry; one temporal position vector per slot.
    pub layout: LayoutSpec,
    /// Alternate shifted windows in odd blocks.
    pub shift: bool,
    /// Whether the graph reasoning block is part of the network.
    pub grb: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: [64, 64],
            in_channels: 3,
            patch: 4,
            dims: vec![32, 64],
            depths: vec![2, 2],
            heads: vec![2, 4],
            windows: vec![8, 8],
            mlp_ratio: 4,
            grb_key_dim: 32,
            num_classes: 2,
            layout: LayoutSpec::default_2x2(4.0),
            shift: true,
            grb: true,
        }
    }
}

impl ModelConfig {
    pub fn num_stages(&self) -> usize {
        self.dims.len()
    }

    pub fn num_slots(&self) -> usize {
        self.layout.capacity()
    }

    /// Width of the final token features.
    pub fn feature_dim(&self) -> usize {
        *self.dims.last().expect("validated config has stages")
    }

    /// Token grid `(rows, cols)` of every stage.
    pub fn grids(&self) -> Vec<(usize, usize)> {
        let mut g = (self.image_size[0] / self.patch.max(1), self.image_size[1] / self.patch.max(1));
        let mut out = Vec::with_capacity(self.num_stages());
        for s in 0..self.num_stages() {
            if s > 0 {
                g = (g.0 / 2, g.1 / 2);
            }
            out.push(g);
        }
        out
    }

    /// Cyclic shift of `block` in `stage`: half a window in odd blocks when
    /// the window is smaller than the grid, otherwise none.
    pub fn shift_of(&self, stage: usize, block: usize) -> usize {
        let (h, w) = self.grids()[stage];
        let win = self.windows[stage];
        if self.shift && block % 2 == 1 && win < h.min(w) {
            win / 2
        } else {
            0
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TallError::config(m));
        let n = self.dims.len();
        if n == 0 || self.depths.len() != n || self.heads.len() != n || self.windows.len() != n {
            return bad(format!(
                "dims, depths, heads and windows must have one entry per stage (got {}, {}, {}, {})",
                self.dims.len(),
                self.depths.len(),
                self.heads.len(),
                self.windows.len()
            ));
        }
        if self.patch == 0 || self.in_channels == 0 || self.num_classes == 0 || self.mlp_ratio == 0 {
            return bad("patch, channels, classes and mlp ratio must be positive".into());
        }
        if self.grb_key_dim == 0 {
            return bad("grb key dim must be positive".into());
        }
        self.layout.validate()?;
        let [h, w] = self.image_size;
        if h % self.patch != 0 || w % self.patch != 0 {
            return bad(format!("thumbnail {h}x{w} not divisible by patch size {}", self.patch));
        }
        if h % self.layout.rows != 0 || w % self.layout.cols != 0 {
            return bad(format!(
                "thumbnail {h}x{w} does not split into a {}x{} slot grid",
                self.layout.rows, self.layout.cols
            ));
        }
        let stride = self.patch << (n - 1);
        let (sh, sw) = (h / self.layout.rows, w / self.layout.cols);
        if sh % stride != 0 || sw % stride != 0 {
            return bad(format!(
                "sub-frame {sh}x{sw} must be a multiple of the final token stride {stride}"
            ));
        }
        for (s, &(gh, gw)) in self.grids().iter().enumerate() {
            let win = self.windows[s];
            if win == 0 || gh % win != 0 || gw % win != 0 {
                return bad(format!("stage {s} grid {gh}x{gw} not divisible by window {win}"));
            }
            if !self.dims[s].is_multiple_of(self.heads[s]) {
                return bad(format!(
                    "stage {s} dim {} not divisible by {} heads",
                    self.dims[s], self.heads[s]
                ));
            }
            if s + 1 < n && (gh % 2 != 0 || gw % 2 != 0) {
                return bad(format!("stage {s} grid {gh}x{gw} cannot be merged 2x2"));
            }
        }
        let (gh, gw) = *self.grids().last().unwrap();
        // Strip layouts leave a non-square final grid; the window then spans
        // its short side.
        if self.windows[n - 1] != gh.min(gw) {
            return bad(format!(
                "final-stage window {} must span the final grid {gh}x{gw}",
                self.windows[n - 1]
            ));
        }
        Ok(())
    }

    /// Name and shape of every parameter, in a fixed order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut push = |name: String, shape: Vec<usize>| out.push((name, shape));
        let c0 = self.dims[0];
        let p2c = self.patch * self.patch * self.in_channels;
        push("patch_embed.weight".into(), vec![p2c, c0]);
        push("patch_embed.bias".into(), vec![c0]);
        push("tpe".into(), vec![self.num_slots(), c0]);
        for s in 0..self.num_stages() {
            let c = self.dims[s];
            if s > 0 {
                let cin = 4 * self.dims[s - 1];
                push(format!("stages.{s}.merge.norm.gamma"), vec![cin]);
                push(format!("stages.{s}.merge.norm.beta"), vec![cin]);
                push(format!("stages.{s}.merge.reduction"), vec![cin, c]);
            }
            let n = self.windows[s] * self.windows[s];
            let hidden = self.mlp_ratio * c;
            for b in 0..self.depths[s] {
                let p = format!("stages.{s}.blocks.{b}");
                push(format!("{p}.norm1.gamma"), vec![c]);
                push(format!("{p}.norm1.beta"), vec![c]);
                push(format!("{p}.attn.qkv.weight"), vec![c, 3 * c]);
                push(format!("{p}.attn.qkv.bias"), vec![3 * c]);
                push(format!("{p}.attn.bias"), vec![self.heads[s], n, n]);
                push(format!("{p}.attn.proj.weight"), vec![c, c]);
                push(format!("{p}.attn.proj.bias"), vec![c]);
                push(format!("{p}.norm2.gamma"), vec![c]);
                push(format!("{p}.norm2.beta"), vec![c]);
                push(format!("{p}.mlp.fc1.weight"), vec![c, hidden]);
                push(format!("{p}.mlp.fc1.bias"), vec![hidden]);
                push(format!("{p}.mlp.fc2.weight"), vec![hidden, c]);
                push(format!("{p}.mlp.fc2.bias"), vec![c]);
            }
        }
        let d = self.feature_dim();
        push("norm.gamma".into(), vec![d]);
        push("norm.beta".into(), vec![d]);
        if self.grb {
            push("grb.theta".into(), vec![d, self.grb_key_dim]);
            push("grb.phi".into(), vec![d, self.grb_key_dim]);
            push("grb.w1".into(), vec![d, d]);
            push("grb.w2".into(), vec![d, d]);
        }
        push("head.weight".into(), vec![d, self.num_classes]);
        push("head.bias".into(), vec![self.num_classes]);
        out
    }

    pub fn num_params(&self) -> usize {
        self.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}
