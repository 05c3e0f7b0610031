use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clipgen::CorpusSpec;
use crate::error::{Result, TallError};
use crate::model::ModelConfig;
use crate::numerics::DType;
use crate::tall::{LayoutSpec, OrderSpec};

/// Component switches of the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Toggles {
    /// Thumbnail layout; off means every frame is classified on its own and
    /// the clip logits are the frame average.
    pub tall: bool,
    /// Random square mask per clip during training (needs `tall`).
    pub mask: bool,
    pub grb: bool,
    pub sc_loss: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles {
            tall: true,
            mask: true,
            grb: true,
            sc_loss: true,
        }
    }
}

/// Network widths and depths; geometry comes from the corpus and layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub patch: usize,
    pub dims: Vec<usize>,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub mlp_ratio: usize,
    pub grb_key_dim: usize,
    pub shift: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        ArchConfig {
            patch: m.patch,
            dims: m.dims,
            depths: m.depths,
            heads: m.heads,
            mlp_ratio: m.mlp_ratio,
            grb_key_dim: m.grb_key_dim,
            shift: m.shift,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    /// Weight of the consistency loss.
    pub alpha: f64,
    pub seed: u64,
    /// Mask side in source pixels; `None` is an eighth of the frame height.
    pub mask_size: Option<usize>,
    /// `RxC` or `RxC-col`.
    pub layout: String,
    /// Downsampling factor applied to every frame before placement.
    pub factor: f64,
    pub order: OrderSpec,
    /// Window side per stage; a final `0` spans the last token grid.
    pub windows: Vec<usize>,
    pub toggles: Toggles,
    pub arch: ArchConfig,
    pub adam: AdamConfig,
    /// Dense-sampled clips per video at evaluation.
    pub eval_clips: usize,
    /// Evaluate the validation split every this many epochs (0: only at the end).
    pub val_every: usize,
    /// Worker threads for per-sample gradients; 0 uses every core, 1 runs
    /// inline on the calling thread.
    pub threads: usize,
    pub dtype: DType,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-4,
            batch_size: 8,
            epochs: 15,
            warmup_epochs: 1,
            alpha: crate::losses::DEFAULT_ALPHA,
            seed: 0,
            mask_size: None,
            layout: "2x2".into(),
            factor: 4.0,
            order: OrderSpec::Forward,
            windows: vec![8, 0],
            toggles: Toggles::default(),
            arch: ArchConfig::default(),
            adam: AdamConfig::default(),
            eval_clips: 8,
            val_every: 0,
            threads: 0,
            dtype: DType::F64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TallError::config(m));
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if self.warmup_epochs > self.epochs {
            return bad(format!(
                "warm-up epochs ({}) exceed epochs ({})",
                self.warmup_epochs, self.epochs
            ));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return bad(format!("alpha must be non-negative, got {}", self.alpha));
        }
        if self.eval_clips == 0 {
            return bad("eval_clips must be positive".into());
        }
        if self.toggles.mask && !self.toggles.tall {
            return bad("the mask toggle requires the tall toggle".into());
        }
        self.layout_spec()?.validate()
    }

    /// Layout of the clip thumbnail (with `tall` on).
    pub fn layout_spec(&self) -> Result<LayoutSpec> {
        LayoutSpec::parse(&self.layout, [self.factor, self.factor])
    }

    /// Frames per clip: one per layout slot.
    pub fn frames_per_clip(&self) -> Result<usize> {
        Ok(self.layout_spec()?.capacity())
    }

    /// Layout the network actually sees. Without `tall` every frame fills a
    /// single-slot image of the same size as the thumbnail would have.
    pub fn input_layout(&self) -> Result<LayoutSpec> {
        let l = self.layout_spec()?;
        if self.toggles.tall {
            return Ok(l);
        }
        Ok(LayoutSpec::grid(
            1,
            1,
            [self.factor / l.rows as f64, self.factor / l.cols as f64],
        ))
    }

    pub fn mask_size_for(&self, corpus: &CorpusSpec) -> usize {
        if !self.toggles.mask {
            return 0;
        }
        self.mask_size.unwrap_or(corpus.height / 8)
    }

    pub fn model_config(&self, corpus: &CorpusSpec) -> Result<ModelConfig> {
        let layout = self.input_layout()?;
        let (h, w) = layout.thumbnail_size(corpus.height, corpus.width)?;
        let a = &self.arch;
        let mut cfg = ModelConfig {
            image_size: [h, w],
            in_channels: crate::clipgen::generator::CHANNELS,
            patch: a.patch,
            dims: a.dims.clone(),
            depths: a.depths.clone(),
            heads: a.heads.clone(),
            windows: self.windows.clone(),
            mlp_ratio: a.mlp_ratio,
            grb_key_dim: a.grb_key_dim,
            num_classes: corpus.num_classes(),
            layout,
            shift: a.shift,
            grb: self.toggles.grb,
        };
        let last_grid = cfg.grids().last().copied();
        if let (Some(last), Some((gh, gw))) = (cfg.windows.last_mut(), last_grid) {
            if *last == 0 {
                *last = gh.min(gw);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}
