//! Index maps precomputed once per configuration.
//!
//! Each attention block reads its queries, keys and values straight out of
//! the `[L, 3C]` projection with one gather that folds together the cyclic
//! shift, the window partition and the head split. A second gather puts the
//! per-head outputs back in token order.

use std::sync::Arc;

use super::config::ModelConfig;
use crate::error::{Result, TallError};

#[derive(Clone, Debug)]
pub struct BlockNames {
    pub norm1: (String, String),
    pub qkv: (String, String),
    pub bias: String,
    pub proj: (String, String),
    pub norm2: (String, String),
    pub fc1: (String, String),
    pub fc2: (String, String),
}

impl BlockNames {
    fn new(stage: usize, block: usize) -> Self {
        let p = format!("stages.{stage}.blocks.{block}");
        let pair = |a: &str, x: &str, y: &str| (format!("{p}.{a}.{x}"), format!("{p}.{a}.{y}"));
        BlockNames {
            norm1: pair("norm1", "gamma", "beta"),
            qkv: pair("attn.qkv", "weight", "bias"),
            bias: format!("{p}.attn.bias"),
            proj: pair("attn.proj", "weight", "bias"),
            norm2: pair("norm2", "gamma", "beta"),
            fc1: pair("mlp.fc1", "weight", "bias"),
            fc2: pair("mlp.fc2", "weight", "bias"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BlockPlan {
    pub stage: usize,
    pub block: usize,
    pub grid: (usize, usize),
    pub window: usize,
    pub shift: usize,
    pub heads: usize,
    pub dim: usize,
    /// Gathers from `[L, 3C]` to `[windows * heads, N, C / heads]` for q, k, v.
    pub qkv_index: [Arc<[usize]>; 3],
    /// Gathers `[windows * heads, N, C / heads]` back to `[L, C]`.
    pub merge_index: Arc<[usize]>,
    /// Additive `[windows * heads, N, N]` mask for shifted windows.
    pub mask: Option<Arc<[f64]>>,
    /// Original token index of each position of each window.
    pub window_tokens: Vec<Vec<usize>>,
    pub names: BlockNames,
}

impl BlockPlan {
    pub fn num_windows(&self) -> usize {
        self.window_tokens.len()
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window * self.window
    }

    fn new(config: &ModelConfig, stage: usize, block: usize) -> Self {
        let (h, w) = config.grids()[stage];
        let win = config.windows[stage];
        let shift = config.shift_of(stage, block);
        let heads = config.heads[stage];
        let c = config.dims[stage];
        let dh = c / heads;
        let n = win * win;
        let (nwy, nwx) = (h / win, w / win);

        // Position n of window (wy, wx) sits at (y', x') of the shifted map,
        // which holds original token ((y' + s) mod h, (x' + s) mod w).
        let mut window_tokens = Vec::with_capacity(nwy * nwx);
        let mut window_region = Vec::with_capacity(nwy * nwx);
        let region = |p: usize, extent: usize| {
            if shift == 0 || p < extent - win {
                0
            } else if p < extent - shift {
                1
            } else {
                2
            }
        };
        for wy in 0..nwy {
            for wx in 0..nwx {
                let mut toks = Vec::with_capacity(n);
                let mut regs = Vec::with_capacity(n);
                for iy in 0..win {
                    for ix in 0..win {
                        let (ys, xs) = (wy * win + iy, wx * win + ix);
                        let y = (ys + shift) % h;
                        let x = (xs + shift) % w;
                        toks.push(y * w + x);
                        regs.push(region(ys, h) * 3 + region(xs, w));
                    }
                }
                window_tokens.push(toks);
                window_region.push(regs);
            }
        }

        let nw = window_tokens.len();
        let qkv_index = [0, 1, 2].map(|part| {
            let mut idx = Vec::with_capacity(nw * heads * n * dh);
            for toks in &window_tokens {
                for hd in 0..heads {
                    for &t in toks {
                        let base = t * 3 * c + part * c + hd * dh;
                        idx.extend(base..base + dh);
                    }
                }
            }
            Arc::from(idx)
        });

        let mut merge = vec![0usize; h * w * c];
        for (wi, toks) in window_tokens.iter().enumerate() {
            for hd in 0..heads {
                for (pos, &t) in toks.iter().enumerate() {
                    let src = ((wi * heads + hd) * n + pos) * dh;
                    let dst = t * c + hd * dh;
                    for d in 0..dh {
                        merge[dst + d] = src + d;
                    }
                }
            }
        }

        let mask = (shift > 0).then(|| {
            let mut m = Vec::with_capacity(nw * heads * n * n);
            for regs in &window_region {
                for _ in 0..heads {
                    for i in 0..n {
                        for j in 0..n {
                            m.push(if regs[i] == regs[j] { 0.0 } else { f64::NEG_INFINITY });
                        }
                    }
                }
            }
            Arc::from(m)
        });

        BlockPlan {
            stage,
            block,
            grid: (h, w),
            window: win,
            shift,
            heads,
            dim: c,
            qkv_index,
            merge_index: Arc::from(merge),
            mask,
            window_tokens,
            names: BlockNames::new(stage, block),
        }
    }
}

#[derive(Clone, Debug)]
pub struct StagePlan {
    /// 2x2 neighbour gather from the previous stage, `[L, C]` to `[L/4, 4C]`.
    pub merge_index: Option<Arc<[usize]>>,
    pub blocks: Vec<BlockPlan>,
}

#[derive(Clone, Debug)]
pub struct Plan {
    pub config: ModelConfig,
    pub stages: Vec<StagePlan>,
    /// Temporal position vector (slot) of every first-stage token.
    pub patch_slot: Arc<[usize]>,
    /// Final-stage token rows covered by each slot, in fill order.
    pub slot_tokens: Vec<Arc<[usize]>>,
}

impl Plan {
    pub fn new(config: &ModelConfig) -> Result<Plan> {
        config.validate()?;
        let grids = config.grids();
        let stages = (0..config.num_stages())
            .map(|s| StagePlan {
                merge_index: (s > 0).then(|| merge_index(grids[s - 1], config.dims[s - 1])),
                blocks: (0..config.depths[s]).map(|b| BlockPlan::new(config, s, b)).collect(),
            })
            .collect();
        let layout = &config.layout;
        let slot_of_cell = |r: usize, c: usize| -> Result<usize> {
            layout
                .slots
                .iter()
                .position(|&s| s == [r, c])
                .ok_or_else(|| TallError::config(format!("layout cell [{r},{c}] has no slot")))
        };
        let (gh, gw) = grids[0];
        let mut patch_slot = Vec::with_capacity(gh * gw);
        for y in 0..gh {
            for x in 0..gw {
                patch_slot.push(slot_of_cell(y * layout.rows / gh, x * layout.cols / gw)?);
            }
        }
        let (fh, fw) = *grids.last().unwrap();
        let (th, tw) = (fh / layout.rows, fw / layout.cols);
        let slot_tokens = layout
            .slots
            .iter()
            .map(|&[r, c]| {
                let rows: Vec<usize> = (r * th..(r + 1) * th)
                    .flat_map(|y| (c * tw..(c + 1) * tw).map(move |x| y * fw + x))
                    .collect();
                Arc::from(rows)
            })
            .collect();
        Ok(Plan {
            config: config.clone(),
            stages,
            patch_slot: Arc::from(patch_slot),
            slot_tokens,
        })
    }

    pub fn blocks(&self) -> impl Iterator<Item = &BlockPlan> {
        self.stages.iter().flat_map(|s| s.blocks.iter())
    }
}

/// Concatenates each 2x2 neighbourhood as `[(2i,2j), (2i+1,2j), (2i,2j+1), (2i+1,2j+1)]`.
fn merge_index((h, w): (usize, usize), c: usize) -> Arc<[usize]> {
    let mut idx = Vec::with_capacity(h * w * c);
    for i in 0..h / 2 {
        for j in 0..w / 2 {
            for (dy, dx) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                let base = ((2 * i + dy) * w + 2 * j + dx) * c;
                idx.extend(base..base + c);
            }
        }
    }
    Arc::from(idx)
}
