use std::collections::BTreeMap;
use std::sync::Arc;

use super::plan::{BlockPlan, Plan};
use crate::error::{Result, TallError};
use crate::image::Image;
use crate::numerics::{NamedTensors, Tape, Var};

pub const LN_EPS: f64 = 1e-5;

/// Pixel standardisation applied before the patch projection. Raw [0, 1]
/// pixels are nearly constant inside a patch, so every embedding points the
/// same way and training stalls.
pub const PIXEL_MEAN: f32 = 0.5;
pub const PIXEL_STD: f32 = 0.25;

pub fn standardize(image: &Image) -> Image {
    let mut out = image.clone();
    out.data.iter_mut().for_each(|v| *v = (*v - PIXEL_MEAN) / PIXEL_STD);
    out
}

pub type ParamVars = BTreeMap<String, Var>;

/// Puts every parameter on the tape under its own name.
pub fn register_params(tape: &mut Tape, params: &NamedTensors) -> Result<ParamVars> {
    params
        .iter()
        .map(|(name, t)| Ok((name.clone(), tape.param(name, t)?)))
        .collect()
}

fn get(vars: &ParamVars, name: &str) -> Result<Var> {
    vars.get(name)
        .copied()
        .ok_or_else(|| TallError::config(format!("missing parameter '{name}'")))
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => tape.add_tiled(y, b),
        None => Ok(y),
    }
}

fn layer_norm(tape: &mut Tape, x: Var, vars: &ParamVars, (g, b): &(String, String)) -> Result<Var> {
    let (g, b) = (get(vars, g)?, get(vars, b)?);
    tape.layer_norm(x, g, b, LN_EPS)
}

/// Flattens non-overlapping `p x p` patches into rows of `[c, py, px]` values.
pub fn patchify(image: &Image, patch: usize) -> Result<(Vec<f64>, usize, usize)> {
    if patch == 0 || !image.height.is_multiple_of(patch) || !image.width.is_multiple_of(patch) {
        return Err(TallError::config(format!(
            "image {}x{} not divisible by patch size {patch}",
            image.height, image.width
        )));
    }
    let (gh, gw) = (image.height / patch, image.width / patch);
    let row = image.channels * patch * patch;
    let mut out = Vec::with_capacity(gh * gw * row);
    for gy in 0..gh {
        for gx in 0..gw {
            for c in 0..image.channels {
                for py in 0..patch {
                    let start = image.index(c, gy * patch + py, gx * patch);
                    out.extend(image.data[start..start + patch].iter().map(|&v| v as f64));
                }
            }
        }
    }
    Ok((out, gh, gw))
}

/// Linear patch projection. Returns `[N, c]` tokens in row-major grid order
/// and the grid shape.
pub fn patch_embed(tape: &mut Tape, image: &Image, patch: usize, w: Var, b: Var) -> Result<(Var, (usize, usize))> {
    let (data, gh, gw) = patchify(image, patch)?;
    let row = image.channels * patch * patch;
    let x = tape.constant(&[gh * gw, row], data)?;
    Ok((linear(tape, x, w, Some(b))?, (gh, gw)))
}

/// Adds the temporal position vector of each token's slot.
pub fn add_tpe(tape: &mut Tape, x: Var, tpe: Var, patch_slot: &[usize]) -> Result<Var> {
    let broadcast = tape.gather_rows(tpe, patch_slot)?;
    tape.add(x, broadcast)
}

/// Pre-norm window attention block followed by the MLP, both residual.
/// Returns the new tokens and the `[windows * heads, N, N]` attention weights.
pub fn window_attention_block(tape: &mut Tape, x: Var, plan: &BlockPlan, vars: &ParamVars) -> Result<(Var, Var)> {
    let names = &plan.names;
    let (h, w) = plan.grid;
    let (l, c) = (h * w, plan.dim);
    if tape.shape(x) != [l, c] {
        return Err(TallError::shape("window_attention_block", tape.shape(x), &[l, c]));
    }
    let heads = plan.heads;
    let dh = c / heads;
    let n = plan.tokens_per_window();
    let nw = plan.num_windows();
    let batch = nw * heads;

    let y = layer_norm(tape, x, vars, &names.norm1)?;
    let qkv = linear(tape, y, get(vars, &names.qkv.0)?, Some(get(vars, &names.qkv.1)?))?;
    let [qi, ki, vi] = &plan.qkv_index;
    let q = tape.gather(qkv, qi.clone(), &[batch, n, dh])?;
    let k = tape.gather(qkv, ki.clone(), &[batch, n, dh])?;
    let v = tape.gather(qkv, vi.clone(), &[batch, n, dh])?;

    let scores = tape.matmul_ex(q, k, true)?;
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let scores = tape.reshape(scores, &[nw, heads, n, n])?;
    let scores = tape.add_tiled(scores, get(vars, &names.bias)?)?;
    let mut scores = tape.reshape(scores, &[batch, n, n])?;
    if let Some(mask) = &plan.mask {
        let m = tape.constant(&[batch, n, n], mask.to_vec())?;
        scores = tape.add(scores, m)?;
    }
    let attn = tape.softmax(scores)?;
    let out = tape.matmul(attn, v)?;
    let out = tape.gather(out, plan.merge_index.clone(), &[l, c])?;
    let out = linear(tape, out, get(vars, &names.proj.0)?, Some(get(vars, &names.proj.1)?))?;
    let x = tape.add(x, out)?;

    let y = layer_norm(tape, x, vars, &names.norm2)?;
    let y = linear(tape, y, get(vars, &names.fc1.0)?, Some(get(vars, &names.fc1.1)?))?;
    let y = tape.gelu(y)?;
    let y = linear(tape, y, get(vars, &names.fc2.0)?, Some(get(vars, &names.fc2.1)?))?;
    Ok((tape.add(x, y)?, attn))
}

/// 2x2 neighbour concatenation, layer norm, then a bias-free linear map.
pub fn patch_merge(tape: &mut Tape, x: Var, index: &Arc<[usize]>, stage: usize, vars: &ParamVars) -> Result<Var> {
    let (l, c) = (tape.shape(x)[0], tape.shape(x)[1]);
    let merged = tape.gather(x, index.clone(), &[l / 4, 4 * c])?;
    let p = format!("stages.{stage}.merge");
    let merged = layer_norm(tape, merged, vars, &(format!("{p}.norm.gamma"), format!("{p}.norm.beta")))?;
    tape.matmul(merged, get(vars, &format!("{p}.reduction"))?)
}

/// Graph reasoning over token nodes `f_x` (`[N', d]`).
///
/// `G_w = softmax_rows((f_x θ)(f_x φ)ᵀ / √d_k)`, `f_y = f_x + G_w (f_x W₁) W₂`.
/// Returns `(f_y, G_w)`.
pub fn grb_forward(tape: &mut Tape, fx: Var, theta: Var, phi: Var, w1: Var, w2: Var) -> Result<(Var, Var)> {
    let dk = tape.shape(theta)[1];
    let a = tape.matmul(fx, theta)?;
    let b = tape.matmul(fx, phi)?;
    let g = tape.matmul_ex(a, b, true)?;
    let g = tape.scale(g, 1.0 / (dk as f64).sqrt())?;
    let gw = tape.softmax(g)?;
    let v = tape.matmul(fx, w1)?;
    let msg = tape.matmul(gw, v)?;
    let msg = tape.matmul(msg, w2)?;
    Ok((tape.add(fx, msg)?, gw))
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    /// Run the graph reasoning block (ignored when the config has none).
    pub grb: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions { grb: true }
    }
}

/// Tape handles of everything downstream consumers need.
#[derive(Clone, Debug)]
pub struct Trace {
    /// `[1, K]`.
    pub logits: Var,
    /// Final-stage tokens before graph reasoning, `[N', d]`.
    pub tokens_x: Var,
    /// Final-stage tokens after graph reasoning, `[N', d]`.
    pub tokens_y: Var,
    pub pooled_x: Var,
    pub pooled_y: Var,
    /// Slot-pooled `f_y` per filled slot, sorted by frame index.
    pub frame_features: Vec<Var>,
    pub frame_ids: Vec<usize>,
    pub adjacency: Option<Var>,
    /// `(stage, block, weights)` for every attention block.
    pub attention: Vec<(usize, usize, Var)>,
}

pub fn forward(
    tape: &mut Tape,
    plan: &Plan,
    vars: &ParamVars,
    image: &Image,
    frame_of_slot: &[Option<usize>],
    opts: ForwardOptions,
) -> Result<Trace> {
    let cfg = &plan.config;
    if [image.height, image.width] != cfg.image_size || image.channels != cfg.in_channels {
        return Err(TallError::shape(
            "model_forward",
            &[image.channels, image.height, image.width],
            &[cfg.in_channels, cfg.image_size[0], cfg.image_size[1]],
        ));
    }
    if frame_of_slot.len() != cfg.num_slots() {
        return Err(TallError::shape("model_forward slots", &[frame_of_slot.len()], &[cfg.num_slots()]));
    }
    let (mut x, _) = patch_embed(
        tape,
        &standardize(image),
        cfg.patch,
        get(vars, "patch_embed.weight")?,
        get(vars, "patch_embed.bias")?,
    )?;
    x = add_tpe(tape, x, get(vars, "tpe")?, &plan.patch_slot)?;

    let mut attention = Vec::new();
    for (s, stage) in plan.stages.iter().enumerate() {
        if let Some(idx) = &stage.merge_index {
            x = patch_merge(tape, x, idx, s, vars)?;
        }
        for b in &stage.blocks {
            let (nx, attn) = window_attention_block(tape, x, b, vars)?;
            x = nx;
            attention.push((b.stage, b.block, attn));
        }
    }
    let fx = layer_norm(tape, x, vars, &("norm.gamma".into(), "norm.beta".into()))?;
    let (fy, adjacency) = if cfg.grb && opts.grb {
        let (fy, gw) = grb_forward(
            tape,
            fx,
            get(vars, "grb.theta")?,
            get(vars, "grb.phi")?,
            get(vars, "grb.w1")?,
            get(vars, "grb.w2")?,
        )?;
        (fy, Some(gw))
    } else {
        (fx, None)
    };

    let all: Arc<[usize]> = (0..tape.shape(fx)[0]).collect();
    let pooled_x = tape.mean_rows(fx, all.clone())?;
    let pooled_y = tape.mean_rows(fy, all)?;
    let d = cfg.feature_dim();
    let row = tape.reshape(pooled_y, &[1, d])?;
    let logits = linear(tape, row, get(vars, "head.weight")?, Some(get(vars, "head.bias")?))?;

    let mut filled: Vec<(usize, usize)> = frame_of_slot
        .iter()
        .enumerate()
        .filter_map(|(p, f)| f.map(|t| (t, p)))
        .collect();
    filled.sort_unstable();
    let mut frame_features = Vec::with_capacity(filled.len());
    for &(_, p) in &filled {
        frame_features.push(tape.mean_rows(fy, plan.slot_tokens[p].clone())?);
    }
    Ok(Trace {
        logits,
        tokens_x: fx,
        tokens_y: fy,
        pooled_x,
        pooled_y,
        frame_features,
        frame_ids: filled.into_iter().map(|(t, _)| t).collect(),
        adjacency,
        attention,
    })
}
