//! Hierarchical shifted-window attention network over thumbnails, with
//! temporal position vectors and a graph reasoning block.

pub mod checkpoint;
pub mod config;
pub mod forward;
pub mod plan;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::clipgen::mix_seed;
use crate::error::{Result, TallError};
use crate::numerics::{DType, NamedTensors, Tape, Tensor};
use crate::tall::Thumbnail;

pub use checkpoint::{load_model, load_params, save_model, save_params};
pub use config::ModelConfig;
pub use forward::{
    add_tpe, forward, grb_forward, patch_embed, patch_merge, patchify, register_params, standardize,
    window_attention_block, PIXEL_MEAN, PIXEL_STD,
    ForwardOptions, ParamVars, Trace,
};
pub use plan::{BlockPlan, Plan};

pub const INIT_STD: f64 = 0.02;

/// Stable 64-bit hash of a parameter name (FNV-1a).
fn name_hash(name: &str) -> u64 {
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn trunc_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    let normal = Normal::new(0.0, std).expect("positive std");
    loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            return v;
        }
    }
}

/// Initial value of one parameter. Each tensor draws from its own stream
/// keyed by name, so adding a parameter never perturbs the others.
fn init_tensor(name: &str, shape: &[usize], seed: u64, dtype: DType) -> Tensor {
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, name_hash(name)]));
    let data: Vec<f64> = if name.ends_with("gamma") {
        vec![1.0; n]
    } else if name.ends_with("beta") || name.ends_with("bias") || name == "grb.w2" {
        // includes the attention bias tables; the zero graph output makes
        // the reasoning block an exact identity at init
        vec![0.0; n]
    } else if name == "tpe" {
        let normal = Normal::new(0.0, INIT_STD).expect("positive std");
        (0..n).map(|_| normal.sample(&mut rng)).collect()
    } else {
        (0..n).map(|_| trunc_normal(&mut rng, INIT_STD)).collect()
    };
    Tensor::with_dtype(shape, data, dtype).expect("init shape")
}

pub fn init_params(config: &ModelConfig, seed: u64, dtype: DType) -> Result<NamedTensors> {
    config.validate()?;
    Ok(config
        .param_shapes()
        .into_iter()
        .map(|(name, shape)| {
            let t = init_tensor(&name, &shape, seed, dtype);
            (name, t)
        })
        .collect())
}

/// Configuration, parameters and the precomputed index plan.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: NamedTensors,
    pub plan: Arc<Plan>,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64, dtype: DType) -> Result<Model> {
        let params = init_params(&config, seed, dtype)?;
        Model::from_params(config, params)
    }

    /// Checks that `params` holds exactly the tensors `config` calls for.
    pub fn from_params(config: ModelConfig, params: NamedTensors) -> Result<Model> {
        let plan = Plan::new(&config)?;
        let shapes = config.param_shapes();
        if shapes.len() != params.len() {
            let extra: Vec<&String> = params
                .keys()
                .filter(|k| !shapes.iter().any(|(n, _)| n == *k))
                .collect();
            return Err(TallError::config(format!(
                "expected {} parameters, got {} (unexpected: {extra:?})",
                shapes.len(),
                params.len()
            )));
        }
        for (name, shape) in &shapes {
            let t = params
                .get(name)
                .ok_or_else(|| TallError::config(format!("missing parameter '{name}'")))?;
            if t.shape() != shape.as_slice() {
                return Err(TallError::shape("parameter", t.shape(), shape));
            }
        }
        Ok(Model {
            config,
            params,
            plan: Arc::new(plan),
        })
    }

    pub fn dtype(&self) -> DType {
        self.params.values().next().map(|t| t.dtype()).unwrap_or_default()
    }

    pub fn to_dtype(&self, dtype: DType) -> Model {
        Model {
            config: self.config.clone(),
            params: self.params.iter().map(|(k, v)| (k.clone(), v.to_dtype(dtype))).collect(),
            plan: self.plan.clone(),
        }
    }

    /// Records a forward pass on a fresh tape.
    pub fn trace(&self, thumb: &Thumbnail, opts: ForwardOptions) -> Result<(Tape, ParamVars, Trace)> {
        let mut tape = Tape::new(self.dtype());
        let vars = register_params(&mut tape, &self.params)?;
        let trace = forward(&mut tape, &self.plan, &vars, &thumb.image, &thumb.frame_of_slot, opts)?;
        Ok((tape, vars, trace))
    }
}

/// Attention weights of one block, with the token index of every window position.
#[derive(Clone, Debug)]
pub struct AttentionMap {
    pub stage: usize,
    pub block: usize,
    pub shift: usize,
    pub heads: usize,
    pub tokens: usize,
    /// `[windows * heads, N, N]`, window-major.
    pub weights: Vec<f64>,
    pub window_tokens: Vec<Vec<usize>>,
}

impl AttentionMap {
    /// Scatters the windowed weights into a dense `[heads, L, L]` matrix;
    /// pairs that never share a window are zero.
    pub fn dense(&self) -> Vec<f64> {
        let l = self.tokens;
        let n = self.window_tokens.first().map_or(0, |w| w.len());
        let mut out = vec![0.0; self.heads * l * l];
        for (wi, toks) in self.window_tokens.iter().enumerate() {
            for h in 0..self.heads {
                let base = (wi * self.heads + h) * n * n;
                for (i, &ti) in toks.iter().enumerate() {
                    for (j, &tj) in toks.iter().enumerate() {
                        out[(h * l + ti) * l + tj] = self.weights[base + i * n + j];
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub logits: Vec<f64>,
    /// One vector per filled slot, ordered by frame index.
    pub frame_features: Vec<Vec<f64>>,
    pub attention: Vec<AttentionMap>,
    pub pooled_x: Vec<f64>,
    pub pooled_y: Vec<f64>,
    /// Row-softmaxed graph adjacency `[N', N']`, empty without the block.
    pub adjacency: Vec<f64>,
}

pub fn model_forward(model: &Model, thumb: &Thumbnail, opts: ForwardOptions) -> Result<ModelOutput> {
    let (tape, _, trace) = model.trace(thumb, opts)?;
    let blocks: Vec<&BlockPlan> = model.plan.blocks().collect();
    let attention = trace
        .attention
        .iter()
        .zip(blocks)
        .map(|(&(stage, block, var), plan)| AttentionMap {
            stage,
            block,
            shift: plan.shift,
            heads: plan.heads,
            tokens: plan.grid.0 * plan.grid.1,
            weights: tape.value(var).to_vec(),
            window_tokens: plan.window_tokens.clone(),
        })
        .collect();
    Ok(ModelOutput {
        logits: tape.value(trace.logits).to_vec(),
        frame_features: trace.frame_features.iter().map(|&v| tape.value(v).to_vec()).collect(),
        attention,
        pooled_x: tape.value(trace.pooled_x).to_vec(),
        pooled_y: tape.value(trace.pooled_y).to_vec(),
        adjacency: trace.adjacency.map(|v| tape.value(v).to_vec()).unwrap_or_default(),
    })
}
