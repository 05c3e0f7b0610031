//! Finite-difference check of the whole network under the combined loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tall_core::image::Image;
use tall_core::losses::{ce_loss_tape, sc_loss_tape, total_loss_tape};
use tall_core::model::{forward, init_params, ForwardOptions, ModelConfig, Plan};
use tall_core::numerics::{grad_check, DType, NamedTensors};
use tall_core::tall::{tall_transform_frames, OrderSpec, Thumbnail, TransformSpec};

fn thumbnail(config: &ModelConfig, seed: u64) -> Thumbnail {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (config.image_size[0] / 2 * 4, config.image_size[1] / 2 * 4);
    let frames: Vec<Image> = (0..4)
        .map(|_| Image::from_vec(3, h, w, (0..3 * h * w).map(|_| rng.random::<f32>()).collect()).unwrap())
        .collect();
    let spec = TransformSpec {
        mask_size: 8,
        layout: config.layout.clone(),
        order: OrderSpec::Forward,
    };
    tall_transform_frames(&frames, &spec, 0, &mut rng).unwrap()
}

/// Init, then give the zero-initialised tensors random values so every
/// parameter receives a non-trivial gradient.
pub fn perturbed_params(config: &ModelConfig, seed: u64) -> NamedTensors {
    let mut params = init_params(config, seed, DType::F64).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for (name, t) in params.iter_mut() {
        let scale = if name.ends_with("gamma") { 0.1 } else { 0.05 };
        t.map_inplace(|_, v| v + scale * rng.random_range(-1.0..1.0));
    }
    params
}

#[test]
fn full_model_gradients_match_central_differences() {
    let config = ModelConfig::default();
    let plan = Plan::new(&config).unwrap();
    let thumb = thumbnail(&config, 3);
    let params = perturbed_params(&config, 7);
    let loss = |tape: &mut tall_core::numerics::Tape, vars: &std::collections::BTreeMap<String, _>| {
        let trace = forward(tape, &plan, vars, &thumb.image, &thumb.frame_of_slot, ForwardOptions::default())?;
        let ce = ce_loss_tape(tape, trace.logits, &[1])?;
        let sc = sc_loss_tape(tape, &trace.frame_features)?;
        total_loss_tape(tape, ce, Some(sc), 0.5)
    };
    let report = grad_check(loss, &params, 1e-5, 8, 11).unwrap();
    let worst = report.worst().unwrap();
    assert!(
        report.max_rel_error() < 1e-4,
        "{} [{}]: analytic {} numeric {} (rel {})",
        worst.name,
        worst.worst,
        worst.worst_analytic,
        worst.worst_numeric,
        worst.max_rel_error
    );
}
