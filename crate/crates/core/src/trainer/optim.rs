use std::f64::consts::PI;

use super::config::AdamConfig;
use crate::error::{Result, TallError};
use crate::numerics::{DType, NamedTensors, Tensor};

/// Linear warm-up from 0 to `base_lr`, then cosine decay to 0 at `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> f64 {
    let step = step.min(total_steps);
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    if total_steps <= warmup_steps {
        return base_lr;
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    (base_lr * 0.5 * (1.0 + (PI * progress).cos())).max(0.0)
}

/// First and second moment estimates, kept in f64.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct AdamState {
    pub t: u64,
    pub m: NamedTensors,
    pub v: NamedTensors,
}

impl AdamState {
    pub fn new(params: &NamedTensors) -> Self {
        let zeros = |t: &Tensor| Tensor::zeros(t.shape(), DType::F64);
        AdamState {
            t: 0,
            m: params.iter().map(|(k, t)| (k.clone(), zeros(t))).collect(),
            v: params.iter().map(|(k, t)| (k.clone(), zeros(t))).collect(),
        }
    }
}

/// One bias-corrected Adam update. Nothing is modified when any gradient
/// is non-finite; the error names the offending parameter.
pub fn adam_step(
    params: &mut NamedTensors,
    grads: &NamedTensors,
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| TallError::config(format!("no gradient for parameter '{name}'")))?;
        if g.shape() != p.shape() {
            return Err(TallError::shape("adam_step", g.shape(), p.shape()));
        }
        if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(TallError::NonFinite(format!(
                "gradient of '{name}' at index {i} is {}",
                g.data()[i]
            )));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = grads[name].data();
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape(), DType::F64));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape(), DType::F64));
        m.map_inplace(|i, mi| cfg.beta1 * mi + (1.0 - cfg.beta1) * g[i]);
        v.map_inplace(|i, vi| cfg.beta2 * vi + (1.0 - cfg.beta2) * g[i] * g[i]);
        let (m, v) = (m.data(), v.data());
        p.map_inplace(|i, x| {
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            x - lr * mh / (vh.sqrt() + cfg.eps)
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, v: f64) -> NamedTensors {
        [(name.to_string(), Tensor::with_dtype(&[1], vec![v], DType::F64).unwrap())].into()
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(lr_schedule(0, 100, 10, 1e-3), 0.0);
        assert_eq!(lr_schedule(10, 100, 10, 1e-3), 1e-3);
        assert!(lr_schedule(100, 100, 10, 1e-3).abs() < 1e-12);
        assert!((lr_schedule(5, 100, 10, 1e-3) - 5e-4).abs() < 1e-15);
        // continuity at the boundary
        let a = lr_schedule(9, 100_000, 10, 1.0);
        assert!((lr_schedule(10, 100_000, 10, 1.0) - 1.0).abs() < 1e-9);
        assert!(a < 1.0);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = one("w", 0.7);
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &one("w", 0.0), &mut s, 0.1, &AdamConfig::default()).unwrap();
        assert_eq!(p["w"].data()[0], 0.7);
    }

    #[test]
    fn first_step_moves_by_lr() {
        for g in [3.0, -0.002] {
            let mut p = one("w", 1.0);
            let mut s = AdamState::new(&p);
            adam_step(&mut p, &one("w", g), &mut s, 0.01, &AdamConfig::default()).unwrap();
            let moved = p["w"].data()[0] - 1.0;
            assert!((moved + 0.01 * g.signum()).abs() < 1e-6, "{moved}");
        }
    }

    #[test]
    fn converges_on_quadratic() {
        // f(w) = sum_i a_i (w_i - c_i)^2, minimised at c
        let a = [1.0, 10.0, 0.1];
        let c = [0.1, -0.05, 0.08];
        let mut p: NamedTensors =
            [("w".to_string(), Tensor::with_dtype(&[3], vec![0.0; 3], DType::F64).unwrap())].into();
        let mut s = AdamState::new(&p);
        for _ in 0..100 {
            let w = p["w"].data().to_vec();
            let g: Vec<f64> = (0..3).map(|i| 2.0 * a[i] * (w[i] - c[i])).collect();
            let g: NamedTensors = [("w".to_string(), Tensor::with_dtype(&[3], g, DType::F64).unwrap())].into();
            adam_step(&mut p, &g, &mut s, 0.01, &AdamConfig::default()).unwrap();
        }
        for (w, c) in p["w"].data().iter().zip(c) {
            assert!((w - c).abs() < 1e-3, "{w} vs {c}");
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = one("stages.0.w", 1.0);
        let mut s = AdamState::new(&p);
        let err = adam_step(&mut p, &one("stages.0.w", f64::NAN), &mut s, 0.1, &AdamConfig::default())
            .unwrap_err();
        assert!(err.to_string().contains("stages.0.w"));
        assert_eq!(s.t, 0);
        assert_eq!(p["stages.0.w"].data()[0], 1.0);
    }
}
