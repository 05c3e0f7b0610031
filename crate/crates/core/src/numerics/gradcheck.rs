//! Central-difference verification of tape gradients.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::tape::{Tape, Var};
use super::tensor::{DType, Tensor};
use crate::error::{Result, TallError};

pub type NamedTensors = BTreeMap<String, Tensor>;

/// Denominator floor for the relative error. Central differences at eps
/// around 1e-5 carry roughly 1e-11 of roundoff, so exactly-zero gradients
/// (key biases under softmax) would otherwise fail.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub coords: Vec<usize>,
    pub max_rel_error: f64,
    /// Coordinate where `max_rel_error` was observed.
    pub worst: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub eps: f64,
    pub params: Vec<ParamCheck>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Evaluates `loss_fn` with `params` loaded as named tape parameters.
pub fn eval_loss<F>(loss_fn: &F, params: &NamedTensors, dtype: DType) -> Result<(Tape, Var)>
where
    F: Fn(&mut Tape, &BTreeMap<String, Var>) -> Result<Var>,
{
    let mut tape = Tape::new(dtype);
    let mut vars = BTreeMap::new();
    for (name, t) in params {
        vars.insert(name.clone(), tape.param(name, t)?);
    }
    let out = loss_fn(&mut tape, &vars)?;
    if tape.shape(out) != [1] {
        return Err(TallError::shape("grad_check loss", tape.shape(out), &[1]));
    }
    Ok((tape, out))
}

/// Compares analytic gradients of a scalar loss with central differences.
///
/// For each parameter, `samples_per_param` coordinates are drawn uniformly
/// without replacement (all coordinates when the tensor is smaller), and
/// `(f(p + eps) - f(p - eps)) / 2eps` is compared against the tape gradient.
pub fn grad_check<F>(
    loss_fn: F,
    params: &NamedTensors,
    eps: f64,
    samples_per_param: usize,
    seed: u64,
) -> Result<GradReport>
where
    F: Fn(&mut Tape, &BTreeMap<String, Var>) -> Result<Var> + Sync,
{
    if let Some((name, _)) = params.iter().find(|(_, t)| t.dtype() != DType::F64) {
        return Err(TallError::config(format!(
            "grad_check requires f64 parameters; '{name}' is not"
        )));
    }
    let (tape, out) = eval_loss(&loss_fn, params, DType::F64)?;
    let base = tape.scalar(out);
    if !base.is_finite() {
        return Err(TallError::NonFinite("grad_check: loss at base point".into()));
    }
    let analytic = tape.backward(out, &Tensor::scalar(1.0))?.named();
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jobs = Vec::new();
    let mut coords_by_param = BTreeMap::new();
    for (name, t) in params {
        let k = samples_per_param.min(t.len());
        let mut coords = rand::seq::index::sample(&mut rng, t.len(), k).into_vec();
        coords.sort_unstable();
        for &c in &coords {
            jobs.push((name.clone(), c));
        }
        coords_by_param.insert(name.clone(), coords);
    }

    let numeric: Vec<Result<f64>> = jobs
        .par_iter()
        .map(|(name, c)| {
            let probe = |delta: f64| -> Result<f64> {
                let mut p = params.clone();
                let t = p.get_mut(name).expect("param present");
                let v = t.data()[*c];
                t.set(*c, v + delta);
                let (tape, out) = eval_loss(&loss_fn, &p, DType::F64)?;
                let l = tape.scalar(out);
                if !l.is_finite() {
                    return Err(TallError::NonFinite(format!(
                        "grad_check: loss at {name}[{c}] perturbed by {delta:e}"
                    )));
                }
                Ok(l)
            };
            Ok((probe(eps)? - probe(-eps)?) / (2.0 * eps))
        })
        .collect();

    let mut results: BTreeMap<String, ParamCheck> = BTreeMap::new();
    for ((name, c), num) in jobs.iter().zip(numeric) {
        let num = num?;
        let ana = analytic[name].data()[*c];
        let err = relative_error(ana, num);
        let entry = results.entry(name.clone()).or_insert_with(|| ParamCheck {
            name: name.clone(),
            coords: coords_by_param[name].clone(),
            max_rel_error: 0.0,
            worst: *c,
            worst_analytic: ana,
            worst_numeric: num,
        });
        if err > entry.max_rel_error {
            entry.max_rel_error = err;
            entry.worst = *c;
            entry.worst_analytic = ana;
            entry.worst_numeric = num;
        }
    }
    Ok(GradReport {
        eps,
        params: results.into_values().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn quadratic_loss_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, &[4, 1]);
        let y = rand_tensor(&mut rng, &[3, 1]);
        let mut params = NamedTensors::new();
        params.insert("w".into(), rand_tensor(&mut rng, &[3, 4]));

        let loss = |tape: &mut Tape, vars: &BTreeMap<String, Var>| {
            let xv = tape.leaf(&x)?;
            let yv = tape.leaf(&y)?;
            let wx = tape.matmul(vars["w"], xv)?;
            let r = tape.sub(wx, yv)?;
            let sq = tape.mul(r, r)?;
            tape.sum(sq)
        };

        // independent closed form: dL/dW = 2 (Wx - y) x^T
        let w = &params["w"];
        let mut closed = vec![0.0; 12];
        for i in 0..3 {
            let r: f64 = (0..4).map(|j| w.data()[i * 4 + j] * x.data()[j]).sum::<f64>() - y.data()[i];
            for j in 0..4 {
                closed[i * 4 + j] = 2.0 * r * x.data()[j];
            }
        }
        let (tape, out) = eval_loss(&loss, &params, DType::F64).unwrap();
        let g = tape.backward(out, &Tensor::scalar(1.0)).unwrap().named();
        for (a, b) in g["w"].data().iter().zip(&closed) {
            assert!((a - b).abs() < 1e-12);
        }

        let report = grad_check(loss, &params, 1e-5, 12, 1).unwrap();
        assert!(report.max_rel_error() < 1e-8, "{report:?}");
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let mut params = NamedTensors::new();
        params.insert("a".into(), Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let loss = |tape: &mut Tape, _vars: &BTreeMap<String, Var>| {
            let c = tape.constant(&[1], vec![4.2])?;
            Ok(c)
        };
        let (tape, out) = eval_loss(&loss, &params, DType::F64).unwrap();
        let g = tape.backward(out, &Tensor::scalar(1.0)).unwrap().named();
        assert!(g["a"].data().iter().all(|&v| v == 0.0));
        let report = grad_check(loss, &params, 1e-5, 3, 0).unwrap();
        for p in &report.params {
            assert!(p.worst_numeric.abs() < 1e-10);
        }
        assert_eq!(report.max_rel_error(), 0.0);
    }

    #[test]
    fn rejects_f32_params() {
        let mut params = NamedTensors::new();
        params.insert("a".into(), Tensor::zeros(&[2], DType::F32));
        let loss = |tape: &mut Tape, vars: &BTreeMap<String, Var>| tape.sum(vars["a"]);
        assert!(grad_check(loss, &params, 1e-5, 2, 0).is_err());
    }

    #[test]
    fn non_finite_loss_names_coordinate() {
        let mut params = NamedTensors::new();
        params.insert("a".into(), Tensor::new(&[1], vec![1e-6]).unwrap());
        // 1/x style blow-up via softmax cross-entropy would clamp; use explicit division by zero
        let loss = |tape: &mut Tape, vars: &BTreeMap<String, Var>| {
            let v = tape.value(vars["a"])[0];
            let c = tape.constant(&[1], vec![if v > 1e-6 { f64::NAN } else { 1.0 }])?;
            let s = tape.sum(vars["a"])?;
            tape.add(s, c)
        };
        let err = grad_check(loss, &params, 1e-5, 1, 0).unwrap_err();
        match err {
            TallError::NonFinite(msg) => assert!(msg.contains("a[0]"), "{msg}"),
            e => panic!("unexpected {e:?}"),
        }
    }
}
