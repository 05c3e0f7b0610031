use std::collections::BTreeMap;
use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tall_core::numerics::tape::{
    cyclic_shift_index, invert_permutation, permute_index, window_partition_index,
};
use tall_core::numerics::{grad_check, DType, NamedTensors, Tape, Tensor, Var};
use tall_core::Result;

const INSTANCES: u64 = 100;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

/// `sum(y * r)` for a fixed random `r`, so every output coordinate matters.
fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let shape = tape.shape(y).to_vec();
    let r = random(&mut rng, &shape);
    let r = tape.constant(&shape, r.into_data())?;
    let prod = tape.mul(y, r)?;
    tape.sum(prod)
}

type Op = dyn Fn(&mut Tape, &BTreeMap<String, Var>, &mut ChaCha8Rng) -> Result<Var> + Sync;

/// Runs `INSTANCES` random instances of one op through the gradient checker.
fn check_op(name: &str, shapes: &dyn Fn(&mut ChaCha8Rng) -> Vec<Vec<usize>>, op: &Op) {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params: NamedTensors = shapes(&mut rng)
            .iter()
            .enumerate()
            .map(|(i, s)| (format!("x{i}"), random(&mut rng, s)))
            .collect();
        let op_seed = rng.random::<u64>();
        let loss = |tape: &mut Tape, vars: &BTreeMap<String, Var>| {
            let mut r = ChaCha8Rng::seed_from_u64(op_seed);
            let y = op(tape, vars, &mut r)?;
            project(tape, y, op_seed)
        };
        let report = grad_check(loss, &params, 1e-5, 64, seed).unwrap();
        assert!(
            report.max_rel_error() < 1e-6,
            "{name} instance {seed}: {:?}",
            report.worst()
        );
    }
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(1..=4)
}

#[test]
fn elementwise_ops_match_central_differences() {
    let pair = |rng: &mut ChaCha8Rng| {
        let s = vec![dim(rng), dim(rng)];
        vec![s.clone(), s]
    };
    let single = |rng: &mut ChaCha8Rng| vec![vec![dim(rng), dim(rng), dim(rng)]];
    check_op("add", &pair, &|t, v, _| t.add(v["x0"], v["x1"]));
    check_op("sub", &pair, &|t, v, _| t.sub(v["x0"], v["x1"]));
    check_op("mul", &pair, &|t, v, _| t.mul(v["x0"], v["x1"]));
    check_op("scale", &single, &|t, v, r| t.scale(v["x0"], r.random_range(-2.0..2.0)));
    check_op("gelu", &single, &|t, v, _| t.gelu(v["x0"]));
    check_op("sum", &single, &|t, v, _| t.sum(v["x0"]));
    check_op("mean", &single, &|t, v, _| t.mean(v["x0"]));
}

#[test]
fn relu_matches_central_differences_away_from_the_kink() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..12);
        // keep every input at least 0.1 from zero
        let data = (0..n)
            .map(|_| rng.random_range(0.1..1.5) * if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect();
        let params: NamedTensors = [("x".to_string(), Tensor::new(&[n], data).unwrap())].into();
        let report = grad_check(
            |t: &mut Tape, v: &BTreeMap<String, Var>| {
                let y = t.relu(v["x"])?;
                project(t, y, seed)
            },
            &params,
            1e-5,
            64,
            seed,
        )
        .unwrap();
        assert!(report.max_rel_error() < 1e-6, "relu {seed}: {:?}", report.worst());
    }
}

#[test]
fn linear_algebra_ops_match_central_differences() {
    check_op(
        "matmul",
        &|rng| {
            let (m, k, n) = (dim(rng), dim(rng), dim(rng));
            vec![vec![m, k], vec![k, n]]
        },
        &|t, v, _| t.matmul(v["x0"], v["x1"]),
    );
    check_op(
        "batched matmul",
        &|rng| {
            let (b, m, k, n) = (dim(rng), dim(rng), dim(rng), dim(rng));
            vec![vec![b, m, k], vec![b, k, n]]
        },
        &|t, v, _| t.matmul(v["x0"], v["x1"]),
    );
    check_op(
        "matmul transposed",
        &|rng| {
            let (b, m, k, n) = (dim(rng), dim(rng), dim(rng), dim(rng));
            vec![vec![b, m, k], vec![b, n, k]]
        },
        &|t, v, _| t.matmul_ex(v["x0"], v["x1"], true),
    );
    check_op(
        "add_tiled",
        &|rng| {
            let (a, b) = (dim(rng), dim(rng));
            vec![vec![dim(rng), a, b], vec![a, b]]
        },
        &|t, v, _| t.add_tiled(v["x0"], v["x1"]),
    );
}

#[test]
fn normalisation_ops_match_central_differences() {
    check_op("softmax", &|rng| vec![vec![dim(rng), dim(rng) + 1]], &|t, v, _| {
        t.softmax(v["x0"])
    });
    check_op(
        "layer_norm",
        &|rng| {
            // over two features the output is +-1 and the gradient vanishes
            let d = dim(rng) + 2;
            vec![vec![dim(rng), d], vec![d], vec![d]]
        },
        &|t, v, _| t.layer_norm(v["x0"], v["x1"], v["x2"], 1e-5),
    );
    check_op(
        "softmax_cross_entropy",
        &|rng| vec![vec![dim(rng), dim(rng) + 1]],
        &|t, v, r| {
            let shape = t.shape(v["x0"]).to_vec();
            let labels: Vec<usize> = (0..shape[0]).map(|_| r.random_range(0..shape[1])).collect();
            t.softmax_cross_entropy(v["x0"], &labels, 1e-7)
        },
    );
}

#[test]
fn index_ops_match_central_differences() {
    check_op("reshape", &|rng| vec![vec![dim(rng), dim(rng) * 2]], &|t, v, _| {
        let n: usize = t.shape(v["x0"]).iter().product();
        t.reshape(v["x0"], &[n / 2, 2])
    });
    check_op("permute", &|rng| vec![vec![dim(rng), dim(rng), dim(rng)]], &|t, v, _| {
        t.permute(v["x0"], &[2, 0, 1])
    });
    check_op("gather with repeats", &|rng| vec![vec![dim(rng) + 1]], &|t, v, r| {
        let n = t.shape(v["x0"])[0];
        let index: Arc<[usize]> = (0..2 * n).map(|_| r.random_range(0..n)).collect();
        t.gather(v["x0"], index, &[2 * n])
    });
    check_op("gather_rows", &|rng| vec![vec![dim(rng) + 1, dim(rng)]], &|t, v, r| {
        let n = t.shape(v["x0"])[0];
        let rows: Vec<usize> = (0..3).map(|_| r.random_range(0..n)).collect();
        t.gather_rows(v["x0"], &rows)
    });
    check_op("mean_rows", &|rng| vec![vec![dim(rng) + 1, dim(rng)]], &|t, v, r| {
        let n = t.shape(v["x0"])[0];
        let rows: Arc<[usize]> = (0..r.random_range(1..=n)).collect();
        t.mean_rows(v["x0"], rows)
    });
    check_op("window_partition", &|rng| vec![vec![2 * dim(rng), 2 * dim(rng), dim(rng)]], &|t, v, _| {
        t.window_partition(v["x0"], 2)
    });
    check_op("window_unpartition", &|rng| vec![vec![4, 4, dim(rng)]], &|t, v, _| {
        let c = t.shape(v["x0"])[2];
        let x = t.reshape(v["x0"], &[4, 4, c])?;
        t.window_unpartition(x, 2, 4, 4)
    });
    check_op("cyclic_shift", &|rng| vec![vec![dim(rng), dim(rng), dim(rng)]], &|t, v, r| {
        t.cyclic_shift(v["x0"], r.random_range(-3i32..4) as isize, r.random_range(-3i32..4) as isize)
    });
}

fn shape_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..5, 1..5)
}

proptest! {
    #[test]
    fn permutation_index_composes_with_its_inverse(
        shape in shape_strategy(),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut axes: Vec<usize> = (0..shape.len()).collect();
        for i in (1..axes.len()).rev() {
            axes.swap(i, rng.random_range(0..=i));
        }
        let (fwd, out_shape) = permute_index(&shape, &axes).unwrap();
        let back_axes = invert_permutation(&axes);
        let (bwd, back_shape) = permute_index(&out_shape, &back_axes).unwrap();
        prop_assert_eq!(back_shape, shape);
        // gathering by fwd then bwd is gathering by fwd[bwd[i]]
        for (i, &b) in bwd.iter().enumerate() {
            prop_assert_eq!(fwd[b], i);
        }
    }

    #[test]
    fn window_partition_round_trips(
        wy in 1usize..4, wx in 1usize..4, win in 1usize..4, c in 1usize..4, seed in any::<u64>(),
    ) {
        let (h, w) = (wy * win, wx * win);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[h, w, c]);
        let mut tape = Tape::new(DType::F64);
        let v = tape.leaf(&x).unwrap();
        let p = tape.window_partition(v, win).unwrap();
        let back = tape.window_unpartition(p, win, h, w).unwrap();
        prop_assert_eq!(tape.value(back), x.data());
        prop_assert_eq!(window_partition_index(&[h + 1, w, c], win).is_none(), win > 1);
    }

    #[test]
    fn cyclic_shift_then_inverse_is_identity(
        h in 1usize..7, w in 1usize..7, c in 1usize..3, dy in -8isize..8, dx in -8isize..8,
    ) {
        let fwd = cyclic_shift_index(&[h, w, c], dy, dx);
        let bwd = cyclic_shift_index(&[h, w, c], -dy, -dx);
        for (i, &b) in bwd.iter().enumerate() {
            prop_assert_eq!(fwd[b], i);
        }
    }

    #[test]
    fn reshape_keeps_values(a in 1usize..6, b in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[a, b]);
        let mut tape = Tape::new(DType::F64);
        let v = tape.leaf(&x).unwrap();
        let r = tape.reshape(v, &[b, a]).unwrap();
        let back = tape.reshape(r, &[a, b]).unwrap();
        prop_assert_eq!(tape.value(back), x.data());
    }
}

#[test]
fn same_tape_program_is_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut tape = Tape::new(DType::F64);
        let a = tape.leaf(&random(&mut rng, &[3, 16, 8]).requires_grad(true)).unwrap();
        let b = tape.leaf(&random(&mut rng, &[3, 8, 16]).requires_grad(true)).unwrap();
        let g = tape.leaf(&random(&mut rng, &[16])).unwrap();
        let be = tape.leaf(&random(&mut rng, &[16])).unwrap();
        let y = tape.matmul(a, b).unwrap();
        let y = tape.softmax(y).unwrap();
        let y = tape.layer_norm(y, g, be, 1e-5).unwrap();
        let y = tape.gelu(y).unwrap();
        let loss = tape.mean(y).unwrap();
        let grads = tape.backward(loss, &Tensor::scalar(1.0)).unwrap();
        (tape.value(y).to_vec(), grads.get(a).unwrap().to_vec(), grads.get(b).unwrap().to_vec())
    };
    assert_eq!(run(), run());
}
