use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tall_core::model::{model_forward, ForwardOptions, Model, ModelConfig};
use tall_core::numerics::kernels::matmul_nn_acc;
use tall_core::numerics::DType;
use tall_core::tall::{random_clip, tall_transform_frames, OrderSpec, TransformSpec};

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul_nn");
    // shapes of the default model's qkv projection and MLP
    for (m, k, n) in [(1024, 32, 96), (1024, 32, 128), (256, 64, 256)] {
        let a: Vec<f64> = (0..m * k).map(|i| (i % 17) as f64 * 0.1).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i % 13) as f64 * 0.1).collect();
        let mut out = vec![0.0; m * n];
        group.bench_function(BenchmarkId::from_parameter(format!("{m}x{k}x{n}")), |bench| {
            bench.iter(|| {
                out.fill(0.0);
                matmul_nn_acc(&a, &b, &mut out, m, k, n);
            })
        });
    }
    group.finish();
}

fn forward(c: &mut Criterion) {
    let config = ModelConfig::default();
    let spec = TransformSpec {
        mask_size: 0,
        layout: config.layout.clone(),
        order: OrderSpec::Forward,
    };
    let clip = random_clip(3, 4, 3, 128, 128);
    let thumb = tall_transform_frames(&clip, &spec, 0, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let mut group = c.benchmark_group("model_forward");
    group.sample_size(20);
    for dtype in [DType::F32, DType::F64] {
        let model = Model::init(config.clone(), 5, dtype).unwrap();
        group.bench_function(BenchmarkId::from_parameter(format!("{dtype:?}")), |b| {
            b.iter(|| model_forward(&model, &thumb, ForwardOptions::default()).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, matmul, forward);
criterion_main!(benches);
