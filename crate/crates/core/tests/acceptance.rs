//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.
//!
//! `cargo test --release --test acceptance -- 3 8` runs a subset.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use tall_core::clipgen::{Corpus, CorpusSpec};
use tall_core::image::Image;
use tall_core::losses::{ce_loss, ce_loss_tape, sc_loss, sc_loss_tape, total_loss, total_loss_tape};
use tall_core::metrics::roc_auc;
use tall_core::model::{forward, init_params, model_forward, ForwardOptions, Model, ModelConfig, Plan};
use tall_core::numerics::{grad_check, DType, NamedTensors, Tape, Var};
use tall_core::tall::{
    pixel_provenance, random_clip, tall_inverse, tall_transform_frames, transform_throughput, LayoutSpec,
    OrderSpec, TransformSpec,
};
use tall_core::trainer::{
    ablate, ablation_variants, train, AblationAxis, ArchConfig, TrainConfig, Trainer, CHECKPOINT_DIR,
};

type Outcome = std::result::Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn positive_clip(rng: &mut ChaCha8Rng, t: usize, c: usize, h: usize, w: usize) -> Vec<Image> {
    (0..t)
        .map(|_| Image::from_vec(c, h, w, (0..c * h * w).map(|_| rng.random_range(0.05f32..1.0)).collect()).unwrap())
        .collect()
}

fn transform_oracle() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut pixels = 0usize;
    for i in 0..100 {
        let clip = positive_clip(&mut rng, 4, 3, 32, 32);
        let order = if i % 2 == 0 { OrderSpec::Forward } else { OrderSpec::Random(i) };

        let exact = TransformSpec {
            mask_size: 0,
            layout: LayoutSpec::default_2x2(1.0),
            order: order.clone(),
        };
        let thumb = tall_transform_frames(&clip, &exact, i, &mut rng).map_err(e2s)?;
        let back = tall_inverse(&thumb).map_err(e2s)?;
        for (t, f) in back.iter().enumerate() {
            ensure(f.data == clip[t].data, || format!("clip {i}: frame {t} not recovered bit-exactly"))?;
        }

        let layout = LayoutSpec::default_2x2(2.0);
        let spec = TransformSpec {
            mask_size: 0,
            layout: layout.clone(),
            order,
        };
        let thumb = tall_transform_frames(&clip, &spec, i, &mut rng).map_err(e2s)?;
        let img = &thumb.image;
        for y in 0..img.height {
            for x in 0..img.width {
                let p = pixel_provenance(y, x, &layout, 32, 32).map_err(e2s)?;
                let frame = thumb.frame_of_slot[p.slot].ok_or("provenance points at an empty slot")?;
                let area = (p.rows.len() * p.cols.len()) as f64;
                for c in 0..img.channels {
                    let mut sum = 0.0f64;
                    for sy in p.rows.clone() {
                        for sx in p.cols.clone() {
                            sum += clip[frame].get(c, sy, sx) as f64;
                        }
                    }
                    let want = sum / area;
                    let got = img.get(c, y, x) as f64;
                    ensure((got - want).abs() <= 1e-6, || {
                        format!("clip {i} pixel ({c},{y},{x}): {got} vs box mean {want}")
                    })?;
                    pixels += 1;
                }
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    ensure(secs < 10.0, || format!("took {secs:.1} s"))?;
    Ok(format!("100 clips bijective at factor 1; {pixels} box-average pixels match within 1e-6; {secs:.2} s"))
}

fn mask_invariants() -> Outcome {
    let (c, h, w, s) = (3, 32, 32, 8);
    let spec = TransformSpec {
        mask_size: s,
        layout: LayoutSpec::default_2x2(1.0),
        order: OrderSpec::Forward,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let clip = positive_clip(&mut rng, 4, c, h, w);
    let positions = h - s + 1;
    let (mut xs, mut ys) = (vec![0usize; positions], vec![0usize; positions]);
    let draws = 1000;
    for d in 0..draws {
        let thumb = tall_transform_frames(&clip, &spec, d, &mut rng).map_err(e2s)?;
        let m = thumb.mask;
        let mut rect: Option<Vec<usize>> = None;
        for (t, f) in tall_inverse(&thumb).map_err(e2s)?.iter().enumerate() {
            let zeros: Vec<usize> = (0..f.data.len()).filter(|&i| f.data[i] == 0.0).collect();
            ensure(zeros.len() == c * s * s, || {
                format!("draw {d} frame {t}: {} zeroed values, expected {}", zeros.len(), c * s * s)
            })?;
            match &rect {
                None => rect = Some(zeros),
                Some(r) => ensure(*r == zeros, || format!("draw {d}: frame {t} has a different rectangle"))?,
            }
        }
        xs[m.x] += 1;
        ys[m.y] += 1;
    }
    let expected = draws as f64 / positions as f64;
    let chi = ChiSquared::new((positions - 1) as f64).map_err(e2s)?;
    let p_value = |counts: &[usize]| {
        let stat: f64 = counts.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
        1.0 - chi.cdf(stat)
    };
    let (px, py) = (p_value(&xs), p_value(&ys));
    ensure(px > 0.01 && py > 0.01, || format!("positions not uniform: p_x {px:.4}, p_y {py:.4}"))?;
    Ok(format!("{draws} draws, {} zeros per frame, shared rectangle; chi-square p_x {px:.3} p_y {py:.3}", c * s * s))
}

fn gradient_check() -> Outcome {
    let started = Instant::now();
    let config = ModelConfig::default();
    let plan = Plan::new(&config).map_err(e2s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let clip = positive_clip(&mut rng, 4, 3, 128, 128);
    let spec = TransformSpec {
        mask_size: 16,
        layout: config.layout.clone(),
        order: OrderSpec::Forward,
    };
    let thumb = tall_transform_frames(&clip, &spec, 0, &mut rng).map_err(e2s)?;
    // zero-initialised tensors get random values so every path carries gradient
    let mut params: NamedTensors = init_params(&config, 7, DType::F64).map_err(e2s)?;
    for (name, t) in params.iter_mut() {
        let scale = if name.ends_with("gamma") { 0.1 } else { 0.05 };
        t.map_inplace(|_, v| v + scale * rng.random_range(-1.0..1.0));
    }
    let loss = |tape: &mut Tape, vars: &BTreeMap<String, Var>| {
        let trace = forward(tape, &plan, vars, &thumb.image, &thumb.frame_of_slot, ForwardOptions::default())?;
        let ce = ce_loss_tape(tape, trace.logits, &[1])?;
        let sc = sc_loss_tape(tape, &trace.frame_features)?;
        total_loss_tape(tape, ce, Some(sc), 0.5)
    };
    let report = grad_check(loss, &params, 1e-5, 50, 11).map_err(e2s)?;
    let secs = started.elapsed().as_secs_f64();
    let worst = report.worst().ok_or("no parameters checked")?;
    let min_coords = report.params.iter().map(|p| p.coords.len()).min().unwrap_or(0);
    let tensors = report.params.len();
    let small = params.values().filter(|t| t.len() < 50).count();
    ensure(report.max_rel_error() < 1e-4, || {
        format!(
            "max rel err {:.3e} at {}[{}] (analytic {:.6e}, numeric {:.6e})",
            report.max_rel_error(),
            worst.name,
            worst.worst,
            worst.worst_analytic,
            worst.worst_numeric
        )
    })?;
    ensure(secs < 120.0, || format!("took {secs:.1} s"))?;
    Ok(format!(
        "{tensors} tensors, >= {min_coords} coords each ({small} smaller than 50 checked in full), max rel err {:.2e} ({}); {secs:.1} s",
        report.max_rel_error(),
        worst.name
    ))
}

fn loss_values() -> Outcome {
    let sc = sc_loss(&[vec![0.0, 0.0], vec![2.0, 2.0]]).map_err(e2s)?.value;
    ensure(sc == 4.0, || format!("sc_loss = {sc}, expected 4"))?;
    let ce = ce_loss(&[0.5], &[1]).map_err(e2s)?;
    ensure((ce - std::f64::consts::LN_2).abs() <= 1e-9, || format!("ce_loss = {ce}, expected ln 2"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..1000 {
        let (c, s) = (rng.random_range(0.0..5.0), rng.random_range(0.0..5.0));
        let total = total_loss(c, s, 0.5);
        ensure(total == c + 0.5 * s, || format!("total({c}, {s}) = {total}"))?;
    }
    Ok(format!("sc {sc}, ce {ce:.12}, total == ce + 0.5 sc on 1000 draws"))
}

fn auc_oracle() -> Outcome {
    let fixed = roc_auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).map_err(e2s)?.auc;
    ensure(fixed == 0.75, || format!("fixed example gives {fixed}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let n = rng.random_range(2..80);
        let mut labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        // coarse grid on half the instances so ties occur
        let coarse = i % 2 == 0;
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                let s: f64 = rng.random();
                if coarse {
                    (s * 8.0).floor()
                } else {
                    s
                }
            })
            .collect();
        let (mut num, mut den) = (0.0, 0.0);
        for a in 0..n {
            for b in 0..n {
                if labels[a] == 1 && labels[b] == 0 {
                    den += 1.0;
                    num += if scores[a] > scores[b] {
                        1.0
                    } else if scores[a] == scores[b] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        let got = roc_auc(&scores, &labels).map_err(e2s)?.auc;
        worst = worst.max((got - num / den).abs());
    }
    ensure(worst <= 1e-12, || format!("max deviation from pairwise oracle {worst:.3e}"))?;
    Ok(format!("fixed example 0.75; 1000 instances, max deviation {worst:.1e}"))
}

fn attention_locality() -> Outcome {
    let config = ModelConfig::default();
    let model = Model::init(config.clone(), 6, DType::F64).map_err(e2s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let clip = positive_clip(&mut rng, 4, 3, 128, 128);
    let spec = TransformSpec {
        mask_size: 0,
        layout: config.layout.clone(),
        order: OrderSpec::Forward,
    };
    let thumb = tall_transform_frames(&clip, &spec, 0, &mut rng).map_err(e2s)?;
    let out = model_forward(&model, &thumb, ForwardOptions::default()).map_err(e2s)?;
    let mut checked_plain = 0;
    let mut crossing = 0;
    for a in out.attention.iter().filter(|a| a.stage == 0) {
        let (gh, gw) = (config.image_size[0] / config.patch, config.image_size[1] / config.patch);
        let (sub_h, sub_w) = (gh / 2, gw / 2);
        let slot = |t: usize| ((t / gw) / sub_h, (t % gw) / sub_w);
        if a.shift == 0 {
            let dense = a.dense();
            let l = a.tokens;
            for h in 0..a.heads {
                for i in 0..l {
                    for j in 0..l {
                        let v = dense[(h * l + i) * l + j];
                        if slot(i) != slot(j) {
                            ensure(v == 0.0, || format!("block {}: cross-frame weight {v} at ({i},{j})", a.block))?;
                        }
                    }
                }
            }
            checked_plain += 1;
        } else {
            ensure(a.shift * 2 == config.windows[0], || format!("shift {} is not half the window", a.shift))?;
            crossing += a
                .window_tokens
                .iter()
                .filter(|w| w.iter().any(|&t| slot(t) != slot(w[0])))
                .count();
        }
    }
    ensure(checked_plain > 0, || "no unshifted block in the first stage".into())?;
    ensure(crossing > 0, || "no shifted window spans two sub-frames".into())?;
    Ok(format!("{checked_plain} unshifted block(s) exactly block-diagonal; {crossing} shifted windows span >= 2 sub-frames"))
}

fn grb_identity() -> Outcome {
    let config = ModelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let spec = TransformSpec {
        mask_size: 16,
        layout: config.layout.clone(),
        order: OrderSpec::Forward,
    };
    let mut worst_row = 0.0f64;
    for seed in 0..5 {
        let model = Model::init(config.clone(), seed, DType::F64).map_err(e2s)?;
        let clip = positive_clip(&mut rng, 4, 3, 128, 128);
        let thumb = tall_transform_frames(&clip, &spec, 0, &mut rng).map_err(e2s)?;
        let with = model_forward(&model, &thumb, ForwardOptions { grb: true }).map_err(e2s)?;
        let without = model_forward(&model, &thumb, ForwardOptions { grb: false }).map_err(e2s)?;
        ensure(with.logits == without.logits, || {
            format!("seed {seed}: logits {:?} vs {:?}", with.logits, without.logits)
        })?;
        let n = (with.adjacency.len() as f64).sqrt() as usize;
        ensure(n * n == with.adjacency.len() && n > 0, || "adjacency is not square".into())?;
        for row in with.adjacency.chunks(n) {
            worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    ensure(worst_row <= 1e-6, || format!("adjacency row sum off by {worst_row:.3e}"))?;
    Ok(format!("5 inits: logits bit-identical with and without GRB; row sums within {worst_row:.1e}"))
}

fn end_to_end() -> Outcome {
    let config = TrainConfig::default();
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let corpus = Corpus::virtual_corpus(CorpusSpec::default()).map_err(e2s)?;
    let (_, record) = train(&config, &corpus, None).map_err(e2s)?;
    let test = record.test.as_ref().ok_or("no test split")?;
    let wall = record.wall_time_s;

    let null = Corpus::virtual_corpus(CorpusSpec {
        magnitude: 0.0,
        ..Default::default()
    })
    .map_err(e2s)?;
    let (_, null_record) = train(&config, &null, None).map_err(e2s)?;
    let null_auc = null_record.test.as_ref().ok_or("no test split")?.auc;

    let summary = format!(
        "test AUC {:.4} (acc {:.3}) in {wall:.0} s on {cores} core(s); magnitude-0 AUC {null_auc:.4}",
        test.auc, test.acc
    );
    ensure(test.auc >= 0.95, || format!("{summary}: AUC below 0.95"))?;
    ensure(wall < 600.0, || format!("{summary}: over 10 minutes"))?;
    ensure((0.4..=0.6).contains(&null_auc), || format!("{summary}: magnitude-0 AUC outside [0.4, 0.6]"))?;
    Ok(summary)
}

fn small_setup() -> (Corpus, TrainConfig) {
    let corpus = Corpus::virtual_corpus(CorpusSpec {
        videos_per_class: 10,
        frames_per_video: 8,
        height: 32,
        width: 32,
        ..Default::default()
    })
    .unwrap();
    let config = TrainConfig {
        epochs: 1,
        warmup_epochs: 0,
        batch_size: 4,
        factor: 2.0,
        windows: vec![4, 0],
        eval_clips: 2,
        arch: ArchConfig {
            dims: vec![8, 16],
            depths: vec![1, 1],
            heads: vec![1, 2],
            grb_key_dim: 8,
            ..Default::default()
        },
        ..Default::default()
    };
    (corpus, config)
}

fn ablation_shape() -> Outcome {
    // tall, mask, grb, sc loss
    let grid = [
        (false, false, false, false),
        (true, false, false, false),
        (true, true, false, false),
        (false, false, true, false),
        (false, false, true, true),
        (true, true, true, false),
        (true, true, true, true),
    ];
    let (corpus, config) = small_setup();
    let mut noop = |_: &str, _: &tall_core::trainer::EpochRecord| {};
    let components = ablate(&config, AblationAxis::Components, &corpus, &mut noop).map_err(e2s)?;
    ensure(components.rows.len() == 7, || format!("{} component rows", components.rows.len()))?;
    for (v, want) in ablation_variants(&config, AblationAxis::Components).iter().zip(grid) {
        let t = v.config.toggles;
        ensure((t.tall, t.mask, t.grb, t.sc_loss) == want, || format!("row '{}' has toggles {t:?}", v.label))?;
    }
    let csv = components.to_csv().map_err(e2s)?;
    ensure(csv.lines().count() == 8, || format!("component csv has {} lines", csv.lines().count()))?;

    let order = ablate(&config, AblationAxis::Order, &corpus, &mut noop).map_err(e2s)?;
    let labels: Vec<&str> = order.rows.iter().map(|r| r.variant.as_str()).collect();
    let want = ["0, 1, 2, -", "0, 1, -, -", "Random", "Reverse", "Forward"];
    ensure(labels == want, || format!("order rows {labels:?}"))?;
    Ok(format!("components: 7 rows with the expected toggles; order: {}", labels.join(" | ")))
}

fn files_equal(a: &Path, b: &Path) -> std::result::Result<usize, String> {
    let mut names: Vec<_> = std::fs::read_dir(a).map_err(e2s)?.map(|e| e.unwrap().file_name()).collect();
    names.sort();
    let mut count = 0;
    for n in names {
        let (pa, pb) = (a.join(&n), b.join(&n));
        if pa.is_dir() {
            count += files_equal(&pa, &pb)?;
        } else {
            let (x, y) = (std::fs::read(&pa).map_err(e2s)?, std::fs::read(&pb).map_err(e2s)?);
            ensure(x == y, || format!("{} differs between runs", pa.display()))?;
            count += 1;
        }
    }
    Ok(count)
}

fn determinism() -> Outcome {
    let corpus = Corpus::virtual_corpus(CorpusSpec {
        videos_per_class: 12,
        ..Default::default()
    })
    .map_err(e2s)?;
    let config = TrainConfig {
        epochs: 2,
        warmup_epochs: 0,
        batch_size: 4,
        eval_clips: 2,
        seed: 17,
        ..Default::default()
    };
    let dirs = [tempfile::tempdir().map_err(e2s)?, tempfile::tempdir().map_err(e2s)?];
    for d in &dirs {
        train(&config, &corpus, Some(d.path())).map_err(e2s)?;
    }
    let files = files_equal(&dirs[0].path().join(CHECKPOINT_DIR), &dirs[1].path().join(CHECKPOINT_DIR))?;

    let mut a = Trainer::new(config.clone(), &corpus).map_err(e2s)?;
    let batches = a.epoch_batches(0);
    a.train_step(&batches[0]).map_err(e2s)?;
    let saved = tempfile::tempdir().map_err(e2s)?;
    a.save(saved.path()).map_err(e2s)?;
    let mut b = Trainer::load(saved.path(), &corpus).map_err(e2s)?;
    let ra = a.train_step(&batches[1]).map_err(e2s)?;
    let rb = b.train_step(&batches[1]).map_err(e2s)?;
    ensure(ra == rb, || "losses of the step after reload differ".into())?;
    ensure(a.model.params == b.model.params && a.adam == b.adam, || {
        "parameters or optimizer state differ after the reloaded step".into()
    })?;
    Ok(format!("two runs give byte-identical checkpoints ({files} files); reload then step is bit-exact"))
}

fn throughput() -> Outcome {
    let clip = random_clip(8, 4, 3, 224, 224);
    let spec = TransformSpec {
        mask_size: 28,
        layout: LayoutSpec::default_2x2(2.0),
        order: OrderSpec::Forward,
    };
    let window = Duration::from_secs(2);
    let one = transform_throughput(&clip, &spec, 1, window).map_err(e2s)?;
    let four = transform_throughput(&clip, &spec, 4, window).map_err(e2s)?;
    let scale = four.clips_per_sec / one.clips_per_sec;
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let summary = format!(
        "{:.0} clips/s on 1 thread, {:.0} clips/s on 4 threads ({scale:.2}x) with {cores} core(s) available",
        one.clips_per_sec, four.clips_per_sec
    );
    ensure(one.clips_per_sec >= 200.0, || format!("{summary}: below 200 clips/s"))?;
    ensure(scale >= 3.0, || format!("{summary}: scaling below 3x"))?;
    Ok(summary)
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("transform oracle", transform_oracle),
        ("mask invariants", mask_invariants),
        ("gradient check", gradient_check),
        ("loss unit values", loss_values),
        ("AUC oracle", auc_oracle),
        ("attention locality", attention_locality),
        ("GRB identity at init", grb_identity),
        ("end-to-end synthetic gate", end_to_end),
        ("ablation harness shape", ablation_shape),
        ("determinism and checkpointing", determinism),
        ("transform throughput", throughput),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let started = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail} [{secs:.1} s]"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {detail} [{secs:.1} s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion/criteria failed");
        std::process::exit(1);
    }
}
