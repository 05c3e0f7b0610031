//! `tall`: corpus generation, thumbnail transform, training, evaluation,
//! ablations, transform benchmark and saliency maps.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numerical
//! abort. Every failure prints one `error: kind=<kind> message=<text>` line to
//! stderr.

mod config;
mod thumb;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use tall_core::clipgen::storage::read_clip_range;
use tall_core::clipgen::{generate_frame, read_clip, Corpus, CorpusSpec, Split};
use tall_core::metrics::saliency;
use tall_core::model::{load_model, ForwardOptions};
use tall_core::numerics::io::decode_header;
use tall_core::tall::{tall_transform, transform_clips, LayoutSpec, OrderSpec, Thumbnail, TransformSpec};
use tall_core::trainer::{
    ablate, describe_epoch, evaluate_with, train_with, AblationAxis, ClipPipeline, TrainConfig, CHECKPOINT_DIR,
    TRAIN_CONFIG_FILE,
};
use tall_core::TallError;

use crate::thumb::ThumbSidecar;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub kind: String,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: 1,
            kind: "usage".into(),
            message: message.into(),
        }
    }

    pub fn data(kind: &str, message: impl Into<String>) -> Self {
        CliError {
            code: 2,
            kind: kind.into(),
            message: message.into(),
        }
    }
}

impl From<TallError> for CliError {
    fn from(e: TallError) -> Self {
        let code = match e {
            TallError::Usage(_) => 1,
            TallError::NonFinite(_) => 3,
            _ => 2,
        };
        CliError {
            code,
            kind: e.kind().into(),
            message: e.to_string(),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "tall", version, about = "Thumbnail-layout deepfake detector on a synthetic video corpus")]
struct Cli {
    /// Seed for every stochastic step; a fresh one is drawn and logged when omitted.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 uses every core).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic real/fake corpus and its manifest.
    GenData(GenDataArgs),
    /// Turn one clip into a thumbnail.
    Transform(TransformArgs),
    /// Train a detector.
    Train(TrainArgs),
    /// Score a checkpoint on a corpus split.
    Eval(EvalArgs),
    /// Train every variant of one ablation axis.
    Ablate(AblateArgs),
    /// Measure thumbnail transform throughput.
    BenchTransform(BenchArgs),
    /// Write a gradient-weighted activation map for one thumbnail.
    Saliency(SaliencyArgs),
    /// Write the flag reference as markdown.
    #[command(hide = true)]
    GenDocs {
        #[arg(long, default_value = "docs/CLI.md")]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct Overrides {
    /// Dotted override applied after the config file, e.g. `arch.dims=[8,16]`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Corpus spec (JSON); defaults apply to missing fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    /// Corpus root.
    #[arg(long, env = "TALL_DATA_DIR")]
    out: PathBuf,
    /// Write only the manifest; frames are regenerated on demand.
    #[arg(long = "virtual")]
    virtual_only: bool,
    /// Also export the first frame of this many videos per class as PPM.
    #[arg(long, default_value_t = 0)]
    ppm: usize,
}

#[derive(Args, Debug)]
struct TransformArgs {
    /// Clip or video file.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// `RxC` (row-major) or `RxC-col`.
    #[arg(long, default_value = "2x2")]
    layout: String,
    /// forward, reverse, random or drop-K.
    #[arg(long, default_value = "forward")]
    order: String,
    /// Mask side in source pixels (default: an eighth of the frame height).
    #[arg(long)]
    mask_size: Option<usize>,
    #[arg(long, default_value_t = 2.0)]
    factor: f64,
    /// First frame of the clip within the file.
    #[arg(long, default_value_t = 0)]
    start: usize,
    /// Also write the thumbnail as PPM.
    #[arg(long)]
    ppm: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training config (JSON); defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    /// Corpus root or manifest.
    #[arg(long, env = "TALL_DATA_DIR")]
    data: PathBuf,
    /// Run directory for checkpoints, loss log and run record.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Run directory or checkpoint directory.
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, env = "TALL_DATA_DIR")]
    data: PathBuf,
    /// train, val or test.
    #[arg(long, default_value = "test")]
    split: String,
    /// Directory for metrics.json (and roc.csv).
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Also write the ROC curve as roc.csv.
    #[arg(long)]
    roc: bool,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// components, layout, order, size or window.
    #[arg(long)]
    axis: String,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long, env = "TALL_DATA_DIR")]
    data: PathBuf,
    /// Directory for ablation.csv and ablation.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, default_value_t = 2000)]
    clips: usize,
    #[arg(long, default_value_t = 4)]
    frames: usize,
    /// Frame side in pixels.
    #[arg(long, default_value_t = 224)]
    size: usize,
    #[arg(long, default_value = "2x2")]
    layout: String,
    #[arg(long, default_value_t = 2.0)]
    factor: f64,
    #[arg(long, default_value_t = 28)]
    mask_size: usize,
}

#[derive(Args, Debug)]
struct SaliencyArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Thumbnail written by `tall transform`.
    #[arg(long, required_unless_present = "clip", conflicts_with = "clip")]
    thumb: Option<PathBuf>,
    /// Clip or video file; its first frames are laid out unmasked.
    #[arg(long)]
    clip: Option<PathBuf>,
    /// Class whose logit is explained (1 = fake).
    #[arg(long, default_value_t = 1)]
    target: usize,
    /// Grayscale PGM; the input thumbnail is written next to it as PPM.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand {
                eprint!("{e}");
                return ExitCode::from(1);
            }
            let first = e.to_string().lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            report(&CliError::usage(first));
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(&e);
            ExitCode::from(e.code)
        }
    }
}

fn report(e: &CliError) {
    let message = e.message.replace(['\n', '\r'], " ");
    eprintln!("error: kind={} message={message}", e.kind);
}

fn run(cli: Cli) -> CliResult {
    let ctx = Ctx {
        seed: cli.seed,
        threads: cli.threads,
    };
    match cli.command {
        Command::GenData(a) => gen_data(&ctx, a),
        Command::Transform(a) => transform(&ctx, a),
        Command::Train(a) => train_cmd(&ctx, a),
        Command::Eval(a) => eval(&ctx, a),
        Command::Ablate(a) => ablate_cmd(&ctx, a),
        Command::BenchTransform(a) => bench(&ctx, a),
        Command::Saliency(a) => saliency_cmd(a),
        Command::GenDocs { out } => gen_docs(&out),
    }
}

struct Ctx {
    seed: Option<u64>,
    threads: Option<usize>,
}

impl Ctx {
    /// `--seed`, else the seed the config set explicitly, else fresh entropy.
    fn resolve_seed(&self, configured: Option<u64>) -> u64 {
        if let Some(s) = self.seed {
            return s;
        }
        if let Some(s) = configured {
            return s;
        }
        let s = rand::random::<u64>();
        eprintln!("seed: {s} (drawn from entropy; pass --seed {s} to repeat)");
        s
    }

    fn global_pool(&self) -> CliResult {
        if let Some(n) = self.threads {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| CliError::usage(format!("thread pool: {e}")))?;
        }
        Ok(())
    }
}

/// Refuses outputs that would overwrite an input or its sidecar.
fn guard(inputs: &[&Path], outputs: &[&Path]) -> CliResult {
    let key = |p: &Path| -> PathBuf {
        let abs = std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf());
        match (abs.parent(), abs.file_name()) {
            (Some(dir), Some(name)) => dir.canonicalize().unwrap_or(dir.to_path_buf()).join(name),
            _ => abs,
        }
    };
    let mut taken = Vec::new();
    for i in inputs {
        taken.push(key(i));
        taken.push(key(&i.with_extension("json")));
    }
    for o in outputs {
        for candidate in [key(o), key(&o.with_extension("json"))] {
            if taken.contains(&candidate) {
                return Err(CliError::usage(format!(
                    "output {} would overwrite input file {}",
                    o.display(),
                    candidate.display()
                )));
            }
        }
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> CliResult {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| TallError::io(parent, e))?;
    }
    let bytes = serde_json::to_vec_pretty(value).map_err(TallError::from)?;
    std::fs::write(path, bytes).map_err(|e| TallError::io(path, e))?;
    Ok(())
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string(value).expect("json"));
}

fn gen_data(ctx: &Ctx, a: GenDataArgs) -> CliResult {
    let loaded = config::load::<CorpusSpec>(a.spec.as_deref(), &a.overrides.sets)?;
    let mut spec = loaded.value;
    spec.seed = ctx.resolve_seed(loaded.explicit_seed.then_some(spec.seed));
    ctx.global_pool()?;
    if let Some(s) = &a.spec {
        guard(&[s], &[&a.out.join(tall_core::clipgen::corpus::MANIFEST_FILE)])?;
    }
    let corpus = if a.virtual_only {
        let c = Corpus::virtual_corpus(spec.clone())?;
        c.write_manifest(&a.out)?;
        c
    } else {
        Corpus::materialize(spec.clone(), &a.out)?
    };
    if a.ppm > 0 {
        let dir = a.out.join("ppm");
        std::fs::create_dir_all(&dir).map_err(|e| TallError::io(&dir, e))?;
        for class in 0..spec.num_classes() {
            for e in corpus.manifest.entries.iter().filter(|e| e.label == class).take(a.ppm) {
                let frame = generate_frame(&spec, e.id as usize, 0)?;
                frame.write_pnm(&dir.join(format!("video-{:06}-label{}.ppm", e.id, e.label)))?;
            }
        }
    }
    let count = |s| corpus.entries(s).len();
    print_json(&json!({
        "root": a.out,
        "videos": corpus.manifest.entries.len(),
        "train": count(Split::Train),
        "val": count(Split::Val),
        "test": count(Split::Test),
        "seed": spec.seed,
        "virtual": a.virtual_only,
    }));
    Ok(())
}

fn parse_order(s: &str, seed: u64) -> CliResult<OrderSpec> {
    match s {
        "forward" => Ok(OrderSpec::Forward),
        "reverse" => Ok(OrderSpec::Reverse),
        "random" => Ok(OrderSpec::Random(seed)),
        _ => s
            .strip_prefix("drop-")
            .and_then(|k| k.parse().ok())
            .map(OrderSpec::DropLast)
            .ok_or_else(|| CliError::usage(format!("unknown order '{s}' (forward, reverse, random or drop-K)"))),
    }
}

fn transform(ctx: &Ctx, a: TransformArgs) -> CliResult {
    guard(&[&a.input], &[&a.out])?;
    if let Some(p) = &a.ppm {
        guard(&[&a.input], &[p])?;
    }
    let seed = ctx.resolve_seed(None);
    let layout = LayoutSpec::parse(&a.layout, [a.factor, a.factor]).map_err(|e| CliError::usage(e.to_string()))?;
    let order = parse_order(&a.order, seed)?;
    let frames = layout.capacity() - if let OrderSpec::DropLast(k) = order { k.min(layout.capacity()) } else { 0 };
    let clip = read_clip_range(&a.input, a.start, frames)?;
    let mask_size = a.mask_size.unwrap_or(clip.frames[0].height / 8);
    let spec = TransformSpec {
        mask_size,
        layout,
        order: order.clone(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = tall_transform(&clip, &spec, &mut rng)?;
    let side = ThumbSidecar {
        layout: t.layout.clone(),
        order,
        frame_of_slot: t.frame_of_slot.clone(),
        sub_height: t.sub_height,
        sub_width: t.sub_width,
        mask: t.mask,
        clip_id: t.clip_id,
        label: clip.label,
        seed,
    };
    thumb::write(&a.out, &t, &side)?;
    if let Some(p) = &a.ppm {
        t.image.write_pnm(p)?;
    }
    print_json(&json!({
        "out": a.out,
        "size": [t.image.height, t.image.width],
        "mask": t.mask,
        "frame_of_slot": t.frame_of_slot,
        "seed": seed,
    }));
    Ok(())
}

fn load_train_config(ctx: &Ctx, file: Option<&Path>, sets: &[String]) -> CliResult<TrainConfig> {
    let loaded = config::load::<TrainConfig>(file, sets)?;
    let mut cfg = loaded.value;
    cfg.seed = ctx.resolve_seed(loaded.explicit_seed.then_some(cfg.seed));
    if let Some(n) = ctx.threads {
        cfg.threads = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_cmd(ctx: &Ctx, a: TrainArgs) -> CliResult {
    let cfg = load_train_config(ctx, a.config.as_deref(), &a.overrides.sets)?;
    let corpus = Corpus::open(&a.data)?;
    let mut err = std::io::stderr();
    let result = train_with(&cfg, &corpus, Some(&a.out), &mut |e| {
        let _ = describe_epoch(&mut err, e);
    });
    let (_, record) = result.inspect_err(|e| {
        if matches!(e, TallError::NonFinite(_)) {
            eprintln!("state before the failing step saved under {}", a.out.join("checkpoint-abort").display());
        }
    })?;
    let summary = |r: &Option<tall_core::trainer::EvalReport>| r.as_ref().map(|r| json!({"auc": r.auc, "acc": r.acc}));
    print_json(&json!({
        "out": a.out,
        "seed": cfg.seed,
        "epochs": record.epochs.len(),
        "val": summary(&record.val),
        "test": summary(&record.test),
        "wall_time_s": record.wall_time_s,
    }));
    Ok(())
}

fn checkpoint_dir(p: &Path) -> PathBuf {
    let nested = p.join(CHECKPOINT_DIR);
    if nested.is_dir() {
        nested
    } else {
        p.to_path_buf()
    }
}

fn read_train_config(ckpt: &Path) -> CliResult<TrainConfig> {
    let path = ckpt.join(TRAIN_CONFIG_FILE);
    let bytes = std::fs::read(&path).map_err(|e| TallError::io(&path, e))?;
    Ok(serde_json::from_slice(&bytes).map_err(TallError::from)?)
}

fn eval(ctx: &Ctx, a: EvalArgs) -> CliResult {
    let split = match a.split.as_str() {
        "train" => Split::Train,
        "val" => Split::Val,
        "test" => Split::Test,
        s => return Err(CliError::usage(format!("unknown split '{s}' (train, val or test)"))),
    };
    let ckpt = checkpoint_dir(&a.ckpt);
    let mut cfg = read_train_config(&ckpt)?;
    // evaluation is reproducible by default: the run's own seed picks the clips
    if let Some(s) = ctx.seed {
        cfg.seed = s;
    }
    let threads = ctx.threads.unwrap_or(cfg.threads);
    let model = load_model(&ckpt)?;
    let corpus = Corpus::open(&a.data)?;
    let pipeline = ClipPipeline::new(&cfg, &corpus)?;
    let pool = match threads {
        1 => None,
        n => Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::usage(format!("thread pool: {e}")))?,
        ),
    };
    let report = evaluate_with(&model, &pipeline, &corpus, split, pool.as_ref())?;
    let metrics = json!({
        "checkpoint": ckpt,
        "split": split,
        "seed": cfg.seed,
        "videos": report.videos,
        "clips_per_video": report.clips_per_video,
        "acc": report.acc,
        "auc": report.auc,
        "per_class": report.per_class,
    });
    std::fs::create_dir_all(&a.out).map_err(|e| TallError::io(&a.out, e))?;
    write_json(&a.out.join("metrics.json"), &metrics)?;
    if a.roc {
        report.roc.write_csv(&a.out.join("roc.csv"))?;
    }
    print_json(&json!({"split": split, "auc": report.auc, "acc": report.acc, "videos": report.videos}));
    Ok(())
}

fn ablate_cmd(ctx: &Ctx, a: AblateArgs) -> CliResult {
    let axis: AblationAxis = a.axis.parse()?;
    let cfg = load_train_config(ctx, a.config.as_deref(), &a.overrides.sets)?;
    let corpus = Corpus::open(&a.data)?;
    let mut err = std::io::stderr();
    let table = ablate(&cfg, axis, &corpus, &mut |label, e| {
        let _ = write!(err, "[{label}] ");
        let _ = describe_epoch(&mut err, e);
    })?;
    std::fs::create_dir_all(&a.out).map_err(|e| TallError::io(&a.out, e))?;
    let csv = table.to_csv()?;
    let path = a.out.join("ablation.csv");
    std::fs::write(&path, &csv).map_err(|e| TallError::io(&path, e))?;
    write_json(&a.out.join("ablation.json"), &table)?;
    print!("{csv}");
    Ok(())
}

fn bench(ctx: &Ctx, a: BenchArgs) -> CliResult {
    let threads = match ctx.threads.unwrap_or(1) {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    };
    let layout = LayoutSpec::parse(&a.layout, [a.factor, a.factor]).map_err(|e| CliError::usage(e.to_string()))?;
    if a.frames > layout.capacity() {
        return Err(CliError::usage(format!("{} frames do not fit layout {}", a.frames, a.layout)));
    }
    let seed = ctx.resolve_seed(Some(0));
    let clip = tall_core::tall::random_clip(seed, a.frames, 3, a.size, a.size);
    let spec = TransformSpec {
        mask_size: a.mask_size,
        layout,
        order: OrderSpec::Forward,
    };
    let t = transform_clips(&clip, &spec, threads, a.clips)?;
    let bytes_per_clip = (a.frames * 3 * a.size * a.size * std::mem::size_of::<f32>()) as f64;
    print_json(&json!({
        "threads": t.threads,
        "clips": t.clips,
        "seconds": t.seconds,
        "clips_per_sec": t.clips_per_sec,
        "bytes_per_sec": t.clips_per_sec * bytes_per_clip,
    }));
    Ok(())
}

fn saliency_cmd(a: SaliencyArgs) -> CliResult {
    let ckpt = checkpoint_dir(&a.ckpt);
    let model = load_model(&ckpt)?;
    let source = a.thumb.as_ref().or(a.clip.as_ref()).expect("clap enforces one source");
    let input_ppm = a.out.with_extension("input.ppm");
    guard(&[source], &[&a.out, &input_ppm])?;
    let thumb: Thumbnail = match (&a.thumb, &a.clip) {
        (Some(p), _) => thumb::read(p)?.0,
        (None, Some(p)) => {
            let layout = model.config.layout.clone();
            let header = decode_header(&read_head(p)?)?;
            let available = header.shape.first().copied().unwrap_or(0);
            let clip = if available >= layout.capacity() {
                read_clip_range(p, 0, layout.capacity())?
            } else {
                read_clip(p)?
            };
            let spec = TransformSpec {
                mask_size: 0,
                layout,
                order: OrderSpec::Forward,
            };
            tall_transform(&clip, &spec, &mut ChaCha8Rng::seed_from_u64(0))?
        }
        (None, None) => unreachable!("clap enforces one source"),
    };
    let map = saliency(&model, &thumb, a.target, ForwardOptions::default())?;
    map.to_image().write_pnm(&a.out)?;
    thumb.image.write_pnm(&input_ppm)?;
    let mean = map.weights.iter().sum::<f64>() / map.weights.len() as f64;
    print_json(&json!({
        "out": a.out,
        "input": input_ppm,
        "layer": map.layer,
        "target": a.target,
        "size": [map.height, map.width],
        "mean": mean,
    }));
    Ok(())
}

/// Enough leading bytes of a tensor file to decode its header.
fn read_head(p: &Path) -> CliResult<Vec<u8>> {
    use std::io::Read;
    let f = std::fs::File::open(p).map_err(|e| TallError::io(p, e))?;
    let mut buf = Vec::new();
    f.take(4096).read_to_end(&mut buf).map_err(|e| TallError::io(p, e))?;
    Ok(buf)
}

fn gen_docs(out: &Path) -> CliResult {
    let mut cmd = Cli::command();
    cmd.build();
    let mut doc = String::from("# `tall` command reference\n\n");
    doc.push_str("Generated by `tall gen-docs`.\n\n");
    doc.push_str("Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numerical abort.\n");
    doc.push_str("`TALL_DATA_DIR` is the default for `--data` and for `gen-data --out`.\n\n");
    doc.push_str(&format!("```text\n{}\n```\n", cmd.render_long_help()));
    for sub in cmd.get_subcommands_mut().filter(|s| !s.is_hide_set()) {
        let name = sub.get_name().to_string();
        doc.push_str(&format!("\n## `tall {name}`\n\n```text\n{}\n```\n", sub.render_long_help()));
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| TallError::io(parent, e))?;
    }
    std::fs::write(out, doc).map_err(|e| TallError::io(out, e))?;
    Ok(())
}
