use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::TrainConfig;
use super::optim::{adam_step, lr_schedule, AdamState};
use crate::clipgen::{dense_sample_plan, mix_seed, Corpus, ManifestEntry, Split};
use crate::error::{Result, TallError};
use crate::image::Image;
use crate::losses::{ce_loss_tape, sc_loss, sc_loss_tape, total_loss_tape, LossLog, LossReport};
use crate::metrics::{accuracy, multiclass_report, roc_auc, video_score, ClassMetrics, RocCurve};
use crate::model::{forward, register_params, ForwardOptions, Model, ParamVars};
use crate::numerics::{NamedTensors, Tape, Tensor, Var};
use crate::tall::{tall_transform_frames, OrderSpec, TransformSpec};

// Independent random streams derived from the run seed.
const STREAM_INIT: u64 = 10;
const STREAM_SHUFFLE: u64 = 11;
const STREAM_SAMPLE: u64 = 12;
const STREAM_EVAL: u64 = 13;

/// Outputs of one clip's forward pass.
pub struct ClipForward {
    /// `[1, K]`.
    pub logits: Var,
    /// Per-frame features in frame order.
    pub frame_features: Vec<Var>,
}

/// Everything needed to turn frames into model inputs for one run.
#[derive(Clone, Debug)]
pub struct ClipPipeline {
    pub config: TrainConfig,
    pub mask_size: usize,
    pub frames_per_clip: usize,
}

impl ClipPipeline {
    pub fn new(config: &TrainConfig, corpus: &Corpus) -> Result<Self> {
        config.validate()?;
        Ok(ClipPipeline {
            config: config.clone(),
            mask_size: config.mask_size_for(corpus.spec()),
            frames_per_clip: config.frames_per_clip()?,
        })
    }

    /// Records the forward pass of one clip. Training clips get a fresh mask
    /// and, for random order, a fresh permutation, both drawn from `rng`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        model: &Model,
        vars: &ParamVars,
        frames: &[Image],
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<ClipForward> {
        let cfg = &self.config;
        let opts = ForwardOptions::default();
        let order = match cfg.order {
            OrderSpec::Random(s) => OrderSpec::Random(mix_seed(&[s, rng.random()])),
            ref o => o.clone(),
        };
        if cfg.toggles.tall {
            let spec = TransformSpec {
                mask_size: if train { self.mask_size } else { 0 },
                layout: model.config.layout.clone(),
                order,
            };
            let thumb = tall_transform_frames(frames, &spec, 0, rng)?;
            let trace = forward(tape, &model.plan, vars, &thumb.image, &thumb.frame_of_slot, opts)?;
            return Ok(ClipForward {
                logits: trace.logits,
                frame_features: trace.frame_features,
            });
        }
        // One image per frame; the clip prediction is the mean of the logits.
        let spec = TransformSpec {
            mask_size: 0,
            layout: model.config.layout.clone(),
            order: OrderSpec::Forward,
        };
        let mut sum: Option<Var> = None;
        let mut frame_features = Vec::with_capacity(frames.len());
        for f in frames {
            let thumb = tall_transform_frames(std::slice::from_ref(f), &spec, 0, rng)?;
            let trace = forward(tape, &model.plan, vars, &thumb.image, &thumb.frame_of_slot, opts)?;
            frame_features.push(trace.pooled_y);
            sum = Some(match sum {
                Some(s) => tape.add(s, trace.logits)?,
                None => trace.logits,
            });
        }
        let logits = tape.scale(sum.expect("clip has frames"), 1.0 / frames.len() as f64)?;
        Ok(ClipForward { logits, frame_features })
    }

    /// Loss variable and its report for one labelled clip.
    pub fn loss(&self, tape: &mut Tape, out: &ClipForward, label: usize) -> Result<(Var, LossReport)> {
        let ce = ce_loss_tape(tape, out.logits, &[label])?;
        let use_sc = self.config.toggles.sc_loss && out.frame_features.len() >= 2;
        let alpha = if use_sc { self.config.alpha } else { 0.0 };
        let sc = if use_sc {
            Some(sc_loss_tape(tape, &out.frame_features)?)
        } else {
            None
        };
        let total = total_loss_tape(tape, ce, sc, alpha)?;
        let sc_value = if out.frame_features.len() >= 2 {
            let feats: Vec<Vec<f64>> = out.frame_features.iter().map(|&v| tape.value(v).to_vec()).collect();
            sc_loss(&feats)?
        } else {
            crate::losses::ScLoss {
                value: 0.0,
                pairs: Vec::new(),
            }
        };
        let mut report = LossReport::new(tape.scalar(ce), sc_value, alpha);
        report.total = tape.scalar(total);
        Ok((total, report))
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// One training example: a video and the seed of its clip draw.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Sample {
    pub entry: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    /// Sample-weighted mean over the epoch.
    pub loss: LossReport,
    pub lr_last: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val: Option<EvalSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub auc: f64,
    pub acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoScore {
    pub id: u64,
    pub label: usize,
    pub score: f64,
    /// Class distribution averaged over the video's clips.
    pub probs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub videos: usize,
    pub clips_per_video: usize,
    pub auc: f64,
    pub acc: f64,
    pub per_class: Vec<ClassMetrics>,
    pub roc: RocCurve,
    pub scores: Vec<VideoScore>,
}

impl EvalReport {
    pub fn summary(&self) -> EvalSummary {
        EvalSummary {
            auc: self.auc,
            acc: self.acc,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub split_hash: String,
    pub seed: u64,
    pub threads: usize,
    /// Per-sample gradients are reduced in a fixed order, so the result does
    /// not depend on the thread count.
    pub deterministic: bool,
    pub epochs: Vec<EpochRecord>,
    /// Batch-mean total loss of every step.
    pub step_losses: Vec<f64>,
    pub val: Option<EvalReport>,
    pub test: Option<EvalReport>,
    pub wall_time_s: f64,
}

/// SHA-256 over `(split, id)` of every manifest entry.
pub fn split_hash(corpus: &Corpus) -> String {
    let mut entries: Vec<(u64, Split)> = corpus.manifest.entries.iter().map(|e| (e.id, e.split)).collect();
    entries.sort_unstable_by_key(|e| e.0);
    let mut h = Sha256::new();
    for (id, split) in entries {
        h.update(id.to_le_bytes());
        h.update(serde_json::to_vec(&split).expect("split serializes"));
    }
    hex::encode(h.finalize())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerMeta {
    pub epoch: usize,
    pub step: usize,
    pub adam_t: u64,
    pub seed: u64,
}

pub const TRAIN_CONFIG_FILE: &str = "train.json";
pub const META_FILE: &str = "meta.json";

/// Model, optimizer state and step counter of a run in progress.
pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub model: Model,
    pub adam: AdamState,
    /// Optimizer steps taken so far.
    pub step: usize,
    /// Epochs completed so far.
    pub epoch: usize,
    pub pipeline: ClipPipeline,
    corpus: &'a Corpus,
    train: Vec<ManifestEntry>,
    pool: Option<rayon::ThreadPool>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, corpus: &'a Corpus) -> Result<Self> {
        let pipeline = ClipPipeline::new(&config, corpus)?;
        let mc = config.model_config(corpus.spec())?;
        let model = Model::init(mc, mix_seed(&[config.seed, STREAM_INIT]), config.dtype)?;
        let adam = AdamState::new(&model.params);
        Self::assemble(config, corpus, pipeline, model, adam)
    }

    fn assemble(
        config: TrainConfig,
        corpus: &'a Corpus,
        pipeline: ClipPipeline,
        model: Model,
        adam: AdamState,
    ) -> Result<Self> {
        let train: Vec<ManifestEntry> = corpus.entries(Split::Train).into_iter().cloned().collect();
        if train.is_empty() {
            return Err(TallError::config("corpus has no training videos"));
        }
        if corpus.video_len() < pipeline.frames_per_clip {
            return Err(TallError::config(format!(
                "videos have {} frames, clips need {}",
                corpus.video_len(),
                pipeline.frames_per_clip
            )));
        }
        let pool = match config.threads {
            1 => None,
            n => Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .map_err(|e| TallError::config(format!("thread pool: {e}")))?,
            ),
        };
        Ok(Trainer {
            config,
            model,
            adam,
            step: 0,
            epoch: 0,
            pipeline,
            corpus,
            train,
            pool,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.train.len().div_ceil(self.config.batch_size)
    }

    pub fn total_steps(&self) -> usize {
        self.steps_per_epoch() * self.config.epochs
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let spe = self.steps_per_epoch();
        lr_schedule(step, self.total_steps(), spe * self.config.warmup_epochs, self.config.lr)
    }

    /// Shuffled batches of epoch `epoch`; each sample carries its own seed.
    pub fn epoch_batches(&self, epoch: usize) -> Vec<Vec<Sample>> {
        let seed = self.config.seed;
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[seed, STREAM_SHUFFLE, epoch as u64])));
        let samples: Vec<Sample> = order
            .into_iter()
            .enumerate()
            .map(|(pos, entry)| Sample {
                entry,
                seed: mix_seed(&[seed, STREAM_SAMPLE, epoch as u64, pos as u64]),
            })
            .collect();
        samples.chunks(self.config.batch_size).map(|c| c.to_vec()).collect()
    }

    fn sample_gradients(&self, sample: &Sample) -> Result<(NamedTensors, LossReport)> {
        let entry = &self.train[sample.entry];
        let t = self.pipeline.frames_per_clip;
        let mut rng = ChaCha8Rng::seed_from_u64(sample.seed);
        let start = rng.random_range(0..=self.corpus.video_len() - t);
        let clip = self.corpus.clip(entry, start, t)?;
        let mut tape = Tape::new(self.model.dtype());
        let vars = register_params(&mut tape, &self.model.params)?;
        let out = self.pipeline.forward(&mut tape, &self.model, &vars, &clip.frames, true, &mut rng)?;
        let (loss, report) = self.pipeline.loss(&mut tape, &out, entry.label)?;
        if !report.total.is_finite() {
            return Ok((NamedTensors::new(), report));
        }
        let grads = tape.backward(loss, &Tensor::scalar(1.0))?;
        Ok((grads.named(), report))
    }

    /// Gradients averaged over the batch, plus the mean loss report.
    pub fn batch_gradients(&self, batch: &[Sample]) -> Result<(NamedTensors, LossReport)> {
        let per: Vec<Result<(NamedTensors, LossReport)>> = match &self.pool {
            Some(pool) => pool.install(|| batch.par_iter().map(|s| self.sample_gradients(s)).collect()),
            None => batch.iter().map(|s| self.sample_gradients(s)).collect(),
        };
        let mut sum: Option<NamedTensors> = None;
        let mut reports = Vec::with_capacity(batch.len());
        for r in per {
            let (g, report) = r?;
            reports.push(report);
            match &mut sum {
                None => sum = Some(g),
                Some(acc) => {
                    for (name, t) in acc.iter_mut() {
                        if let Some(other) = g.get(name) {
                            let o = other.data();
                            t.map_inplace(|i, v| v + o[i]);
                        }
                    }
                }
            }
        }
        let report = LossReport::mean(&reports).ok_or_else(|| TallError::config("empty batch"))?;
        let inv = 1.0 / batch.len() as f64;
        let mut grads = sum.unwrap_or_default();
        grads.values_mut().for_each(|t| t.map_inplace(|_, v| v * inv));
        Ok((grads, report))
    }

    /// One optimizer step. A non-finite loss leaves the model untouched.
    pub fn train_step(&mut self, batch: &[Sample]) -> Result<LossReport> {
        let (grads, report) = self.batch_gradients(batch)?;
        if !report.total.is_finite() {
            return Err(TallError::NonFinite(format!(
                "loss is {} at step {}",
                report.total, self.step
            )));
        }
        let lr = self.lr_at(self.step);
        adam_step(&mut self.model.params, &grads, &mut self.adam, lr, &self.config.adam)?;
        self.step += 1;
        Ok(report)
    }

    pub fn evaluate(&self, split: Split) -> Result<EvalReport> {
        evaluate_with(&self.model, &self.pipeline, self.corpus, split, self.pool.as_ref())
    }

    /// Writes the model, optimizer moments, run config and counters.
    pub fn save(&self, dir: &Path) -> Result<()> {
        crate::model::save_model(dir, &self.model)?;
        crate::model::save_params(&dir.join("adam").join("m"), &self.adam.m)?;
        crate::model::save_params(&dir.join("adam").join("v"), &self.adam.v)?;
        write_json(&dir.join(TRAIN_CONFIG_FILE), &self.config)?;
        write_json(
            &dir.join(META_FILE),
            &TrainerMeta {
                epoch: self.epoch,
                step: self.step,
                adam_t: self.adam.t,
                seed: self.config.seed,
            },
        )
    }

    /// Restores a trainer written by [`Trainer::save`].
    pub fn load(dir: &Path, corpus: &'a Corpus) -> Result<Self> {
        let config: TrainConfig = read_json(&dir.join(TRAIN_CONFIG_FILE))?;
        let meta: TrainerMeta = read_json(&dir.join(META_FILE))?;
        let model = crate::model::load_model(dir)?;
        let adam = AdamState {
            t: meta.adam_t,
            m: crate::model::load_params(&dir.join("adam").join("m"))?,
            v: crate::model::load_params(&dir.join("adam").join("v"))?,
        };
        let pipeline = ClipPipeline::new(&config, corpus)?;
        let mut t = Self::assemble(config, corpus, pipeline, model, adam)?;
        t.step = meta.step;
        t.epoch = meta.epoch;
        Ok(t)
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| TallError::io(parent, e))?;
    }
    std::fs::write(path, serde_json::to_vec_pretty(value)?).map_err(|e| TallError::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| TallError::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Video-level evaluation: dense-sampled clips, unmasked, scored by the mean
/// fake probability.
pub fn evaluate_with(
    model: &Model,
    pipeline: &ClipPipeline,
    corpus: &Corpus,
    split: Split,
    pool: Option<&rayon::ThreadPool>,
) -> Result<EvalReport> {
    let entries = corpus.entries(split);
    if entries.is_empty() {
        return Err(TallError::config(format!("split {split:?} is empty")));
    }
    let t = pipeline.frames_per_clip;
    let clips = pipeline.config.eval_clips.min(corpus.video_len() / t).max(1);
    let seed = pipeline.config.seed;
    let score_video = |e: &&ManifestEntry| -> Result<VideoScore> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, STREAM_EVAL, e.id]));
        let starts = dense_sample_plan(corpus.video_len(), clips, t, &mut rng)?;
        let mut probs = Vec::with_capacity(starts.len());
        for s in starts {
            let clip = corpus.clip(e, s, t)?;
            let mut tape = Tape::new(model.dtype());
            let vars = register_params(&mut tape, &model.params)?;
            let out = pipeline.forward(&mut tape, model, &vars, &clip.frames, false, &mut rng)?;
            probs.push(softmax(tape.value(out.logits)));
        }
        let k = probs[0].len();
        let mean: Vec<f64> = (0..k)
            .map(|c| video_score(&probs.iter().map(|p| p[c]).collect::<Vec<_>>()))
            .collect::<Result<_>>()?;
        Ok(VideoScore {
            id: e.id,
            label: e.label,
            score: mean.get(1).copied().unwrap_or(0.0),
            probs: mean,
        })
    };
    let scores: Vec<VideoScore> = match pool {
        Some(p) => p.install(|| entries.par_iter().map(score_video).collect::<Result<_>>())?,
        None => entries.iter().map(score_video).collect::<Result<_>>()?,
    };
    let s: Vec<f64> = scores.iter().map(|v| v.score).collect();
    let binary: Vec<usize> = scores.iter().map(|v| usize::from(v.label != 0)).collect();
    let roc = roc_auc(&s, &binary)?;
    let k = model.config.num_classes;
    let preds: Vec<usize> = scores
        .iter()
        .map(|v| {
            v.probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map_or(0, |(i, _)| i)
        })
        .collect();
    let labels: Vec<usize> = scores.iter().map(|v| v.label).collect();
    Ok(EvalReport {
        split,
        videos: scores.len(),
        clips_per_video: clips,
        auc: roc.auc,
        acc: accuracy(&s, &binary, 0.5)?,
        per_class: multiclass_report(&preds, &labels, k)?,
        roc,
        scores,
    })
}

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const ABORT_DIR: &str = "checkpoint-abort";
pub const LOSS_LOG: &str = "loss.csv";
pub const RUN_RECORD: &str = "run.json";

/// Trains from scratch. With an output directory the loss log is written
/// there and a checkpoint is saved after every epoch; a non-finite loss saves
/// the state before the failing step under `checkpoint-abort/`.
pub fn train(config: &TrainConfig, corpus: &Corpus, out: Option<&Path>) -> Result<(Model, RunRecord)> {
    train_with(config, corpus, out, &mut |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    config: &TrainConfig,
    corpus: &Corpus,
    out: Option<&Path>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<(Model, RunRecord)> {
    let clock = Instant::now();
    let mut trainer = Trainer::new(config.clone(), corpus)?;
    let mut log = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| TallError::io(dir, e))?;
            let path = dir.join(LOSS_LOG);
            let f = std::fs::File::create(&path).map_err(|e| TallError::io(&path, e))?;
            Some(LossLog::new(std::io::BufWriter::new(f)))
        }
        None => None,
    };
    if let Some(dir) = out {
        trainer.save(&dir.join(CHECKPOINT_DIR))?;
    }
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut step_losses = Vec::with_capacity(trainer.total_steps());
    for epoch in 0..config.epochs {
        let batches = trainer.epoch_batches(epoch);
        let mut reports = Vec::with_capacity(batches.len());
        let mut weights = Vec::with_capacity(batches.len());
        let mut lr = 0.0;
        for batch in &batches {
            lr = trainer.lr_at(trainer.step);
            let report = match trainer.train_step(batch) {
                Ok(r) => r,
                Err(e @ TallError::NonFinite(_)) => {
                    if let Some(dir) = out {
                        trainer.save(&dir.join(ABORT_DIR))?;
                    }
                    if let Some(l) = log.as_mut() {
                        l.flush()?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            if let Some(l) = log.as_mut() {
                l.record(trainer.step, &report, lr)?;
            }
            step_losses.push(report.total);
            weights.push(batch.len());
            reports.push(report);
        }
        trainer.epoch = epoch + 1;
        let val = if config.val_every > 0 && (epoch + 1) % config.val_every == 0 {
            Some(trainer.evaluate(Split::Val)?.summary())
        } else {
            None
        };
        // repeat each batch report by its size for a per-sample mean
        let weighted: Vec<LossReport> = reports
            .iter()
            .zip(&weights)
            .flat_map(|(r, &w)| std::iter::repeat_n(r.clone(), w))
            .collect();
        epochs.push(EpochRecord {
            epoch,
            steps: batches.len(),
            loss: LossReport::mean(&weighted).ok_or_else(|| TallError::config("epoch without batches"))?,
            lr_last: lr,
            val,
        });
        on_epoch(epochs.last().expect("just pushed"));
        if let Some(l) = log.as_mut() {
            l.flush()?;
        }
        if let Some(dir) = out {
            trainer.save(&dir.join(CHECKPOINT_DIR))?;
        }
    }
    let has = |s: Split| !corpus.entries(s).is_empty();
    let val = if has(Split::Val) { Some(trainer.evaluate(Split::Val)?) } else { None };
    let test = if has(Split::Test) { Some(trainer.evaluate(Split::Test)?) } else { None };
    let record = RunRecord {
        config_hash: config.hash(),
        split_hash: split_hash(corpus),
        seed: config.seed,
        threads: trainer.pool.as_ref().map_or(1, |p| p.current_num_threads()),
        deterministic: true,
        epochs,
        step_losses,
        val,
        test,
        wall_time_s: clock.elapsed().as_secs_f64(),
    };
    if let Some(dir) = out {
        write_json(&dir.join(RUN_RECORD), &record)?;
    }
    Ok((trainer.model, record))
}

/// Prints one progress line per epoch to `w`.
pub fn describe_epoch(w: &mut impl Write, e: &EpochRecord) -> std::io::Result<()> {
    write!(
        w,
        "epoch {:>3}  ce {:.4}  sc {:.5}  total {:.4}  lr {:.2e}",
        e.epoch, e.loss.ce, e.loss.sc, e.loss.total, e.lr_last
    )?;
    if let Some(v) = &e.val {
        write!(w, "  val auc {:.4} acc {:.4}", v.auc, v.acc)?;
    }
    writeln!(w)
}
