//! Semantic-consistency and cross-entropy losses, plain and on the tape.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TallError};
use crate::numerics::{Tape, Var};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;
pub const DEFAULT_ALPHA: f64 = 0.5;

/// Consistency loss with its per-pair terms; `pairs[i]` compares frame
/// `i + 1` with frame `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScLoss {
    pub value: f64,
    pub pairs: Vec<f64>,
}

fn check_frames(count: usize, dims: impl Iterator<Item = usize>) -> Result<usize> {
    if count < 2 {
        return Err(TallError::config(format!(
            "consistency loss needs at least 2 frames, got {count}"
        )));
    }
    let dims: Vec<usize> = dims.collect();
    if dims.iter().any(|&d| d != dims[0]) || dims[0] == 0 {
        return Err(TallError::shape("sc_loss", &dims, &[dims[0]]));
    }
    Ok(dims[0])
}

/// Mean over adjacent frame pairs of the feature MSE.
pub fn sc_loss(features: &[Vec<f64>]) -> Result<ScLoss> {
    let n = check_frames(features.len(), features.iter().map(Vec::len))?;
    let pairs: Vec<f64> = features
        .windows(2)
        .map(|w| w[1].iter().zip(&w[0]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n as f64)
        .collect();
    let value = pairs.iter().sum::<f64>() / pairs.len() as f64;
    Ok(ScLoss { value, pairs })
}

fn check_label(y: usize) -> Result<()> {
    if y > 1 {
        return Err(TallError::config(format!("binary label must be 0 or 1, got {y}")));
    }
    Ok(())
}

/// Mean binary cross-entropy of fake probabilities.
pub fn ce_loss(probs: &[f64], labels: &[usize]) -> Result<f64> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(TallError::shape("ce_loss", &[probs.len()], &[labels.len()]));
    }
    let mut total = 0.0;
    for (&p, &y) in probs.iter().zip(labels) {
        check_label(y)?;
        let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        total -= if y == 1 { p.ln() } else { (1.0 - p).ln() };
    }
    Ok(total / probs.len() as f64)
}

/// Mean cross-entropy of per-sample class distributions.
pub fn ce_loss_multiclass(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(TallError::shape("ce_loss_multiclass", &[probs.len()], &[labels.len()]));
    }
    let mut total = 0.0;
    for (p, &y) in probs.iter().zip(labels) {
        let py = *p
            .get(y)
            .ok_or_else(|| TallError::config(format!("label {y} out of range for {} classes", p.len())))?;
        total -= py.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP).ln();
    }
    Ok(total / probs.len() as f64)
}

pub fn total_loss(ce: f64, sc: f64, alpha: f64) -> f64 {
    ce + alpha * sc
}

/// Consistency loss recorded on the tape over `[d]` frame features.
pub fn sc_loss_tape(tape: &mut Tape, features: &[Var]) -> Result<Var> {
    check_frames(features.len(), features.iter().map(|&f| tape.shape(f).iter().product()))?;
    let mut acc: Option<Var> = None;
    for w in features.windows(2) {
        let d = tape.sub(w[1], w[0])?;
        let sq = tape.mul(d, d)?;
        let m = tape.mean(sq)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, m)?,
            None => m,
        });
    }
    tape.scale(acc.expect("at least one pair"), 1.0 / (features.len() - 1) as f64)
}

/// Softmax cross-entropy of `[n, K]` logits. With two classes this is the
/// binary loss on the class-1 probability.
pub fn ce_loss_tape(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.softmax_cross_entropy(logits, labels, PROB_CLAMP)
}

pub fn total_loss_tape(tape: &mut Tape, ce: Var, sc: Option<Var>, alpha: f64) -> Result<Var> {
    match sc {
        Some(sc) if alpha != 0.0 => {
            let w = tape.scale(sc, alpha)?;
            tape.add(ce, w)
        }
        _ => Ok(ce),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub ce: f64,
    pub sc: f64,
    pub alpha: f64,
    pub total: f64,
    /// Adjacent-pair MSE terms behind `sc`.
    pub pair_mse: Vec<f64>,
}

impl LossReport {
    pub fn new(ce: f64, sc: ScLoss, alpha: f64) -> Self {
        LossReport {
            ce,
            sc: sc.value,
            alpha,
            total: total_loss(ce, sc.value, alpha),
            pair_mse: sc.pairs,
        }
    }

    /// Mean of several reports; pair terms are averaged position-wise.
    pub fn mean(reports: &[LossReport]) -> Option<LossReport> {
        let first = reports.first()?;
        let n = reports.len() as f64;
        let mut pair_mse = vec![0.0; first.pair_mse.len()];
        for r in reports {
            for (a, b) in pair_mse.iter_mut().zip(&r.pair_mse) {
                *a += b / n;
            }
        }
        let ce = reports.iter().map(|r| r.ce).sum::<f64>() / n;
        let sc = reports.iter().map(|r| r.sc).sum::<f64>() / n;
        Some(LossReport {
            ce,
            sc,
            alpha: first.alpha,
            total: total_loss(ce, sc, first.alpha),
            pair_mse,
        })
    }
}

#[derive(Debug, Serialize)]
struct LogRow {
    step: usize,
    ce: f64,
    sc: f64,
    total: f64,
    lr: f64,
}

/// Per-step loss log with columns `step,ce,sc,total,lr`.
pub struct LossLog<W: Write> {
    writer: csv::Writer<W>,
}

impl<W: Write> LossLog<W> {
    pub fn new(inner: W) -> Self {
        LossLog {
            writer: csv::Writer::from_writer(inner),
        }
    }

    pub fn record(&mut self, step: usize, report: &LossReport, lr: f64) -> Result<()> {
        self.writer
            .serialize(LogRow {
                step,
                ce: report.ce,
                sc: report.sc,
                total: report.total,
                lr,
            })
            .map_err(|e| TallError::config(format!("loss log: {e}")))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.writer
            .flush()
            .map_err(|e| TallError::io("loss log", e))
    }
}
