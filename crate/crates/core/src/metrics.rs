//! Video-level scoring, accuracy, ROC/AUC, per-class reports and
//! gradient-weighted saliency.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TallError};
use crate::image::Image;
use crate::model::{ForwardOptions, Model};
use crate::numerics::Tensor;
use crate::tall::Thumbnail;

/// Mean of a video's clip probabilities.
pub fn video_score(clip_probs: &[f64]) -> Result<f64> {
    if clip_probs.is_empty() {
        return Err(TallError::config("video score needs at least one clip"));
    }
    Ok(clip_probs.iter().sum::<f64>() / clip_probs.len() as f64)
}

/// Fraction of scores on the right side of `threshold`; ties count as class 1.
pub fn accuracy(scores: &[f64], labels: &[usize], threshold: f64) -> Result<f64> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(TallError::shape("accuracy", &[scores.len()], &[labels.len()]));
    }
    let correct = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &y)| usize::from(s >= threshold) == y)
        .count();
    Ok(correct as f64 / scores.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// Distinct scores, descending; point `i + 1` classifies `score >= thresholds[i]` as positive.
    pub thresholds: Vec<f64>,
    /// Starts at `(0, 0)` and ends at `(1, 1)`.
    pub fpr: Vec<f64>,
    pub tpr: Vec<f64>,
    pub auc: f64,
}

impl RocCurve {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| TallError::config(format!("roc csv: {e}")))?;
        let err = |e: csv::Error| TallError::config(format!("roc csv: {e}"));
        w.write_record(["threshold", "fpr", "tpr"]).map_err(err)?;
        for i in 0..self.fpr.len() {
            let t = if i == 0 { f64::INFINITY } else { self.thresholds[i - 1] };
            w.write_record([t.to_string(), self.fpr[i].to_string(), self.tpr[i].to_string()])
                .map_err(err)?;
        }
        w.flush().map_err(|e| TallError::io(path, e))
    }
}

fn class_counts(scores: &[f64], labels: &[usize]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(TallError::shape("roc_auc", &[scores.len()], &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y > 1) {
        return Err(TallError::config(format!("binary label must be 0 or 1, got {bad}")));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(TallError::NonFinite(format!("score {s}")));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(TallError::config("AUC is undefined with a single class"));
    }
    Ok((pos, neg))
}

/// ROC curve with the Mann-Whitney AUC: average ranks, ties worth one half.
pub fn roc_auc(scores: &[f64], labels: &[usize]) -> Result<RocCurve> {
    let (pos, neg) = class_counts(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    // Walk tie groups from the top score down. Each group adds one curve
    // point, and its positives outrank the negatives below (and half of
    // those inside) the group.
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut thresholds = Vec::new();
    let (mut fpr, mut tpr) = (vec![0.0], vec![0.0]);
    let mut concordant = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let mut j = i;
        let (mut gp, mut gn) = (0usize, 0usize);
        while j < order.len() && scores[order[j]] == s {
            if labels[order[j]] == 1 {
                gp += 1;
            } else {
                gn += 1;
            }
            j += 1;
        }
        // positives above this group beat all of its negatives
        concordant += (tp * gn) as f64 + 0.5 * (gp * gn) as f64;
        tp += gp;
        fp += gn;
        thresholds.push(s);
        fpr.push(fp as f64 / neg as f64);
        tpr.push(tp as f64 / pos as f64);
        i = j;
    }
    Ok(RocCurve {
        thresholds,
        fpr,
        tpr,
        auc: concordant / (pos * neg) as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

/// One-vs-rest precision, recall and F1. Zero denominators give 0.
pub fn multiclass_report(preds: &[usize], labels: &[usize], k: usize) -> Result<Vec<ClassMetrics>> {
    if preds.len() != labels.len() {
        return Err(TallError::shape("multiclass_report", &[preds.len()], &[labels.len()]));
    }
    if let Some(&bad) = preds.iter().chain(labels).find(|&&c| c >= k) {
        return Err(TallError::config(format!("class {bad} out of range for {k} classes")));
    }
    let mut confusion = vec![0usize; k * k];
    for (&p, &y) in preds.iter().zip(labels) {
        confusion[y * k + p] += 1;
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok((0..k)
        .map(|c| {
            let tp = confusion[c * k + c];
            let predicted: usize = (0..k).map(|y| confusion[y * k + c]).sum();
            let support: usize = confusion[c * k..(c + 1) * k].iter().sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassMetrics {
                class: c,
                precision,
                recall,
                f1,
                support,
            }
        })
        .collect())
}

/// Non-negative map over the thumbnail, scaled so its maximum is 1.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub height: usize,
    pub width: usize,
    pub weights: Vec<f64>,
    pub layer: String,
}

impl SaliencyMap {
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.weights[y * self.width + x]
    }

    /// Mean weight inside and outside the half-open pixel rectangle.
    pub fn region_means(&self, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> (f64, f64) {
        let (mut inside, mut ni, mut outside, mut no) = (0.0, 0usize, 0.0, 0usize);
        for y in 0..self.height {
            for x in 0..self.width {
                let v = self.get(y, x);
                if rows.contains(&y) && cols.contains(&x) {
                    inside += v;
                    ni += 1;
                } else {
                    outside += v;
                    no += 1;
                }
            }
        }
        (inside / ni.max(1) as f64, outside / no.max(1) as f64)
    }

    pub fn to_image(&self) -> Image {
        let data = self.weights.iter().map(|&v| v as f32).collect();
        Image::from_vec(1, self.height, self.width, data).expect("saliency geometry")
    }
}

pub const SALIENCY_LAYER: &str = "tokens_y";

/// Gradient-weighted class activation over the final (post graph reasoning)
/// tokens: channel weights are the token-averaged gradients of the target
/// logit, the map is their rectified weighted sum, upsampled by nearest
/// neighbour to the thumbnail.
pub fn saliency(model: &Model, thumb: &Thumbnail, target: usize, opts: ForwardOptions) -> Result<SaliencyMap> {
    let k = model.config.num_classes;
    if target >= k {
        return Err(TallError::config(format!("target class {target} out of range for {k} classes")));
    }
    let (tape, _, trace) = model.trace(thumb, opts)?;
    let mut seed = vec![0.0; k];
    seed[target] = 1.0;
    let grads = tape.backward(trace.logits, &Tensor::new(&[1, k], seed)?)?;
    let tokens = tape.value(trace.tokens_y);
    let d = model.config.feature_dim();
    let n = tokens.len() / d;
    let zero = vec![0.0; tokens.len()];
    let g = grads.get(trace.tokens_y).unwrap_or(&zero);

    let mut alpha = vec![0.0; d];
    for row in g.chunks_exact(d) {
        for (a, v) in alpha.iter_mut().zip(row) {
            *a += v / n as f64;
        }
    }
    let cam: Vec<f64> = tokens
        .chunks_exact(d)
        .map(|row| row.iter().zip(&alpha).map(|(a, w)| a * w).sum::<f64>().max(0.0))
        .collect();

    let (fh, fw) = *model.config.grids().last().expect("stages");
    let [h, w] = model.config.image_size;
    let (sy, sx) = (h / fh, w / fw);
    let max = cam.iter().cloned().fold(0.0, f64::max);
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    let mut weights = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            weights[y * w + x] = cam[(y / sy) * fw + x / sx] * scale;
        }
    }
    Ok(SaliencyMap {
        height: h,
        width: w,
        weights,
        layer: SALIENCY_LAYER.into(),
    })
}
