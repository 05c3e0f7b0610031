use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::{Toggles, TrainConfig};
use super::run::{split_hash, train_with, EpochRecord, RunRecord};
use crate::clipgen::Corpus;
use crate::error::{Result, TallError};
use crate::tall::OrderSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationAxis {
    Components,
    Layout,
    Order,
    Size,
    Window,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 5] = [
        AblationAxis::Components,
        AblationAxis::Layout,
        AblationAxis::Order,
        AblationAxis::Size,
        AblationAxis::Window,
    ];
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            AblationAxis::Components => "components",
            AblationAxis::Layout => "layout",
            AblationAxis::Order => "order",
            AblationAxis::Size => "size",
            AblationAxis::Window => "window",
        };
        f.write_str(s)
    }
}

impl FromStr for AblationAxis {
    type Err = TallError;

    fn from_str(s: &str) -> Result<Self> {
        AblationAxis::ALL
            .into_iter()
            .find(|a| a.to_string() == s)
            .ok_or_else(|| {
                TallError::Usage(format!(
                    "unknown ablation axis '{s}' (expected components, layout, order, size or window)"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub label: String,
    pub config: TrainConfig,
}

/// `(tall, mask, grb, sc_loss)` for each row of the component grid.
pub const COMPONENT_GRID: [(bool, bool, bool, bool); 7] = [
    (false, false, false, false),
    (true, false, false, false),
    (true, true, false, false),
    (false, false, true, false),
    (false, false, true, true),
    (true, true, true, false),
    (true, true, true, true),
];

fn check(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

/// Every configuration of `axis`, derived from `base` and sharing its seed.
pub fn ablation_variants(base: &TrainConfig, axis: AblationAxis) -> Vec<Variant> {
    let with = |label: String, f: &dyn Fn(&mut TrainConfig)| {
        let mut config = base.clone();
        f(&mut config);
        Variant { label, config }
    };
    match axis {
        AblationAxis::Components => COMPONENT_GRID
            .iter()
            .enumerate()
            .map(|(i, &(tall, mask, grb, sc_loss))| {
                with(
                    format!(
                        "{} tall={} mask={} grb={} sc_loss={}",
                        i + 1,
                        check(tall),
                        check(mask),
                        check(grb),
                        check(sc_loss)
                    ),
                    &|c| {
                        c.toggles = Toggles {
                            tall,
                            mask,
                            grb,
                            sc_loss,
                        }
                    },
                )
            })
            .collect(),
        AblationAxis::Layout => [
            ("(a) 1x4", "1x4"),
            ("(b) 4x1", "4x1"),
            ("(c) 2x2 column-major", "2x2-col"),
            ("(d) 2x2 row-major", "2x2"),
        ]
        .into_iter()
        .map(|(label, layout)| with(label.into(), &|c| c.layout = layout.into()))
        .collect(),
        AblationAxis::Order => {
            let frames = base.frames_per_clip().unwrap_or(4);
            [
                OrderSpec::DropLast(1),
                OrderSpec::DropLast(2),
                OrderSpec::Random(base.seed),
                OrderSpec::Reverse,
                OrderSpec::Forward,
            ]
            .into_iter()
            .map(|o| with(o.label(frames), &|c| c.order = o.clone()))
            .collect()
        }
        // Thumbnails keep the default extent unless downsampling is off;
        // windows match one sub-frame in the first stage.
        AblationAxis::Size => [
            ("no-ds 3x3", "3x3", 2.0, 8),
            ("no-ds 2x2", "2x2", 2.0, 8),
            ("ds 3x3", "3x3", 8.0, 4),
            ("ds 4x4", "4x4", 8.0, 4),
            ("ds 2x2", "2x2", 4.0, 8),
        ]
        .into_iter()
        .map(|(label, layout, factor, win)| {
            with(label.into(), &|c| {
                c.layout = layout.into();
                c.factor = factor;
                c.windows = vec![win, 0];
            })
        })
        .collect(),
        AblationAxis::Window => [4, 16, 8]
            .into_iter()
            .map(|w| with(format!("({w},final)"), &|c| c.windows = vec![w, 0]))
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub auc: f64,
    pub acc: f64,
    /// Thumbnail `[height, width]` the variant trained on.
    pub image_size: [usize; 2],
    pub windows: Vec<usize>,
    pub record: RunRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub split_hash: String,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// `variant,auc,acc,image_size,windows` with one line per row.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| TallError::config(format!("ablation csv: {e}"));
        w.write_record(["variant", "auc", "acc", "image_size", "windows"]).map_err(err)?;
        for r in &self.rows {
            let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("x");
            w.write_record([
                r.variant.clone(),
                format!("{:.4}", r.auc),
                format!("{:.4}", r.acc),
                join(&r.image_size),
                join(&r.windows),
            ])
            .map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| TallError::config(format!("ablation csv: {e}")))?;
        String::from_utf8(bytes).map_err(|e| TallError::config(e.to_string()))
    }
}

/// Trains every variant of `axis` on the same corpus and split and scores it
/// on the test split.
pub fn ablate(
    base: &TrainConfig,
    axis: AblationAxis,
    corpus: &Corpus,
    on_epoch: &mut dyn FnMut(&str, &EpochRecord),
) -> Result<AblationTable> {
    let hash = split_hash(corpus);
    let mut rows = Vec::new();
    for v in ablation_variants(base, axis) {
        let model_config = v.config.model_config(corpus.spec())?;
        let label = v.label.clone();
        let (_, record) = train_with(&v.config, corpus, None, &mut |e| on_epoch(&label, e))?;
        if record.split_hash != hash {
            return Err(TallError::config(format!("variant '{}' saw a different split", v.label)));
        }
        let test = record
            .test
            .as_ref()
            .ok_or_else(|| TallError::config("corpus has no test split"))?;
        rows.push(AblationRow {
            variant: v.label,
            auc: test.auc,
            acc: test.acc,
            image_size: model_config.image_size,
            windows: model_config.windows,
            record,
        });
    }
    Ok(AblationTable {
        axis,
        split_hash: hash,
        rows,
    })
}
