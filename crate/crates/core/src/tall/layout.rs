use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TallError};

/// Grid of sub-frame slots, the order in which they are filled, and the
/// per-axis downsampling factor applied to each frame before placement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayoutSpec {
    pub rows: usize,
    pub cols: usize,
    /// `[row, col]` of each slot, in fill order.
    pub slots: Vec<[usize; 2]>,
    /// `[row factor, col factor]`.
    pub factor: [f64; 2],
}

impl LayoutSpec {
    /// Row-major fill: `[0,0], [0,1], ..., [1,0], ...`.
    pub fn grid(rows: usize, cols: usize, factor: [f64; 2]) -> Self {
        let slots = (0..rows).flat_map(|r| (0..cols).map(move |c| [r, c])).collect();
        LayoutSpec {
            rows,
            cols,
            slots,
            factor,
        }
    }

    /// Column-major fill: `[0,0], [1,0], ..., [0,1], ...`.
    pub fn grid_column_major(rows: usize, cols: usize, factor: [f64; 2]) -> Self {
        let slots = (0..cols).flat_map(|c| (0..rows).map(move |r| [r, c])).collect();
        LayoutSpec {
            rows,
            cols,
            slots,
            factor,
        }
    }

    /// The default 2x2 thumbnail with a uniform factor.
    pub fn default_2x2(factor: f64) -> Self {
        Self::grid(2, 2, [factor, factor])
    }

    /// Parses `RxC` (row-major) or `RxC-col` (column-major).
    pub fn parse(name: &str, factor: [f64; 2]) -> Result<Self> {
        let (grid, col_major) = match name.strip_suffix("-col") {
            Some(g) => (g, true),
            None => (name, false),
        };
        let (r, c) = grid
            .split_once('x')
            .ok_or_else(|| TallError::config(format!("layout '{name}' is not RxC")))?;
        let parse = |s: &str| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| TallError::config(format!("layout '{name}' is not RxC")))
        };
        let (rows, cols) = (parse(r)?, parse(c)?);
        let spec = if col_major {
            Self::grid_column_major(rows, cols, factor)
        } else {
            Self::grid(rows, cols, factor)
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn capacity(&self) -> usize {
        self.slots.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(TallError::config("layout grid must be at least 1x1"));
        }
        if self.slots.is_empty() || self.slots.len() > self.rows * self.cols {
            return Err(TallError::config("layout slot count out of range"));
        }
        let mut seen = vec![false; self.rows * self.cols];
        for &[r, c] in &self.slots {
            if r >= self.rows || c >= self.cols || std::mem::replace(&mut seen[r * self.cols + c], true) {
                return Err(TallError::config(format!("invalid or duplicate slot [{r},{c}]")));
            }
        }
        if self.factor.iter().any(|f| !(f.is_finite() && *f >= 1.0)) {
            return Err(TallError::config(format!(
                "downsample factor must be >= 1, got {:?}",
                self.factor
            )));
        }
        Ok(())
    }

    /// Sub-frame extent for a source frame of `height x width`.
    pub fn sub_frame_size(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let h = super::resample::output_extent(height, self.factor[0])?;
        let w = super::resample::output_extent(width, self.factor[1])?;
        Ok((h, w))
    }

    /// Thumbnail extent for a source frame of `height x width`.
    pub fn thumbnail_size(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let (h, w) = self.sub_frame_size(height, width)?;
        Ok((self.rows * h, self.cols * w))
    }

    /// Fill-order position of the slot covering thumbnail pixel `(y, x)`.
    pub fn slot_at(&self, y: usize, x: usize, sub_h: usize, sub_w: usize) -> Option<usize> {
        let (r, c) = (y / sub_h, x / sub_w);
        self.slots.iter().position(|&s| s == [r, c])
    }
}

/// Which frame goes into which slot.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderSpec {
    Forward,
    Reverse,
    /// A permutation drawn from the given seed.
    Random(u64),
    /// Forward order with the last `k` frames left out; their slots stay zero.
    DropLast(usize),
}

impl OrderSpec {
    /// Frame index for each slot position, `None` where the slot stays empty.
    pub fn assign(&self, frames: usize, slots: usize) -> Result<Vec<Option<usize>>> {
        if frames > slots {
            return Err(TallError::config(format!(
                "{frames} frames do not fit into {slots} slots"
            )));
        }
        let mut out = vec![None; slots];
        match self {
            OrderSpec::Forward => (0..frames).for_each(|i| out[i] = Some(i)),
            OrderSpec::Reverse => (0..frames).for_each(|i| out[i] = Some(frames - 1 - i)),
            OrderSpec::Random(seed) => {
                let mut perm: Vec<usize> = (0..frames).collect();
                perm.shuffle(&mut ChaCha8Rng::seed_from_u64(*seed));
                for (i, f) in perm.into_iter().enumerate() {
                    out[i] = Some(f);
                }
            }
            OrderSpec::DropLast(k) => {
                if *k >= frames {
                    return Err(TallError::config(format!(
                        "cannot drop {k} of {frames} frames"
                    )));
                }
                (0..frames - k).for_each(|i| out[i] = Some(i));
            }
        }
        Ok(out)
    }

    /// Row label in the style of the order study, e.g. `0, 1, 2, -`.
    pub fn label(&self, frames: usize) -> String {
        match self {
            OrderSpec::Forward => "Forward".into(),
            OrderSpec::Reverse => "Reverse".into(),
            OrderSpec::Random(_) => "Random".into(),
            OrderSpec::DropLast(k) => (0..frames)
                .map(|i| if i + k < frames { i.to_string() } else { "-".into() })
                .collect::<Vec<_>>()
                .join(", "),
        }
    }
}

impl fmt::Display for OrderSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OrderSpec::Forward => write!(f, "forward"),
            OrderSpec::Reverse => write!(f, "reverse"),
            OrderSpec::Random(s) => write!(f, "random:{s}"),
            OrderSpec::DropLast(k) => write!(f, "drop-last-{k}"),
        }
    }
}

impl FromStr for OrderSpec {
    type Err = TallError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(OrderSpec::Forward),
            "reverse" => Ok(OrderSpec::Reverse),
            "random" => Ok(OrderSpec::Random(0)),
            _ => {
                if let Some(seed) = s.strip_prefix("random:") {
                    seed.parse()
                        .map(OrderSpec::Random)
                        .map_err(|_| TallError::config(format!("bad random seed in '{s}'")))
                } else if let Some(k) = s.strip_prefix("drop-last-") {
                    k.parse()
                        .map(OrderSpec::DropLast)
                        .map_err(|_| TallError::config(format!("bad drop count in '{s}'")))
                } else {
                    Err(TallError::config(format!("unknown order '{s}'")))
                }
            }
        }
    }
}
