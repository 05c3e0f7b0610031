//! Procedural real/fake videos.
//!
//! A real video is a drifting sinusoidal background, a soft "face" blob in
//! the centre and a few coloured blobs on smooth trajectories, so adjacent
//! frames are strongly correlated. Its fake twin is the same video with the
//! central region perturbed independently in every frame.

use std::f32::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Clip, Video};
use crate::error::{Result, TallError};
use crate::image::Image;

pub const CHANNELS: usize = 3;
pub const REAL: usize = 0;
pub const FAKE: usize = 1;
const NUM_CLASSES: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArtifactKind {
    /// Blocky noise redrawn every frame.
    FlickerRegion,
    /// Region contents displaced by a different offset every frame.
    BoundarySeam,
    /// Region blended with a texture whose phases are redrawn every frame.
    TextureSwap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub videos_per_class: usize,
    pub frames_per_video: usize,
    pub height: usize,
    pub width: usize,
    pub artifact: ArtifactKind,
    pub magnitude: f32,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            videos_per_class: 500,
            frames_per_video: 48,
            height: 128,
            width: 128,
            artifact: ArtifactKind::FlickerRegion,
            magnitude: 0.5,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn num_classes(&self) -> usize {
        NUM_CLASSES
    }

    pub fn num_videos(&self) -> usize {
        self.videos_per_class * NUM_CLASSES
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(TallError::config(format!(
                "frames must be at least 16x16, got {}x{}",
                self.height, self.width
            )));
        }
        if self.videos_per_class == 0 || self.frames_per_video == 0 {
            return Err(TallError::config("corpus needs at least one video and one frame"));
        }
        if !(0.0..=1.0).contains(&self.magnitude) {
            return Err(TallError::config(format!(
                "artifact magnitude must lie in [0, 1], got {}",
                self.magnitude
            )));
        }
        Ok(())
    }

    /// Scene shared by a real video and its fake twin.
    pub fn scene_of(&self, index: usize) -> usize {
        index % self.videos_per_class
    }

    pub fn label_of(&self, index: usize) -> usize {
        index / self.videos_per_class
    }

    /// `[row range, col range]` of the manipulated region.
    pub fn artifact_region(&self) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        (
            self.height / 4..3 * self.height / 4,
            self.width / 4..3 * self.width / 4,
        )
    }
}

/// 64-bit mixing of several words into one seed (splitmix64 finalizer).
pub fn mix_seed(words: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &w in words {
        h ^= w.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

const STREAM_SCENE: u64 = 1;
const STREAM_ARTIFACT: u64 = 2;

struct Wave {
    kx: f32,
    ky: f32,
    phase: f32,
    drift: f32,
    amp: [f32; 3],
}

struct Blob {
    color: [f32; 3],
    sigma: f32,
    y0: f32,
    x0: f32,
    vy: f32,
    vx: f32,
    wobble: f32,
    wobble_freq: f32,
    wobble_phase: f32,
    alpha: f32,
}

impl Blob {
    fn center(&self, t: f32) -> (f32, f32) {
        let w = self.wobble * (self.wobble_freq * t + self.wobble_phase).sin();
        (self.y0 + self.vy * t + w, self.x0 + self.vx * t + 0.5 * w)
    }
}

struct Scene {
    base: [f32; 3],
    waves: Vec<Wave>,
    blobs: Vec<Blob>,
}

impl Scene {
    fn new(spec: &CorpusSpec, scene: usize) -> Scene {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[spec.seed, scene as u64, STREAM_SCENE]));
        let (h, w) = (spec.height as f32, spec.width as f32);
        let base = [0; 3].map(|_| rng.random_range(0.25..0.55));
        let waves = (0..3)
            .map(|_| Wave {
                kx: TAU * rng.random_range(0.5..3.0) / w,
                ky: TAU * rng.random_range(0.5..3.0) / h,
                phase: rng.random_range(0.0..TAU),
                drift: rng.random_range(-0.05..0.05),
                amp: [0; 3].map(|_| rng.random_range(0.02..0.07)),
            })
            .collect();

        // The face proxy sits in the middle of the manipulated region.
        let mut blobs = vec![Blob {
            color: [
                rng.random_range(0.6..0.8),
                rng.random_range(0.45..0.6),
                rng.random_range(0.35..0.5),
            ],
            sigma: 0.16 * h,
            y0: 0.5 * h,
            x0: 0.5 * w,
            vy: 0.0,
            vx: 0.0,
            wobble: rng.random_range(1.0..3.0),
            wobble_freq: rng.random_range(0.05..0.15),
            wobble_phase: rng.random_range(0.0..TAU),
            alpha: 0.85,
        }];
        let extra = rng.random_range(2..=4);
        for _ in 0..extra {
            blobs.push(Blob {
                color: [0; 3].map(|_| rng.random_range(0.0..1.0)),
                sigma: rng.random_range(0.05..0.12) * h,
                y0: rng.random_range(0.0..h),
                x0: rng.random_range(0.0..w),
                vy: rng.random_range(-0.8..0.8),
                vx: rng.random_range(-0.8..0.8),
                wobble: rng.random_range(2.0..6.0),
                wobble_freq: rng.random_range(0.05..0.25),
                wobble_phase: rng.random_range(0.0..TAU),
                alpha: rng.random_range(0.5..0.9),
            });
        }
        Scene { base, waves, blobs }
    }

    fn render(&self, height: usize, width: usize, t: usize) -> Image {
        let tf = t as f32;
        let mut img = Image::zeros(CHANNELS, height, width);
        for (c, &b) in self.base.iter().enumerate() {
            img.data[c * height * width..(c + 1) * height * width].fill(b);
        }
        // sin(kx x + ky y + p) = sin(kx x) cos(ky y + p) + cos(kx x) sin(ky y + p)
        for wave in &self.waves {
            let p = wave.phase + wave.drift * tf;
            let sx: Vec<f32> = (0..width).map(|x| (wave.kx * x as f32).sin()).collect();
            let cx: Vec<f32> = (0..width).map(|x| (wave.kx * x as f32).cos()).collect();
            for y in 0..height {
                let a = wave.ky * y as f32 + p;
                let (sy, cy) = a.sin_cos();
                for c in 0..CHANNELS {
                    let amp = wave.amp[c];
                    let row = &mut img.data[(c * height + y) * width..(c * height + y + 1) * width];
                    for x in 0..width {
                        row[x] += amp * (sx[x] * cy + cx[x] * sy);
                    }
                }
            }
        }
        for blob in &self.blobs {
            let (cy, cx) = blob.center(tf);
            let reach = 3.0 * blob.sigma;
            let y_lo = (cy - reach).floor().max(0.0) as usize;
            let y_hi = ((cy + reach).ceil().max(0.0) as usize).min(height);
            let x_lo = (cx - reach).floor().max(0.0) as usize;
            let x_hi = ((cx + reach).ceil().max(0.0) as usize).min(width);
            let inv = -0.5 / (blob.sigma * blob.sigma);
            for y in y_lo..y_hi {
                let dy = y as f32 - cy;
                for x in x_lo..x_hi {
                    let dx = x as f32 - cx;
                    let a = blob.alpha * ((dy * dy + dx * dx) * inv).exp();
                    for c in 0..CHANNELS {
                        let i = (c * height + y) * width + x;
                        img.data[i] += a * (blob.color[c] - img.data[i]);
                    }
                }
            }
        }
        img.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        img
    }
}

fn apply_artifact(spec: &CorpusSpec, scene: usize, t: usize, real: &Image) -> Image {
    let mut out = real.clone();
    let m = spec.magnitude;
    let (rows, cols) = spec.artifact_region();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[
        spec.seed,
        scene as u64,
        STREAM_ARTIFACT,
        t as u64,
    ]));
    match spec.artifact {
        ArtifactKind::FlickerRegion => {
            const CELL: usize = 4;
            let ch = rows.len().div_ceil(CELL);
            let cw = cols.len().div_ceil(CELL);
            let noise: Vec<f32> = (0..CHANNELS * ch * cw)
                .map(|_| rng.random_range(-1.0f32..1.0))
                .collect();
            for c in 0..CHANNELS {
                for y in rows.clone() {
                    for x in cols.clone() {
                        let cell = (c * ch + (y - rows.start) / CELL) * cw + (x - cols.start) / CELL;
                        let i = real.index(c, y, x);
                        out.data[i] = (real.data[i] + m * 0.3 * noise[cell]).clamp(0.0, 1.0);
                    }
                }
            }
        }
        ArtifactKind::BoundarySeam => {
            let dy = rng.random_range(-6i64..=6);
            let dx = rng.random_range(-6i64..=6);
            for c in 0..CHANNELS {
                for y in rows.clone() {
                    for x in cols.clone() {
                        let sy = (y as i64 + dy).clamp(0, real.height as i64 - 1) as usize;
                        let sx = (x as i64 + dx).clamp(0, real.width as i64 - 1) as usize;
                        let i = real.index(c, y, x);
                        out.data[i] = (1.0 - m) * real.data[i] + m * real.get(c, sy, sx);
                    }
                }
            }
        }
        ArtifactKind::TextureSwap => {
            let comps: Vec<(f32, f32, f32)> = (0..4)
                .map(|k| {
                    let f = TAU * (k + 2) as f32 / rows.len() as f32;
                    (f, f * 0.7, rng.random_range(0.0..TAU))
                })
                .collect();
            for y in rows.clone() {
                for x in cols.clone() {
                    let tex: f32 = comps
                        .iter()
                        .map(|&(fy, fx, p)| (fy * y as f32 + fx * x as f32 + p).sin())
                        .sum::<f32>()
                        * 0.1
                        + 0.5;
                    for c in 0..CHANNELS {
                        let i = real.index(c, y, x);
                        out.data[i] = (1.0 - m) * real.data[i] + m * tex;
                    }
                }
            }
        }
    }
    out
}

/// Renders frame `t` of video `index`. Deterministic in `(spec, index, t)`.
pub fn generate_frame(spec: &CorpusSpec, index: usize, t: usize) -> Result<Image> {
    generate_frames(spec, index, t, 1).map(|mut v| v.pop().expect("one frame"))
}

/// Renders `count` consecutive frames starting at `start`.
pub fn generate_frames(spec: &CorpusSpec, index: usize, start: usize, count: usize) -> Result<Vec<Image>> {
    spec.validate()?;
    if index >= spec.num_videos() {
        return Err(TallError::config(format!(
            "video index {index} out of range for {} videos",
            spec.num_videos()
        )));
    }
    if start + count > spec.frames_per_video {
        return Err(TallError::config(format!(
            "frames {start}..{} outside video of {} frames",
            start + count,
            spec.frames_per_video
        )));
    }
    let scene_id = spec.scene_of(index);
    let scene = Scene::new(spec, scene_id);
    let fake = spec.label_of(index) == FAKE;
    Ok((start..start + count)
        .map(|t| {
            let real = scene.render(spec.height, spec.width, t);
            if fake {
                apply_artifact(spec, scene_id, t, &real)
            } else {
                real
            }
        })
        .collect())
}

pub fn generate_video(spec: &CorpusSpec, index: usize) -> Result<Video> {
    let frames = generate_frames(spec, index, 0, spec.frames_per_video)?;
    Ok(Video {
        frames,
        fps: 25.0,
        label: spec.label_of(index),
        id: index as u64,
        seed: spec.seed,
    })
}

/// Renders a clip of `count` frames starting at `start` without materializing the video.
pub fn generate_clip(spec: &CorpusSpec, index: usize, start: usize, count: usize) -> Result<Clip> {
    Ok(Clip {
        frames: generate_frames(spec, index, start, count)?,
        video_id: index as u64,
        start,
        label: spec.label_of(index),
        seed: spec.seed,
    })
}
