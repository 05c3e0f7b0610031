use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::transform::{tall_transform_frames, TransformSpec};
use crate::clipgen::mix_seed;
use crate::error::{Result, TallError};
use crate::image::Image;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    pub threads: usize,
    pub clips: usize,
    pub seconds: f64,
    pub clips_per_sec: f64,
}

/// Random clip of `frames` frames, `c x h x w` each.
pub fn random_clip(seed: u64, frames: usize, c: usize, h: usize, w: usize) -> Vec<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..frames)
        .map(|_| {
            let data = (0..c * h * w).map(|_| rng.random::<f32>()).collect();
            Image::from_vec(c, h, w, data).expect("sized buffer")
        })
        .collect()
}

/// Transforms `clip` repeatedly for at least `min_time`, spreading clips over
/// `threads` workers (1 runs on the calling thread). Every transform draws
/// its own mask.
pub fn transform_throughput(
    clip: &[Image],
    spec: &TransformSpec,
    threads: usize,
    min_time: Duration,
) -> Result<Throughput> {
    run(clip, spec, threads, |done, elapsed| done == 0 || elapsed < min_time)
}

/// Like [`transform_throughput`] but stops after `clips` transforms (rounded
/// up to whole chunks of `8 * threads`).
pub fn transform_clips(clip: &[Image], spec: &TransformSpec, threads: usize, clips: usize) -> Result<Throughput> {
    run(clip, spec, threads, |done, _| done < clips)
}

fn run(
    clip: &[Image],
    spec: &TransformSpec,
    threads: usize,
    more: impl Fn(usize, Duration) -> bool,
) -> Result<Throughput> {
    if threads == 0 {
        return Err(TallError::config("thread count must be positive"));
    }
    let one = |i: usize| -> Result<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[i as u64]));
        let t = tall_transform_frames(clip, spec, i as u64, &mut rng)?;
        // keep the result observable so the work is not optimised away
        Ok(t.image.data[t.image.data.len() / 2])
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| TallError::config(format!("thread pool: {e}")))?;
    // one warm-up round so allocation and page faults are not timed
    let chunk = 8 * threads;
    pool.install(|| (0..chunk).into_par_iter().map(one).collect::<Result<Vec<_>>>())?;

    let start = Instant::now();
    let mut done = 0;
    while more(done, start.elapsed()) {
        let sink: Vec<f32> = if threads == 1 {
            (done..done + chunk).map(one).collect::<Result<_>>()?
        } else {
            pool.install(|| (done..done + chunk).into_par_iter().map(one).collect::<Result<_>>())?
        };
        std::hint::black_box(sink);
        done += chunk;
    }
    let seconds = start.elapsed().as_secs_f64();
    Ok(Throughput {
        threads,
        clips: done,
        seconds,
        clips_per_sec: done as f64 / seconds.max(f64::MIN_POSITIVE),
    })
}
