use rand::Rng;

use super::{Clip, Video};
use crate::error::{Result, TallError};

/// Start frames for `num_clips` clips of `frames_per_clip` frames: the video
/// is cut into equal segments and each clip starts at a uniform offset in its
/// segment. When the length does not divide evenly, segment `k` is
/// `[k*len/n, (k+1)*len/n)`.
pub fn dense_sample_plan<R: Rng + ?Sized>(
    video_len: usize,
    num_clips: usize,
    frames_per_clip: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if num_clips == 0 || frames_per_clip == 0 {
        return Err(TallError::config("dense sampling needs at least one clip of one frame"));
    }
    let need = num_clips * frames_per_clip;
    if video_len < need {
        return Err(TallError::config(format!(
            "video has {video_len} frames, dense sampling of {num_clips} x {frames_per_clip} needs at least {need}"
        )));
    }
    Ok((0..num_clips)
        .map(|k| {
            let lo = k * video_len / num_clips;
            let hi = (k + 1) * video_len / num_clips;
            lo + rng.random_range(0..=hi - lo - frames_per_clip)
        })
        .collect())
}

pub fn dense_sample<R: Rng + ?Sized>(
    video: &Video,
    num_clips: usize,
    frames_per_clip: usize,
    rng: &mut R,
) -> Result<Vec<Clip>> {
    let starts = dense_sample_plan(video.frames.len(), num_clips, frames_per_clip, rng)?;
    Ok(starts
        .into_iter()
        .map(|s| Clip {
            frames: video.frames[s..s + frames_per_clip].to_vec(),
            video_id: video.id,
            start: s,
            label: video.label,
            seed: video.seed,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Image;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn video(len: usize) -> Video {
        Video {
            frames: (0..len).map(|i| Image::filled(1, 2, 2, i as f32)).collect(),
            fps: 25.0,
            label: 1,
            id: 7,
            seed: 0,
        }
    }

    #[test]
    fn degenerate_offsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let clips = dense_sample(&video(32), 8, 4, &mut rng).unwrap();
        for (k, c) in clips.iter().enumerate() {
            assert_eq!(c.start, 4 * k);
            let idx: Vec<f32> = c.frames.iter().map(|f| f.data[0]).collect();
            assert_eq!(idx, (4 * k..4 * k + 4).map(|i| i as f32).collect::<Vec<_>>());
        }
    }

    #[test]
    fn starts_within_segment() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let plan = dense_sample_plan(80, 8, 4, &mut rng).unwrap();
            for (k, &s) in plan.iter().enumerate() {
                let valid: Vec<usize> = (10 * k..10 * k + 10).filter(|o| o + 4 <= 10 * k + 10).collect();
                assert!(valid.contains(&s), "segment {k}: {s}");
            }
        }
    }

    #[test]
    fn whole_video_single_clip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = video(9);
        let clips = dense_sample(&v, 1, 9, &mut rng).unwrap();
        assert_eq!(clips[0].frames, v.frames);
    }

    #[test]
    fn too_short_reports_minimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = dense_sample(&video(31), 8, 4, &mut rng).unwrap_err().to_string();
        assert!(err.contains("32"), "{err}");
    }
}
