//! Clip files: a `[T, C, H, W]` f32 tensor plus a JSON sidecar with label and
//! provenance at the same path with a `.json` extension.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Clip;
use crate::error::{Result, TallError};
use crate::image::Image;
use crate::numerics::io::{decode, encode, read_outer_range};
use crate::numerics::{DType, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipSidecar {
    pub video_id: u64,
    pub start: usize,
    pub label: usize,
    pub seed: u64,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn clip_tensor(clip: &Clip) -> Result<Tensor> {
    let first = clip
        .frames
        .first()
        .ok_or_else(|| TallError::config("clip has no frames"))?;
    if let Some(bad) = clip.frames.iter().find(|f| !f.same_geometry(first)) {
        return Err(TallError::shape(
            "clip_tensor",
            &[first.channels, first.height, first.width],
            &[bad.channels, bad.height, bad.width],
        ));
    }
    let data = clip.frames.iter().flat_map(|f| f.data.iter().map(|&v| v as f64)).collect();
    Tensor::with_dtype(
        &[clip.frames.len(), first.channels, first.height, first.width],
        data,
        DType::F32,
    )
}

pub(crate) fn frames_from_tensor(t: &Tensor) -> Result<Vec<Image>> {
    let &[n, c, h, w] = t.shape() else {
        return Err(TallError::shape("frames_from_tensor", &[0, 0, 0, 0], t.shape()));
    };
    let per = c * h * w;
    (0..n)
        .map(|i| {
            Image::from_vec(
                c,
                h,
                w,
                t.data()[i * per..(i + 1) * per].iter().map(|&v| v as f32).collect(),
            )
        })
        .collect()
}

pub fn write_clip(clip: &Clip, path: &Path) -> Result<()> {
    let bytes = encode(&clip_tensor(clip)?);
    std::fs::write(path, bytes).map_err(|e| TallError::io(path, e))?;
    let side = ClipSidecar {
        video_id: clip.video_id,
        start: clip.start,
        label: clip.label,
        seed: clip.seed,
    };
    let side_path = sidecar_path(path);
    std::fs::write(&side_path, serde_json::to_vec_pretty(&side)?).map_err(|e| TallError::io(side_path, e))
}

fn read_sidecar(path: &Path) -> Result<ClipSidecar> {
    let side_path = sidecar_path(path);
    let text = std::fs::read(&side_path).map_err(|e| TallError::io(&side_path, e))?;
    Ok(serde_json::from_slice(&text)?)
}

pub fn read_clip(path: &Path) -> Result<Clip> {
    let bytes = std::fs::read(path).map_err(|e| TallError::io(path, e))?;
    let frames = frames_from_tensor(&decode(&bytes)?)?;
    let side = read_sidecar(path)?;
    Ok(Clip {
        frames,
        video_id: side.video_id,
        start: side.start,
        label: side.label,
        seed: side.seed,
    })
}

/// Reads frames `start..start + count` of a stored clip or video without
/// decoding the rest.
pub fn read_clip_range(path: &Path, start: usize, count: usize) -> Result<Clip> {
    let frames = frames_from_tensor(&read_outer_range(path, start, count)?)?;
    let side = read_sidecar(path)?;
    Ok(Clip {
        frames,
        video_id: side.video_id,
        start: side.start + start,
        label: side.label,
        seed: side.seed,
    })
}

/// SHA-256 over the encoded pixels and provenance, hex encoded.
pub fn clip_hash(clip: &Clip) -> Result<String> {
    let mut h = Sha256::new();
    h.update(encode(&clip_tensor(clip)?));
    h.update(clip.video_id.to_le_bytes());
    h.update((clip.start as u64).to_le_bytes());
    h.update((clip.label as u64).to_le_bytes());
    h.update(clip.seed.to_le_bytes());
    Ok(hex::encode(h.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_clip(seed: u64) -> Clip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Clip {
            frames: (0..4)
                .map(|_| Image::from_vec(3, 5, 6, (0..90).map(|_| rng.random::<f32>()).collect()).unwrap())
                .collect(),
            video_id: rng.random(),
            start: rng.random_range(0..100),
            label: rng.random_range(0..2),
            seed,
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.bin");
        let c = random_clip(5);
        write_clip(&c, &p).unwrap();
        assert_eq!(read_clip(&p).unwrap(), c);
        assert!(p.with_extension("json").exists());
    }

    #[test]
    fn truncated_clip_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.bin");
        write_clip(&random_clip(1), &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 10]).unwrap();
        match read_clip(&p) {
            Err(TallError::Format { offset, .. }) => {
                // header 10 + 4*8 bytes, then whole f32 values
                let whole = (bytes.len() - 10 - 42) / 4 * 4;
                assert_eq!(offset as usize, 42 + whole);
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn partial_read_matches_slice() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.bin");
        let c = random_clip(2);
        write_clip(&c, &p).unwrap();
        let part = read_clip_range(&p, 1, 2).unwrap();
        assert_eq!(part.frames, c.frames[1..3]);
        assert_eq!(part.start, c.start + 1);
    }

    #[test]
    fn hash_changes_with_label() {
        let c = random_clip(3);
        let mut d = c.clone();
        d.label ^= 1;
        assert_ne!(clip_hash(&c).unwrap(), clip_hash(&d).unwrap());
        assert_eq!(clip_hash(&c).unwrap(), clip_hash(&c.clone()).unwrap());
    }
}
