//! Corpus manifests and train/val/test splits.
//!
//! A corpus is either virtual (frames are regenerated from the spec on
//! demand) or materialized (one clip file per video under the corpus root).

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::generator::{generate_clip, mix_seed, CorpusSpec};
use super::storage::{clip_hash, read_clip_range, write_clip};
use super::Clip;
use crate::error::{Result, TallError};

pub const MANIFEST_FILE: &str = "manifest.json";
const STREAM_SPLIT: u64 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: u64,
    pub scene: usize,
    pub label: usize,
    pub split: Split,
    /// Clip file relative to the corpus root; absent for virtual corpora.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub spec: CorpusSpec,
    pub entries: Vec<ManifestEntry>,
}

/// Assigns scenes to splits 70/15/15. A scene's real and fake videos always
/// land in the same split.
pub fn split_scenes(num_scenes: usize, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..num_scenes).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[seed, STREAM_SPLIT])));
    let n_train = (num_scenes as f64 * 0.70).round() as usize;
    let n_val = (num_scenes as f64 * 0.15).round() as usize;
    let mut out = vec![Split::Test; num_scenes];
    for (rank, &scene) in order.iter().enumerate() {
        out[scene] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    out
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub manifest: Manifest,
    /// Directory holding materialized clip files.
    pub root: Option<PathBuf>,
}

impl Corpus {
    pub fn virtual_corpus(spec: CorpusSpec) -> Result<Corpus> {
        spec.validate()?;
        let splits = split_scenes(spec.videos_per_class, spec.seed);
        let entries = (0..spec.num_videos())
            .map(|i| ManifestEntry {
                id: i as u64,
                scene: spec.scene_of(i),
                label: spec.label_of(i),
                split: splits[spec.scene_of(i)],
                file: None,
            })
            .collect();
        Ok(Corpus {
            manifest: Manifest { spec, entries },
            root: None,
        })
    }

    /// Renders every video to `dir/videos/` and writes the manifest.
    pub fn materialize(spec: CorpusSpec, dir: &Path) -> Result<Corpus> {
        let mut corpus = Corpus::virtual_corpus(spec)?;
        let videos = dir.join("videos");
        std::fs::create_dir_all(&videos).map_err(|e| TallError::io(&videos, e))?;
        let spec = &corpus.manifest.spec;
        let files: Vec<String> = corpus
            .manifest
            .entries
            .par_iter()
            .map(|e| {
                let name = format!("videos/video-{:06}.bin", e.id);
                let clip = generate_clip(spec, e.id as usize, 0, spec.frames_per_video)?;
                write_clip(&clip, &dir.join(&name))?;
                Ok(name)
            })
            .collect::<Result<_>>()?;
        for (e, f) in corpus.manifest.entries.iter_mut().zip(files) {
            e.file = Some(f);
        }
        corpus.root = Some(dir.to_path_buf());
        corpus.write_manifest(dir)?;
        Ok(corpus)
    }

    pub fn write_manifest(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| TallError::io(dir, e))?;
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_vec_pretty(&self.manifest)?).map_err(|e| TallError::io(path, e))
    }

    /// Opens a corpus directory, or a manifest file directly.
    pub fn open(path: &Path) -> Result<Corpus> {
        let (dir, file) = if path.is_dir() {
            (path.to_path_buf(), path.join(MANIFEST_FILE))
        } else {
            (path.parent().unwrap_or(Path::new(".")).to_path_buf(), path.to_path_buf())
        };
        let text = std::fs::read(&file).map_err(|e| TallError::io(&file, e))?;
        let manifest: Manifest = serde_json::from_slice(&text)?;
        manifest.spec.validate()?;
        Ok(Corpus {
            manifest,
            root: Some(dir),
        })
    }

    pub fn spec(&self) -> &CorpusSpec {
        &self.manifest.spec
    }

    pub fn entries(&self, split: Split) -> Vec<&ManifestEntry> {
        self.manifest.entries.iter().filter(|e| e.split == split).collect()
    }

    pub fn video_len(&self) -> usize {
        self.manifest.spec.frames_per_video
    }

    /// `count` frames of a video starting at `start`, read from disk if the
    /// video was materialized and regenerated otherwise.
    pub fn clip(&self, entry: &ManifestEntry, start: usize, count: usize) -> Result<Clip> {
        match (&entry.file, &self.root) {
            (Some(f), Some(root)) => read_clip_range(&root.join(f), start, count),
            (Some(f), None) => Err(TallError::config(format!("no corpus root to resolve '{f}'"))),
            (None, _) => generate_clip(&self.manifest.spec, entry.id as usize, start, count),
        }
    }

    /// Hash over every video's pixels and provenance, in index order.
    pub fn content_hash(&self) -> Result<String> {
        let hashes: Vec<String> = self
            .manifest
            .entries
            .par_iter()
            .map(|e| self.clip(e, 0, self.video_len()).and_then(|c| clip_hash(&c)))
            .collect::<Result<_>>()?;
        let mut h = Sha256::new();
        hashes.iter().for_each(|s| h.update(s.as_bytes()));
        Ok(hex::encode(h.finalize()))
    }
}
