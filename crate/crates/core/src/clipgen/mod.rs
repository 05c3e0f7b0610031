//! Synthetic real/fake corpus, dense clip sampling and clip files.

pub mod corpus;
pub mod generator;
pub mod sampling;
pub mod storage;

use crate::image::Image;

pub use corpus::{split_scenes, Corpus, Manifest, ManifestEntry, Split};
pub use generator::{
    generate_clip, generate_frame, generate_frames, generate_video, mix_seed, ArtifactKind, CorpusSpec, FAKE,
    REAL,
};
pub use sampling::{dense_sample, dense_sample_plan};
pub use storage::{clip_hash, read_clip, write_clip};

#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub frames: Vec<Image>,
    pub fps: f32,
    pub label: usize,
    pub id: u64,
    /// Corpus seed the video was generated from.
    pub seed: u64,
}

/// Consecutive frames cut from a video.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub frames: Vec<Image>,
    pub video_id: u64,
    /// Index of the first frame in the source video.
    pub start: usize,
    pub label: usize,
    pub seed: u64,
}

impl Clip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}
