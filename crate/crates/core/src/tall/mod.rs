//! Thumbnail layout transform: per-clip masking, per-frame downsampling and
//! rearrangement of the frames into a single image.

pub mod bench;
pub mod layout;
pub mod mask;
pub mod resample;
pub mod transform;

pub use bench::{random_clip, transform_clips, transform_throughput, Throughput};
pub use layout::{LayoutSpec, OrderSpec};
pub use mask::{apply_mask, draw_mask, MaskSpec};
pub use resample::downsample;
pub use transform::{
    pixel_provenance, rearrange, tall_inverse, tall_transform, tall_transform_frames, Provenance,
    Thumbnail, TransformSpec,
};
