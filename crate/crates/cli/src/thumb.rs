//! Thumbnail files: a `[C, H, W]` f32 tensor plus a `.json` sidecar holding
//! the layout and mask, mirroring the clip file format.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tall_core::image::Image;
use tall_core::numerics::io::{read_tensor, write_tensor};
use tall_core::numerics::{DType, Tensor};
use tall_core::tall::{LayoutSpec, MaskSpec, OrderSpec, Thumbnail};
use tall_core::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThumbSidecar {
    pub layout: LayoutSpec,
    pub order: OrderSpec,
    pub frame_of_slot: Vec<Option<usize>>,
    pub sub_height: usize,
    pub sub_width: usize,
    pub mask: MaskSpec,
    pub clip_id: u64,
    pub label: usize,
    pub seed: u64,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn write(path: &Path, thumb: &Thumbnail, side: &ThumbSidecar) -> Result<()> {
    let img = &thumb.image;
    let t = Tensor::with_dtype(
        &[img.channels, img.height, img.width],
        img.data.iter().map(|&v| v as f64).collect(),
        DType::F32,
    )?;
    write_tensor(path, &t)?;
    let side_path = sidecar_path(path);
    std::fs::write(&side_path, serde_json::to_vec_pretty(side)?).map_err(|e| tall_core::TallError::io(side_path, e))
}

pub fn read(path: &Path) -> Result<(Thumbnail, ThumbSidecar)> {
    let t = read_tensor(path)?;
    let &[c, h, w] = t.shape() else {
        return Err(tall_core::TallError::Format {
            offset: 0,
            message: format!("thumbnail tensor must be [C, H, W], got {:?}", t.shape()),
        });
    };
    let image = Image::from_vec(c, h, w, t.data().iter().map(|&v| v as f32).collect())?;
    let side_path = sidecar_path(path);
    let bytes = std::fs::read(&side_path).map_err(|e| tall_core::TallError::io(&side_path, e))?;
    let side: ThumbSidecar = serde_json::from_slice(&bytes)?;
    let thumb = Thumbnail {
        image,
        layout: side.layout.clone(),
        frame_of_slot: side.frame_of_slot.clone(),
        sub_height: side.sub_height,
        sub_width: side.sub_width,
        mask: side.mask,
        clip_id: side.clip_id,
    };
    Ok((thumb, side))
}
