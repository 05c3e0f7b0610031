use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layout::{LayoutSpec, OrderSpec};
use super::mask::{apply_mask_inplace, draw_mask, MaskSpec};
use super::resample::{plan, resample_plane, Resample};
use crate::clipgen::Clip;
use crate::error::{Result, TallError};
use crate::image::Image;

/// A clip rearranged into a single image.
#[derive(Clone, Debug, PartialEq)]
pub struct Thumbnail {
    pub image: Image,
    pub layout: LayoutSpec,
    /// Source frame index for each slot (fill order); `None` for zero slots.
    pub frame_of_slot: Vec<Option<usize>>,
    pub sub_height: usize,
    pub sub_width: usize,
    pub mask: MaskSpec,
    pub clip_id: u64,
}

impl Thumbnail {
    /// Top-left pixel of slot position `p`.
    pub fn slot_origin(&self, p: usize) -> (usize, usize) {
        let [r, c] = self.layout.slots[p];
        (r * self.sub_height, c * self.sub_width)
    }

    /// Slot position holding frame `t`.
    pub fn slot_of_frame(&self, t: usize) -> Option<usize> {
        self.frame_of_slot.iter().position(|f| *f == Some(t))
    }

    pub fn filled_frames(&self) -> usize {
        self.frame_of_slot.iter().flatten().count()
    }
}

/// Transform settings shared by every clip of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub mask_size: usize,
    pub layout: LayoutSpec,
    pub order: OrderSpec,
}

/// Places equally sized sub-frames into the layout slots.
pub fn rearrange(subframes: &[Image], layout: &LayoutSpec, order: &OrderSpec) -> Result<Thumbnail> {
    layout.validate()?;
    let first = subframes
        .first()
        .ok_or_else(|| TallError::config("rearrange needs at least one sub-frame"))?;
    if let Some(bad) = subframes.iter().find(|s| !s.same_geometry(first)) {
        return Err(TallError::shape(
            "rearrange",
            &[first.channels, first.height, first.width],
            &[bad.channels, bad.height, bad.width],
        ));
    }
    let assignment = order.assign(subframes.len(), layout.capacity())?;
    let (c, h, w) = (first.channels, first.height, first.width);
    let mut image = Image::zeros(c, layout.rows * h, layout.cols * w);
    for (p, frame) in assignment.iter().enumerate() {
        let Some(t) = frame else { continue };
        let [r, col] = layout.slots[p];
        blit(&subframes[*t], &mut image, r * h, col * w);
    }
    Ok(Thumbnail {
        image,
        layout: layout.clone(),
        frame_of_slot: assignment,
        sub_height: h,
        sub_width: w,
        mask: MaskSpec::NONE,
        clip_id: 0,
    })
}

fn blit(src: &Image, dst: &mut Image, y0: usize, x0: usize) {
    for c in 0..src.channels {
        for y in 0..src.height {
            let s = src.index(c, y, 0);
            let d = dst.index(c, y0 + y, x0);
            dst.data[d..d + src.width].copy_from_slice(&src.data[s..s + src.width]);
        }
    }
}

/// Mask, downsample and rearrange one clip.
///
/// One mask position is drawn per clip and applied to all of its frames.
/// Masking happens at source resolution, before downsampling.
pub fn tall_transform<R: Rng + ?Sized>(clip: &Clip, spec: &TransformSpec, rng: &mut R) -> Result<Thumbnail> {
    tall_transform_frames(&clip.frames, spec, clip.video_id, rng)
}

pub fn tall_transform_frames<R: Rng + ?Sized>(
    frames: &[Image],
    spec: &TransformSpec,
    clip_id: u64,
    rng: &mut R,
) -> Result<Thumbnail> {
    let layout = &spec.layout;
    layout.validate()?;
    let first = frames
        .first()
        .ok_or_else(|| TallError::config("clip has no frames"))?;
    if let Some(bad) = frames.iter().find(|f| !f.same_geometry(first)) {
        return Err(TallError::shape(
            "tall_transform",
            &[first.channels, first.height, first.width],
            &[bad.channels, bad.height, bad.width],
        ));
    }
    let (c, h, w) = (first.channels, first.height, first.width);
    let mask = draw_mask(rng, h, w, spec.mask_size)?;
    let assignment = spec.order.assign(frames.len(), layout.capacity())?;
    let resample = plan(h, w, layout.factor)?;
    let (sh, sw) = layout.sub_frame_size(h, w)?;
    let (th, tw) = (layout.rows * sh, layout.cols * sw);

    let mut image = Image::zeros(c, th, tw);
    let mut masked = Image::zeros(c, h, w);
    let mut scratch = Vec::new();
    for (p, t) in assignment.iter().enumerate() {
        let Some(t) = t else { continue };
        let src = if mask.is_noop() {
            &frames[*t]
        } else {
            masked.data.copy_from_slice(&frames[*t].data);
            apply_mask_inplace(&mut masked, &mask)?;
            &masked
        };
        let [r, col] = layout.slots[p];
        for ch in 0..c {
            let offset = (ch * th + r * sh) * tw + col * sw;
            resample_plane(src.plane(ch), h, w, resample, &mut image.data[offset..], tw, &mut scratch);
        }
    }
    Ok(Thumbnail {
        image,
        layout: layout.clone(),
        frame_of_slot: assignment,
        sub_height: sh,
        sub_width: sw,
        mask,
        clip_id,
    })
}

/// Recovers the source frames of a thumbnail built with factor 1, in frame
/// order. Only frames that occupy a slot are returned.
pub fn tall_inverse(thumb: &Thumbnail) -> Result<Vec<Image>> {
    if thumb.layout.factor != [1.0, 1.0] {
        return Err(TallError::config("inverse transform requires downsample factor 1"));
    }
    let frames = thumb.filled_frames();
    let (c, h, w) = (thumb.image.channels, thumb.sub_height, thumb.sub_width);
    let mut out = vec![Image::zeros(c, h, w); frames];
    for (p, t) in thumb.frame_of_slot.iter().enumerate() {
        let Some(t) = t else { continue };
        let (y0, x0) = thumb.slot_origin(p);
        let dst = &mut out[*t];
        for ch in 0..c {
            for y in 0..h {
                let s = thumb.image.index(ch, y0 + y, x0);
                let d = dst.index(ch, y, 0);
                dst.data[d..d + w].copy_from_slice(&thumb.image.data[s..s + w]);
            }
        }
    }
    Ok(out)
}

/// Source of one thumbnail pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Provenance {
    /// Slot position in fill order; with forward order this is also the frame index.
    pub slot: usize,
    pub rows: Range<usize>,
    pub cols: Range<usize>,
}

/// Maps thumbnail pixel `(out_row, out_col)` to its slot and the box
/// footprint in the source frame that was averaged to produce it.
pub fn pixel_provenance(
    out_row: usize,
    out_col: usize,
    layout: &LayoutSpec,
    frame_height: usize,
    frame_width: usize,
) -> Result<Provenance> {
    let Resample::Box { kh, kw } = plan(frame_height, frame_width, layout.factor)? else {
        return Err(TallError::config(
            "pixel provenance is defined for integer box factors only",
        ));
    };
    let (sh, sw) = (frame_height / kh, frame_width / kw);
    if out_row >= layout.rows * sh || out_col >= layout.cols * sw {
        return Err(TallError::config(format!(
            "pixel ({out_row}, {out_col}) outside {}x{} thumbnail",
            layout.rows * sh,
            layout.cols * sw
        )));
    }
    let slot = layout
        .slot_at(out_row, out_col, sh, sw)
        .ok_or_else(|| TallError::config(format!("pixel ({out_row}, {out_col}) is in no slot")))?;
    let (ly, lx) = (out_row % sh, out_col % sw);
    Ok(Provenance {
        slot,
        rows: ly * kh..(ly + 1) * kh,
        cols: lx * kw..(lx + 1) * kw,
    })
}
