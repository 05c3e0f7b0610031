use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TallError};
use crate::image::Image;

/// One `size x size` square zeroed at column `x`, row `y` in every frame of a clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub size: usize,
    pub x: usize,
    pub y: usize,
}

impl MaskSpec {
    pub const NONE: MaskSpec = MaskSpec { size: 0, x: 0, y: 0 };

    pub fn is_noop(&self) -> bool {
        self.size == 0
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        self.size > 0
            && (self.y..self.y + self.size).contains(&y)
            && (self.x..self.x + self.size).contains(&x)
    }
}

/// Draws a mask position uniformly over the placements that keep the square
/// inside an `height x width` frame.
pub fn draw_mask<R: Rng + ?Sized>(rng: &mut R, height: usize, width: usize, size: usize) -> Result<MaskSpec> {
    if size > height.min(width) {
        return Err(TallError::config(format!(
            "mask size {size} exceeds frame extent {height}x{width}"
        )));
    }
    if size == 0 {
        return Ok(MaskSpec::NONE);
    }
    let x = rng.random_range(0..=width - size);
    let y = rng.random_range(0..=height - size);
    Ok(MaskSpec { size, x, y })
}

pub fn apply_mask(frame: &Image, mask: &MaskSpec) -> Result<Image> {
    let mut out = frame.clone();
    apply_mask_inplace(&mut out, mask)?;
    Ok(out)
}

pub fn apply_mask_inplace(frame: &mut Image, mask: &MaskSpec) -> Result<()> {
    if mask.is_noop() {
        return Ok(());
    }
    if mask.x + mask.size > frame.width || mask.y + mask.size > frame.height {
        return Err(TallError::shape(
            "apply_mask",
            &[frame.height, frame.width],
            &[mask.y + mask.size, mask.x + mask.size],
        ));
    }
    for c in 0..frame.channels {
        for y in mask.y..mask.y + mask.size {
            let start = frame.index(c, y, mask.x);
            frame.data[start..start + mask.size].fill(0.0);
        }
    }
    Ok(())
}
