use std::io::Write;
use std::path::Path;

use crate::error::{Result, TallError};

/// Planar `C x H x W` image with `f32` samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Image {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Image {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(TallError::shape(
                "image",
                &[channels, height, width],
                &[data.len()],
            ));
        }
        Ok(Image {
            channels,
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn same_geometry(&self, other: &Image) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    /// Writes a binary PPM (3 channels) or PGM (1 channel), clamping to [0, 1].
    pub fn write_pnm(&self, path: &Path) -> Result<()> {
        let magic = match self.channels {
            1 => "P5",
            3 => "P6",
            c => return Err(TallError::config(format!("cannot write {c}-channel image as PNM"))),
        };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    let v = self.get(c, y, x).clamp(0.0, 1.0);
                    out.push((v * 255.0).round() as u8);
                }
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| TallError::io(path, e))?;
        f.write_all(&out).map_err(|e| TallError::io(path, e))
    }
}
