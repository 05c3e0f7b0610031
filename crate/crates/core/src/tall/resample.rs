use crate::error::{Result, TallError};
use crate::image::Image;

/// How a `(extent, factor)` pair is resampled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Resample {
    /// Non-overlapping `k x k` box average (identity when both are 1).
    Box { kh: usize, kw: usize },
    Bilinear { out_h: usize, out_w: usize },
}

fn integer_factor(f: f64) -> Option<usize> {
    (f.fract() == 0.0 && f >= 1.0).then_some(f as usize)
}

pub fn output_extent(extent: usize, factor: f64) -> Result<usize> {
    if !(factor.is_finite() && factor >= 1.0) {
        return Err(TallError::config(format!("downsample factor must be >= 1, got {factor}")));
    }
    let out = match integer_factor(factor) {
        Some(k) if extent.is_multiple_of(k) => extent / k,
        _ => (extent as f64 / factor).round() as usize,
    };
    if out < 1 {
        return Err(TallError::config(format!(
            "downsampling {extent} px by {factor} leaves no pixels"
        )));
    }
    Ok(out)
}

/// Picks box averaging when both factors are integers that tile the frame,
/// bilinear otherwise.
pub fn plan(height: usize, width: usize, factor: [f64; 2]) -> Result<Resample> {
    let out_h = output_extent(height, factor[0])?;
    let out_w = output_extent(width, factor[1])?;
    match (integer_factor(factor[0]), integer_factor(factor[1])) {
        (Some(kh), Some(kw)) if height.is_multiple_of(kh) && width.is_multiple_of(kw) => Ok(Resample::Box { kh, kw }),
        _ => Ok(Resample::Bilinear { out_h, out_w }),
    }
}

pub fn downsample(frame: &Image, factor: [f64; 2]) -> Result<Image> {
    let p = plan(frame.height, frame.width, factor)?;
    let (oh, ow) = match p {
        Resample::Box { kh, kw } => (frame.height / kh, frame.width / kw),
        Resample::Bilinear { out_h, out_w } => (out_h, out_w),
    };
    let mut out = Image::zeros(frame.channels, oh, ow);
    for c in 0..frame.channels {
        let dst = &mut out.data[c * oh * ow..(c + 1) * oh * ow];
        resample_plane(frame.plane(c), frame.height, frame.width, p, dst, ow, &mut Vec::new());
    }
    Ok(out)
}

/// Resamples one plane into `dst`, whose rows are `dst_stride` apart.
/// `scratch` is reused between calls to avoid per-row allocation.
pub(crate) fn resample_plane(
    src: &[f32],
    h: usize,
    w: usize,
    plan: Resample,
    dst: &mut [f32],
    dst_stride: usize,
    scratch: &mut Vec<f32>,
) {
    match plan {
        Resample::Box { kh: 1, kw: 1 } => {
            for (y, row) in src.chunks_exact(w).enumerate() {
                dst[y * dst_stride..y * dst_stride + w].copy_from_slice(row);
            }
        }
        Resample::Box { kh, kw } => box_plane(src, h, w, kh, kw, dst, dst_stride, scratch),
        Resample::Bilinear { out_h, out_w } => {
            bilinear_plane(src, h, w, out_h, out_w, dst, dst_stride)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn box_plane(
    src: &[f32],
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    dst: &mut [f32],
    dst_stride: usize,
    acc: &mut Vec<f32>,
) {
    let (oh, ow) = (h / kh, w / kw);
    let inv = 1.0 / (kh * kw) as f32;
    acc.clear();
    acc.resize(w, 0.0);
    for oy in 0..oh {
        let rows = &src[oy * kh * w..(oy + 1) * kh * w];
        acc.copy_from_slice(&rows[..w]);
        for row in rows.chunks_exact(w).skip(1) {
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        let out_row = &mut dst[oy * dst_stride..oy * dst_stride + ow];
        if kw == 2 {
            for (o, pair) in out_row.iter_mut().zip(acc.chunks_exact(2)) {
                *o = (pair[0] + pair[1]) * inv;
            }
        } else {
            for (o, block) in out_row.iter_mut().zip(acc.chunks_exact(kw)) {
                *o = block.iter().sum::<f32>() * inv;
            }
        }
    }
}

fn bilinear_plane(
    src: &[f32],
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    dst: &mut [f32],
    dst_stride: usize,
) {
    let sy = h as f32 / oh as f32;
    let sx = w as f32 / ow as f32;
    let coord = |o: usize, scale: f32, n: usize| {
        let p = ((o as f32 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f32);
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, p - i0 as f32)
    };
    for oy in 0..oh {
        let (y0, y1, fy) = coord(oy, sy, h);
        for ox in 0..ow {
            let (x0, x1, fx) = coord(ox, sx, w);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            dst[oy * dst_stride + ox] = top * (1.0 - fy) + bot * fy;
        }
    }
}
