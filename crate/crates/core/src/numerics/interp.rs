//! Separable resampling kernels.
//!
//! Both resizers use half-pixel centers: output index `o` maps to source
//! coordinate `(o + 0.5) * src / dst - 0.5`. Out-of-range taps are clamped to
//! the border.

use super::real::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Catmull-Rom parameter of the cubic convolution kernel.
pub const BICUBIC_A: f64 = -0.5;

/// Cubic convolution kernel evaluated at offset `t`.
pub fn cubic_kernel(t: f64) -> f64 {
    let a = BICUBIC_A;
    let x = t.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Row-major `[dst × src]` matrix of bicubic interpolation weights.
pub fn bicubic_weights(src: usize, dst: usize) -> Vec<f64> {
    let mut w = vec![0.0; dst * src];
    let scale = src as f64 / dst as f64;
    let last = src as isize - 1;
    for o in 0..dst {
        let x = (o as f64 + 0.5) * scale - 0.5;
        let x0 = x.floor();
        let t = x - x0;
        for k in -1isize..=2 {
            let idx = (x0 as isize + k).clamp(0, last) as usize;
            w[o * src + idx] += cubic_kernel(t - k as f64);
        }
    }
    w
}

/// Precomputed separable weights for resizing an `[H×W×D]` grid.
#[derive(Clone, Debug)]
pub(crate) struct ResizePlan<T> {
    pub src: (usize, usize),
    pub dst: (usize, usize),
    pub channels: usize,
    wy: Vec<T>,
    wx: Vec<T>,
}

impl<T: Real> ResizePlan<T> {
    pub fn bicubic(src: (usize, usize), dst: (usize, usize), channels: usize) -> Result<Self> {
        if src.0 < 2 || src.1 < 2 {
            return Err(Error::InvalidShape {
                op: "bicubic_resize_2d",
                shape: vec![src.0, src.1, channels],
                reason: "source extents must be at least 2".into(),
            });
        }
        if dst.0 == 0 || dst.1 == 0 {
            return Err(Error::invalid(format!(
                "bicubic_resize_2d: degenerate target {}x{}",
                dst.0, dst.1
            )));
        }
        let cast = |v: Vec<f64>| v.into_iter().map(T::from_f64_lossy).collect();
        Ok(Self {
            src,
            dst,
            channels,
            wy: cast(bicubic_weights(src.0, dst.0)),
            wx: cast(bicubic_weights(src.1, dst.1)),
        })
    }

    pub fn apply(&self, x: &[T]) -> Vec<T> {
        let ((h, w), (oh, ow), d) = (self.src, self.dst, self.channels);
        // Resize along x: [h, w, d] -> [h, ow, d].
        let mut tmp = vec![T::zero(); h * ow * d];
        for y in 0..h {
            for ox in 0..ow {
                let out = &mut tmp[(y * ow + ox) * d..(y * ow + ox + 1) * d];
                for sx in 0..w {
                    let wt = self.wx[ox * w + sx];
                    if wt == T::zero() {
                        continue;
                    }
                    let src = &x[(y * w + sx) * d..(y * w + sx + 1) * d];
                    for (o, &v) in out.iter_mut().zip(src) {
                        *o = *o + wt * v;
                    }
                }
            }
        }
        // Resize along y: [h, ow, d] -> [oh, ow, d].
        let mut out = vec![T::zero(); oh * ow * d];
        for oy in 0..oh {
            for sy in 0..h {
                let wt = self.wy[oy * h + sy];
                if wt == T::zero() {
                    continue;
                }
                let src = &tmp[sy * ow * d..(sy + 1) * ow * d];
                let dst = &mut out[oy * ow * d..(oy + 1) * ow * d];
                for (o, &v) in dst.iter_mut().zip(src) {
                    *o = *o + wt * v;
                }
            }
        }
        out
    }

    /// Adjoint of [`apply`](Self::apply): maps an output-shaped gradient back
    /// onto the source grid.
    pub fn apply_transpose(&self, g: &[T]) -> Vec<T> {
        let ((h, w), (oh, ow), d) = (self.src, self.dst, self.channels);
        let mut tmp = vec![T::zero(); h * ow * d];
        for oy in 0..oh {
            for sy in 0..h {
                let wt = self.wy[oy * h + sy];
                if wt == T::zero() {
                    continue;
                }
                let src = &g[oy * ow * d..(oy + 1) * ow * d];
                let dst = &mut tmp[sy * ow * d..(sy + 1) * ow * d];
                for (o, &v) in dst.iter_mut().zip(src) {
                    *o = *o + wt * v;
                }
            }
        }
        let mut out = vec![T::zero(); h * w * d];
        for y in 0..h {
            for ox in 0..ow {
                let src = &tmp[(y * ow + ox) * d..(y * ow + ox + 1) * d];
                for sx in 0..w {
                    let wt = self.wx[ox * w + sx];
                    if wt == T::zero() {
                        continue;
                    }
                    let dst = &mut out[(y * w + sx) * d..(y * w + sx + 1) * d];
                    for (o, &v) in dst.iter_mut().zip(src) {
                        *o = *o + wt * v;
                    }
                }
            }
        }
        out
    }
}

/// Channelwise bicubic resize of an `[H×W×D]` grid to `[H'×W'×D]`.
pub fn bicubic_resize_2d<T: Real>(grid: &Tensor<T>, target: (usize, usize)) -> Result<Tensor<T>> {
    grid.ensure_rank("bicubic_resize_2d", 3)?;
    let s = grid.shape();
    let plan = ResizePlan::bicubic((s[0], s[1]), target, s[2])?;
    Tensor::new(vec![target.0, target.1, s[2]], plan.apply(grid.data()))
}

/// Bilinear sample of an interleaved `[h×w×c]` raster at continuous
/// coordinates, clamping to the border.
pub fn bilinear_sample(
    data: &[f32],
    width: usize,
    height: usize,
    channels: usize,
    x: f64,
    y: f64,
    out: &mut [f32],
) {
    let x = x.clamp(0.0, (width - 1) as f64);
    let y = y.clamp(0.0, (height - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let fx = (x - x0 as f64) as f32;
    let fy = (y - y0 as f64) as f32;
    let px = |xx: usize, yy: usize, c: usize| data[(yy * width + xx) * channels + c];
    for (c, o) in out.iter_mut().enumerate().take(channels) {
        let top = px(x0, y0, c) * (1.0 - fx) + px(x1, y0, c) * fx;
        let bottom = px(x0, y1, c) * (1.0 - fx) + px(x1, y1, c) * fx;
        *o = top * (1.0 - fy) + bottom * fy;
    }
}
