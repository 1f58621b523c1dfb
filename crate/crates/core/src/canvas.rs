//! Dense channel-major image buffer used as the optimization variable.
//!
//! Values are kept in `f64` throughout; rounding to 8 bits happens only when
//! an image is serialized. The same type doubles as a gradient buffer, so the
//! `[0, 1]` range is not enforced on construction. The inversion loop enforces
//! it by projection after every step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelCanvas {
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl PixelCanvas {
    pub fn from_vec(
        channels: usize,
        height: usize,
        width: usize,
        values: Vec<f64>,
    ) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "canvas dimensions must be positive, got {channels}x{height}x{width}"
            )));
        }
        if values.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "expected {} values for a {channels}x{height}x{width} canvas, got {}",
                channels * height * width,
                values.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            values,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        assert!(channels > 0 && height > 0 && width > 0, "empty canvas");
        Self {
            channels,
            height,
            width,
            values: vec![value; channels * height * width],
        }
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self::filled(other.channels, other.height, other.width, 0.0)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape() == other.shape()
    }

    /// Side length for square canvases.
    pub fn resolution(&self) -> Option<usize> {
        (self.height == self.width).then_some(self.height)
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.values[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.index(c, y, x);
        self.values[i] = v;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.values[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.values[c * n..(c + 1) * n]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            values: self.values.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        self.map(|v| v * factor)
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn add_scaled(&mut self, other: &Self, factor: f64) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += factor * b;
        }
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.values {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn is_in_unit_range(&self) -> bool {
        self.values.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn dot(&self, other: &Self) -> f64 {
        debug_assert!(self.same_shape(other));
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn resize_bilinear(&self, height: usize, width: usize) -> Self {
        ResizePlan::new(self.height, self.width, height, width).apply(self)
    }
}

/// One bilinear tap along an axis: `out = w0 * in[i0] + w1 * in[i1]`.
#[derive(Clone, Copy, Debug)]
struct Tap {
    i0: usize,
    i1: usize,
    w0: f64,
    w1: f64,
}

fn axis_taps(src: usize, dst: usize) -> Vec<Tap> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            // half-pixel centres, clamped at the border
            let s = ((d as f64 + 0.5) * ratio - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            let frac = s - i0 as f64;
            Tap {
                i0,
                i1,
                w0: 1.0 - frac,
                w1: frac,
            }
        })
        .collect()
}

/// Separable bilinear resampling between two fixed grid sizes.
///
/// The map is linear in the pixel values, so the backward pass is the exact
/// transpose (`adjoint`) of the forward pass.
#[derive(Clone, Debug)]
pub struct ResizePlan {
    src: (usize, usize),
    dst: (usize, usize),
    rows: Vec<Tap>,
    cols: Vec<Tap>,
}

impl ResizePlan {
    pub fn new(src_h: usize, src_w: usize, dst_h: usize, dst_w: usize) -> Self {
        Self {
            src: (src_h, src_w),
            dst: (dst_h, dst_w),
            rows: axis_taps(src_h, dst_h),
            cols: axis_taps(src_w, dst_w),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.src == self.dst
    }

    pub fn apply(&self, input: &PixelCanvas) -> PixelCanvas {
        assert_eq!(
            (input.height, input.width),
            self.src,
            "resize plan/input mismatch"
        );
        if self.is_identity() {
            return input.clone();
        }
        let (dh, dw) = self.dst;
        let mut out = PixelCanvas::filled(input.channels, dh, dw, 0.0);
        for c in 0..input.channels {
            let src = input.plane(c);
            let dst = out.plane_mut(c);
            for (y, ry) in self.rows.iter().enumerate() {
                let r0 = &src[ry.i0 * self.src.1..(ry.i0 + 1) * self.src.1];
                let r1 = &src[ry.i1 * self.src.1..(ry.i1 + 1) * self.src.1];
                for (x, cx) in self.cols.iter().enumerate() {
                    let top = cx.w0 * r0[cx.i0] + cx.w1 * r0[cx.i1];
                    let bottom = cx.w0 * r1[cx.i0] + cx.w1 * r1[cx.i1];
                    dst[y * dw + x] = ry.w0 * top + ry.w1 * bottom;
                }
            }
        }
        out
    }

    /// Transpose of [`apply`](Self::apply): maps a gradient on the output grid
    /// back to the input grid.
    pub fn adjoint(&self, grad_out: &PixelCanvas) -> PixelCanvas {
        assert_eq!(
            (grad_out.height, grad_out.width),
            self.dst,
            "resize plan/gradient mismatch"
        );
        if self.is_identity() {
            return grad_out.clone();
        }
        let (sh, sw) = self.src;
        let dw = self.dst.1;
        let mut grad_in = PixelCanvas::filled(grad_out.channels, sh, sw, 0.0);
        for c in 0..grad_out.channels {
            let g = grad_out.plane(c);
            let gi = grad_in.plane_mut(c);
            for (y, ry) in self.rows.iter().enumerate() {
                for (x, cx) in self.cols.iter().enumerate() {
                    let v = g[y * dw + x];
                    if v == 0.0 {
                        continue;
                    }
                    gi[ry.i0 * sw + cx.i0] += ry.w0 * cx.w0 * v;
                    gi[ry.i0 * sw + cx.i1] += ry.w0 * cx.w1 * v;
                    gi[ry.i1 * sw + cx.i0] += ry.w1 * cx.w0 * v;
                    gi[ry.i1 * sw + cx.i1] += ry.w1 * cx.w1 * v;
                }
            }
        }
        grad_in
    }
}
