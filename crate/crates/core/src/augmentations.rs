//! Per-view random augmentations: affine warp, color jitter, Gaussian noise.
//!
//! Every augmentation is linear in the pixel values once its random
//! parameters are drawn (the noise is an additive constant), followed by a
//! clamp to `[0, 1]`. The backward pass is therefore the transpose of the
//! forward map, masked where the clamp was active.

use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::canvas::PixelCanvas;
use crate::error::{Error, Result};

/// ITU-R BT.601 luma weights.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    pub affine_degrees: f64,
    pub affine_translate: (f64, f64),
    pub affine_scale: (f64, f64),
    pub affine_probability: f64,
    /// Value of pixels the affine map pulls in from outside the canvas.
    #[serde(default)]
    pub affine_fill: f64,
    pub jitter_brightness: f64,
    pub jitter_contrast: f64,
    pub jitter_saturation: f64,
    pub jitter_hue: f64,
    pub jitter_probability: f64,
    pub noise_std: f64,
    pub noise_probability: f64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            affine_degrees: 30.0,
            affine_translate: (0.1, 0.1),
            affine_scale: (0.7, 1.2),
            affine_probability: 1.0,
            affine_fill: 0.0,
            jitter_brightness: 0.4,
            jitter_contrast: 0.4,
            jitter_saturation: 0.4,
            jitter_hue: 0.1,
            jitter_probability: 1.0,
            noise_std: 0.1,
            noise_probability: 0.5,
        }
    }
}

impl AugmentationPolicy {
    /// A policy whose every draw is the identity transform.
    pub fn identity() -> Self {
        Self {
            affine_degrees: 0.0,
            affine_translate: (0.0, 0.0),
            affine_scale: (1.0, 1.0),
            affine_probability: 1.0,
            affine_fill: 0.0,
            jitter_brightness: 0.0,
            jitter_contrast: 0.0,
            jitter_saturation: 0.0,
            jitter_hue: 0.0,
            jitter_probability: 1.0,
            noise_std: 0.0,
            noise_probability: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("affine_probability", self.affine_probability),
            ("affine_fill", self.affine_fill),
            ("jitter_probability", self.jitter_probability),
            ("noise_probability", self.noise_probability),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        let (lo, hi) = self.affine_scale;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!(
                "affine_scale must satisfy 0 < min <= max, got ({lo}, {hi})"
            )));
        }
        let magnitudes = [
            ("affine_degrees", self.affine_degrees),
            ("affine_translate.0", self.affine_translate.0),
            ("affine_translate.1", self.affine_translate.1),
            ("jitter_brightness", self.jitter_brightness),
            ("jitter_contrast", self.jitter_contrast),
            ("jitter_saturation", self.jitter_saturation),
            ("jitter_hue", self.jitter_hue),
            ("noise_std", self.noise_std),
        ];
        for (name, m) in magnitudes {
            if !(m >= 0.0 && m.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {m}"
                )));
            }
        }
        if self.jitter_hue > 0.5 {
            return Err(Error::Config(format!(
                "jitter_hue is a fraction of a turn and must be <= 0.5, got {}",
                self.jitter_hue
            )));
        }
        Ok(())
    }
}

/// One concrete draw from an [`AugmentationPolicy`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampledTransform {
    pub affine_active: bool,
    /// Counter-clockwise rotation in degrees.
    pub rotation: f64,
    /// Shift as fractions of (width, height).
    pub translation: (f64, f64),
    pub scale: f64,
    pub fill: f64,
    pub jitter_active: bool,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Hue shift as a fraction of a full turn.
    pub hue: f64,
    pub noise_active: bool,
    pub noise_std: f64,
    pub noise_seed: u64,
}

impl SampledTransform {
    pub fn identity() -> Self {
        Self {
            affine_active: false,
            rotation: 0.0,
            translation: (0.0, 0.0),
            scale: 1.0,
            fill: 0.0,
            jitter_active: false,
            brightness: 1.0,
            contrast: 1.0,
            saturation: 1.0,
            hue: 0.0,
            noise_active: false,
            noise_std: 0.0,
            noise_seed: 0,
        }
    }

    fn affine_is_identity(&self) -> bool {
        !self.affine_active
            || (self.rotation == 0.0 && self.translation == (0.0, 0.0) && self.scale == 1.0)
    }

    fn jitter_is_identity(&self) -> bool {
        !self.jitter_active
            || (self.brightness == 1.0
                && self.contrast == 1.0
                && self.saturation == 1.0
                && self.hue == 0.0)
    }

    fn noise_is_identity(&self) -> bool {
        !self.noise_active || self.noise_std == 0.0
    }

    /// Checks that every parameter lies in the ranges `policy` can produce.
    pub fn within(&self, policy: &AugmentationPolicy) -> bool {
        let sym = |v: f64, m: f64| v >= -m && v <= m;
        let factor = |v: f64, m: f64| v >= 1.0 - m && v <= 1.0 + m;
        sym(self.rotation, policy.affine_degrees)
            && sym(self.translation.0, policy.affine_translate.0)
            && sym(self.translation.1, policy.affine_translate.1)
            && self.scale >= policy.affine_scale.0
            && self.scale <= policy.affine_scale.1
            && factor(self.brightness, policy.jitter_brightness)
            && factor(self.contrast, policy.jitter_contrast)
            && factor(self.saturation, policy.jitter_saturation)
            && sym(self.hue, policy.jitter_hue)
            && self.fill == policy.affine_fill
            && self.noise_std == policy.noise_std
    }
}

fn symmetric<R: Rng + ?Sized>(rng: &mut R, m: f64) -> f64 {
    rng.random_range(-m..=m)
}

/// Draws one transform. Every parameter is drawn regardless of the activation
/// flags, so the number of values consumed from `rng` is fixed.
pub fn sample_transform<R: Rng + ?Sized>(
    policy: &AugmentationPolicy,
    rng: &mut R,
) -> SampledTransform {
    let affine_active = rng.random_bool(policy.affine_probability);
    let rotation = symmetric(rng, policy.affine_degrees);
    let tx = symmetric(rng, policy.affine_translate.0);
    let ty = symmetric(rng, policy.affine_translate.1);
    let scale = rng.random_range(policy.affine_scale.0..=policy.affine_scale.1);

    let jitter_active = rng.random_bool(policy.jitter_probability);
    let brightness = 1.0 + symmetric(rng, policy.jitter_brightness);
    let contrast = 1.0 + symmetric(rng, policy.jitter_contrast);
    let saturation = 1.0 + symmetric(rng, policy.jitter_saturation);
    let hue = symmetric(rng, policy.jitter_hue);

    let noise_active = rng.random_bool(policy.noise_probability);
    let noise_seed = rng.next_u64();

    SampledTransform {
        affine_active,
        rotation,
        translation: (tx, ty),
        scale,
        fill: policy.affine_fill,
        jitter_active,
        brightness,
        contrast,
        saturation,
        hue,
        noise_active,
        noise_std: policy.noise_std,
        noise_seed,
    }
}

/// Four bilinear taps of one output pixel. Taps falling outside the source
/// grid carry weight zero and point at index 0; their summed weight goes to
/// `outside`, which multiplies the fill value.
#[derive(Clone, Copy, Debug)]
struct Taps {
    index: [u32; 4],
    weight: [f64; 4],
    outside: f64,
}

struct AffinePlan {
    taps: Vec<Taps>,
    fill: f64,
}

impl AffinePlan {
    /// Inverse-maps every output pixel centre through the transform. The
    /// forward map is `p' = c + s * R(theta) (p - c) + shift` with `R` the
    /// counter-clockwise rotation in y-down image coordinates.
    fn new(t: &SampledTransform, h: usize, w: usize) -> Self {
        let theta = t.rotation.to_radians();
        let (sin, cos) = theta.sin_cos();
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let (shift_x, shift_y) = (t.translation.0 * w as f64, t.translation.1 * h as f64);
        let inv_s = 1.0 / t.scale;
        let (hi, wi) = (h as isize, w as isize);
        let mut taps = Vec::with_capacity(h * w);
        for y in 0..h {
            let v = y as f64 - cy - shift_y;
            for x in 0..w {
                let u = x as f64 - cx - shift_x;
                let sx = (cos * u - sin * v) * inv_s + cx;
                let sy = (sin * u + cos * v) * inv_s + cy;
                let (fx0, fy0) = (sx.floor(), sy.floor());
                let (x0, y0) = (fx0 as isize, fy0 as isize);
                let (fx, fy) = (sx - fx0, sy - fy0);
                let cand = [
                    (x0, y0, (1.0 - fx) * (1.0 - fy)),
                    (x0 + 1, y0, fx * (1.0 - fy)),
                    (x0, y0 + 1, (1.0 - fx) * fy),
                    (x0 + 1, y0 + 1, fx * fy),
                ];
                let mut t = Taps {
                    index: [0; 4],
                    weight: [0.0; 4],
                    outside: 0.0,
                };
                for (k, (px, py, wgt)) in cand.into_iter().enumerate() {
                    if px >= 0 && py >= 0 && px < wi && py < hi {
                        t.index[k] = (py * wi + px) as u32;
                        t.weight[k] = wgt;
                    } else {
                        t.outside += wgt;
                    }
                }
                taps.push(t);
            }
        }
        Self { taps, fill: t.fill }
    }

    fn forward(&self, x: &PixelCanvas) -> PixelCanvas {
        let mut out = PixelCanvas::zeros_like(x);
        for ch in 0..x.channels() {
            let src = x.plane(ch);
            let dst = out.plane_mut(ch);
            for (o, t) in dst.iter_mut().zip(&self.taps) {
                *o = t.weight[0] * src[t.index[0] as usize]
                    + t.weight[1] * src[t.index[1] as usize]
                    + t.weight[2] * src[t.index[2] as usize]
                    + t.weight[3] * src[t.index[3] as usize]
                    + t.outside * self.fill;
            }
        }
        out
    }

    fn backward(&self, g: &PixelCanvas) -> PixelCanvas {
        let mut out = PixelCanvas::zeros_like(g);
        for ch in 0..g.channels() {
            let gsrc = g.plane(ch);
            let dst = out.plane_mut(ch);
            for (gv, t) in gsrc.iter().zip(&self.taps) {
                if *gv == 0.0 {
                    continue;
                }
                for k in 0..4 {
                    dst[t.index[k] as usize] += t.weight[k] * gv;
                }
            }
        }
        out
    }
}

type Mat3 = [[f64; 3]; 3];

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    m
}

fn mat_vec(a: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| a[i][0] * v[0] + a[i][1] * v[1] + a[i][2] * v[2])
}

fn mat_inverse(m: &Mat3) -> Mat3 {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let cof =
        |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    [
        [
            cof(1, 2, 1, 2) / det,
            -cof(0, 2, 1, 2) / det,
            cof(0, 1, 1, 2) / det,
        ],
        [
            -cof(1, 2, 0, 2) / det,
            cof(0, 2, 0, 2) / det,
            -cof(0, 1, 0, 2) / det,
        ],
        [
            cof(1, 2, 0, 1) / det,
            -cof(0, 2, 0, 1) / det,
            cof(0, 1, 0, 1) / det,
        ],
    ]
}

/// Saturation: blend each pixel with its own luma.
fn saturation_matrix(s: f64) -> Mat3 {
    let mut m = [[0.0; 3]; 3];
    for (i, row) in m.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (1.0 - s) * LUMA[j] + if i == j { s } else { 0.0 };
        }
    }
    m
}

/// Hue: rotate the chroma plane of YIQ by `turns` of a full circle, leaving
/// luma untouched. Smooth in both the pixels and the shift.
fn hue_matrix(turns: f64) -> Mat3 {
    let to_yiq: Mat3 = [LUMA, [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]];
    let (sin, cos) = (turns * std::f64::consts::TAU).sin_cos();
    let rot: Mat3 = [[1.0, 0.0, 0.0], [0.0, cos, -sin], [0.0, sin, cos]];
    mat_mul(&mat_inverse(&to_yiq), &mat_mul(&rot, &to_yiq))
}

/// Color jitter collapsed into `y = A x + offset * k` per pixel, where
/// `offset = (1 - contrast) * mean_luma(brightness * x)` and `k = H S 1`.
struct JitterPlan {
    channels: usize,
    matrix: Mat3,
    brightness: f64,
    contrast: f64,
    offset_dir: [f64; 3],
}

impl JitterPlan {
    fn new(t: &SampledTransform, channels: usize) -> Self {
        let color = if channels == 3 {
            mat_mul(&hue_matrix(t.hue), &saturation_matrix(t.saturation))
        } else {
            [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
        };
        let bc = t.brightness * t.contrast;
        let matrix = color.map(|row| row.map(|v| v * bc));
        Self {
            channels,
            matrix,
            brightness: t.brightness,
            contrast: t.contrast,
            offset_dir: mat_vec(&color, [1.0; 3]),
        }
    }

    fn luma_weights(&self) -> [f64; 3] {
        if self.channels == 3 {
            LUMA
        } else {
            [1.0, 0.0, 0.0]
        }
    }

    fn mean_luma(&self, x: &PixelCanvas) -> f64 {
        let n = x.plane_len() as f64;
        if self.channels == 3 {
            (0..3)
                .map(|c| LUMA[c] * x.plane(c).iter().sum::<f64>())
                .sum::<f64>()
                / n
        } else {
            x.plane(0).iter().sum::<f64>() / n
        }
    }

    fn forward(&self, x: &PixelCanvas) -> PixelCanvas {
        let offset = (1.0 - self.contrast) * self.brightness * self.mean_luma(x);
        let mut out = PixelCanvas::zeros_like(x);
        if self.channels == 3 {
            let n = x.plane_len();
            let (src, dst) = (x.values(), out.values_mut());
            let m = &self.matrix;
            let b = self.offset_dir.map(|d| offset * d);
            let (r, rest) = dst.split_at_mut(n);
            let (g, bl) = rest.split_at_mut(n);
            for p in 0..n {
                let (x0, x1, x2) = (src[p], src[n + p], src[2 * n + p]);
                r[p] = m[0][0] * x0 + m[0][1] * x1 + m[0][2] * x2 + b[0];
                g[p] = m[1][0] * x0 + m[1][1] * x1 + m[1][2] * x2 + b[1];
                bl[p] = m[2][0] * x0 + m[2][1] * x1 + m[2][2] * x2 + b[2];
            }
        } else {
            let a = self.brightness * self.contrast;
            for (o, v) in out.values_mut().iter_mut().zip(x.values()) {
                *o = a * v + offset;
            }
        }
        out
    }

    fn backward(&self, g: &PixelCanvas) -> PixelCanvas {
        let n = g.plane_len();
        let mut out = PixelCanvas::zeros_like(g);
        let grad_offset: f64;
        if self.channels == 3 {
            let (src, dst) = (g.values(), out.values_mut());
            let (m, d) = (&self.matrix, &self.offset_dir);
            let (r, rest) = dst.split_at_mut(n);
            let (g, bl) = rest.split_at_mut(n);
            let mut acc = 0.0;
            for p in 0..n {
                let (g0, g1, g2) = (src[p], src[n + p], src[2 * n + p]);
                r[p] = m[0][0] * g0 + m[1][0] * g1 + m[2][0] * g2;
                g[p] = m[0][1] * g0 + m[1][1] * g1 + m[2][1] * g2;
                bl[p] = m[0][2] * g0 + m[1][2] * g1 + m[2][2] * g2;
                acc += d[0] * g0 + d[1] * g1 + d[2] * g2;
            }
            grad_offset = acc;
        } else {
            let a = self.brightness * self.contrast;
            for (o, v) in out.values_mut().iter_mut().zip(g.values()) {
                *o = a * v;
            }
            grad_offset = g.values().iter().sum();
        }
        // offset depends on x through the mean luma
        let k = grad_offset * (1.0 - self.contrast) * self.brightness / n as f64;
        if k != 0.0 {
            let w = self.luma_weights();
            for (c, wc) in w.iter().enumerate().take(self.channels.min(3)) {
                for v in out.plane_mut(c) {
                    *v += k * wc;
                }
            }
        }
        out
    }
}

fn noise_field(t: &SampledTransform, len: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(t.noise_seed);
    let normal =
        Normal::new(0.0, t.noise_std).expect("noise_std validated as finite and non-negative");
    (0..len).map(|_| normal.sample(&mut rng)).collect()
}

/// Everything needed to push a gradient from an augmented view back to the
/// source canvas.
pub struct TransformPullback {
    affine: Option<AffinePlan>,
    jitter: Option<JitterPlan>,
    /// `true` where the final clamp cut the value off.
    clamped: Vec<bool>,
}

impl TransformPullback {
    pub fn backward(&self, grad_out: &PixelCanvas) -> PixelCanvas {
        let mut g = grad_out.clone();
        for (v, &cut) in g.values_mut().iter_mut().zip(&self.clamped) {
            if cut {
                *v = 0.0;
            }
        }
        if let Some(j) = &self.jitter {
            g = j.backward(&g);
        }
        if let Some(a) = &self.affine {
            g = a.backward(&g);
        }
        g
    }
}

/// Applies affine, then color jitter, then noise, then clamps to `[0, 1]`.
pub fn apply_transform_with_pullback(
    x: &PixelCanvas,
    t: &SampledTransform,
) -> (PixelCanvas, TransformPullback) {
    let (_, h, w) = x.shape();
    let affine = (!t.affine_is_identity()).then(|| AffinePlan::new(t, h, w));
    let mut y = match &affine {
        Some(a) => a.forward(x),
        None => x.clone(),
    };
    let jitter = (!t.jitter_is_identity()).then(|| JitterPlan::new(t, x.channels()));
    if let Some(j) = &jitter {
        y = j.forward(&y);
    }
    if !t.noise_is_identity() {
        for (v, n) in y.values_mut().iter_mut().zip(noise_field(t, x.len())) {
            *v += n;
        }
    }
    let clamped = y
        .values_mut()
        .iter_mut()
        .map(|v| {
            let cut = *v < 0.0 || *v > 1.0;
            *v = v.clamp(0.0, 1.0);
            cut
        })
        .collect();
    (
        y,
        TransformPullback {
            affine,
            jitter,
            clamped,
        },
    )
}

pub fn apply_transform(x: &PixelCanvas, t: &SampledTransform) -> PixelCanvas {
    apply_transform_with_pullback(x, t).0
}

/// Views of one canvas together with the records needed to replay them.
#[derive(Clone, Debug)]
pub struct AugmentedBatch {
    pub views: Vec<PixelCanvas>,
    pub transforms: Vec<SampledTransform>,
    /// Seed of the substream each transform was drawn from.
    pub view_seeds: Vec<u64>,
}

/// Draws `b` substream seeds from `rng` and samples one transform per seed.
pub fn sample_batch_transforms<R: Rng + ?Sized>(
    b: usize,
    policy: &AugmentationPolicy,
    rng: &mut R,
) -> Result<(Vec<u64>, Vec<SampledTransform>)> {
    if b == 0 {
        return Err(Error::Usage(
            "augmentation batch size must be at least 1".into(),
        ));
    }
    let seeds: Vec<u64> = (0..b).map(|_| rng.next_u64()).collect();
    let transforms = seeds
        .iter()
        .map(|&s| transform_from_seed(policy, s))
        .collect();
    Ok((seeds, transforms))
}

pub fn transform_from_seed(policy: &AugmentationPolicy, seed: u64) -> SampledTransform {
    sample_transform(policy, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn augment_batch<R: Rng + ?Sized>(
    x: &PixelCanvas,
    b: usize,
    policy: &AugmentationPolicy,
    rng: &mut R,
) -> Result<AugmentedBatch> {
    let (view_seeds, transforms) = sample_batch_transforms(b, policy, rng)?;
    let views = transforms.iter().map(|t| apply_transform(x, t)).collect();
    Ok(AugmentedBatch {
        views,
        transforms,
        view_seeds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(c: usize, h: usize, w: usize) -> PixelCanvas {
        let n = c * h * w;
        PixelCanvas::from_vec(
            c,
            h,
            w,
            (0..n)
                .map(|i| 0.05 + 0.9 * ((i * 37) % n) as f64 / n as f64)
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn default_policy_matches_published_settings() {
        let p = AugmentationPolicy::default();
        assert_eq!(p.affine_degrees, 30.0);
        assert_eq!(p.affine_translate, (0.1, 0.1));
        assert_eq!(p.affine_scale, (0.7, 1.2));
        assert_eq!(
            (
                p.jitter_brightness,
                p.jitter_contrast,
                p.jitter_saturation,
                p.jitter_hue
            ),
            (0.4, 0.4, 0.4, 0.1)
        );
        assert_eq!(
            (
                p.affine_probability,
                p.jitter_probability,
                p.noise_probability
            ),
            (1.0, 1.0, 0.5)
        );
        p.validate().unwrap();
    }

    #[test]
    fn validation_rejects_bad_policies() {
        let p = AugmentationPolicy {
            noise_probability: 1.5,
            ..AugmentationPolicy::default()
        };
        assert!(p.validate().is_err());
        let p = AugmentationPolicy {
            affine_scale: (1.2, 0.7),
            ..AugmentationPolicy::default()
        };
        assert!(p.validate().is_err());
        let p = AugmentationPolicy {
            jitter_contrast: -0.1,
            ..AugmentationPolicy::default()
        };
        assert!(p.validate().is_err());
    }

    #[test]
    fn identity_policy_gives_identity_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = sample_transform(&AugmentationPolicy::identity(), &mut rng);
        let x = ramp(3, 5, 6);
        assert_eq!(apply_transform(&x, &t), x);
        assert_eq!(apply_transform(&x, &SampledTransform::identity()), x);
    }

    #[test]
    fn sampling_is_deterministic_and_in_range() {
        let policy = AugmentationPolicy::default();
        let a = sample_transform(&policy, &mut ChaCha8Rng::seed_from_u64(11));
        let b = sample_transform(&policy, &mut ChaCha8Rng::seed_from_u64(11));
        assert_eq!(a, b);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..500 {
            assert!(sample_transform(&policy, &mut rng).within(&policy));
        }
    }

    #[test]
    fn quarter_turn_of_2x2_by_hand() {
        // [[a, b], [c, d]] rotated a quarter turn counter-clockwise is [[b, d], [a, c]]
        let x = PixelCanvas::from_vec(1, 2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let t = SampledTransform {
            affine_active: true,
            rotation: 90.0,
            ..SampledTransform::identity()
        };
        let y = apply_transform(&x, &t);
        for (got, want) in y.values().iter().zip([0.2, 0.4, 0.1, 0.3]) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn translation_shifts_and_zero_fills() {
        let x = PixelCanvas::from_vec(1, 1, 4, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let t = SampledTransform {
            affine_active: true,
            translation: (0.25, 0.0),
            ..SampledTransform::identity()
        };
        let y = apply_transform(&x, &t);
        let expect = [0.0, 0.1, 0.2, 0.3];
        for (got, want) in y.values().iter().zip(expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn fill_value_enters_where_the_map_leaves_the_canvas() {
        let x = PixelCanvas::from_vec(1, 1, 4, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let t = SampledTransform {
            affine_active: true,
            translation: (0.375, 0.0),
            fill: 0.9,
            ..SampledTransform::identity()
        };
        let (y, pb) = apply_transform_with_pullback(&x, &t);
        let expect = [0.9, 0.5, 0.15, 0.25];
        for (got, want) in y.values().iter().zip(expect) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
        let g = pb.backward(&PixelCanvas::filled(1, 1, 4, 1.0));
        assert_eq!(g.values(), &[1.0, 1.0, 0.5, 0.0]);
    }

    #[test]
    fn zero_std_noise_is_identity() {
        let x = ramp(3, 4, 4);
        let t = SampledTransform {
            noise_active: true,
            noise_std: 0.0,
            noise_seed: 99,
            ..SampledTransform::identity()
        };
        assert_eq!(apply_transform(&x, &t), x);
    }

    #[test]
    fn hue_rotation_preserves_gray_and_luma() {
        let m = hue_matrix(0.37);
        let g = mat_vec(&m, [0.4; 3]);
        for v in g {
            assert!((v - 0.4).abs() < 1e-12);
        }
        let rgb = [0.2, 0.7, 0.5];
        let out = mat_vec(&m, rgb);
        let luma = |p: [f64; 3]| (0..3).map(|i| LUMA[i] * p[i]).sum::<f64>();
        assert!((luma(out) - luma(rgb)).abs() < 1e-12);
        // a full turn is the identity
        let full = mat_vec(&hue_matrix(1.0), rgb);
        for (a, b) in full.iter().zip(rgb) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn fd_check(t: &SampledTransform, x: &PixelCanvas) {
        // gradient of mean(output) against central differences
        let (y, pb) = apply_transform_with_pullback(x, t);
        let g = pb.backward(&PixelCanvas::filled(
            y.channels(),
            y.height(),
            y.width(),
            1.0 / y.len() as f64,
        ));
        let h = 1e-6;
        for i in 0..x.len() {
            let mut p = x.clone();
            p.values_mut()[i] += h;
            let mut m = x.clone();
            m.values_mut()[i] -= h;
            let fd = (apply_transform(&p, t).mean() - apply_transform(&m, t).mean()) / (2.0 * h);
            let an = g.values()[i];
            let denom = fd.abs().max(an.abs()).max(1e-8);
            assert!(
                (fd - an).abs() / denom < 1e-3 || (fd - an).abs() < 1e-9,
                "entry {i}: fd {fd} analytic {an}"
            );
        }
    }

    #[test]
    fn affine_gradient_matches_finite_differences() {
        let t = SampledTransform {
            affine_active: true,
            rotation: 17.0,
            translation: (0.07, -0.05),
            scale: 0.9,
            ..SampledTransform::identity()
        };
        fd_check(&t, &ramp(3, 6, 6));
    }

    #[test]
    fn jitter_gradient_matches_finite_differences() {
        let t = SampledTransform {
            jitter_active: true,
            brightness: 1.1,
            contrast: 0.8,
            saturation: 1.2,
            hue: 0.04,
            ..SampledTransform::identity()
        };
        // mid-range input keeps the output away from the clamp
        let x = ramp(3, 5, 5).map(|v| 0.35 + 0.3 * v);
        fd_check(&t, &x);
    }

    #[test]
    fn noise_gradient_matches_finite_differences() {
        let t = SampledTransform {
            noise_active: true,
            noise_std: 0.01,
            noise_seed: 5,
            ..SampledTransform::identity()
        };
        let x = ramp(3, 4, 4).map(|v| 0.25 + 0.5 * v);
        fd_check(&t, &x);
    }

    #[test]
    fn batch_views_differ_and_replay() {
        let x = ramp(3, 8, 8);
        let policy = AugmentationPolicy::default();
        let a = augment_batch(&x, 8, &policy, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = augment_batch(&x, 8, &policy, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a.views, b.views);
        let distinct_pairs = (0..8)
            .flat_map(|i| (i + 1..8).map(move |j| (i, j)))
            .filter(|&(i, j)| a.views[i] != a.views[j])
            .count();
        assert!(distinct_pairs >= 1);
        for (seed, view) in a.view_seeds.iter().zip(&a.views) {
            assert_eq!(
                &apply_transform(&x, &transform_from_seed(&policy, *seed)),
                view
            );
        }
        assert!(augment_batch(&x, 0, &policy, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn zero_policy_batch_of_one_is_copy() {
        let x = ramp(3, 4, 4);
        let batch = augment_batch(
            &x,
            1,
            &AugmentationPolicy::identity(),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert_eq!(batch.views, vec![x]);
    }
}
