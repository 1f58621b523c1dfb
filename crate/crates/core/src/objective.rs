//! The scalar objective minimized during inversion.
//!
//! `total = -similarity + alpha * tv + beta * l1`, where `similarity` is the
//! mean cosine between the encoder's embedding of each augmented view and the
//! prompt embedding. TV is anisotropic and, like L1, averaged over all
//! `C * H * W` entries so the weights stay comparable when the resolution
//! schedule changes the canvas size.

use serde::{Deserialize, Serialize};

use crate::augmentations::{apply_transform_with_pullback, SampledTransform};
use crate::canvas::PixelCanvas;
use crate::encoders::DualEncoder;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain(
                "embedding contains non-finite entries".into(),
            ));
        }
        Ok(Self(values))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self(self.0.iter().map(|v| v * factor).collect())
    }

    /// Unit-normalized copy. Zero vectors are a domain error.
    pub fn normalized(&self) -> Result<Self> {
        let n = self.norm();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::Domain(
                "cannot normalize a zero-norm embedding".into(),
            ));
        }
        Ok(self.scaled(1.0 / n))
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(e: EmbeddingVector) -> Self {
        e.0
    }
}

fn check_pair(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<(f64, f64)> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "cosine similarity between vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Domain(
            "cosine similarity of a zero-norm vector".into(),
        ));
    }
    Ok((na, nb))
}

pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    let (na, nb) = check_pair(a, b)?;
    Ok(a.dot(b) / (na * nb))
}

/// Cosine similarity and its gradient with respect to `a`.
pub fn cosine_similarity_grad(
    a: &EmbeddingVector,
    b: &EmbeddingVector,
) -> Result<(f64, EmbeddingVector)> {
    let (na, nb) = check_pair(a, b)?;
    let cos = a.dot(b) / (na * nb);
    let grad =
        a.0.iter()
            .zip(&b.0)
            .map(|(ai, bi)| bi / (na * nb) - cos * ai / (na * na))
            .collect();
    Ok((cos, EmbeddingVector(grad)))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Anisotropic total variation averaged over `C * H * W`.
pub fn total_variation(x: &PixelCanvas) -> f64 {
    let (c, h, w) = x.shape();
    let mut acc = 0.0;
    for ch in 0..c {
        let p = x.plane(ch);
        for y in 0..h {
            let row = &p[y * w..(y + 1) * w];
            for i in 1..w {
                acc += (row[i] - row[i - 1]).abs();
            }
            if y + 1 < h {
                let next = &p[(y + 1) * w..(y + 2) * w];
                for i in 0..w {
                    acc += (next[i] - row[i]).abs();
                }
            }
        }
    }
    acc / x.len() as f64
}

/// Subgradient of [`total_variation`], taking `sign(0) = 0`.
pub fn total_variation_grad(x: &PixelCanvas) -> PixelCanvas {
    let (c, h, w) = x.shape();
    let scale = 1.0 / x.len() as f64;
    let mut g = PixelCanvas::zeros_like(x);
    for ch in 0..c {
        let p = x.plane(ch).to_vec();
        let gp = g.plane_mut(ch);
        for y in 0..h {
            for i in 0..w {
                let idx = y * w + i;
                if i + 1 < w {
                    let s = sign(p[idx + 1] - p[idx]) * scale;
                    gp[idx + 1] += s;
                    gp[idx] -= s;
                }
                if y + 1 < h {
                    let s = sign(p[idx + w] - p[idx]) * scale;
                    gp[idx + w] += s;
                    gp[idx] -= s;
                }
            }
        }
    }
    g
}

/// Mean absolute pixel value.
pub fn l1_norm(x: &PixelCanvas) -> f64 {
    x.values().iter().map(|v| v.abs()).sum::<f64>() / x.len() as f64
}

pub fn l1_norm_grad(x: &PixelCanvas) -> PixelCanvas {
    let scale = 1.0 / x.len() as f64;
    x.map(|v| sign(v) * scale)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub similarity_term: f64,
    pub tv_term: f64,
    pub l1_term: f64,
}

impl LossBreakdown {
    /// Assembles the total from its parts. `identity_holds` re-evaluates the
    /// same expression, so the two always agree bit for bit.
    pub fn assemble(
        similarity_term: f64,
        tv_term: f64,
        l1_term: f64,
        alpha: f64,
        beta: f64,
    ) -> Self {
        Self {
            total: -similarity_term + alpha * tv_term + beta * l1_term,
            similarity_term,
            tv_term,
            l1_term,
        }
    }

    pub fn identity_holds(&self, alpha: f64, beta: f64) -> bool {
        self.total == -self.similarity_term + alpha * self.tv_term + beta * self.l1_term
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && self.similarity_term.is_finite()
            && self.tv_term.is_finite()
            && self.l1_term.is_finite()
    }
}

fn check_weights(alpha: f64, beta: f64) -> Result<()> {
    if !(alpha >= 0.0 && beta >= 0.0) {
        return Err(Error::Usage(format!(
            "regularizer weights must be non-negative, got alpha={alpha} beta={beta}"
        )));
    }
    Ok(())
}

fn finite_or_err(loss: LossBreakdown) -> Result<LossBreakdown> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Numeric(format!("non-finite loss: {loss:?}")))
    }
}

/// Evaluates the loss for a canvas and an already-materialized set of views.
pub fn compose_loss(
    x: &PixelCanvas,
    text_emb: &EmbeddingVector,
    encoder: &dyn DualEncoder,
    views: &[PixelCanvas],
    alpha: f64,
    beta: f64,
) -> Result<LossBreakdown> {
    if views.is_empty() {
        return Err(Error::Usage("compose_loss needs at least one view".into()));
    }
    check_weights(alpha, beta)?;
    let embeddings = encoder.encode_image(views)?;
    let mut sim = 0.0;
    for e in &embeddings {
        sim += cosine_similarity(e, text_emb)?;
    }
    sim /= views.len() as f64;
    finite_or_err(LossBreakdown::assemble(
        sim,
        total_variation(x),
        l1_norm(x),
        alpha,
        beta,
    ))
}

/// Loss value together with its gradient with respect to the canvas.
#[derive(Clone, Debug)]
pub struct LossEvaluation {
    pub loss: LossBreakdown,
    pub gradient: PixelCanvas,
}

/// Evaluates the loss over the views produced by `transforms` and
/// back-propagates through the encoder and every augmentation to `x`.
pub fn compose_loss_with_grad(
    x: &PixelCanvas,
    text_emb: &EmbeddingVector,
    encoder: &dyn DualEncoder,
    transforms: &[SampledTransform],
    alpha: f64,
    beta: f64,
) -> Result<LossEvaluation> {
    if transforms.is_empty() {
        return Err(Error::Usage("compose_loss needs at least one view".into()));
    }
    check_weights(alpha, beta)?;
    let b = transforms.len() as f64;

    let (views, pullbacks): (Vec<_>, Vec<_>) = transforms
        .iter()
        .map(|t| apply_transform_with_pullback(x, t))
        .unzip();
    let (embeddings, encoder_pullback) = encoder.encode_image_with_pullback(&views)?;
    drop(views);

    let mut sim = 0.0;
    let mut cotangents = Vec::with_capacity(embeddings.len());
    for e in &embeddings {
        let (cos, grad) = cosine_similarity_grad(e, text_emb)?;
        sim += cos;
        // d total / d e = -(1/b) d cos / d e
        cotangents.push(grad.scaled(-1.0 / b));
    }
    sim /= b;
    let loss = finite_or_err(LossBreakdown::assemble(
        sim,
        total_variation(x),
        l1_norm(x),
        alpha,
        beta,
    ))?;

    let view_grads = encoder_pullback(&cotangents)?;
    let mut gradient = PixelCanvas::zeros_like(x);
    for (pullback, g) in pullbacks.into_iter().zip(view_grads) {
        gradient.add_assign(&pullback.backward(&g));
    }
    if alpha != 0.0 {
        gradient.add_scaled(&total_variation_grad(x), alpha);
    }
    if beta != 0.0 {
        gradient.add_scaled(&l1_norm_grad(x), beta);
    }
    Ok(LossEvaluation { loss, gradient })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(v: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn cosine_examples() {
        let a = ev(&[0.3, -1.2, 2.0]);
        assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(
            cosine_similarity(&ev(&[1.0, 0.0]), &ev(&[0.0, 1.0])).unwrap(),
            0.0
        );
        // 32 / (sqrt(14) * sqrt(77))
        let v = cosine_similarity(&ev(&[1.0, 2.0, 3.0]), &ev(&[4.0, 5.0, 6.0])).unwrap();
        assert!((v - 0.974_631_846_197_076_2).abs() < 1e-15);
    }

    #[test]
    fn cosine_errors() {
        assert!(matches!(
            cosine_similarity(&ev(&[0.0, 0.0]), &ev(&[1.0, 0.0])),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            cosine_similarity(&ev(&[1.0, 0.0]), &ev(&[1.0, 0.0, 0.0])),
            Err(Error::Shape(_))
        ));
        assert!(EmbeddingVector::new(vec![f64::NAN]).is_err());
    }

    #[test]
    fn cosine_grad_matches_finite_differences() {
        let a = ev(&[0.3, -1.2, 2.0, 0.7]);
        let b = ev(&[1.1, 0.4, -0.5, 0.9]);
        let (_, g) = cosine_similarity_grad(&a, &b).unwrap();
        let h = 1e-6;
        for i in 0..4 {
            let mut p = a.as_slice().to_vec();
            let mut m = p.clone();
            p[i] += h;
            m[i] -= h;
            let fd = (cosine_similarity(&ev(&p), &b).unwrap()
                - cosine_similarity(&ev(&m), &b).unwrap())
                / (2.0 * h);
            assert!((fd - g.as_slice()[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn tv_examples() {
        assert_eq!(total_variation(&PixelCanvas::filled(3, 5, 4, 0.7)), 0.0);
        let x = PixelCanvas::from_vec(1, 2, 2, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(total_variation(&x), 0.5);
        assert_eq!(total_variation(&x.scaled(2.0)), 1.0);
    }

    #[test]
    fn l1_examples() {
        assert_eq!(l1_norm(&PixelCanvas::filled(3, 4, 4, 0.0)), 0.0);
        assert_eq!(l1_norm(&PixelCanvas::filled(3, 4, 4, 0.5)), 0.5);
        let x = PixelCanvas::from_vec(1, 1, 3, vec![0.1, -0.4, 0.2]).unwrap();
        assert!((l1_norm(&x.scaled(2.0)) - 2.0 * l1_norm(&x)).abs() < 1e-15);
    }

    #[test]
    fn tv_grad_matches_finite_differences_away_from_kinks() {
        let vals: Vec<f64> = (0..2 * 3 * 4)
            .map(|i| ((i * 7919) % 23) as f64 / 23.0 + i as f64 * 1e-3)
            .collect();
        let x = PixelCanvas::from_vec(2, 3, 4, vals).unwrap();
        let g = total_variation_grad(&x);
        let h = 1e-7;
        for i in 0..x.len() {
            let mut p = x.clone();
            p.values_mut()[i] += h;
            let mut m = x.clone();
            m.values_mut()[i] -= h;
            let fd = (total_variation(&p) - total_variation(&m)) / (2.0 * h);
            assert!(
                (fd - g.values()[i]).abs() < 1e-6,
                "entry {i}: {fd} vs {}",
                g.values()[i]
            );
        }
    }

    #[test]
    fn loss_identity_is_exact() {
        let l = LossBreakdown::assemble(0.123_456_789, 0.314, 0.271, 5e-3, 1e-3);
        assert!(l.identity_holds(5e-3, 1e-3));
    }
}
