//! Dual-encoder adapters.
//!
//! Every adapter returns unit-normalized embeddings. Resizing a canvas to the
//! encoder's native resolution and per-channel mean/std normalization happen
//! inside `encode_image`, so callers always hand over `[0, 1]` canvases of any
//! size.

mod clip;
mod clip_tokenizer;
mod registry;
mod toy;

pub use clip::{synthetic, ClipVitEncoder};
pub use clip_tokenizer::ClipTokenizer;

pub use registry::{
    cache_dir, load_encoder, load_encoder_from, AdapterKind, EncoderRegistry, EncoderRegistryEntry,
    CACHE_DIR_ENV, REGISTRY_FILE_ENV,
};
pub use toy::{toy_encoder, ToyEncoder, ToyTextMode, TOY_CONTEXT_WORDS, TOY_NATIVE_RESOLUTION};

use serde::{Deserialize, Serialize};

use crate::canvas::{PixelCanvas, ResizePlan};
use crate::error::{Error, Result};
use crate::objective::EmbeddingVector;

/// Back-propagates one cotangent per embedding to one gradient per input image.
pub type ImagePullback<'a> = Box<dyn FnOnce(&[EmbeddingVector]) -> Result<Vec<PixelCanvas>> + 'a>;

/// How an adapter may be used by concurrent audit workers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WorkerSharing {
    /// Immutable after load; workers share one instance.
    Shared,
    /// Workers must each get their own instance via [`DualEncoder::fork`].
    ClonePerWorker,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preprocessing {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Preprocessing {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }

    /// Channel statistics used by the published CLIP checkpoints.
    pub fn clip() -> Self {
        Self {
            mean: [0.481_454_66, 0.457_827_5, 0.408_210_73],
            std: [0.268_629_54, 0.261_302_58, 0.275_777_11],
        }
    }
}

pub trait DualEncoder: Send + Sync {
    fn encoder_id(&self) -> &str;

    fn embedding_dim(&self) -> usize;

    /// Side length of the square input the image tower expects.
    fn native_resolution(&self) -> usize;

    fn preprocessing(&self) -> &Preprocessing;

    fn sharing(&self) -> WorkerSharing {
        WorkerSharing::Shared
    }

    /// Fresh instance for a worker. Only required for `ClonePerWorker` adapters.
    fn fork(&self) -> Option<Box<dyn DualEncoder>> {
        None
    }

    fn encode_image(&self, images: &[PixelCanvas]) -> Result<Vec<EmbeddingVector>>;

    /// Embeddings plus a closure computing pixel gradients for given
    /// embedding cotangents.
    fn encode_image_with_pullback<'a>(
        &'a self,
        images: &[PixelCanvas],
    ) -> Result<(Vec<EmbeddingVector>, ImagePullback<'a>)>;

    fn encode_text(&self, prompts: &[&str]) -> Result<Vec<EmbeddingVector>>;
}

/// Embeds a nonempty list of prompts in input order.
pub fn embed_texts(encoder: &dyn DualEncoder, prompts: &[&str]) -> Result<Vec<EmbeddingVector>> {
    if prompts.is_empty() {
        return Err(Error::Usage("embed_texts needs at least one prompt".into()));
    }
    encoder.encode_text(prompts)
}

/// Embeds a long list in fixed-size chunks; the result has one row per prompt.
pub fn embed_texts_batched(
    encoder: &dyn DualEncoder,
    prompts: &[&str],
    batch_size: usize,
) -> Result<Vec<EmbeddingVector>> {
    if batch_size == 0 {
        return Err(Error::Usage("batch size must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(prompts.len());
    for (chunk_index, chunk) in prompts.chunks(batch_size).enumerate() {
        let rows = embed_texts(encoder, chunk).map_err(|e| match e {
            Error::Tokenizer { index, reason } => Error::Tokenizer {
                index: chunk_index * batch_size + index,
                reason,
            },
            other => other,
        })?;
        out.extend(rows);
    }
    Ok(out)
}

/// Resize-to-native plus mean/std normalization, with its adjoint.
#[derive(Clone, Debug)]
pub struct InputPipeline {
    resize: ResizePlan,
    preprocessing: Preprocessing,
    channels: usize,
}

impl InputPipeline {
    pub fn new(image: &PixelCanvas, native: usize, preprocessing: &Preprocessing) -> Result<Self> {
        if image.channels() != 3 {
            return Err(Error::Shape(format!(
                "encoders take 3-channel images, got {} channels",
                image.channels()
            )));
        }
        Ok(Self {
            resize: ResizePlan::new(image.height(), image.width(), native, native),
            preprocessing: preprocessing.clone(),
            channels: image.channels(),
        })
    }

    pub fn forward(&self, image: &PixelCanvas) -> PixelCanvas {
        let mut x = self.resize.apply(image);
        for c in 0..self.channels {
            let (m, s) = (self.preprocessing.mean[c], self.preprocessing.std[c]);
            for v in x.plane_mut(c) {
                *v = (*v - m) / s;
            }
        }
        x
    }

    pub fn backward(&self, grad: &PixelCanvas) -> PixelCanvas {
        let mut g = grad.clone();
        for c in 0..self.channels {
            let s = self.preprocessing.std[c];
            for v in g.plane_mut(c) {
                *v /= s;
            }
        }
        self.resize.adjoint(&g)
    }
}

/// Unit-normalizes `z` and returns the pullback of the normalization:
/// `d(z/|z|)^T c = (c - e <e, c>) / |z|`.
pub(crate) fn normalize_with_jacobian(z: Vec<f64>) -> Result<(EmbeddingVector, f64)> {
    let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::Domain(
            "image features have zero or non-finite norm".into(),
        ));
    }
    Ok((
        EmbeddingVector::new(z.into_iter().map(|v| v / norm).collect())?,
        norm,
    ))
}

pub(crate) fn normalization_vjp(
    e: &EmbeddingVector,
    norm: f64,
    cotangent: &EmbeddingVector,
) -> Vec<f64> {
    let proj = e.dot(cotangent);
    e.as_slice()
        .iter()
        .zip(cotangent.as_slice())
        .map(|(ei, ci)| (ci - ei * proj) / norm)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn input_pipeline_adjoint() {
        let img = PixelCanvas::from_vec(
            3,
            5,
            5,
            (0..75).map(|i| (i as f64 * 0.13).sin().abs()).collect(),
        )
        .unwrap();
        let pipe = InputPipeline::new(&img, 4, &Preprocessing::clip()).unwrap();
        let g = PixelCanvas::from_vec(3, 4, 4, (0..48).map(|i| (i as f64 * 0.7).cos()).collect())
            .unwrap();
        // <P(a) - P(0), g> == <a, P^T g> because P is affine
        let zero = pipe.forward(&PixelCanvas::zeros_like(&img));
        let mut lin = pipe.forward(&img);
        lin.add_scaled(&zero, -1.0);
        assert!((lin.dot(&g) - img.dot(&pipe.backward(&g))).abs() < 1e-10);
    }

    #[test]
    fn rejects_non_rgb() {
        let img = PixelCanvas::filled(1, 4, 4, 0.5);
        assert!(matches!(
            InputPipeline::new(&img, 4, &Preprocessing::identity()),
            Err(Error::Shape(_))
        ));
    }
}
