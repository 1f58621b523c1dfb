//! Deterministic toy dual encoder.
//!
//! The image tower is a seeded random linear map of the flattened,
//! resized canvas followed by unit normalization. The text tower hashes the
//! prompt to a fixed unit vector. Nothing is downloaded, so the whole test
//! suite runs offline against it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::{
    normalization_vjp, normalize_with_jacobian, DualEncoder, ImagePullback, InputPipeline,
    Preprocessing,
};
use crate::canvas::PixelCanvas;
use crate::error::{Error, Result};
use crate::objective::EmbeddingVector;

pub const TOY_NATIVE_RESOLUTION: usize = 8;
/// Longest prompt, in whitespace-separated words, the toy tokenizer accepts.
pub const TOY_CONTEXT_WORDS: usize = 77;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ToyTextMode {
    /// Word order matters.
    Ordered,
    /// The prompt is hashed as a sorted multiset of words.
    BagOfWords,
}

#[derive(Clone, Debug)]
pub struct ToyEncoder {
    id: String,
    seed: u64,
    dim: usize,
    native: usize,
    text_mode: ToyTextMode,
    preprocessing: Preprocessing,
    /// Row-major `dim x (3 * native * native)`.
    weights: Vec<f64>,
}

pub fn toy_encoder(seed: u64, dim: usize) -> Result<ToyEncoder> {
    ToyEncoder::new(seed, dim, TOY_NATIVE_RESOLUTION, ToyTextMode::Ordered)
}

impl ToyEncoder {
    pub fn new(seed: u64, dim: usize, native: usize, text_mode: ToyTextMode) -> Result<Self> {
        if dim < 2 {
            return Err(Error::Usage(format!(
                "toy encoder needs dim >= 2, got {dim}"
            )));
        }
        if native == 0 {
            return Err(Error::Usage(
                "toy encoder needs a positive native resolution".into(),
            ));
        }
        let inputs = 3 * native * native;
        let scale = 1.0 / (inputs as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = (0..dim * inputs)
            .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect();
        Ok(Self {
            id: format!("toy-{dim}"),
            seed,
            dim,
            native,
            text_mode,
            preprocessing: Preprocessing::identity(),
            weights,
        })
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn text_mode(&self) -> ToyTextMode {
        self.text_mode
    }

    /// Pre-normalization features `W x` of an already-prepared input.
    pub fn raw_features(&self, prepared: &PixelCanvas) -> Vec<f64> {
        let x = prepared.values();
        self.weights
            .chunks_exact(x.len())
            .map(|row| row.iter().zip(x).map(|(w, v)| w * v).sum())
            .collect()
    }

    fn transpose_apply(&self, c: &[f64]) -> Vec<f64> {
        let inputs = 3 * self.native * self.native;
        let mut out = vec![0.0; inputs];
        for (row, ci) in self.weights.chunks_exact(inputs).zip(c) {
            for (o, w) in out.iter_mut().zip(row) {
                *o += w * ci;
            }
        }
        out
    }

    fn text_key(&self, prompt: &str) -> String {
        let mut words: Vec<&str> = prompt.split_whitespace().collect();
        if self.text_mode == ToyTextMode::BagOfWords {
            words.sort_unstable();
        }
        words.join(" ")
    }

    fn embed_prompt(&self, prompt: &str) -> Result<EmbeddingVector> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update((self.dim as u64).to_le_bytes());
        h.update(self.text_key(prompt).as_bytes());
        let digest = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(seed);
        let v: Vec<f64> = (0..self.dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        EmbeddingVector::new(v)?.normalized()
    }
}

impl DualEncoder for ToyEncoder {
    fn encoder_id(&self) -> &str {
        &self.id
    }

    fn embedding_dim(&self) -> usize {
        self.dim
    }

    fn native_resolution(&self) -> usize {
        self.native
    }

    fn preprocessing(&self) -> &Preprocessing {
        &self.preprocessing
    }

    fn encode_image(&self, images: &[PixelCanvas]) -> Result<Vec<EmbeddingVector>> {
        images
            .iter()
            .map(|img| {
                let pipe = InputPipeline::new(img, self.native, &self.preprocessing)?;
                Ok(normalize_with_jacobian(self.raw_features(&pipe.forward(img)))?.0)
            })
            .collect()
    }

    fn encode_image_with_pullback<'a>(
        &'a self,
        images: &[PixelCanvas],
    ) -> Result<(Vec<EmbeddingVector>, ImagePullback<'a>)> {
        let mut saved = Vec::with_capacity(images.len());
        let mut embeddings = Vec::with_capacity(images.len());
        for img in images {
            let pipe = InputPipeline::new(img, self.native, &self.preprocessing)?;
            let (e, norm) = normalize_with_jacobian(self.raw_features(&pipe.forward(img)))?;
            embeddings.push(e.clone());
            saved.push((pipe, e, norm));
        }
        let native = self.native;
        let pullback: ImagePullback<'a> = Box::new(move |cotangents: &[EmbeddingVector]| {
            if cotangents.len() != saved.len() {
                return Err(Error::Shape(format!(
                    "{} cotangents for {} images",
                    cotangents.len(),
                    saved.len()
                )));
            }
            saved
                .iter()
                .zip(cotangents)
                .map(|((pipe, e, norm), c)| {
                    let dz = normalization_vjp(e, *norm, c);
                    let dx = PixelCanvas::from_vec(3, native, native, self.transpose_apply(&dz))?;
                    Ok(pipe.backward(&dx))
                })
                .collect()
        });
        Ok((embeddings, pullback))
    }

    fn encode_text(&self, prompts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        prompts
            .iter()
            .enumerate()
            .map(|(index, p)| {
                let words = p.split_whitespace().count();
                if words > TOY_CONTEXT_WORDS {
                    return Err(Error::Tokenizer {
                        index,
                        reason: format!(
                            "{words} words exceed the {TOY_CONTEXT_WORDS}-word context"
                        ),
                    });
                }
                self.embed_prompt(p)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::cosine_similarity;

    fn noise(seed: u64, res: usize) -> PixelCanvas {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = (0..3 * res * res)
            .map(|_| rand::RngExt::random::<f64>(&mut rng))
            .collect();
        PixelCanvas::from_vec(3, res, res, v).unwrap()
    }

    #[test]
    fn deterministic_per_seed() {
        let a = toy_encoder(4, 8).unwrap();
        let b = toy_encoder(4, 8).unwrap();
        let img = noise(1, 8);
        assert_eq!(
            a.encode_image(std::slice::from_ref(&img)).unwrap(),
            b.encode_image(&[img]).unwrap()
        );
        assert_eq!(
            a.encode_text(&["a cat"]).unwrap(),
            b.encode_text(&["a cat"]).unwrap()
        );
    }

    #[test]
    fn unit_norm_outputs() {
        let enc = toy_encoder(0, 8).unwrap();
        for e in enc.encode_image(&[noise(2, 8), noise(3, 16)]).unwrap() {
            assert!((e.norm() - 1.0).abs() < 1e-6);
        }
        for e in enc.encode_text(&["x", "a longer prompt"]).unwrap() {
            assert!((e.norm() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn hundred_prompts_distinct() {
        let enc = toy_encoder(0, 8).unwrap();
        let prompts: Vec<String> = (0..100).map(|i| format!("prompt number {i}")).collect();
        let refs: Vec<&str> = prompts.iter().map(String::as_str).collect();
        let embs = enc.encode_text(&refs).unwrap();
        for i in 0..embs.len() {
            for j in i + 1..embs.len() {
                assert_ne!(embs[i], embs[j], "prompts {i} and {j} collide");
            }
        }
    }

    #[test]
    fn linear_before_normalization_and_scale_invariant_after() {
        let enc = toy_encoder(9, 6).unwrap();
        let img = noise(5, 8);
        let z = enc.raw_features(&img);
        let z2 = enc.raw_features(&img.scaled(0.5));
        for (a, b) in z.iter().zip(&z2) {
            assert!((0.5 * a - b).abs() < 1e-12);
        }
        let e1 = &enc.encode_image(std::slice::from_ref(&img)).unwrap()[0];
        let e2 = &enc.encode_image(&[img.scaled(0.5)]).unwrap()[0];
        assert!((cosine_similarity(e1, e2).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bag_of_words_ignores_order() {
        let enc = ToyEncoder::new(1, 8, 8, ToyTextMode::BagOfWords).unwrap();
        let e = enc
            .encode_text(&["big dog small kitten", "small kitten big dog"])
            .unwrap();
        assert_eq!(e[0], e[1]);
        let ordered = toy_encoder(1, 8).unwrap();
        let e = ordered
            .encode_text(&["big dog small kitten", "small kitten big dog"])
            .unwrap();
        assert_ne!(e[0], e[1]);
    }

    #[test]
    fn overlong_prompt_reports_index() {
        let enc = toy_encoder(0, 4).unwrap();
        let long = vec!["w"; TOY_CONTEXT_WORDS + 1].join(" ");
        match enc.encode_text(&["ok", &long]) {
            Err(Error::Tokenizer { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected tokenizer error, got {other:?}"),
        }
    }

    #[test]
    fn pullback_matches_finite_differences() {
        let enc = toy_encoder(2, 5).unwrap();
        let img = noise(8, 12);
        let cot = EmbeddingVector::new(vec![0.3, -0.1, 0.7, 0.2, -0.5]).unwrap();
        let (_, pb) = enc
            .encode_image_with_pullback(std::slice::from_ref(&img))
            .unwrap();
        let g = pb(std::slice::from_ref(&cot)).unwrap().remove(0);
        let f = |x: &PixelCanvas| enc.encode_image(std::slice::from_ref(x)).unwrap()[0].dot(&cot);
        let h = 1e-6;
        for i in (0..img.len()).step_by(37) {
            let mut p = img.clone();
            p.values_mut()[i] += h;
            let mut m = img.clone();
            m.values_mut()[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert!(
                (fd - g.values()[i]).abs() < 1e-8,
                "{i}: {fd} vs {}",
                g.values()[i]
            );
        }
    }

    #[test]
    fn rejects_tiny_dim() {
        assert!(toy_encoder(0, 1).is_err());
    }
}
