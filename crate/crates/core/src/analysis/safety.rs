//! NSFW safety checkers.
//!
//! The reference checker follows the public diffusion-pipeline checker: an
//! image embedding is compared against fixed concept embeddings, each with its
//! own threshold. A hit on any "special care" concept tightens every other
//! threshold by a fixed adjustment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::canvas::PixelCanvas;
use crate::encoders::{cache_dir, load_encoder_from, DualEncoder, EncoderRegistry};
use crate::error::{Error, Result};
use crate::objective::{cosine_similarity, EmbeddingVector};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptScore {
    pub concept: String,
    /// Similarity minus threshold, plus any adjustment; positive means hit.
    pub margin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SafetyVerdict {
    pub flagged: bool,
    pub scores: Vec<ConceptScore>,
}

pub trait SafetyChecker: Send + Sync {
    fn checker_id(&self) -> &str;

    fn check(&self, image: &PixelCanvas) -> Result<SafetyVerdict>;
}

/// Offline stand-ins for the reference checker.
#[derive(Clone, Debug, PartialEq)]
pub enum StubChecker {
    AlwaysTrue,
    AlwaysFalse,
    /// Flags images whose mean pixel value is at least the threshold.
    MeanPixelThreshold(f64),
}

impl SafetyChecker for StubChecker {
    fn checker_id(&self) -> &str {
        match self {
            StubChecker::AlwaysTrue => "stub-always-true",
            StubChecker::AlwaysFalse => "stub-always-false",
            StubChecker::MeanPixelThreshold(_) => "stub-mean-pixel",
        }
    }

    fn check(&self, image: &PixelCanvas) -> Result<SafetyVerdict> {
        Ok(match *self {
            StubChecker::AlwaysTrue => SafetyVerdict {
                flagged: true,
                scores: vec![],
            },
            StubChecker::AlwaysFalse => SafetyVerdict {
                flagged: false,
                scores: vec![],
            },
            StubChecker::MeanPixelThreshold(t) => {
                let margin = image.mean() - t;
                SafetyVerdict {
                    flagged: margin >= 0.0,
                    scores: vec![ConceptScore {
                        concept: "mean-pixel".into(),
                        margin,
                    }],
                }
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Concept {
    pub name: String,
    pub embedding: EmbeddingVector,
    pub threshold: f64,
}

/// On-disk description of a concept-threshold checker.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptTable {
    pub encoder_id: String,
    pub concepts: Vec<Concept>,
    pub special_care: Vec<Concept>,
    #[serde(default = "default_adjustment")]
    pub special_adjustment: f64,
}

fn default_adjustment() -> f64 {
    0.01
}

pub struct ConceptThresholdChecker {
    id: String,
    encoder: Box<dyn DualEncoder>,
    table: ConceptTable,
}

impl ConceptThresholdChecker {
    pub fn new(
        id: impl Into<String>,
        encoder: Box<dyn DualEncoder>,
        table: ConceptTable,
    ) -> Result<Self> {
        let dim = encoder.embedding_dim();
        if let Some(c) = table
            .concepts
            .iter()
            .chain(&table.special_care)
            .find(|c| c.embedding.len() != dim)
        {
            return Err(Error::Shape(format!(
                "concept `{}` has dimension {}, encoder `{}` has {dim}",
                c.name,
                c.embedding.len(),
                encoder.encoder_id()
            )));
        }
        Ok(Self {
            id: id.into(),
            encoder,
            table,
        })
    }

    pub fn verdict_for_embedding(&self, e: &EmbeddingVector) -> Result<SafetyVerdict> {
        let mut scores = Vec::new();
        let mut adjustment = 0.0;
        for c in &self.table.special_care {
            let margin = cosine_similarity(e, &c.embedding)? - c.threshold;
            if margin > 0.0 {
                adjustment = self.table.special_adjustment;
            }
            scores.push(ConceptScore {
                concept: format!("special:{}", c.name),
                margin,
            });
        }
        let mut flagged = false;
        for c in &self.table.concepts {
            let margin = cosine_similarity(e, &c.embedding)? - c.threshold + adjustment;
            flagged |= margin > 0.0;
            scores.push(ConceptScore {
                concept: c.name.clone(),
                margin,
            });
        }
        Ok(SafetyVerdict { flagged, scores })
    }
}

impl SafetyChecker for ConceptThresholdChecker {
    fn checker_id(&self) -> &str {
        &self.id
    }

    fn check(&self, image: &PixelCanvas) -> Result<SafetyVerdict> {
        let e = self
            .encoder
            .encode_image(std::slice::from_ref(image))?
            .remove(0);
        self.verdict_for_embedding(&e)
    }
}

pub const REFERENCE_CHECKER_ID: &str = "reference-safety-checker";
pub const CONCEPT_TABLE_FILE: &str = "concepts.json";

pub fn reference_checker_dir(cache: &Path) -> PathBuf {
    cache.join(REFERENCE_CHECKER_ID)
}

/// The reference checker, built from `<cache>/reference-safety-checker/concepts.json`
/// and the image encoder that table names.
pub fn reference_safety_checker() -> Result<ConceptThresholdChecker> {
    reference_safety_checker_from(&EncoderRegistry::from_env()?, &cache_dir())
}

pub fn reference_safety_checker_from(
    registry: &EncoderRegistry,
    cache: &Path,
) -> Result<ConceptThresholdChecker> {
    let path = reference_checker_dir(cache).join(CONCEPT_TABLE_FILE);
    if !path.is_file() {
        return Err(Error::Availability(format!(
            "safety checker concept table not found at `{}`",
            path.display()
        )));
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let table: ConceptTable = serde_json::from_str(&text)?;
    let encoder = load_encoder_from(registry, &table.encoder_id, cache)?;
    ConceptThresholdChecker::new(REFERENCE_CHECKER_ID, encoder, table)
}
