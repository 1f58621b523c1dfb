//! Zero-shot classification by templated text prompts.

use serde::{Deserialize, Serialize};

use crate::canvas::PixelCanvas;
use crate::encoders::DualEncoder;
use crate::error::{Error, Result};
use crate::objective::{cosine_similarity, EmbeddingVector};

pub const CLASS_SLOT: &str = "{class}";
pub const DEFAULT_TEMPLATE: &str = "a photo of a {class}";
pub const GENDER_CLASSES: [&str; 2] = ["man", "woman"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub class: String,
    pub index: usize,
    pub scores: Vec<f64>,
}

/// Substitutes `class` into a template holding exactly one `{class}` slot.
pub fn fill_template(template: &str, class: &str) -> Result<String> {
    let slots = template.matches(CLASS_SLOT).count();
    let braces = template.matches(['{', '}']).count();
    if slots != 1 || braces != 2 {
        return Err(Error::Usage(format!(
            "template `{template}` must contain exactly one `{CLASS_SLOT}` slot and no other braces"
        )));
    }
    Ok(template.replace(CLASS_SLOT, class))
}

/// Index of the highest score; the earliest index wins ties.
pub fn argmax_first(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// Classifies a precomputed image embedding against class text embeddings.
pub fn classify_embedding(
    image_embedding: &EmbeddingVector,
    class_embeddings: &[EmbeddingVector],
    classes: &[&str],
) -> Result<Classification> {
    if classes.len() < 2 {
        return Err(Error::Usage(format!(
            "need at least 2 classes, got {}",
            classes.len()
        )));
    }
    if class_embeddings.len() != classes.len() {
        return Err(Error::Shape(format!(
            "{} class embeddings for {} classes",
            class_embeddings.len(),
            classes.len()
        )));
    }
    let scores = class_embeddings
        .iter()
        .map(|c| cosine_similarity(image_embedding, c))
        .collect::<Result<Vec<_>>>()?;
    let index = argmax_first(&scores).ok_or_else(|| Error::Usage("no classes".into()))?;
    Ok(Classification {
        class: classes[index].to_string(),
        index,
        scores,
    })
}

pub fn zero_shot_classify(
    image: &PixelCanvas,
    classes: &[&str],
    encoder: &dyn DualEncoder,
    template: &str,
) -> Result<Classification> {
    if classes.len() < 2 {
        return Err(Error::Usage(format!(
            "need at least 2 classes, got {}",
            classes.len()
        )));
    }
    let prompts = classes
        .iter()
        .map(|c| fill_template(template, c))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&str> = prompts.iter().map(String::as_str).collect();
    let class_embeddings = encoder.encode_text(&refs)?;
    let e = encoder.encode_image(std::slice::from_ref(image))?.remove(0);
    classify_embedding(&e, &class_embeddings, classes)
}

/// Anything that assigns one label to an image.
pub trait ImageClassifier: Send + Sync {
    fn classifier_id(&self) -> &str;

    fn template(&self) -> &str;

    fn classify(&self, image: &PixelCanvas) -> Result<Classification>;
}

/// Zero-shot classifier with class text embeddings computed once.
pub struct ZeroShotClassifier<'a> {
    encoder: &'a dyn DualEncoder,
    classes: Vec<String>,
    template: String,
    class_embeddings: Vec<EmbeddingVector>,
}

impl<'a> ZeroShotClassifier<'a> {
    pub fn new(encoder: &'a dyn DualEncoder, classes: &[&str], template: &str) -> Result<Self> {
        if classes.len() < 2 {
            return Err(Error::Usage(format!(
                "need at least 2 classes, got {}",
                classes.len()
            )));
        }
        let prompts = classes
            .iter()
            .map(|c| fill_template(template, c))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&str> = prompts.iter().map(String::as_str).collect();
        let class_embeddings = encoder.encode_text(&refs)?;
        Ok(Self {
            encoder,
            classes: classes.iter().map(|c| c.to_string()).collect(),
            template: template.to_string(),
            class_embeddings,
        })
    }

    pub fn gender(encoder: &'a dyn DualEncoder) -> Result<Self> {
        Self::new(encoder, &GENDER_CLASSES, DEFAULT_TEMPLATE)
    }
}

impl ImageClassifier for ZeroShotClassifier<'_> {
    fn classifier_id(&self) -> &str {
        self.encoder.encoder_id()
    }

    fn template(&self) -> &str {
        &self.template
    }

    fn classify(&self, image: &PixelCanvas) -> Result<Classification> {
        let e = self
            .encoder
            .encode_image(std::slice::from_ref(image))?
            .remove(0);
        let classes: Vec<&str> = self.classes.iter().map(String::as_str).collect();
        classify_embedding(&e, &self.class_embeddings, &classes)
    }
}

/// Stub that returns the same class for every image.
#[derive(Clone, Debug)]
pub struct FixedClassifier {
    pub class: String,
}

impl ImageClassifier for FixedClassifier {
    fn classifier_id(&self) -> &str {
        "stub-fixed"
    }

    fn template(&self) -> &str {
        ""
    }

    fn classify(&self, _image: &PixelCanvas) -> Result<Classification> {
        Ok(Classification {
            class: self.class.clone(),
            index: 0,
            scores: vec![1.0],
        })
    }
}
