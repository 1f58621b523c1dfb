//! Word-order sensitivity: score an image against shuffled versions of its prompt.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::canvas::PixelCanvas;
use crate::encoders::DualEncoder;
use crate::error::{Error, Result};
use crate::objective::cosine_similarity;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShuffleResult {
    pub prompt: String,
    pub original_score: f64,
    pub shuffled_prompts: Vec<String>,
    pub shuffled_scores: Vec<f64>,
}

impl ShuffleResult {
    /// Largest absolute difference between a shuffled score and the original.
    pub fn max_deviation(&self) -> f64 {
        self.shuffled_scores
            .iter()
            .map(|s| (s - self.original_score).abs())
            .fold(0.0, f64::max)
    }
}

/// Number of distinct word orders other than the original, saturating.
fn distinct_reorderings(words: &[&str]) -> u128 {
    let mut counts: Vec<u128> = Vec::new();
    let mut seen: Vec<&str> = Vec::new();
    for w in words {
        match seen.iter().position(|s| s == w) {
            Some(i) => counts[i] += 1,
            None => {
                seen.push(w);
                counts.push(1);
            }
        }
    }
    // multinomial n! / prod(k_i!) built incrementally so it stays integral
    let mut total: u128 = 1;
    let mut placed: u128 = 0;
    for k in counts {
        for j in 1..=k {
            placed += 1;
            total = total.saturating_mul(placed) / j;
        }
    }
    total - 1
}

pub fn shuffle_similarity<R: Rng + ?Sized>(
    prompt: &str,
    image: &PixelCanvas,
    encoder: &dyn DualEncoder,
    n_shuffles: usize,
    rng: &mut R,
) -> Result<ShuffleResult> {
    let words: Vec<&str> = prompt.split_whitespace().collect();
    if words.len() < 2 {
        return Err(Error::Usage(format!(
            "prompt `{prompt}` needs at least two words to shuffle"
        )));
    }
    let original = words.join(" ");
    let available = distinct_reorderings(&words);
    let mut seen: HashSet<String> = HashSet::new();
    let mut shuffled = Vec::with_capacity(n_shuffles);
    let mut order = words.clone();
    while shuffled.len() < n_shuffles {
        order.shuffle(rng);
        let candidate = order.join(" ");
        if available == 0 {
            shuffled.push(candidate);
            continue;
        }
        if candidate == original {
            continue;
        }
        if (seen.len() as u128) < available && !seen.insert(candidate.clone()) {
            continue;
        }
        shuffled.push(candidate);
    }
    let mut texts: Vec<&str> = vec![prompt];
    texts.extend(shuffled.iter().map(String::as_str));
    let text_embs = encoder.encode_text(&texts)?;
    let image_emb = encoder.encode_image(std::slice::from_ref(image))?.remove(0);
    let scores = text_embs
        .iter()
        .map(|t| cosine_similarity(&image_emb, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(ShuffleResult {
        prompt: prompt.to_string(),
        original_score: scores[0],
        shuffled_prompts: shuffled,
        shuffled_scores: scores[1..].to_vec(),
    })
}
