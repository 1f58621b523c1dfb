//! Byte-level BPE tokenizer compatible with the CLIP `vocab.json` /
//! `merges.txt` pair.

use std::collections::HashMap;
use std::path::Path;

use regex::Regex;

use crate::error::{Error, Result};

pub const START_TOKEN: &str = "<|startoftext|>";
pub const END_TOKEN: &str = "<|endoftext|>";

/// Maps each byte to a printable char, the way the reference BPE does.
fn bytes_to_unicode() -> [char; 256] {
    let mut printable: Vec<u32> = (u32::from('!')..=u32::from('~')).collect();
    printable.extend(u32::from('¡')..=u32::from('¬'));
    printable.extend(u32::from('®')..=u32::from('ÿ'));
    let mut table = ['\0'; 256];
    let mut extra = 0;
    for b in 0..256u32 {
        table[b as usize] = if printable.contains(&b) {
            char::from_u32(b).unwrap()
        } else {
            extra += 1;
            char::from_u32(255 + extra).unwrap()
        };
    }
    table
}

#[derive(Debug)]
pub struct ClipTokenizer {
    encoder: HashMap<String, u32>,
    ranks: HashMap<(String, String), usize>,
    byte_chars: [char; 256],
    pattern: Regex,
    start_id: u32,
    end_id: u32,
    context_length: usize,
}

impl ClipTokenizer {
    pub fn new(
        vocab: HashMap<String, u32>,
        merges: &[(String, String)],
        context_length: usize,
    ) -> Result<Self> {
        let lookup = |tok: &str| {
            vocab
                .get(tok)
                .copied()
                .ok_or_else(|| Error::Config(format!("vocabulary lacks special token {tok}")))
        };
        let start_id = lookup(START_TOKEN)?;
        let end_id = lookup(END_TOKEN)?;
        let pattern = Regex::new(
            r"(?i)<\|startoftext\|>|<\|endoftext\|>|'s|'t|'re|'ve|'m|'ll|'d|[\p{L}]+|[\p{N}]|[^\s\p{L}\p{N}]+",
        )
        .expect("static pattern");
        Ok(Self {
            encoder: vocab,
            ranks: merges
                .iter()
                .cloned()
                .enumerate()
                .map(|(i, m)| (m, i))
                .collect(),
            byte_chars: bytes_to_unicode(),
            pattern,
            start_id,
            end_id,
            context_length,
        })
    }

    pub fn from_files(dir: &Path, context_length: usize) -> Result<Self> {
        let vocab_path = dir.join("vocab.json");
        let merges_path = dir.join("merges.txt");
        let vocab_text =
            std::fs::read_to_string(&vocab_path).map_err(|e| Error::io(&vocab_path, e))?;
        let vocab: HashMap<String, u32> = serde_json::from_str(&vocab_text)?;
        let merges_text =
            std::fs::read_to_string(&merges_path).map_err(|e| Error::io(&merges_path, e))?;
        let merges: Vec<(String, String)> = merges_text
            .lines()
            .filter(|l| !l.starts_with("#version") && !l.trim().is_empty())
            .filter_map(|l| {
                l.split_once(' ')
                    .map(|(a, b)| (a.to_string(), b.to_string()))
            })
            .collect();
        Self::new(vocab, &merges, context_length)
    }

    pub fn end_id(&self) -> u32 {
        self.end_id
    }

    fn bpe(&self, token: &str) -> Vec<String> {
        let mut word: Vec<String> = token.chars().map(String::from).collect();
        if let Some(last) = word.last_mut() {
            last.push_str("</w>");
        }
        while word.len() > 1 {
            let best = word
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| {
                    self.ranks
                        .get(&(w[0].clone(), w[1].clone()))
                        .map(|r| (*r, i))
                })
                .min();
            let Some((_, i)) = best else { break };
            let (first, second) = (word[i].clone(), word[i + 1].clone());
            // merge every occurrence of the winning pair, left to right
            let mut merged = Vec::with_capacity(word.len());
            let mut i = 0;
            while i < word.len() {
                if i + 1 < word.len() && word[i] == first && word[i + 1] == second {
                    merged.push(format!("{first}{second}"));
                    i += 2;
                } else {
                    merged.push(word[i].clone());
                    i += 1;
                }
            }
            word = merged;
        }
        word
    }

    /// Token ids with start/end markers. Prompts that do not fit the context
    /// are rejected rather than truncated.
    pub fn encode(&self, text: &str) -> std::result::Result<Vec<u32>, String> {
        let cleaned = text
            .split_whitespace()
            .collect::<Vec<_>>()
            .join(" ")
            .to_lowercase();
        let mut ids = vec![self.start_id];
        for m in self.pattern.find_iter(&cleaned) {
            let piece: String = m
                .as_str()
                .bytes()
                .map(|b| self.byte_chars[b as usize])
                .collect();
            for sub in self.bpe(&piece) {
                let id = self
                    .encoder
                    .get(&sub)
                    .ok_or_else(|| format!("sub-token `{sub}` missing from vocabulary"))?;
                ids.push(*id);
            }
        }
        ids.push(self.end_id);
        if ids.len() > self.context_length {
            return Err(format!(
                "{} tokens exceed the context length of {}",
                ids.len(),
                self.context_length
            ));
        }
        Ok(ids)
    }
}

/// Builds a vocabulary in the reference layout: 256 byte chars, the same with
/// an end-of-word marker, one entry per merge, then the two specials.
pub fn reference_vocab(merges: &[(String, String)]) -> HashMap<String, u32> {
    let chars = bytes_to_unicode();
    let mut order: Vec<char> = Vec::with_capacity(256);
    // reference ordering: printable bytes first, then the remapped ones
    let mut printable: Vec<u32> = (u32::from('!')..=u32::from('~')).collect();
    printable.extend(u32::from('¡')..=u32::from('¬'));
    printable.extend(u32::from('®')..=u32::from('ÿ'));
    for b in &printable {
        order.push(chars[*b as usize]);
    }
    for b in 0..256u32 {
        if !printable.contains(&b) {
            order.push(chars[b as usize]);
        }
    }
    let mut tokens: Vec<String> = order.iter().map(|c| c.to_string()).collect();
    tokens.extend(order.iter().map(|c| format!("{c}</w>")));
    tokens.extend(merges.iter().map(|(a, b)| format!("{a}{b}")));
    tokens.push(START_TOKEN.into());
    tokens.push(END_TOKEN.into());
    tokens
        .into_iter()
        .enumerate()
        .map(|(i, t)| (t, i as u32))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn merges() -> Vec<(String, String)> {
        [("d", "o"), ("do", "g</w>"), ("c", "a"), ("ca", "t</w>")]
            .iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect()
    }

    #[test]
    fn byte_table_is_a_bijection() {
        let t = bytes_to_unicode();
        let mut v: Vec<char> = t.to_vec();
        v.sort_unstable();
        v.dedup();
        assert_eq!(v.len(), 256);
        assert_eq!(t[b'a' as usize], 'a');
        assert_eq!(t[b' ' as usize], 'Ġ');
    }

    #[test]
    fn vocabulary_matches_reference_size_layout() {
        // the published vocabulary has 49408 entries for 48894 merges
        let m: Vec<(String, String)> = (0..48894)
            .map(|i| (format!("x{i}"), "y".to_string()))
            .collect();
        assert_eq!(reference_vocab(&m).len(), 49408);
        let v = reference_vocab(&m);
        assert_eq!(v[START_TOKEN], 49406);
        assert_eq!(v[END_TOKEN], 49407);
    }

    #[test]
    fn merges_apply_by_rank() {
        let m = merges();
        let vocab = reference_vocab(&m);
        let tok = ClipTokenizer::new(vocab.clone(), &m, 77).unwrap();
        let ids = tok.encode("Dog  cat!").unwrap();
        let expect = vec![
            vocab[START_TOKEN],
            vocab["dog</w>"],
            vocab["cat</w>"],
            vocab["!</w>"],
            vocab[END_TOKEN],
        ];
        assert_eq!(ids, expect);
        // unmerged word falls back to characters
        let ids = tok.encode("dot").unwrap();
        assert_eq!(ids[1..4], [vocab["do"], vocab["t</w>"], vocab[END_TOKEN]]);
    }

    #[test]
    fn overflow_is_rejected() {
        let m = merges();
        let tok = ClipTokenizer::new(reference_vocab(&m), &m, 5).unwrap();
        assert!(tok.encode("dog dog dog").is_ok());
        assert!(tok.encode("dog dog dog dog").is_err());
    }
}
