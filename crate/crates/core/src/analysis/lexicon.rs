//! Word lists and nearest-word search in embedding space.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoders::{embed_texts_batched, DualEncoder};
use crate::error::{Error, Result};
use crate::objective::{cosine_similarity, EmbeddingVector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LexiconSource {
    CommonEnglish,
    DirtyNaughty,
    BodyParts,
    OffensiveProfane,
}

impl LexiconSource {
    pub const ALL: [LexiconSource; 4] = [
        LexiconSource::CommonEnglish,
        LexiconSource::DirtyNaughty,
        LexiconSource::BodyParts,
        LexiconSource::OffensiveProfane,
    ];

    pub fn label(self) -> &'static str {
        match self {
            LexiconSource::CommonEnglish => "common-english",
            LexiconSource::DirtyNaughty => "dirty-naughty",
            LexiconSource::BodyParts => "body-parts",
            LexiconSource::OffensiveProfane => "offensive-profane",
        }
    }
}

impl fmt::Display for LexiconSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for LexiconSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LexiconSource::ALL
            .into_iter()
            .find(|src| src.label() == s)
            .ok_or_else(|| {
                Error::Usage(format!(
                    "unknown lexicon source `{s}`; expected one of {}",
                    LexiconSource::ALL.map(|s| s.label()).join(", ")
                ))
            })
    }
}

/// One input file and the label attached to the words it contributes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LexiconFile {
    pub path: PathBuf,
    pub source: LexiconSource,
}

impl LexiconFile {
    pub fn new(path: impl Into<PathBuf>, source: LexiconSource) -> Self {
        Self {
            path: path.into(),
            source,
        }
    }
}

/// Normalized, duplicate-free vocabulary with a source label per word.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexicon {
    words: Vec<String>,
    sources: Vec<LexiconSource>,
}

pub fn normalize_word(raw: &str) -> String {
    raw.trim_start_matches('\u{feff}').trim().to_lowercase()
}

impl Lexicon {
    /// Builds a lexicon from raw entries, keeping the first label seen per word.
    pub fn from_entries<'a>(entries: impl IntoIterator<Item = (&'a str, LexiconSource)>) -> Self {
        let mut lex = Lexicon::default();
        let mut seen = HashSet::new();
        for (raw, source) in entries {
            let w = normalize_word(raw);
            if !w.is_empty() && seen.insert(w.clone()) {
                lex.words.push(w);
                lex.sources.push(source);
            }
        }
        lex
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn sources(&self) -> &[LexiconSource] {
        &self.sources
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, LexiconSource)> {
        self.words
            .iter()
            .map(String::as_str)
            .zip(self.sources.iter().copied())
    }

    pub fn count_by_source(&self, source: LexiconSource) -> usize {
        self.sources.iter().filter(|&&s| s == source).count()
    }

    /// `word<TAB>source` lines; [`load_lexicon`] reads them back unchanged.
    pub fn to_tsv(&self) -> String {
        self.iter().map(|(w, s)| format!("{w}\t{s}\n")).collect()
    }
}

/// Reads one entry per line. A line may carry an explicit label as
/// `word<TAB>source`, which overrides the file's label.
pub fn load_lexicon(files: &[LexiconFile]) -> Result<Lexicon> {
    if files.is_empty() {
        return Err(Error::Usage(
            "load_lexicon needs at least one source file".into(),
        ));
    }
    let mut entries: Vec<(String, LexiconSource)> = Vec::new();
    for file in files {
        let text = read_utf8(&file.path)?;
        for line in text.lines() {
            let (word, source) = match line.split_once('\t') {
                Some((w, label)) => (w, label.trim().parse()?),
                None => (line, file.source),
            };
            entries.push((word.to_string(), source));
        }
    }
    let lex = Lexicon::from_entries(entries.iter().map(|(w, s)| (w.as_str(), *s)));
    tracing::info!(words = lex.len(), files = files.len(), "lexicon loaded");
    Ok(lex)
}

fn read_utf8(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|source| Error::Ingestion {
        path: path.to_path_buf(),
        source,
    })?;
    String::from_utf8(bytes).map_err(|e| Error::Ingestion {
        path: path.to_path_buf(),
        source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordNeighbor {
    pub word: String,
    pub similarity: f64,
    pub rank: usize,
}

/// Top-`k` lexicon entries by cosine similarity to `query`; ties go to the
/// lexicographically smaller word.
pub fn nearest_words(
    query: &EmbeddingVector,
    lexicon_embeddings: &[EmbeddingVector],
    lexicon: &Lexicon,
    k: usize,
) -> Result<Vec<WordNeighbor>> {
    if k == 0 {
        return Err(Error::Usage("k must be at least 1".into()));
    }
    if k > lexicon.len() {
        return Err(Error::Usage(format!(
            "k = {k} exceeds the lexicon size {}",
            lexicon.len()
        )));
    }
    if lexicon_embeddings.len() != lexicon.len() {
        return Err(Error::Shape(format!(
            "{} embeddings for {} lexicon words",
            lexicon_embeddings.len(),
            lexicon.len()
        )));
    }
    let mut scored = lexicon_embeddings
        .iter()
        .zip(lexicon.words())
        .map(|(e, w)| Ok((cosine_similarity(query, e)?, w.as_str())))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    Ok(scored
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(i, (similarity, word))| WordNeighbor {
            word: word.to_string(),
            similarity,
            rank: i + 1,
        })
        .collect())
}

pub const LEXICON_BATCH: usize = 256;

/// Text embeddings for every lexicon word, one row per word.
pub fn embed_lexicon(encoder: &dyn DualEncoder, lexicon: &Lexicon) -> Result<Vec<EmbeddingVector>> {
    let words: Vec<&str> = lexicon.words().iter().map(String::as_str).collect();
    embed_texts_batched(encoder, &words, LEXICON_BATCH)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::toy_encoder;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn normalization_collapses_variants() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.txt", "Dog\ndog\n dog \n");
        let lex = load_lexicon(&[LexiconFile::new(p, LexiconSource::CommonEnglish)]).unwrap();
        assert_eq!(lex.words(), ["dog"]);
    }

    #[test]
    fn first_seen_label_wins_and_multiword_kept() {
        let dir = tempfile::tempdir().unwrap();
        let a = write(dir.path(), "a.txt", "hand\r\n\r\nbig toe\n");
        let b = write(dir.path(), "b.txt", "\u{feff}HAND\nfoot\n");
        let lex = load_lexicon(&[
            LexiconFile::new(a, LexiconSource::CommonEnglish),
            LexiconFile::new(b, LexiconSource::BodyParts),
        ])
        .unwrap();
        assert_eq!(lex.words(), ["hand", "big toe", "foot"]);
        assert_eq!(
            lex.sources(),
            [
                LexiconSource::CommonEnglish,
                LexiconSource::CommonEnglish,
                LexiconSource::BodyParts
            ]
        );
    }

    #[test]
    fn ingestion_errors() {
        assert!(matches!(load_lexicon(&[]), Err(Error::Usage(_))));
        let missing = PathBuf::from("/nonexistent/words.txt");
        match load_lexicon(&[LexiconFile::new(
            missing.clone(),
            LexiconSource::CommonEnglish,
        )]) {
            Err(Error::Ingestion { path, .. }) => assert_eq!(path, missing),
            other => panic!("expected ingestion error, got {other:?}"),
        }
    }

    #[test]
    fn tsv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let lex = Lexicon::from_entries([
            ("a", LexiconSource::DirtyNaughty),
            ("b", LexiconSource::BodyParts),
        ]);
        let p = write(dir.path(), "lex.tsv", &lex.to_tsv());
        let again = load_lexicon(&[LexiconFile::new(p, LexiconSource::CommonEnglish)]).unwrap();
        assert_eq!(again, lex);
    }

    #[test]
    fn query_equal_to_word_ranks_first() {
        let enc = toy_encoder(0, 16).unwrap();
        let lex = Lexicon::from_entries(
            ["apple", "river", "stone", "cloud"].map(|w| (w, LexiconSource::CommonEnglish)),
        );
        let embs = embed_lexicon(&enc, &lex).unwrap();
        let hits = nearest_words(&embs[2], &embs, &lex, 4).unwrap();
        assert_eq!(hits[0].word, "stone");
        assert!((hits[0].similarity - 1.0).abs() < 1e-12);
        assert_eq!(
            hits.iter().map(|h| h.rank).collect::<Vec<_>>(),
            [1, 2, 3, 4]
        );
        assert!(hits.windows(2).all(|w| w[0].similarity >= w[1].similarity));
    }

    #[test]
    fn ties_break_lexicographically() {
        let e = EmbeddingVector::new(vec![1.0, 0.0]).unwrap();
        let f = EmbeddingVector::new(vec![0.0, 1.0]).unwrap();
        let lex = Lexicon::from_entries(
            ["zeta", "beta", "alpha"].map(|w| (w, LexiconSource::CommonEnglish)),
        );
        let hits = nearest_words(&e, &[e.clone(), e.clone(), f], &lex, 2).unwrap();
        assert_eq!(hits[0].word, "beta");
        assert_eq!(hits[1].word, "zeta");
    }

    #[test]
    fn k_bounds() {
        let e = EmbeddingVector::new(vec![1.0, 0.0]).unwrap();
        let lex = Lexicon::from_entries([("a", LexiconSource::CommonEnglish)]);
        assert!(matches!(
            nearest_words(&e, std::slice::from_ref(&e), &lex, 0),
            Err(Error::Usage(_))
        ));
        assert!(matches!(
            nearest_words(&e, std::slice::from_ref(&e), &lex, 2),
            Err(Error::Usage(_))
        ));
        assert!(matches!(
            nearest_words(&e, &[], &lex, 1),
            Err(Error::Shape(_))
        ));
    }
}
