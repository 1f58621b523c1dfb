//! Audits over inverted images and the encoder's text space.

pub mod audit;
pub mod classify;
pub mod lexicon;
pub mod safety;
pub mod shuffle;

pub use audit::{
    bias_audit, bias_variants, nsfw_audit, recheck_flags, workers_from_env, AuditOptions,
    BiasReport, BiasVariant, DiscardRuns, FlagReport, RunContext, RunSink, WORKERS_ENV,
};
pub use classify::{
    classify_embedding, zero_shot_classify, Classification, FixedClassifier, ImageClassifier,
    ZeroShotClassifier, DEFAULT_TEMPLATE, GENDER_CLASSES,
};
pub use lexicon::{
    embed_lexicon, load_lexicon, nearest_words, Lexicon, LexiconFile, LexiconSource, WordNeighbor,
};
pub use safety::{reference_safety_checker, SafetyChecker, SafetyVerdict, StubChecker};
pub use shuffle::{shuffle_similarity, ShuffleResult};
