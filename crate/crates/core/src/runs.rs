//! Experiment specs, run archives and plain-text reports.
//!
//! Every command writes one archive directory:
//!
//! ```text
//! spec.json                resolved experiment spec
//! manifest.json            (invert, shuffle-check) run manifest
//! snapshots/iter_{n}.png   (invert) canvases at the configured iterations
//! final.png                (invert, shuffle-check) final canvas
//! runs/...                 (audits, scale-matrix) one directory per run
//! flagged/                 (nsfw-audit) flagged outputs and a warning file
//! report.json              machine-readable result
//! report.txt               rendered table
//! ```

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::audit::{
    bias_audit, nsfw_audit, workers_from_env, AuditOptions, BiasReport, BiasVariant, FlagReport,
    RunContext, RunSink,
};
use crate::analysis::classify::{
    FixedClassifier, ImageClassifier, ZeroShotClassifier, GENDER_CLASSES,
};
use crate::analysis::lexicon::{
    embed_lexicon, load_lexicon, nearest_words, LexiconFile, LexiconSource, WordNeighbor,
};
use crate::analysis::safety::{reference_safety_checker_from, SafetyChecker, StubChecker};
use crate::analysis::shuffle::{shuffle_similarity, ShuffleResult};
use crate::analysis::DEFAULT_TEMPLATE;
use crate::canvas::PixelCanvas;
use crate::encoders::{cache_dir, load_encoder_from, EncoderRegistry};
use crate::error::{Error, Result};
use crate::imageio::{png_bytes, read_png, sha256_hex, write_bytes};
use crate::inversion::{invert_with, replay, Inversion, InversionConfig, RunManifest, RunOptions};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const DETERMINISTIC_ENV: &str = "CLIPINV_DETERMINISTIC";

pub const SPEC_FILE: &str = "spec.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const FINAL_IMAGE: &str = "final.png";
pub const FINAL_HASH: &str = "final.png.sha256";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";
pub const FLAGGED_DIR: &str = "flagged";
pub const FLAGGED_WARNING_FILE: &str = "WARNING.txt";
pub const LEXICON_FILE: &str = "lexicon.tsv";
pub const INPUT_IMAGE: &str = "input.png";

const FLAGGED_WARNING: &str =
    "WARNING: the images in this directory were flagged as NSFW by a safety checker.\n\
They may contain sexual or otherwise disturbing content.\n";

/// True when `CLIPINV_DETERMINISTIC` is set to anything but `0`, `false` or empty.
pub fn deterministic_from_env() -> bool {
    std::env::var(DETERMINISTIC_ENV)
        .map(|v| !matches!(v.trim().to_ascii_lowercase().as_str(), "" | "0" | "false"))
        .unwrap_or(false)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Invert,
    NearestWords,
    NsfwAudit,
    BiasAudit,
    ScaleMatrix,
    ShuffleCheck,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Invert => "invert",
            Command::NearestWords => "nearest-words",
            Command::NsfwAudit => "nsfw-audit",
            Command::BiasAudit => "bias-audit",
            Command::ScaleMatrix => "scale-matrix",
            Command::ShuffleCheck => "shuffle-check",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckerChoice {
    Reference,
    AlwaysTrue,
    AlwaysFalse,
    MeanPixel(f64),
}

impl FromStr for CheckerChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reference" => Ok(CheckerChoice::Reference),
            "always-true" => Ok(CheckerChoice::AlwaysTrue),
            "always-false" => Ok(CheckerChoice::AlwaysFalse),
            other => match other.strip_prefix("mean-pixel:").map(str::parse::<f64>) {
                Some(Ok(t)) => Ok(CheckerChoice::MeanPixel(t)),
                _ => Err(Error::Usage(format!(
                    "unknown checker `{other}`; expected reference, always-true, always-false or mean-pixel:<t>"
                ))),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassifierChoice {
    /// Zero-shot man/woman classification with this registered encoder.
    Encoder(String),
    /// Stub that assigns the same class to every image.
    Fixed(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LexiconInput {
    pub path: PathBuf,
    pub source: LexiconSource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommandOptions {
    pub top_k: usize,
    pub lexicon: Vec<LexiconInput>,
    /// Image queried instead of (nearest-words) or scored against (shuffle-check) the prompt.
    pub image: Option<PathBuf>,
    pub checker: CheckerChoice,
    pub save_flagged: bool,
    pub classifier: ClassifierChoice,
    pub template: String,
    pub female_prompt: Option<String>,
    pub male_prompt: Option<String>,
    pub n_shuffles: usize,
    pub workers: Option<usize>,
}

impl Default for CommandOptions {
    fn default() -> Self {
        Self {
            top_k: 20,
            lexicon: Vec::new(),
            image: None,
            checker: CheckerChoice::Reference,
            save_flagged: true,
            classifier: ClassifierChoice::Encoder("vit-b-32-openai".into()),
            template: DEFAULT_TEMPLATE.into(),
            female_prompt: None,
            male_prompt: None,
            n_shuffles: 10,
            workers: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub command: Command,
    pub prompts: Vec<String>,
    pub encoder_ids: Vec<String>,
    pub config: InversionConfig,
    pub output_dir: PathBuf,
    pub n_runs: Option<usize>,
    pub options: CommandOptions,
}

impl ExperimentSpec {
    pub fn new(
        command: Command,
        prompt: &str,
        encoder_id: &str,
        output_dir: impl Into<PathBuf>,
    ) -> Self {
        Self {
            command,
            prompts: vec![prompt.to_string()],
            encoder_ids: vec![encoder_id.to_string()],
            config: InversionConfig::default(),
            output_dir: output_dir.into(),
            n_runs: None,
            options: CommandOptions::default(),
        }
    }

    /// Checks everything that can be checked before any compute starts.
    pub fn validate(&self, registry: &EncoderRegistry) -> Result<()> {
        let name = self.command.name();
        if self.prompts.is_empty() || self.prompts.iter().any(|p| p.trim().is_empty()) {
            return Err(Error::Usage(format!(
                "{name} needs at least one nonempty prompt"
            )));
        }
        if self.encoder_ids.is_empty() {
            return Err(Error::Usage(format!(
                "{name} needs at least one encoder id"
            )));
        }
        for id in &self.encoder_ids {
            registry.get(id)?;
        }
        let single = |what: &str, n: usize| -> Result<()> {
            if n != 1 {
                return Err(Error::Usage(format!(
                    "{name} takes exactly one {what}, got {n}"
                )));
            }
            Ok(())
        };
        match self.command {
            Command::Invert => {
                single("prompt", self.prompts.len())?;
                single("encoder", self.encoder_ids.len())?;
            }
            Command::NearestWords => {
                single("encoder", self.encoder_ids.len())?;
                if self.options.lexicon.is_empty() {
                    return Err(Error::Usage(
                        "nearest-words needs at least one lexicon file".into(),
                    ));
                }
                if self.options.top_k == 0 {
                    return Err(Error::Usage("k must be at least 1".into()));
                }
            }
            Command::NsfwAudit => {}
            Command::BiasAudit => {
                single("base prompt", self.prompts.len())?;
                single("target encoder", self.encoder_ids.len())?;
                match &self.options.classifier {
                    ClassifierChoice::Encoder(id) => {
                        registry.get(id)?;
                        if id == &self.encoder_ids[0] {
                            tracing::warn!(encoder = %id, "classifier is the inversion target");
                        }
                    }
                    ClassifierChoice::Fixed(c) if !GENDER_CLASSES.contains(&c.as_str()) => {
                        return Err(Error::Usage(format!(
                            "stub classifier class must be man or woman, got `{c}`"
                        )));
                    }
                    ClassifierChoice::Fixed(_) => {}
                }
                crate::analysis::classify::fill_template(&self.options.template, "x")?;
            }
            Command::ScaleMatrix => {}
            Command::ShuffleCheck => {
                single("prompt", self.prompts.len())?;
                single("encoder", self.encoder_ids.len())?;
                if self.prompts[0].split_whitespace().count() < 2 {
                    return Err(Error::Usage(
                        "shuffle-check needs a prompt of at least two words".into(),
                    ));
                }
            }
        }
        if matches!(self.command, Command::NsfwAudit | Command::BiasAudit)
            && self.n_runs.unwrap_or(0) == 0
        {
            return Err(Error::Usage(format!("{name} needs n_runs >= 1")));
        }
        if let Some(img) = &self.options.image {
            if !img.is_file() {
                return Err(Error::Usage(format!(
                    "image `{}` does not exist",
                    img.display()
                )));
            }
        }
        for l in &self.options.lexicon {
            if !l.path.is_file() {
                return Err(Error::Ingestion {
                    path: l.path.clone(),
                    source: std::io::Error::new(
                        std::io::ErrorKind::NotFound,
                        "lexicon file not found",
                    ),
                });
            }
        }
        self.config.validate()?;
        ensure_writable(&self.output_dir)
    }
}

fn ensure_writable(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let probe = dir.join(".write-probe");
    std::fs::write(&probe, b"").map_err(|e| Error::io(&probe, e))?;
    std::fs::remove_file(&probe).map_err(|e| Error::io(&probe, e))
}

/// Reads a TOML config whose keys mirror [`InversionConfig`]; missing keys
/// keep their defaults.
pub fn load_config_file(path: &Path) -> Result<InversionConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<InversionConfig> {
    let overlay: toml::Value = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    let mut base = toml::Value::try_from(InversionConfig::default())
        .map_err(|e| Error::Config(e.to_string()))?;
    merge_toml(&mut base, overlay, "")?;
    base.try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))
}

fn merge_toml(base: &mut toml::Value, overlay: toml::Value, path: &str) -> Result<()> {
    match (base, overlay) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                let key = if path.is_empty() {
                    k.clone()
                } else {
                    format!("{path}.{k}")
                };
                match b.get_mut(&k) {
                    Some(slot) => merge_toml(slot, v, &key)?,
                    None => return Err(Error::Config(format!("unknown config key `{key}`"))),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvertSummary {
    pub prompt: String,
    pub encoder_id: String,
    pub final_similarity: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps: usize,
    pub final_resolution: usize,
    pub manifest: String,
    pub final_image: String,
    pub final_sha256: String,
    pub snapshots: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NearestQuery {
    pub query: String,
    pub neighbors: Vec<WordNeighbor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NearestWordsReport {
    pub encoder_id: String,
    pub lexicon_file: String,
    pub lexicon_size: usize,
    pub k: usize,
    pub queries: Vec<NearestQuery>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NsfwStudy {
    pub save_flagged: bool,
    pub reports: Vec<FlagReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasStudy {
    pub base_prompt: String,
    pub reports: Vec<BiasReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleCell {
    pub prompt: String,
    pub encoder_id: String,
    pub run_dir: Option<String>,
    pub final_similarity: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleMatrix {
    pub prompts: Vec<String>,
    pub encoder_ids: Vec<String>,
    pub cells: Vec<ScaleCell>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShuffleReport {
    pub encoder_id: String,
    pub seed: u64,
    pub image: String,
    pub result: ShuffleResult,
    pub shuffled_min: f64,
    pub shuffled_max: f64,
    pub shuffled_mean: f64,
    pub shuffled_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Report {
    Invert(InvertSummary),
    NearestWords(NearestWordsReport),
    NsfwAudit(NsfwStudy),
    BiasAudit(BiasStudy),
    ScaleMatrix(ScaleMatrix),
    ShuffleCheck(ShuffleReport),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportEnvelope {
    pub schema_version: u32,
    pub report: Report,
}

#[derive(Clone, Debug)]
pub struct RunArchive {
    pub dir: PathBuf,
    pub report: Report,
}

impl RunArchive {
    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// `a/b/c` with forward slashes regardless of platform.
fn rel(parts: &[&str]) -> String {
    parts.join("/")
}

fn on_disk(root: &Path, rel: &str) -> PathBuf {
    rel.split('/').fold(root.to_path_buf(), |p, s| p.join(s))
}

/// Lowercase ASCII slug of a prompt, prefixed with its index for uniqueness.
pub fn slug(index: usize, text: &str) -> String {
    let mut s = String::new();
    for ch in text.chars() {
        if ch.is_ascii_alphanumeric() {
            s.push(ch.to_ascii_lowercase());
        } else if !s.ends_with('-') {
            s.push('-');
        }
        if s.len() >= 40 {
            break;
        }
    }
    format!("p{index}-{}", s.trim_matches('-'))
}

/// Writes manifest, final image and snapshots for a single inversion.
/// Returns the manifest as written.
fn persist_full_run(root: &Path, prefix: &str, run: &Inversion) -> Result<RunManifest> {
    let dir = on_disk(root, prefix);
    let snap_dir = dir.join("snapshots");
    mkdir(&snap_dir)?;
    let mut manifest = run.manifest.clone();
    manifest.snapshot_paths.clear();
    for s in &run.snapshots {
        let name = format!("iter_{}.png", s.iteration);
        write_bytes(&snap_dir.join(&name), &png_bytes(&s.canvas)?)?;
        manifest.snapshot_paths.push(rel(&["snapshots", &name]));
    }
    write_bytes(&dir.join(FINAL_IMAGE), &png_bytes(&run.canvas)?)?;
    write_bytes(&dir.join(MANIFEST_FILE), manifest.to_json()?.as_bytes())?;
    Ok(manifest)
}

/// Audit sink: per-run manifests under `runs/`, flagged images under `flagged/`.
struct ArchiveSink<'a> {
    root: &'a Path,
    group: String,
    save_flagged: bool,
}

impl RunSink for ArchiveSink<'_> {
    fn persist(&self, ctx: &RunContext<'_>, run: &Inversion) -> Result<Option<String>> {
        let run_name = format!("seed_{}", ctx.seed);
        let mut parts = vec!["runs", self.group.as_str()];
        if ctx.label != "runs" {
            parts.push(ctx.label);
        }
        parts.push(&run_name);
        let run_rel = rel(&parts);
        let run_dir = on_disk(self.root, &run_rel);
        mkdir(&run_dir)?;
        let image = png_bytes(&run.canvas)?;
        if ctx.flagged == Some(true) {
            let flagged_root = self.root.join(FLAGGED_DIR);
            mkdir(&flagged_root)?;
            let warning = flagged_root.join(FLAGGED_WARNING_FILE);
            if !warning.exists() {
                write_bytes(&warning, FLAGGED_WARNING.as_bytes())?;
            }
            let fdir = on_disk(&flagged_root, &run_rel);
            mkdir(&fdir)?;
            if self.save_flagged {
                write_bytes(&fdir.join(FINAL_IMAGE), &image)?;
            }
            write_bytes(
                &fdir.join(FINAL_HASH),
                format!("{}\n", sha256_hex(&image)).as_bytes(),
            )?;
        } else {
            write_bytes(&run_dir.join(FINAL_IMAGE), &image)?;
        }
        let mut manifest = run.manifest.clone();
        manifest.snapshot_paths.clear();
        write_bytes(&run_dir.join(MANIFEST_FILE), manifest.to_json()?.as_bytes())?;
        Ok(Some(rel(&[&run_rel, MANIFEST_FILE])))
    }
}

pub fn run_experiment(spec: &ExperimentSpec) -> Result<RunArchive> {
    run_experiment_with(spec, &EncoderRegistry::from_env()?, &cache_dir())
}

pub fn run_experiment_with(
    spec: &ExperimentSpec,
    registry: &EncoderRegistry,
    cache: &Path,
) -> Result<RunArchive> {
    spec.validate(registry)?;
    let root = spec.output_dir.as_path();
    write_json(&root.join(SPEC_FILE), spec)?;
    let run_opts = RunOptions {
        deterministic: deterministic_from_env(),
    };
    let audit_opts = AuditOptions {
        workers: spec.options.workers.unwrap_or_else(workers_from_env),
        run: run_opts,
    };
    let load = |id: &str| load_encoder_from(registry, id, cache);

    let report = match spec.command {
        Command::Invert => {
            let encoder = load(&spec.encoder_ids[0])?;
            let run = invert_with(&spec.prompts[0], encoder.as_ref(), &spec.config, run_opts)?;
            let manifest = persist_full_run(root, "", &run)?;
            let trace = &manifest.loss_trace;
            Report::Invert(InvertSummary {
                prompt: manifest.prompt.clone(),
                encoder_id: manifest.encoder_id.clone(),
                final_similarity: manifest.final_similarity,
                initial_loss: trace.first().map_or(f64::NAN, |e| e.loss.total),
                final_loss: trace.last().map_or(f64::NAN, |e| e.loss.total),
                steps: trace.len(),
                final_resolution: run.canvas.height(),
                manifest: MANIFEST_FILE.into(),
                final_image: FINAL_IMAGE.into(),
                final_sha256: sha256_hex(&png_bytes(&run.canvas)?),
                snapshots: manifest.snapshot_paths.clone(),
            })
        }
        Command::NearestWords => {
            let encoder = load(&spec.encoder_ids[0])?;
            let files: Vec<LexiconFile> = spec
                .options
                .lexicon
                .iter()
                .map(|l| LexiconFile::new(&l.path, l.source))
                .collect();
            let lexicon = load_lexicon(&files)?;
            write_bytes(&root.join(LEXICON_FILE), lexicon.to_tsv().as_bytes())?;
            let embeddings = embed_lexicon(encoder.as_ref(), &lexicon)?;
            let k = spec.options.top_k.min(lexicon.len());
            let mut queries = Vec::new();
            for p in &spec.prompts {
                let q = encoder.encode_text(&[p.as_str()])?.remove(0);
                queries.push(NearestQuery {
                    query: p.clone(),
                    neighbors: nearest_words(&q, &embeddings, &lexicon, k)?,
                });
            }
            if let Some(img) = &spec.options.image {
                let canvas = read_png(img)?;
                write_bytes(&root.join(INPUT_IMAGE), &png_bytes(&canvas)?)?;
                let q = encoder
                    .encode_image(std::slice::from_ref(&canvas))?
                    .remove(0);
                queries.push(NearestQuery {
                    query: format!("image:{INPUT_IMAGE}"),
                    neighbors: nearest_words(&q, &embeddings, &lexicon, k)?,
                });
            }
            Report::NearestWords(NearestWordsReport {
                encoder_id: encoder.encoder_id().to_string(),
                lexicon_file: LEXICON_FILE.into(),
                lexicon_size: lexicon.len(),
                k,
                queries,
            })
        }
        Command::NsfwAudit => {
            let n_runs = spec.n_runs.unwrap_or(0);
            let checker: Box<dyn SafetyChecker> = match &spec.options.checker {
                CheckerChoice::Reference => {
                    Box::new(reference_safety_checker_from(registry, cache)?)
                }
                CheckerChoice::AlwaysTrue => Box::new(StubChecker::AlwaysTrue),
                CheckerChoice::AlwaysFalse => Box::new(StubChecker::AlwaysFalse),
                CheckerChoice::MeanPixel(t) => Box::new(StubChecker::MeanPixelThreshold(*t)),
            };
            let mut reports = Vec::new();
            for id in &spec.encoder_ids {
                let encoder = load(id)?;
                for (i, prompt) in spec.prompts.iter().enumerate() {
                    let sink = ArchiveSink {
                        root,
                        group: format!("{}/{id}", slug(i, prompt)),
                        save_flagged: spec.options.save_flagged,
                    };
                    reports.push(nsfw_audit(
                        prompt,
                        encoder.as_ref(),
                        checker.as_ref(),
                        n_runs,
                        &spec.config,
                        &audit_opts,
                        &sink,
                    )?);
                }
            }
            Report::NsfwAudit(NsfwStudy {
                save_flagged: spec.options.save_flagged,
                reports,
            })
        }
        Command::BiasAudit => {
            let n_runs = spec.n_runs.unwrap_or(0);
            let target = load(&spec.encoder_ids[0])?;
            let classifier_encoder;
            let classifier: Box<dyn ImageClassifier + '_> = match &spec.options.classifier {
                ClassifierChoice::Fixed(c) => Box::new(FixedClassifier { class: c.clone() }),
                ClassifierChoice::Encoder(id) => {
                    classifier_encoder = load(id)?;
                    Box::new(ZeroShotClassifier::new(
                        classifier_encoder.as_ref(),
                        &GENDER_CLASSES,
                        &spec.options.template,
                    )?)
                }
            };
            let base = &spec.prompts[0];
            let variants = crate::analysis::audit::bias_variants(
                base,
                spec.options.female_prompt.as_deref(),
                spec.options.male_prompt.as_deref(),
            );
            let sink = ArchiveSink {
                root,
                group: slug(0, base),
                save_flagged: true,
            };
            let reports = bias_audit(
                base,
                &variants,
                target.as_ref(),
                classifier.as_ref(),
                n_runs,
                &spec.config,
                &audit_opts,
                &sink,
            )?;
            Report::BiasAudit(BiasStudy {
                base_prompt: base.clone(),
                reports,
            })
        }
        Command::ScaleMatrix => {
            let mut cells = Vec::new();
            for (i, prompt) in spec.prompts.iter().enumerate() {
                for id in &spec.encoder_ids {
                    let prefix = rel(&["runs", &slug(i, prompt), id]);
                    let attempt = || -> Result<f64> {
                        let encoder = load(id)?;
                        let run = invert_with(prompt, encoder.as_ref(), &spec.config, run_opts)?;
                        Ok(persist_full_run(root, &prefix, &run)?.final_similarity)
                    };
                    cells.push(match attempt() {
                        Ok(s) => ScaleCell {
                            prompt: prompt.clone(),
                            encoder_id: id.clone(),
                            run_dir: Some(prefix),
                            final_similarity: Some(s),
                            error: None,
                        },
                        Err(e) => {
                            tracing::warn!(encoder = %id, error = %e, "scale-matrix cell failed");
                            let dir = on_disk(root, &prefix);
                            mkdir(&dir)?;
                            write_bytes(&dir.join("error.txt"), format!("{e}\n").as_bytes())?;
                            ScaleCell {
                                prompt: prompt.clone(),
                                encoder_id: id.clone(),
                                run_dir: None,
                                final_similarity: None,
                                error: Some(e.to_string()),
                            }
                        }
                    });
                }
            }
            Report::ScaleMatrix(ScaleMatrix {
                prompts: spec.prompts.clone(),
                encoder_ids: spec.encoder_ids.clone(),
                cells,
            })
        }
        Command::ShuffleCheck => {
            let encoder = load(&spec.encoder_ids[0])?;
            let prompt = &spec.prompts[0];
            let (canvas, image) = match &spec.options.image {
                Some(path) => {
                    let c = read_png(path)?;
                    write_bytes(&root.join(INPUT_IMAGE), &png_bytes(&c)?)?;
                    (c, INPUT_IMAGE.to_string())
                }
                None => {
                    let run = invert_with(prompt, encoder.as_ref(), &spec.config, run_opts)?;
                    persist_full_run(root, "", &run)?;
                    (run.canvas, FINAL_IMAGE.to_string())
                }
            };
            let mut rng = ChaCha8Rng::seed_from_u64(spec.config.seed);
            let result = shuffle_similarity(
                prompt,
                &canvas,
                encoder.as_ref(),
                spec.options.n_shuffles,
                &mut rng,
            )?;
            let s = &result.shuffled_scores;
            let n = s.len().max(1) as f64;
            let mean = s.iter().sum::<f64>() / n;
            let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            Report::ShuffleCheck(ShuffleReport {
                encoder_id: encoder.encoder_id().to_string(),
                seed: spec.config.seed,
                image,
                shuffled_min: s.iter().copied().fold(f64::INFINITY, f64::min),
                shuffled_max: s.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                shuffled_mean: mean,
                shuffled_std: var.sqrt(),
                result,
            })
        }
    };

    write_json(
        &root.join(REPORT_JSON),
        &ReportEnvelope {
            schema_version: REPORT_SCHEMA_VERSION,
            report: report.clone(),
        },
    )?;
    let text = render_report(root)?;
    write_bytes(&root.join(REPORT_TXT), text.as_bytes())?;

    let (failed, total) = failure_count(&report);
    if failed > 0 {
        return Err(Error::PartialFailure {
            archive: root.to_path_buf(),
            failed,
            total,
        });
    }
    Ok(RunArchive {
        dir: root.to_path_buf(),
        report,
    })
}

fn failure_count(report: &Report) -> (usize, usize) {
    match report {
        Report::NsfwAudit(s) => (
            s.reports.iter().map(|r| r.failed_count).sum(),
            s.reports.iter().map(|r| r.n_runs).sum(),
        ),
        Report::BiasAudit(s) => (
            s.reports.iter().map(|r| r.failures.len()).sum(),
            s.reports.iter().map(|r| r.requested_runs).sum(),
        ),
        Report::ScaleMatrix(m) => (
            m.cells.iter().filter(|c| c.error.is_some()).count(),
            m.cells.len(),
        ),
        _ => (0, 1),
    }
}

pub fn read_report(archive: &Path) -> Result<ReportEnvelope> {
    let path = archive.join(REPORT_JSON);
    if !path.is_file() {
        return Err(Error::Integrity(format!(
            "archive is missing files: {REPORT_JSON}"
        )));
    }
    let env: ReportEnvelope = read_json(&path)
        .map_err(|e| Error::Integrity(format!("{REPORT_JSON} is unreadable: {e}")))?;
    if env.schema_version != REPORT_SCHEMA_VERSION {
        return Err(Error::Integrity(format!(
            "report schema version {} is not supported (expected {REPORT_SCHEMA_VERSION})",
            env.schema_version
        )));
    }
    Ok(env)
}

/// Files a complete archive must contain for this report, relative to its root.
fn required_files(archive: &Path, report: &Report) -> Result<BTreeSet<String>> {
    let mut req = BTreeSet::new();
    let with_manifest = |prefix: &str, req: &mut BTreeSet<String>| -> Result<()> {
        let m = if prefix.is_empty() {
            MANIFEST_FILE.to_string()
        } else {
            rel(&[prefix, MANIFEST_FILE])
        };
        req.insert(m.clone());
        let path = on_disk(archive, &m);
        if path.is_file() {
            let manifest = RunManifest::from_json(
                &std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?,
            )?;
            for s in manifest.snapshot_paths {
                req.insert(if prefix.is_empty() {
                    s
                } else {
                    rel(&[prefix, &s])
                });
            }
        }
        Ok(())
    };
    match report {
        Report::Invert(s) => {
            with_manifest("", &mut req)?;
            req.insert(s.final_image.clone());
        }
        Report::NearestWords(r) => {
            req.insert(r.lexicon_file.clone());
        }
        Report::NsfwAudit(s) => {
            for r in &s.reports {
                for run in &r.per_run {
                    if let Some(m) = &run.manifest_path {
                        req.insert(m.clone());
                    }
                }
            }
        }
        Report::BiasAudit(s) => {
            for r in &s.reports {
                for run in &r.per_run {
                    if let Some(m) = &run.manifest_path {
                        req.insert(m.clone());
                    }
                }
            }
        }
        Report::ScaleMatrix(m) => {
            for c in &m.cells {
                if let Some(d) = &c.run_dir {
                    with_manifest(d, &mut req)?;
                    req.insert(rel(&[d, FINAL_IMAGE]));
                }
            }
        }
        Report::ShuffleCheck(s) => {
            req.insert(s.image.clone());
            if s.image == FINAL_IMAGE {
                with_manifest("", &mut req)?;
            }
        }
    }
    Ok(req)
}

fn is_empty(report: &Report) -> bool {
    match report {
        Report::Invert(_) | Report::ShuffleCheck(_) => false,
        Report::NearestWords(r) => r.queries.is_empty(),
        Report::NsfwAudit(s) => {
            s.reports.is_empty() || s.reports.iter().all(|r| r.per_run.is_empty())
        }
        Report::BiasAudit(s) => s.reports.is_empty(),
        Report::ScaleMatrix(m) => m.cells.is_empty(),
    }
}

/// Deterministic plain-text rendering of an archive's report.
pub fn render_report(archive: &Path) -> Result<String> {
    let env = read_report(archive)?;
    let missing: Vec<String> = required_files(archive, &env.report)?
        .into_iter()
        .filter(|f| !on_disk(archive, f).is_file())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Integrity(format!(
            "archive is missing files: {}",
            missing.join(", ")
        )));
    }
    if is_empty(&env.report) {
        return Err(Error::Integrity("report is empty".into()));
    }
    Ok(render(&env.report))
}

/// Left-aligned first column, right-aligned others, two-space gutters.
fn table(header: &[String], rows: &[Vec<String>]) -> String {
    let cols = header.len();
    let mut width = vec![0; cols];
    for row in std::iter::once(header).chain(rows.iter().map(Vec::as_slice)) {
        for (i, cell) in row.iter().enumerate() {
            width[i] = width[i].max(cell.chars().count());
        }
    }
    let line = |row: &[String]| {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(i, c)| {
                if i == 0 {
                    format!("{c:<w$}", w = width[i])
                } else {
                    format!("{c:>w$}", w = width[i])
                }
            })
            .collect();
        format!("{}\n", cells.join("  ").trim_end())
    };
    let mut out = line(header);
    out.push_str(&format!(
        "{}\n",
        "-".repeat(width.iter().sum::<usize>() + 2 * (cols - 1))
    ));
    for r in rows {
        out.push_str(&line(r));
    }
    out
}

fn s<T: ToString>(v: T) -> String {
    v.to_string()
}

fn f4(v: f64) -> String {
    format!("{v:.4}")
}

fn render(report: &Report) -> String {
    let mut out = String::new();
    match report {
        Report::Invert(r) => {
            let _ = writeln!(out, "invert: \"{}\" with {}", r.prompt, r.encoder_id);
            out += &table(
                &[
                    s("steps"),
                    s("resolution"),
                    s("initial_loss"),
                    s("final_loss"),
                    s("final_similarity"),
                ],
                &[vec![
                    s(r.steps),
                    s(r.final_resolution),
                    f4(r.initial_loss),
                    f4(r.final_loss),
                    f4(r.final_similarity),
                ]],
            );
            let _ = writeln!(out, "snapshots: {}", r.snapshots.join(", "));
        }
        Report::NearestWords(r) => {
            let _ = writeln!(
                out,
                "nearest words: {} over {} words, k = {}",
                r.encoder_id, r.lexicon_size, r.k
            );
            for q in &r.queries {
                let _ = writeln!(out, "\n{}", q.query);
                let rows: Vec<Vec<String>> = q
                    .neighbors
                    .iter()
                    .map(|n| vec![s(n.rank), n.word.clone(), f4(n.similarity)])
                    .collect();
                out += &table(&[s("rank"), s("word"), s("similarity")], &rows);
            }
        }
        Report::NsfwAudit(st) => {
            let _ = writeln!(out, "NSFW audit");
            let rows: Vec<Vec<String>> = st
                .reports
                .iter()
                .map(|r| {
                    vec![
                        r.prompt.clone(),
                        r.encoder_id.clone(),
                        s(r.n_runs),
                        s(r.flagged_count),
                        s(r.failed_count),
                    ]
                })
                .collect();
            out += &table(
                &[
                    s("prompt"),
                    s("encoder"),
                    s("n_runs"),
                    s("flagged_count"),
                    s("failed"),
                ],
                &rows,
            );
            let encoders = ordered_unique(st.reports.iter().map(|r| r.encoder_id.as_str()));
            if encoders.len() > 1 {
                let prompts = ordered_unique(st.reports.iter().map(|r| r.prompt.as_str()));
                let mut header = vec![s("prompt")];
                header.extend(encoders.iter().map(|e| e.to_string()));
                let grid: Vec<Vec<String>> = prompts
                    .iter()
                    .map(|p| {
                        let mut row = vec![p.to_string()];
                        for e in &encoders {
                            let cell = st
                                .reports
                                .iter()
                                .find(|r| &r.prompt == p && &r.encoder_id == e)
                                .map_or(s("-"), |r| s(r.flagged_count));
                            row.push(cell);
                        }
                        row
                    })
                    .collect();
                let _ = writeln!(out, "\nflagged counts by encoder");
                out += &table(&header, &grid);
            }
            let _ = writeln!(
                out,
                "checker: {}",
                ordered_unique(st.reports.iter().map(|r| r.checker_id.as_str())).join(", ")
            );
        }
        Report::BiasAudit(st) => {
            let first = &st.reports[0];
            let _ = writeln!(
                out,
                "bias audit: target {}, classifier {}, template \"{}\"",
                first.target_encoder_id, first.classifier_id, first.template
            );
            let rows: Vec<Vec<String>> = st
                .reports
                .iter()
                .map(|r| {
                    vec![
                        r.variant.label().to_uppercase(),
                        r.prompt.clone(),
                        s(r.man_count),
                        s(r.woman_count),
                        s(r.n_runs),
                    ]
                })
                .collect();
            out += &table(
                &[s("variant"), s("prompt"), s("man"), s("woman"), s("n_runs")],
                &rows,
            );
            let mut header = vec![s("prompt")];
            let mut row = vec![st.base_prompt.clone()];
            for v in BiasVariant::ALL {
                let label = v.label().to_uppercase();
                header.push(format!("{label} man"));
                header.push(format!("{label} woman"));
                match st.reports.iter().find(|r| r.variant == v) {
                    Some(r) => {
                        row.push(s(r.man_count));
                        row.push(s(r.woman_count));
                    }
                    None => {
                        row.push(s("-"));
                        row.push(s("-"));
                    }
                }
            }
            let _ = writeln!(out);
            out += &table(&header, &[row]);
        }
        Report::ScaleMatrix(m) => {
            let _ = writeln!(out, "final similarity by encoder");
            let mut header = vec![s("prompt")];
            header.extend(m.encoder_ids.iter().cloned());
            let rows: Vec<Vec<String>> = m
                .prompts
                .iter()
                .map(|p| {
                    let mut row = vec![p.clone()];
                    for e in &m.encoder_ids {
                        let cell = m
                            .cells
                            .iter()
                            .find(|c| &c.prompt == p && &c.encoder_id == e);
                        row.push(match cell.and_then(|c| c.final_similarity) {
                            Some(v) => f4(v),
                            None => s("error"),
                        });
                    }
                    row
                })
                .collect();
            out += &table(&header, &rows);
            for c in m.cells.iter().filter(|c| c.error.is_some()) {
                let _ = writeln!(
                    out,
                    "error [{} / {}]: {}",
                    c.prompt,
                    c.encoder_id,
                    c.error.as_deref().unwrap_or("")
                );
            }
        }
        Report::ShuffleCheck(r) => {
            let _ = writeln!(
                out,
                "shuffle check: \"{}\" with {}",
                r.result.prompt, r.encoder_id
            );
            let mut rows = vec![vec![s("(original)"), f4(r.result.original_score)]];
            rows.extend(
                r.result
                    .shuffled_prompts
                    .iter()
                    .zip(&r.result.shuffled_scores)
                    .map(|(p, v)| vec![p.clone(), f4(*v)]),
            );
            out += &table(&[s("prompt"), s("similarity")], &rows);
            let _ = writeln!(
                out,
                "shuffled: min {} max {} mean {} std {}",
                f4(r.shuffled_min),
                f4(r.shuffled_max),
                f4(r.shuffled_mean),
                f4(r.shuffled_std)
            );
        }
    }
    out
}

fn ordered_unique<'a>(items: impl Iterator<Item = &'a str>) -> Vec<&'a str> {
    let mut out: Vec<&str> = Vec::new();
    for i in items {
        if !out.contains(&i) {
            out.push(i);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplayCheck {
    pub recorded_sha256: String,
    pub replayed_sha256: String,
}

impl ReplayCheck {
    pub fn matches(&self) -> bool {
        self.recorded_sha256 == self.replayed_sha256
    }
}

/// Replays the run in `run_dir` (relative to `archive`) and compares the
/// hash of the replayed final image with the archived one.
pub fn replay_archived_run(
    archive: &Path,
    run_dir: &str,
    registry: &EncoderRegistry,
    cache: &Path,
) -> Result<ReplayCheck> {
    let dir = on_disk(archive, run_dir);
    let mpath = dir.join(MANIFEST_FILE);
    let manifest = RunManifest::from_json(
        &std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?,
    )?;
    let image = dir.join(FINAL_IMAGE);
    let flagged = on_disk(&archive.join(FLAGGED_DIR), run_dir);
    let recorded = if image.is_file() {
        sha256_hex(&std::fs::read(&image).map_err(|e| Error::io(&image, e))?)
    } else if flagged.join(FINAL_HASH).is_file() {
        let p = flagged.join(FINAL_HASH);
        std::fs::read_to_string(&p)
            .map_err(|e| Error::io(&p, e))?
            .trim()
            .to_string()
    } else {
        return Err(Error::Integrity(format!(
            "no final image or hash recorded for `{run_dir}`"
        )));
    };
    let encoder = load_encoder_from(registry, &manifest.encoder_id, cache)?;
    let run = replay(
        &manifest,
        encoder.as_ref(),
        RunOptions {
            deterministic: true,
        },
    )?;
    Ok(ReplayCheck {
        recorded_sha256: recorded,
        replayed_sha256: sha256_hex(&png_bytes(&run.canvas)?),
    })
}

/// Final canvas of an archived invert run, decoded from its PNG.
pub fn archived_final_image(archive: &Path) -> Result<PixelCanvas> {
    read_png(&archive.join(FINAL_IMAGE))
}
