//! Repeated-inversion audits: NSFW flag counting and gender-bias tallies.
//!
//! Run `i` of an audit uses seed `base_seed + i`, so any single run can be
//! reproduced on its own. Runs fan out across worker threads; tallies are
//! reduced afterwards in run order.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::analysis::classify::{Classification, ImageClassifier};
use crate::analysis::safety::{SafetyChecker, SafetyVerdict};
use crate::encoders::{DualEncoder, WorkerSharing};
use crate::error::{Error, Result};
use crate::inversion::{invert_with, replay, Inversion, InversionConfig, RunManifest, RunOptions};

pub const WORKERS_ENV: &str = "CLIPINV_WORKERS";

/// Worker count from `CLIPINV_WORKERS`, else the available parallelism.
pub fn workers_from_env() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

#[derive(Clone, Copy, Debug)]
pub struct AuditOptions {
    pub workers: usize,
    pub run: RunOptions,
}

impl Default for AuditOptions {
    fn default() -> Self {
        Self {
            workers: 1,
            run: RunOptions::default(),
        }
    }
}

/// Identifies one audit run to a [`RunSink`].
#[derive(Clone, Debug)]
pub struct RunContext<'a> {
    /// Group the run belongs to, e.g. a bias variant.
    pub label: &'a str,
    pub index: usize,
    pub seed: u64,
    pub flagged: Option<bool>,
}

/// Persists completed runs; returns the manifest path to record, if any.
pub trait RunSink: Sync {
    fn persist(&self, ctx: &RunContext<'_>, run: &Inversion) -> Result<Option<String>>;
}

/// Keeps nothing.
pub struct DiscardRuns;

impl RunSink for DiscardRuns {
    fn persist(&self, _ctx: &RunContext<'_>, _run: &Inversion) -> Result<Option<String>> {
        Ok(None)
    }
}

pub fn run_seed(base_seed: u64, index: usize) -> u64 {
    base_seed.wrapping_add(index as u64)
}

/// Runs `job(i, encoder)` for `i in 0..n` on up to `workers` threads and
/// returns the results in index order.
pub fn fan_out<T, F>(n: usize, workers: usize, encoder: &dyn DualEncoder, job: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, &dyn DualEncoder) -> T + Sync,
{
    let workers = workers.clamp(1, n.max(1));
    if workers == 1 {
        return Ok((0..n).map(|i| job(i, encoder)).collect());
    }
    let forks: Vec<Box<dyn DualEncoder>> = match encoder.sharing() {
        WorkerSharing::Shared => Vec::new(),
        WorkerSharing::ClonePerWorker => (0..workers)
            .map(|_| {
                encoder.fork().ok_or_else(|| {
                    Error::Usage(format!(
                        "encoder `{}` requires one instance per worker but cannot be forked",
                        encoder.encoder_id()
                    ))
                })
            })
            .collect::<Result<_>>()?,
    };
    let next = AtomicUsize::new(0);
    let mut out: Vec<(usize, T)> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let enc: &dyn DualEncoder = forks.get(w).map_or(encoder, |b| b.as_ref());
                let (next, job) = (&next, &job);
                s.spawn(move || {
                    let mut done = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        if i >= n {
                            break;
                        }
                        done.push((i, job(i, enc)));
                    }
                    done
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("audit worker panicked"))
            .collect()
    });
    out.sort_by_key(|(i, _)| *i);
    Ok(out.into_iter().map(|(_, t)| t).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlagRun {
    pub seed: u64,
    pub flagged: bool,
    pub manifest_path: Option<String>,
    pub final_similarity: Option<f64>,
    pub verdict: Option<SafetyVerdict>,
    /// Set when the run failed; failed runs count as not flagged.
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlagReport {
    pub prompt: String,
    pub encoder_id: String,
    pub checker_id: String,
    pub base_seed: u64,
    pub n_runs: usize,
    pub flagged_count: usize,
    pub failed_count: usize,
    pub per_run: Vec<FlagRun>,
}

impl FlagReport {
    pub fn counts_consistent(&self) -> bool {
        self.per_run.len() == self.n_runs
            && self.flagged_count <= self.n_runs
            && self.flagged_count == self.per_run.iter().filter(|r| r.flagged).count()
            && self.failed_count == self.per_run.iter().filter(|r| r.error.is_some()).count()
    }
}

fn check_runs(n_runs: usize) -> Result<()> {
    if n_runs == 0 {
        return Err(Error::Usage("n_runs must be at least 1".into()));
    }
    Ok(())
}

pub fn nsfw_audit(
    prompt: &str,
    encoder: &dyn DualEncoder,
    checker: &dyn SafetyChecker,
    n_runs: usize,
    base_config: &InversionConfig,
    options: &AuditOptions,
    sink: &dyn RunSink,
) -> Result<FlagReport> {
    check_runs(n_runs)?;
    base_config.validate()?;
    let per_run = fan_out(n_runs, options.workers, encoder, |i, enc| {
        let seed = run_seed(base_config.seed, i);
        let attempt = || -> Result<FlagRun> {
            let config = InversionConfig {
                seed,
                ..base_config.clone()
            };
            let run = invert_with(prompt, enc, &config, options.run)?;
            let verdict = checker.check(&run.canvas)?;
            let ctx = RunContext {
                label: "runs",
                index: i,
                seed,
                flagged: Some(verdict.flagged),
            };
            let manifest_path = sink.persist(&ctx, &run)?;
            Ok(FlagRun {
                seed,
                flagged: verdict.flagged,
                manifest_path,
                final_similarity: Some(run.manifest.final_similarity),
                verdict: Some(verdict),
                error: None,
            })
        };
        attempt().unwrap_or_else(|e| {
            tracing::warn!(seed, error = %e, "audit run failed");
            FlagRun {
                seed,
                flagged: false,
                manifest_path: None,
                final_similarity: None,
                verdict: None,
                error: Some(e.to_string()),
            }
        })
    })?;
    let failed_count = per_run.iter().filter(|r| r.error.is_some()).count();
    if failed_count == n_runs {
        return Err(Error::AuditFailed {
            n_runs,
            first: per_run[0].error.clone().unwrap_or_default(),
        });
    }
    Ok(FlagReport {
        prompt: prompt.to_string(),
        encoder_id: encoder.encoder_id().to_string(),
        checker_id: checker.checker_id().to_string(),
        base_seed: base_config.seed,
        n_runs,
        flagged_count: per_run.iter().filter(|r| r.flagged).count(),
        failed_count,
        per_run,
    })
}

/// Replays persisted runs and re-checks their final canvases.
pub fn recheck_flags(
    manifests: &[RunManifest],
    encoder: &dyn DualEncoder,
    checker: &dyn SafetyChecker,
    options: RunOptions,
) -> Result<Vec<bool>> {
    manifests
        .iter()
        .map(|m| Ok(checker.check(&replay(m, encoder, options)?.canvas)?.flagged))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BiasVariant {
    Neutral,
    Female,
    Male,
}

impl BiasVariant {
    pub const ALL: [BiasVariant; 3] =
        [BiasVariant::Neutral, BiasVariant::Female, BiasVariant::Male];

    pub fn label(self) -> &'static str {
        match self {
            BiasVariant::Neutral => "neutral",
            BiasVariant::Female => "female",
            BiasVariant::Male => "male",
        }
    }
}

impl fmt::Display for BiasVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasRun {
    pub seed: u64,
    pub class: String,
    pub scores: Vec<f64>,
    pub manifest_path: Option<String>,
    pub final_similarity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailedRun {
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub base_prompt: String,
    pub variant: BiasVariant,
    pub prompt: String,
    pub target_encoder_id: String,
    pub classifier_id: String,
    pub template: String,
    pub base_seed: u64,
    pub requested_runs: usize,
    /// Runs that completed and were classified.
    pub n_runs: usize,
    pub man_count: usize,
    pub woman_count: usize,
    pub per_run: Vec<BiasRun>,
    pub failures: Vec<FailedRun>,
}

impl BiasReport {
    pub fn counts_consistent(&self) -> bool {
        self.man_count + self.woman_count == self.n_runs
            && self.per_run.len() == self.n_runs
            && self.n_runs + self.failures.len() == self.requested_runs
    }
}

/// Gendered variants of the neutral prompt, neutral first.
pub fn bias_variants(
    neutral: &str,
    female: Option<&str>,
    male: Option<&str>,
) -> BTreeMap<BiasVariant, String> {
    let mut m = BTreeMap::new();
    m.insert(BiasVariant::Neutral, neutral.to_string());
    if let Some(f) = female {
        m.insert(BiasVariant::Female, f.to_string());
    }
    if let Some(x) = male {
        m.insert(BiasVariant::Male, x.to_string());
    }
    m
}

#[allow(clippy::too_many_arguments)]
pub fn bias_audit(
    base_prompt: &str,
    variants: &BTreeMap<BiasVariant, String>,
    target_encoder: &dyn DualEncoder,
    classifier: &dyn ImageClassifier,
    n_runs: usize,
    config: &InversionConfig,
    options: &AuditOptions,
    sink: &dyn RunSink,
) -> Result<Vec<BiasReport>> {
    check_runs(n_runs)?;
    config.validate()?;
    if !variants.contains_key(&BiasVariant::Neutral) {
        return Err(Error::Usage(
            "bias audit variants must include `neutral`".into(),
        ));
    }
    if classifier.classifier_id() == target_encoder.encoder_id() {
        tracing::warn!(
            encoder = target_encoder.encoder_id(),
            "classifier and inversion target are the same encoder"
        );
    }
    let mut reports = Vec::with_capacity(variants.len());
    for (&variant, prompt) in variants {
        let outcomes = fan_out(n_runs, options.workers, target_encoder, |i, enc| {
            let seed = run_seed(config.seed, i);
            let attempt = || -> Result<BiasRun> {
                let cfg = InversionConfig {
                    seed,
                    ..config.clone()
                };
                let run = invert_with(prompt, enc, &cfg, options.run)?;
                let Classification { class, scores, .. } = classifier.classify(&run.canvas)?;
                if class != "man" && class != "woman" {
                    return Err(Error::Usage(format!(
                        "classifier returned `{class}`, expected man or woman"
                    )));
                }
                let ctx = RunContext {
                    label: variant.label(),
                    index: i,
                    seed,
                    flagged: None,
                };
                let manifest_path = sink.persist(&ctx, &run)?;
                Ok(BiasRun {
                    seed,
                    class,
                    scores,
                    manifest_path,
                    final_similarity: run.manifest.final_similarity,
                })
            };
            attempt().map_err(|e| FailedRun {
                seed,
                error: e.to_string(),
            })
        })?;
        let mut per_run: Vec<BiasRun> = Vec::new();
        let mut failures: Vec<FailedRun> = Vec::new();
        for outcome in outcomes {
            match outcome {
                Ok(run) => per_run.push(run),
                Err(failed) => failures.push(failed),
            }
        }
        if per_run.is_empty() {
            return Err(Error::AuditFailed {
                n_runs,
                first: format!("{variant}: {}", failures[0].error),
            });
        }
        let man_count = per_run.iter().filter(|r| r.class == "man").count();
        reports.push(BiasReport {
            base_prompt: base_prompt.to_string(),
            variant,
            prompt: prompt.clone(),
            target_encoder_id: target_encoder.encoder_id().to_string(),
            classifier_id: classifier.classifier_id().to_string(),
            template: classifier.template().to_string(),
            base_seed: config.seed,
            requested_runs: n_runs,
            n_runs: per_run.len(),
            man_count,
            woman_count: per_run.len() - man_count,
            per_run,
            failures,
        });
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::classify::FixedClassifier;
    use crate::analysis::safety::StubChecker;
    use crate::encoders::toy_encoder;
    use crate::inversion::ResolutionSchedule;

    fn tiny() -> InversionConfig {
        InversionConfig {
            schedule: ResolutionSchedule::single(8, 5),
            batch_views: 2,
            snapshot_iterations: vec![],
            seed: 40,
            ..InversionConfig::default()
        }
    }

    #[test]
    fn stub_checkers_tally() {
        let enc = toy_encoder(0, 8).unwrap();
        let opts = AuditOptions::default();
        let yes = nsfw_audit(
            "p",
            &enc,
            &StubChecker::AlwaysTrue,
            5,
            &tiny(),
            &opts,
            &DiscardRuns,
        )
        .unwrap();
        assert_eq!(yes.flagged_count, 5);
        assert!(yes.counts_consistent());
        assert_eq!(
            yes.per_run.iter().map(|r| r.seed).collect::<Vec<_>>(),
            [40, 41, 42, 43, 44]
        );
        let no = nsfw_audit(
            "p",
            &enc,
            &StubChecker::AlwaysFalse,
            3,
            &tiny(),
            &opts,
            &DiscardRuns,
        )
        .unwrap();
        assert_eq!(no.flagged_count, 0);
        assert!(matches!(
            nsfw_audit(
                "p",
                &enc,
                &StubChecker::AlwaysFalse,
                0,
                &tiny(),
                &opts,
                &DiscardRuns
            ),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn workers_do_not_change_results() {
        let enc = toy_encoder(0, 8).unwrap();
        let checker = StubChecker::MeanPixelThreshold(0.5);
        let run = RunOptions {
            deterministic: true,
        };
        let one = AuditOptions { workers: 1, run };
        let three = AuditOptions { workers: 3, run };
        let a = nsfw_audit("p", &enc, &checker, 4, &tiny(), &one, &DiscardRuns).unwrap();
        let b = nsfw_audit("p", &enc, &checker, 4, &tiny(), &three, &DiscardRuns).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn failed_runs_are_recorded() {
        let enc = toy_encoder(0, 8).unwrap();
        let long = vec!["w"; 100].join(" ");
        let err = nsfw_audit(
            &long,
            &enc,
            &StubChecker::AlwaysTrue,
            2,
            &tiny(),
            &AuditOptions::default(),
            &DiscardRuns,
        );
        assert!(matches!(err, Err(Error::AuditFailed { n_runs: 2, .. })));
    }

    #[test]
    fn fixed_classifier_bias() {
        let enc = toy_encoder(0, 8).unwrap();
        let variants = bias_variants("a nurse", Some("a female nurse"), Some("a male nurse"));
        let cls = FixedClassifier {
            class: "man".into(),
        };
        let reports = bias_audit(
            "a nurse",
            &variants,
            &enc,
            &cls,
            3,
            &tiny(),
            &AuditOptions::default(),
            &DiscardRuns,
        )
        .unwrap();
        assert_eq!(
            reports.iter().map(|r| r.variant).collect::<Vec<_>>(),
            BiasVariant::ALL
        );
        for r in &reports {
            assert_eq!(r.man_count, 3);
            assert!(r.counts_consistent());
        }
        let no_neutral: BTreeMap<_, _> = [(BiasVariant::Male, "x".to_string())].into();
        assert!(matches!(
            bias_audit(
                "x",
                &no_neutral,
                &enc,
                &cls,
                1,
                &tiny(),
                &AuditOptions::default(),
                &DiscardRuns
            ),
            Err(Error::Usage(_))
        ));
    }
}
