//! The optimization engine.
//!
//! Starting from uniform noise, every iteration draws `b` augmented views,
//! evaluates the composed loss, takes one Adam step on the raw pixels and
//! projects them back into `[0, 1]`. At each schedule boundary the canvas is
//! bilinearly upscaled and the optimizer moments are reset, since they are
//! tied to the old shape.

use std::time::Instant;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augmentations::{sample_batch_transforms, transform_from_seed, AugmentationPolicy};
use crate::canvas::PixelCanvas;
use crate::encoders::DualEncoder;
use crate::error::{Error, Result};
use crate::objective::{compose_loss_with_grad, cosine_similarity, LossBreakdown};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// Stream of the seeded generator that feeds per-iteration view seeds. The
/// canvas initialization uses stream 0.
const AUGMENTATION_STREAM: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub start_iteration: usize,
    pub resolution: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolutionSchedule {
    pub stages: Vec<Stage>,
    pub total_steps: usize,
}

impl ResolutionSchedule {
    /// 64 px, then 128 px from iteration 900, then 224 px from 1800; 3400 steps.
    pub fn published() -> Self {
        Self {
            stages: vec![
                Stage {
                    start_iteration: 0,
                    resolution: 64,
                },
                Stage {
                    start_iteration: 900,
                    resolution: 128,
                },
                Stage {
                    start_iteration: 1800,
                    resolution: 224,
                },
            ],
            total_steps: 3400,
        }
    }

    pub fn single(resolution: usize, total_steps: usize) -> Self {
        Self {
            stages: vec![Stage {
                start_iteration: 0,
                resolution,
            }],
            total_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .stages
            .first()
            .ok_or_else(|| Error::Config("resolution schedule has no stages".into()))?;
        if first.start_iteration != 0 {
            return Err(Error::Config(
                "first schedule stage must start at iteration 0".into(),
            ));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be positive".into()));
        }
        for s in &self.stages {
            if s.resolution == 0 {
                return Err(Error::Config("stage resolution must be positive".into()));
            }
            if s.start_iteration >= self.total_steps {
                return Err(Error::Config(format!(
                    "stage at iteration {} starts after the last step {}",
                    s.start_iteration,
                    self.total_steps - 1
                )));
            }
        }
        for w in self.stages.windows(2) {
            if w[1].start_iteration <= w[0].start_iteration || w[1].resolution <= w[0].resolution {
                return Err(Error::Config(
                    "stage start iterations and resolutions must both strictly increase".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn initial_resolution(&self) -> usize {
        self.stages[0].resolution
    }

    pub fn resolution_at(&self, iteration: usize) -> usize {
        self.stages
            .iter()
            .rev()
            .find(|s| s.start_iteration <= iteration)
            .map_or(self.stages[0].resolution, |s| s.resolution)
    }

    /// New resolution if a stage other than the first begins at `iteration`.
    pub fn boundary_at(&self, iteration: usize) -> Option<usize> {
        self.stages
            .iter()
            .skip(1)
            .find(|s| s.start_iteration == iteration)
            .map(|s| s.resolution)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamSettings {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamSettings {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InversionConfig {
    pub learning_rate: f64,
    pub batch_views: usize,
    pub alpha: f64,
    pub beta: f64,
    pub policy: AugmentationPolicy,
    pub schedule: ResolutionSchedule,
    pub seed: u64,
    pub snapshot_iterations: Vec<usize>,
    pub optimizer: AdamSettings,
}

pub const DEFAULT_SNAPSHOTS: [usize; 7] = [0, 100, 900, 1400, 1800, 3000, 3400];

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            batch_views: 8,
            alpha: 5e-3,
            beta: 1e-3,
            policy: AugmentationPolicy::default(),
            schedule: ResolutionSchedule::published(),
            seed: 0,
            snapshot_iterations: DEFAULT_SNAPSHOTS.to_vec(),
            optimizer: AdamSettings::default(),
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        // zero is allowed: it freezes the canvas, which is useful as a control
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_views == 0 {
            return Err(Error::Config("batch_views must be at least 1".into()));
        }
        if !(self.alpha >= 0.0
            && self.beta >= 0.0
            && self.alpha.is_finite()
            && self.beta.is_finite())
        {
            return Err(Error::Config(format!(
                "alpha and beta must be finite and >= 0, got {} and {}",
                self.alpha, self.beta
            )));
        }
        let o = &self.optimizer;
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.epsilon > 0.0) {
            return Err(Error::Config(format!("invalid Adam settings {o:?}")));
        }
        self.policy.validate()?;
        self.schedule.validate()?;
        if let Some(bad) = self
            .snapshot_iterations
            .iter()
            .find(|&&i| i > self.schedule.total_steps)
        {
            return Err(Error::Config(format!(
                "snapshot iteration {bad} lies beyond total_steps {}",
                self.schedule.total_steps
            )));
        }
        Ok(())
    }
}

/// Uniform `[0, 1)` noise, `3 x resolution x resolution`.
pub fn init_canvas(resolution: usize, seed: u64) -> Result<PixelCanvas> {
    if resolution == 0 {
        return Err(Error::Usage("canvas resolution must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..3 * resolution * resolution)
        .map(|_| rng.random::<f64>())
        .collect();
    PixelCanvas::from_vec(3, resolution, resolution, values)
}

pub fn upscale(x: &PixelCanvas, new_resolution: usize) -> Result<PixelCanvas> {
    let current = x.height().max(x.width());
    if new_resolution <= current {
        return Err(Error::Usage(format!(
            "upscale must increase the resolution, got {current} -> {new_resolution}"
        )));
    }
    let mut y = x.resize_bilinear(new_resolution, new_resolution);
    y.clamp_unit();
    Ok(y)
}

/// Adaptive-moment optimizer over a flat parameter vector.
#[derive(Clone, Debug)]
pub struct Adam {
    settings: AdamSettings,
    learning_rate: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize, learning_rate: f64, settings: AdamSettings) -> Self {
        Self {
            settings,
            learning_rate,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn reset(&mut self, len: usize) {
        self.m = vec![0.0; len];
        self.v = vec![0.0; len];
        self.t = 0;
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(
            params.len(),
            self.m.len(),
            "optimizer state does not match parameters"
        );
        let AdamSettings {
            beta1,
            beta2,
            epsilon,
        } = self.settings;
        self.t += 1;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= self.learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub resolution: usize,
    pub loss: LossBreakdown,
    /// Substream seeds of this iteration's augmented views.
    pub view_seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub prompt: String,
    pub encoder_id: String,
    pub config: InversionConfig,
    pub loss_trace: Vec<TraceEntry>,
    pub snapshot_paths: Vec<String>,
    pub final_similarity: f64,
    /// Seconds; zero when recorded in deterministic mode.
    pub wall_time: f64,
}

impl RunManifest {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        if m.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::Integrity(format!(
                "manifest schema version {} is not supported (expected {MANIFEST_SCHEMA_VERSION})",
                m.schema_version
            )));
        }
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub iteration: usize,
    pub canvas: PixelCanvas,
}

#[derive(Clone, Debug)]
pub struct Inversion {
    pub canvas: PixelCanvas,
    pub manifest: RunManifest,
    pub snapshots: Vec<Snapshot>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    /// Leave `wall_time` at zero so identical runs serialize identically.
    pub deterministic: bool,
}

pub fn invert(
    prompt: &str,
    encoder: &dyn DualEncoder,
    config: &InversionConfig,
) -> Result<Inversion> {
    run(prompt, encoder, config, None, RunOptions::default())
}

pub fn invert_with(
    prompt: &str,
    encoder: &dyn DualEncoder,
    config: &InversionConfig,
    options: RunOptions,
) -> Result<Inversion> {
    run(prompt, encoder, config, None, options)
}

/// Re-runs a recorded inversion using the view seeds stored in its trace.
pub fn replay(
    manifest: &RunManifest,
    encoder: &dyn DualEncoder,
    options: RunOptions,
) -> Result<Inversion> {
    if manifest.encoder_id != encoder.encoder_id() {
        return Err(Error::Usage(format!(
            "manifest was recorded with `{}`, replay got `{}`",
            manifest.encoder_id,
            encoder.encoder_id()
        )));
    }
    if manifest.loss_trace.len() != manifest.config.schedule.total_steps {
        return Err(Error::Integrity(format!(
            "manifest trace has {} entries for {} steps",
            manifest.loss_trace.len(),
            manifest.config.schedule.total_steps
        )));
    }
    let seeds: Vec<Vec<u64>> = manifest
        .loss_trace
        .iter()
        .map(|e| e.view_seeds.clone())
        .collect();
    run(
        &manifest.prompt,
        encoder,
        &manifest.config,
        Some(&seeds),
        options,
    )
}

fn run(
    prompt: &str,
    encoder: &dyn DualEncoder,
    config: &InversionConfig,
    recorded_seeds: Option<&[Vec<u64>]>,
    options: RunOptions,
) -> Result<Inversion> {
    config.validate()?;
    let started = Instant::now();
    let text_emb = encoder
        .encode_text(&[prompt])
        .map_err(|e| Error::EncoderAtIteration {
            encoder_id: encoder.encoder_id().to_string(),
            iteration: 0,
            source: Box::new(e),
        })?
        .remove(0);

    let schedule = &config.schedule;
    let mut canvas = init_canvas(schedule.initial_resolution(), config.seed)?;
    let mut adam = Adam::new(canvas.len(), config.learning_rate, config.optimizer);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(config.seed);
    aug_rng.set_stream(AUGMENTATION_STREAM);

    let mut manifest = RunManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        prompt: prompt.to_string(),
        encoder_id: encoder.encoder_id().to_string(),
        config: config.clone(),
        loss_trace: Vec::with_capacity(schedule.total_steps),
        snapshot_paths: Vec::new(),
        final_similarity: f64::NAN,
        wall_time: 0.0,
    };
    let mut snapshots = Vec::new();

    for iteration in 0..schedule.total_steps {
        if let Some(res) = schedule.boundary_at(iteration) {
            canvas = upscale(&canvas, res)?;
            adam.reset(canvas.len());
        }
        if config.snapshot_iterations.contains(&iteration) {
            snapshots.push(Snapshot {
                iteration,
                canvas: canvas.clone(),
            });
        }

        let (view_seeds, transforms) = match recorded_seeds {
            Some(all) => {
                let seeds = all[iteration].clone();
                if seeds.len() != config.batch_views {
                    return Err(Error::Integrity(format!(
                        "iteration {iteration} records {} view seeds, config asks for {}",
                        seeds.len(),
                        config.batch_views
                    )));
                }
                let t = seeds
                    .iter()
                    .map(|&s| transform_from_seed(&config.policy, s))
                    .collect();
                (seeds, t)
            }
            None => sample_batch_transforms(config.batch_views, &config.policy, &mut aug_rng)?,
        };

        let eval = match compose_loss_with_grad(
            &canvas,
            &text_emb,
            encoder,
            &transforms,
            config.alpha,
            config.beta,
        ) {
            Ok(e) => e,
            Err(Error::Numeric(detail)) => {
                return Err(Error::NonFinite {
                    iteration,
                    detail,
                    manifest: Box::new(manifest),
                })
            }
            Err(e) => {
                return Err(Error::EncoderAtIteration {
                    encoder_id: encoder.encoder_id().to_string(),
                    iteration,
                    source: Box::new(e),
                })
            }
        };
        if !eval.gradient.is_finite() {
            return Err(Error::NonFinite {
                iteration,
                detail: "non-finite gradient".into(),
                manifest: Box::new(manifest),
            });
        }
        manifest.loss_trace.push(TraceEntry {
            iteration,
            resolution: canvas.height(),
            loss: eval.loss,
            view_seeds,
        });

        adam.step(canvas.values_mut(), eval.gradient.values());
        canvas.clamp_unit();

        if iteration % 100 == 0 {
            tracing::debug!(
                iteration,
                loss = eval.loss.total,
                similarity = eval.loss.similarity_term,
                "step"
            );
        }
    }
    if config.snapshot_iterations.contains(&schedule.total_steps) {
        snapshots.push(Snapshot {
            iteration: schedule.total_steps,
            canvas: canvas.clone(),
        });
    }

    let final_emb = encoder
        .encode_image(std::slice::from_ref(&canvas))
        .map_err(|e| Error::EncoderAtIteration {
            encoder_id: encoder.encoder_id().to_string(),
            iteration: schedule.total_steps,
            source: Box::new(e),
        })?
        .remove(0);
    manifest.final_similarity = cosine_similarity(&final_emb, &text_emb)?;
    if !options.deterministic {
        manifest.wall_time = started.elapsed().as_secs_f64();
    }
    Ok(Inversion {
        canvas,
        manifest,
        snapshots,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::toy_encoder;

    fn small_config(steps: usize) -> InversionConfig {
        InversionConfig {
            schedule: ResolutionSchedule::single(8, steps),
            snapshot_iterations: vec![0, steps],
            batch_views: 2,
            ..InversionConfig::default()
        }
    }

    #[test]
    fn init_canvas_examples() {
        let a = init_canvas(64, 5).unwrap();
        assert_eq!(a.shape(), (3, 64, 64));
        assert_eq!(a, init_canvas(64, 5).unwrap());
        assert_ne!(a, init_canvas(64, 6).unwrap());
        assert!(a.is_in_unit_range());
        assert!(init_canvas(0, 1).is_err());
    }

    #[test]
    fn upscale_examples() {
        let c = PixelCanvas::filled(3, 4, 4, 0.3);
        let u = upscale(&c, 9).unwrap();
        assert_eq!(u.shape(), (3, 9, 9));
        assert!(u.values().iter().all(|v| (v - 0.3).abs() < 1e-15));
        assert!(upscale(&c, 4).is_err());
        assert!(upscale(&c, 2).is_err());
    }

    #[test]
    fn published_schedule() {
        let s = ResolutionSchedule::published();
        s.validate().unwrap();
        assert_eq!(s.resolution_at(0), 64);
        assert_eq!(s.resolution_at(899), 64);
        assert_eq!(s.resolution_at(900), 128);
        assert_eq!(s.resolution_at(1799), 128);
        assert_eq!(s.resolution_at(1800), 224);
        assert_eq!(s.resolution_at(3399), 224);
        assert_eq!(s.boundary_at(900), Some(128));
        assert_eq!(s.boundary_at(1800), Some(224));
        assert_eq!(s.boundary_at(0), None);
    }

    #[test]
    fn schedule_validation() {
        let mut s = ResolutionSchedule::published();
        s.stages[1].resolution = 32;
        assert!(s.validate().is_err());
        let mut s = ResolutionSchedule::published();
        s.stages[0].start_iteration = 5;
        assert!(s.validate().is_err());
        let mut s = ResolutionSchedule::published();
        s.stages[2].start_iteration = 3400;
        assert!(s.validate().is_err());
    }

    #[test]
    fn config_validation() {
        InversionConfig::default().validate().unwrap();
        let mut c = InversionConfig::default();
        c.snapshot_iterations.push(3401);
        assert!(c.validate().is_err());
        let c = InversionConfig {
            learning_rate: -1.0,
            ..InversionConfig::default()
        };
        assert!(c.validate().is_err());
        let c = InversionConfig {
            batch_views: 0,
            ..InversionConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut adam = Adam::new(3, 0.1, AdamSettings::default());
        let mut p = vec![0.5, 0.5, 0.5];
        adam.step(&mut p, &[2.0, -3.0, 0.0]);
        // bias-corrected first step is lr * sign(g) up to epsilon
        assert!((p[0] - 0.4).abs() < 1e-8);
        assert!((p[1] - 0.6).abs() < 1e-8);
        assert_eq!(p[2], 0.5);
    }

    #[test]
    fn zero_learning_rate_freezes_canvas() {
        let enc = toy_encoder(0, 8).unwrap();
        let cfg = InversionConfig {
            learning_rate: 0.0,
            ..small_config(10)
        };
        let out = invert("a red apple", &enc, &cfg).unwrap();
        assert_eq!(out.canvas, init_canvas(8, cfg.seed).unwrap());
        let first = out.manifest.loss_trace[0].loss;
        for e in &out.manifest.loss_trace {
            assert_eq!(e.loss.tv_term, first.tv_term);
            assert_eq!(e.loss.l1_term, first.l1_term);
        }
    }

    #[test]
    fn projection_and_trace_length() {
        let enc = toy_encoder(0, 8).unwrap();
        let cfg = small_config(20);
        let out = invert("a red apple", &enc, &cfg).unwrap();
        assert_eq!(out.manifest.loss_trace.len(), 20);
        assert!(out.canvas.is_in_unit_range());
        for e in &out.manifest.loss_trace {
            assert!(e.loss.identity_holds(cfg.alpha, cfg.beta));
        }
        assert_eq!(
            out.snapshots
                .iter()
                .map(|s| s.iteration)
                .collect::<Vec<_>>(),
            vec![0, 20]
        );
        assert_eq!(out.snapshots[1].canvas, out.canvas);
    }

    #[test]
    fn replay_reproduces_run() {
        let enc = toy_encoder(3, 8).unwrap();
        let cfg = small_config(15);
        let opts = RunOptions {
            deterministic: true,
        };
        let a = invert_with("a quiet lake", &enc, &cfg, opts).unwrap();
        let b = replay(&a.manifest, &enc, opts).unwrap();
        assert_eq!(a.manifest, b.manifest);
        assert_eq!(a.snapshots, b.snapshots);
    }

    #[test]
    fn manifest_schema_version_is_checked() {
        let enc = toy_encoder(3, 8).unwrap();
        let mut m = invert("x", &enc, &small_config(2)).unwrap().manifest;
        m.schema_version = 99;
        assert!(matches!(
            RunManifest::from_json(&m.to_json().unwrap()),
            Err(Error::Integrity(_))
        ));
    }
}
