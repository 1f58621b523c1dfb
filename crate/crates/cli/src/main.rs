//! clipinv: invert dual encoders and audit what comes out.
//!
//! Every experiment command writes an archive directory (see `clipinv::runs`)
//! and prints its rendered report.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use clipinv::analysis::LexiconSource;
use clipinv::augmentations::AugmentationPolicy;
use clipinv::encoders::{cache_dir, EncoderRegistry};
use clipinv::inversion::{InversionConfig, ResolutionSchedule};
use clipinv::runs::{
    load_config_file, render_report, replay_archived_run, run_experiment, CheckerChoice,
    ClassifierChoice, Command, ExperimentSpec, LexiconInput, REPORT_TXT,
};
use clipinv::Error;

#[derive(Parser, Debug)]
#[command(
    name = "clipinv",
    version,
    about = "Invert contrastive dual encoders and audit the results"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Optimize one image for one prompt.
    Invert {
        #[command(flatten)]
        common: Common,
    },
    /// Rank lexicon words by similarity to prompts (and optionally an image).
    NearestWords {
        #[command(flatten)]
        common: Common,
        /// Word list, as PATH or SOURCE=PATH (sources: common-english, dirty-naughty, body-parts, offensive-profane).
        #[arg(long = "lexicon", required = true)]
        lexicon: Vec<String>,
        #[arg(long, short, default_value_t = 20)]
        k: usize,
        /// Also query with this PNG's image embedding.
        #[arg(long)]
        image: Option<PathBuf>,
    },
    /// Count safety-checker flags over repeated inversions.
    NsfwAudit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n_runs: usize,
        /// reference, always-true, always-false or mean-pixel:<threshold>.
        #[arg(long, default_value = "reference")]
        checker: String,
        /// Store only hashes of flagged images.
        #[arg(long)]
        no_save_flagged: bool,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Classify repeated inversions of neutral and gendered prompts as man or woman.
    BiasAudit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        female_prompt: Option<String>,
        #[arg(long)]
        male_prompt: Option<String>,
        #[arg(long)]
        n_runs: usize,
        /// Encoder used for zero-shot classification.
        #[arg(long, default_value = "vit-b-32-openai")]
        classifier: String,
        /// Replace the classifier with a stub that always answers this class.
        #[arg(long)]
        classifier_stub: Option<String>,
        #[arg(long, default_value = clipinv::analysis::DEFAULT_TEMPLATE)]
        template: String,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Invert the same prompts with several encoders.
    ScaleMatrix {
        #[command(flatten)]
        common: Common,
    },
    /// Score an image against word-shuffled versions of its prompt.
    ShuffleCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 10)]
        n_shuffles: usize,
        /// Score this PNG instead of inverting the prompt first.
        #[arg(long)]
        image: Option<PathBuf>,
    },
    /// Re-render the report of an existing archive.
    Render { archive: PathBuf },
    /// Replay an archived run and compare final image hashes.
    Replay {
        archive: PathBuf,
        /// Run directory inside the archive; defaults to the archive root.
        #[arg(long, default_value = "")]
        run: String,
    },
    /// List registered encoders.
    Encoders,
}

#[derive(Args, Debug)]
struct Common {
    #[arg(long = "prompt", short = 'p', required = true)]
    prompts: Vec<String>,
    #[arg(long = "encoder", short = 'e', default_value = "vit-b-16-openai")]
    encoders: Vec<String>,
    #[arg(long, short = 'o')]
    out: PathBuf,
    /// TOML file with inversion settings; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_views: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    /// Total optimization steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Optimize at one fixed resolution instead of the staged schedule.
    #[arg(long)]
    resolution: Option<usize>,
    /// Comma-separated snapshot iterations.
    #[arg(long, value_delimiter = ',')]
    snapshots: Option<Vec<usize>>,
    /// Disable all augmentations.
    #[arg(long)]
    no_augment: bool,
}

impl Common {
    fn resolve_config(&self) -> clipinv::Result<InversionConfig> {
        let mut c = match &self.config {
            Some(p) => load_config_file(p)?,
            None => InversionConfig::default(),
        };
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.lr {
            c.learning_rate = v;
        }
        if let Some(v) = self.batch_views {
            c.batch_views = v;
        }
        if let Some(v) = self.alpha {
            c.alpha = v;
        }
        if let Some(v) = self.beta {
            c.beta = v;
        }
        if let Some(r) = self.resolution {
            c.schedule = ResolutionSchedule::single(r, c.schedule.total_steps);
        }
        if let Some(v) = self.steps {
            c.schedule.total_steps = v;
            if self.snapshots.is_none() {
                c.snapshot_iterations.retain(|&i| i <= v);
            }
        }
        if let Some(v) = &self.snapshots {
            c.snapshot_iterations = v.clone();
        }
        if self.no_augment {
            c.policy = AugmentationPolicy::identity();
        }
        Ok(c)
    }

    fn spec(&self, command: Command) -> clipinv::Result<ExperimentSpec> {
        let mut spec = ExperimentSpec::new(command, &self.prompts[0], &self.encoders[0], &self.out);
        spec.prompts = self.prompts.clone();
        spec.encoder_ids = self.encoders.clone();
        spec.config = self.resolve_config()?;
        Ok(spec)
    }
}

fn parse_lexicon(arg: &str) -> clipinv::Result<LexiconInput> {
    match arg.split_once('=') {
        Some((source, path)) => Ok(LexiconInput {
            path: PathBuf::from(path),
            source: source.parse()?,
        }),
        None => Ok(LexiconInput {
            path: PathBuf::from(arg),
            source: LexiconSource::CommonEnglish,
        }),
    }
}

fn build_spec(cmd: &Cmd) -> clipinv::Result<Option<ExperimentSpec>> {
    let spec = match cmd {
        Cmd::Invert { common } => common.spec(Command::Invert)?,
        Cmd::NearestWords {
            common,
            lexicon,
            k,
            image,
        } => {
            let mut s = common.spec(Command::NearestWords)?;
            s.options.lexicon = lexicon
                .iter()
                .map(|l| parse_lexicon(l))
                .collect::<clipinv::Result<_>>()?;
            s.options.top_k = *k;
            s.options.image = image.clone();
            s
        }
        Cmd::NsfwAudit {
            common,
            n_runs,
            checker,
            no_save_flagged,
            workers,
        } => {
            let mut s = common.spec(Command::NsfwAudit)?;
            s.n_runs = Some(*n_runs);
            s.options.checker = checker.parse::<CheckerChoice>()?;
            s.options.save_flagged = !no_save_flagged;
            s.options.workers = *workers;
            s
        }
        Cmd::BiasAudit {
            common,
            female_prompt,
            male_prompt,
            n_runs,
            classifier,
            classifier_stub,
            template,
            workers,
        } => {
            let mut s = common.spec(Command::BiasAudit)?;
            s.n_runs = Some(*n_runs);
            s.options.female_prompt = female_prompt.clone();
            s.options.male_prompt = male_prompt.clone();
            s.options.classifier = match classifier_stub {
                Some(c) => ClassifierChoice::Fixed(c.clone()),
                None => ClassifierChoice::Encoder(classifier.clone()),
            };
            s.options.template = template.clone();
            s.options.workers = *workers;
            s
        }
        Cmd::ScaleMatrix { common } => common.spec(Command::ScaleMatrix)?,
        Cmd::ShuffleCheck {
            common,
            n_shuffles,
            image,
        } => {
            let mut s = common.spec(Command::ShuffleCheck)?;
            s.options.n_shuffles = *n_shuffles;
            s.options.image = image.clone();
            s
        }
        Cmd::Render { .. } | Cmd::Replay { .. } | Cmd::Encoders => return Ok(None),
    };
    Ok(Some(spec))
}

fn print_archive(dir: &Path) -> clipinv::Result<()> {
    let text = std::fs::read_to_string(dir.join(REPORT_TXT))
        .or_else(|_| render_report(dir).map_err(|e| e.to_string()));
    match text {
        Ok(t) => print!("{t}"),
        Err(e) => eprintln!("{e}"),
    }
    eprintln!("archive: {}", dir.display());
    Ok(())
}

fn run(cli: Cli) -> clipinv::Result<()> {
    if let Some(spec) = build_spec(&cli.command)? {
        return match run_experiment(&spec) {
            Ok(archive) => print_archive(&archive.dir),
            Err(Error::PartialFailure {
                archive,
                failed,
                total,
            }) => {
                print_archive(&archive)?;
                Err(Error::PartialFailure {
                    archive,
                    failed,
                    total,
                })
            }
            Err(e) => Err(e),
        };
    }
    match cli.command {
        Cmd::Render { archive } => {
            print!("{}", render_report(&archive)?);
            Ok(())
        }
        Cmd::Replay { archive, run } => {
            let check =
                replay_archived_run(&archive, &run, &EncoderRegistry::from_env()?, &cache_dir())?;
            println!("recorded {}", check.recorded_sha256);
            println!("replayed {}", check.replayed_sha256);
            if check.matches() {
                println!("replay matches");
                Ok(())
            } else {
                Err(Error::Integrity(
                    "replayed final image differs from the archived one".into(),
                ))
            }
        }
        Cmd::Encoders => {
            let registry = EncoderRegistry::from_env()?;
            for e in registry.entries() {
                println!(
                    "{:<26} dim {:>4}  res {:>3}  {:<18} {}",
                    e.encoder_id, e.embedding_dim, e.native_resolution, e.architecture, e.corpus
                );
            }
            Ok(())
        }
        _ => unreachable!("experiment commands return above"),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Config(_) | Error::UnknownEncoder { .. } => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
