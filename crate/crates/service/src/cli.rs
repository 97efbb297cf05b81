//! `whatif` command line. Every option can come from a flag, an environment
//! variable or the TOML file named by `--config`, in that order of
//! precedence.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use whatif_core::baseline::SLearnerConfig;
use whatif_core::episode::PriorConfig;
use whatif_core::eval::BenchmarkProtocol;
use whatif_core::model::{ModelConfig, TrainConfig};
use whatif_core::scm::{GraphConfig, MechanismPrior};

use crate::error::{Result, ServiceError};
use crate::runs::{
    execute, replay, CheckpointRef, EstimatorName, EvaluateRun, ExportRun, GenerateRun, Manifest, RunSpec, TrainRun,
    MANIFEST_FILE,
};
use crate::store::sha256_hex;

#[derive(Debug, Parser)]
#[command(name = "whatif", version, about = "Causal what-if workbench")]
pub struct Cli {
    /// TOML file with defaults for any option.
    #[arg(long, global = true, env = "WHATIF_CONFIG")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample pretraining episodes from the SCM prior.
    GeneratePrior(GenerateArgs),
    /// Pretrain the in-context model.
    Train(TrainArgs),
    /// Score estimators on the semi-synthetic benchmark suite.
    Evaluate(EvaluateArgs),
    /// Run the HTTP API.
    Serve(ServeArgs),
    /// Sample one SCM and write it as JSON.
    ExportScm(ExportArgs),
    /// Re-run a manifest and verify its outputs byte for byte.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorPreset {
    Default,
    NarrowLinear,
}

impl PriorPreset {
    fn config(self) -> PriorConfig {
        match self {
            PriorPreset::Default => PriorConfig::default(),
            PriorPreset::NarrowLinear => PriorConfig::narrow_linear(),
        }
    }
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, env = "WHATIF_OUT")]
    pub out: Option<PathBuf>,
    #[arg(long, env = "WHATIF_SEED")]
    pub seed: Option<u64>,
    #[arg(long, env = "WHATIF_COUNT")]
    pub count: Option<usize>,
    #[arg(long, value_enum, env = "WHATIF_PRIOR")]
    pub prior: Option<PriorPreset>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, env = "WHATIF_OUT")]
    pub out: Option<PathBuf>,
    #[arg(long, env = "WHATIF_SEED")]
    pub seed: Option<u64>,
    #[arg(long, env = "WHATIF_STEPS")]
    pub steps: Option<usize>,
    #[arg(long, env = "WHATIF_LEARNING_RATE")]
    pub learning_rate: Option<f64>,
    #[arg(long, env = "WHATIF_BATCH_EPISODES")]
    pub batch_episodes: Option<usize>,
    #[arg(long, env = "WHATIF_CHECKPOINT_EVERY")]
    pub checkpoint_every: Option<usize>,
    #[arg(long, value_enum, env = "WHATIF_PRIOR")]
    pub prior: Option<PriorPreset>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long, env = "WHATIF_OUT")]
    pub out: Option<PathBuf>,
    #[arg(long, env = "WHATIF_SEED")]
    pub seed: Option<u64>,
    /// Rows per generated dataset.
    #[arg(long, env = "WHATIF_ROWS")]
    pub rows: Option<usize>,
    #[arg(long, value_enum, value_delimiter = ',', env = "WHATIF_ESTIMATORS")]
    pub estimators: Option<Vec<EstimatorArg>>,
    #[arg(long, env = "WHATIF_CHECKPOINT")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, env = "WHATIF_MAX_CONTEXT")]
    pub max_context: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum EstimatorArg {
    IclModel,
    SLearner,
    Oracle,
    Zero,
}

impl From<EstimatorArg> for EstimatorName {
    fn from(a: EstimatorArg) -> Self {
        match a {
            EstimatorArg::IclModel => EstimatorName::IclModel,
            EstimatorArg::SLearner => EstimatorName::SLearner,
            EstimatorArg::Oracle => EstimatorName::Oracle,
            EstimatorArg::Zero => EstimatorName::Zero,
        }
    }
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "WHATIF_STORE")]
    pub store: Option<PathBuf>,
    #[arg(long, env = "WHATIF_ADDR")]
    pub addr: Option<String>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long, env = "WHATIF_OUT")]
    pub out: Option<PathBuf>,
    #[arg(long, env = "WHATIF_SEED")]
    pub seed: Option<u64>,
    #[arg(long, env = "WHATIF_SAMPLES")]
    pub samples: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
    #[arg(long, env = "WHATIF_OUT")]
    pub out: Option<PathBuf>,
}

/// Contents of the `--config` file.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub prior_preset: Option<PriorPreset>,
    pub prior: Option<PriorConfig>,
    pub model: Option<ModelConfig>,
    pub train: Option<TrainConfig>,
    pub generate: GenerateSection,
    pub evaluate: EvaluateSection,
    pub export: ExportSection,
    pub serve: ServeSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateSection {
    pub count: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    pub rows: Option<usize>,
    pub estimators: Option<Vec<EstimatorName>>,
    pub checkpoint: Option<PathBuf>,
    pub max_context: Option<usize>,
    pub protocol: Option<BenchmarkProtocol>,
    pub slearner: Option<SLearnerConfig>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportSection {
    pub graph: Option<GraphConfig>,
    pub mechanisms: Option<MechanismPrior>,
    pub samples: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeSection {
    pub store: Option<PathBuf>,
    pub addr: Option<String>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<FileConfig> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| ServiceError::Config(format!("cannot read {}: {e}", path.display())))?;
        Ok(toml::from_str(&text)?)
    }

    fn prior(&self, preset: Option<PriorPreset>) -> PriorConfig {
        match (preset, &self.prior) {
            (Some(p), _) => p.config(),
            (None, Some(prior)) => prior.clone(),
            (None, None) => self.prior_preset.unwrap_or(PriorPreset::Default).config(),
        }
    }
}

pub const DEFAULT_EPISODES: usize = 256;
pub const DEFAULT_ROWS: usize = 1000;
pub const DEFAULT_MAX_CONTEXT: usize = 512;
pub const DEFAULT_SAMPLES: usize = 1000;
pub const DEFAULT_ADDR: &str = "127.0.0.1:8080";

fn out_dir(flag: Option<PathBuf>, file: &FileConfig) -> Result<PathBuf> {
    flag.or_else(|| file.out.clone())
        .ok_or_else(|| ServiceError::Config("an output directory is required (--out or WHATIF_OUT)".into()))
}

/// What a parsed command line resolves to.
#[derive(Debug)]
pub enum Resolved {
    Run { spec: Box<RunSpec>, out: PathBuf },
    Serve { store: PathBuf, addr: String },
    Replay { manifest: PathBuf, out: PathBuf },
}

pub fn resolve(cli: Cli) -> Result<Resolved> {
    let file = FileConfig::load(cli.config.as_deref())?;
    let seed = |flag: Option<u64>| flag.or(file.seed);
    Ok(match cli.command {
        Command::GeneratePrior(a) => Resolved::Run {
            spec: RunSpec::GeneratePrior(GenerateRun {
                prior: file.prior(a.prior),
                count: a.count.or(file.generate.count).unwrap_or(DEFAULT_EPISODES),
                seed: seed(a.seed).unwrap_or(0),
            }).into(),
            out: out_dir(a.out, &file)?,
        },
        Command::Train(a) => {
            let prior = file.prior(a.prior);
            let mut model = file.model.clone().unwrap_or_default();
            if file.model.is_none() {
                model.d_max = prior.d_max;
            }
            let mut train = file.train.clone().unwrap_or_default();
            if let Some(s) = seed(a.seed) {
                train.seed = s;
            }
            train.steps = a.steps.unwrap_or(train.steps);
            train.learning_rate = a.learning_rate.unwrap_or(train.learning_rate);
            train.batch_episodes = a.batch_episodes.unwrap_or(train.batch_episodes);
            train.checkpoint_every = a.checkpoint_every.unwrap_or(train.checkpoint_every);
            Resolved::Run {
                spec: RunSpec::Train(TrainRun { prior, model, train }).into(),
                out: out_dir(a.out, &file)?,
            }
        }
        Command::Evaluate(a) => {
            let section = &file.evaluate;
            let estimators: Vec<EstimatorName> = match a.estimators {
                Some(list) => list.into_iter().map(Into::into).collect(),
                None => section
                    .estimators
                    .clone()
                    .unwrap_or_else(|| vec![EstimatorName::SLearner, EstimatorName::Zero]),
            };
            let checkpoint = a
                .checkpoint
                .or_else(|| section.checkpoint.clone())
                .map(|path| -> Result<CheckpointRef> {
                    let bytes = std::fs::read(&path)
                        .map_err(|e| ServiceError::Config(format!("cannot read checkpoint {}: {e}", path.display())))?;
                    Ok(CheckpointRef {
                        path,
                        sha256: sha256_hex(&bytes),
                    })
                })
                .transpose()?;
            let suite_seed = seed(a.seed).unwrap_or(0);
            let mut protocol = section.protocol.unwrap_or_default();
            if section.protocol.is_none() {
                protocol.seed = suite_seed;
            }
            Resolved::Run {
                spec: RunSpec::Evaluate(EvaluateRun {
                    suite_seed,
                    rows: a.rows.or(section.rows).unwrap_or(DEFAULT_ROWS),
                    protocol,
                    estimators,
                    slearner: section.slearner.unwrap_or_default(),
                    max_context: a.max_context.or(section.max_context).unwrap_or(DEFAULT_MAX_CONTEXT),
                    checkpoint,
                }).into(),
                out: out_dir(a.out, &file)?,
            }
        }
        Command::ExportScm(a) => Resolved::Run {
            spec: RunSpec::ExportScm(ExportRun {
                graph: file.export.graph.clone().unwrap_or_default(),
                mechanisms: file.export.mechanisms.clone().unwrap_or_default(),
                seed: seed(a.seed).unwrap_or(0),
                samples: a.samples.or(file.export.samples).unwrap_or(DEFAULT_SAMPLES),
            }).into(),
            out: out_dir(a.out, &file)?,
        },
        Command::Serve(a) => Resolved::Serve {
            store: a
                .store
                .or_else(|| file.serve.store.clone())
                .ok_or_else(|| ServiceError::Config("a store directory is required (--store or WHATIF_STORE)".into()))?,
            addr: a.addr.or_else(|| file.serve.addr.clone()).unwrap_or_else(|| DEFAULT_ADDR.into()),
        },
        Command::Replay(a) => Resolved::Replay {
            manifest: a.manifest,
            out: out_dir(a.out, &file)?,
        },
    })
}

fn report(manifest: &Manifest, out: &Path) {
    println!("wrote {}", out.join(MANIFEST_FILE).display());
    for (name, hash) in &manifest.outputs {
        println!("  {name}  sha256:{hash}");
    }
}

fn dispatch(resolved: Resolved) -> Result<()> {
    match resolved {
        Resolved::Run { spec, out } => {
            let manifest = execute(&spec, &out)?;
            report(&manifest, &out);
        }
        Resolved::Replay { manifest, out } => {
            let fresh = replay(&manifest, &out)?;
            report(&fresh, &out);
            println!("all {} outputs reproduced byte for byte", fresh.outputs.len());
        }
        Resolved::Serve { store, addr } => crate::api::serve_blocking(&store, &addr)?,
    }
    Ok(())
}

/// Entry point; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match resolve(cli).and_then(dispatch) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.exit_code()
        }
    }
}
