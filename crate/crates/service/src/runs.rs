//! Reproducible CLI runs. Each run writes its outputs plus `manifest.json`
//! holding the fully resolved configuration and the SHA-256 of every
//! output; replaying a manifest must reproduce those bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use whatif_core::baseline::SLearnerConfig;
use whatif_core::episode::{episodes_to_artifact, generate_batch, treatment_histogram, PriorConfig};
use whatif_core::eval::{
    benchmark_suite, build_suite, run_benchmark, BenchmarkProtocol, CateEstimator, IclEstimator, OracleEstimator,
    SLearnerEstimator, ZeroEstimator,
};
use whatif_core::model::{train_with, Checkpoint, ModelConfig, TrainConfig};
use whatif_core::scm::{instantiate_scm, sample_cpg, GraphConfig, MechanismPrior};
use whatif_core::seed::rng_from_seed;

use crate::error::{Result, ServiceError};
use crate::store::sha256_hex;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_FORMAT: &str = "whatif-run";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRun {
    pub prior: PriorConfig,
    pub count: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub prior: PriorConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorName {
    IclModel,
    SLearner,
    Oracle,
    Zero,
}

/// A checkpoint input pinned by content hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRef {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluateRun {
    pub suite_seed: u64,
    pub rows: usize,
    pub protocol: BenchmarkProtocol,
    pub estimators: Vec<EstimatorName>,
    pub slearner: SLearnerConfig,
    pub max_context: usize,
    pub checkpoint: Option<CheckpointRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportRun {
    pub graph: GraphConfig,
    pub mechanisms: MechanismPrior,
    pub seed: u64,
    /// Observational rows written next to the SCM; 0 skips the sample.
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum RunSpec {
    GeneratePrior(GenerateRun),
    Train(TrainRun),
    Evaluate(EvaluateRun),
    ExportScm(ExportRun),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub tool_version: String,
    pub run: RunSpec,
    /// Output file (relative to the run directory) to SHA-256.
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path)?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.format != MANIFEST_FORMAT || manifest.version != MANIFEST_VERSION {
            return Err(ServiceError::Config(format!(
                "unsupported manifest {} v{}",
                manifest.format, manifest.version
            )));
        }
        Ok(manifest)
    }
}

/// Collects output files and their hashes.
struct Outputs<'a> {
    dir: &'a Path,
    files: BTreeMap<String, String>,
}

impl<'a> Outputs<'a> {
    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, bytes)?;
        self.files.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    fn record_existing(&mut self, name: &str) -> Result<()> {
        let bytes = std::fs::read(self.dir.join(name))?;
        self.files.insert(name.to_string(), sha256_hex(&bytes));
        Ok(())
    }
}

/// Runs `spec`, writing outputs and the manifest into `out`.
pub fn execute(spec: &RunSpec, out: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(out)?;
    let mut outputs = Outputs {
        dir: out,
        files: BTreeMap::new(),
    };
    match spec {
        RunSpec::GeneratePrior(run) => generate(run, &mut outputs)?,
        RunSpec::Train(run) => train(run, &mut outputs)?,
        RunSpec::Evaluate(run) => evaluate(run, &mut outputs)?,
        RunSpec::ExportScm(run) => export_scm(run, &mut outputs)?,
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        run: spec.clone(),
        outputs: outputs.files,
    };
    let mut text = serde_json::to_string_pretty(&manifest).map_err(whatif_core::Error::from)?;
    text.push('\n');
    std::fs::write(out.join(MANIFEST_FILE), text)?;
    Ok(manifest)
}

/// Re-runs a manifest into `out` and checks every output hash.
pub fn replay(manifest_path: &Path, out: &Path) -> Result<Manifest> {
    let original = Manifest::load(manifest_path)?;
    let fresh = execute(&original.run, out)?;
    let differing: Vec<&String> = original
        .outputs
        .iter()
        .filter(|(name, hash)| fresh.outputs.get(*name) != Some(hash))
        .map(|(name, _)| name)
        .chain(fresh.outputs.keys().filter(|k| !original.outputs.contains_key(*k)))
        .collect();
    if !differing.is_empty() {
        return Err(ServiceError::Mismatch(format!("outputs differ: {differing:?}")));
    }
    Ok(fresh)
}

fn generate(run: &GenerateRun, out: &mut Outputs) -> Result<()> {
    let episodes = generate_batch(&run.prior, run.count, run.seed)?;
    out.write("episodes.bin", &episodes_to_artifact(&episodes)?.to_bytes()?)?;
    let summary = serde_json::json!({
        "count": episodes.len(),
        "treatment_histogram": treatment_histogram(&episodes),
        "null_effect_episodes": episodes.iter().filter(|e| e.meta.null_effect).count(),
    });
    out.write("summary.json", summary.to_string().as_bytes())
}

fn train(run: &TrainRun, out: &mut Outputs) -> Result<()> {
    let checkpoint_dir = out.dir.join("checkpoints");
    let outcome = train_with(&run.prior, &run.model, &run.train, Some(&checkpoint_dir), |_| {})?;
    if run.train.checkpoint_every > 0 {
        let mut names: Vec<String> = std::fs::read_dir(&checkpoint_dir)?
            .filter_map(|e| e.ok())
            .map(|e| format!("checkpoints/{}", e.file_name().to_string_lossy()))
            .collect();
        names.sort();
        for name in names {
            out.record_existing(&name)?;
        }
    }
    let checkpoint = Checkpoint::new(outcome.params, run.train.steps, run.train.seed);
    out.write("checkpoint.ckpt", &checkpoint.to_bytes()?)?;
    let mut losses = String::from("step,loss,learning_rate\n");
    for (step, (loss, lr)) in outcome.losses.iter().zip(&outcome.learning_rates).enumerate() {
        writeln!(losses, "{step},{loss},{lr}").unwrap();
    }
    out.write("losses.csv", losses.as_bytes())
}

fn evaluate(run: &EvaluateRun, out: &mut Outputs) -> Result<()> {
    if run.estimators.is_empty() {
        return Err(ServiceError::Config("no estimators selected".into()));
    }
    let configs = benchmark_suite(run.suite_seed, run.rows);
    let datasets = build_suite(&configs)?;
    let icl = if run.estimators.contains(&EstimatorName::IclModel) {
        let pinned = run
            .checkpoint
            .as_ref()
            .ok_or_else(|| ServiceError::Config("icl-model needs a checkpoint".into()))?;
        let bytes = std::fs::read(&pinned.path)
            .map_err(|e| ServiceError::Config(format!("cannot read checkpoint {}: {e}", pinned.path.display())))?;
        if sha256_hex(&bytes) != pinned.sha256 {
            return Err(ServiceError::Config(format!(
                "checkpoint {} does not match its pinned hash",
                pinned.path.display()
            )));
        }
        Some(IclEstimator {
            params: Checkpoint::from_bytes(&bytes)?.params,
            max_context: run.max_context,
            seed: run.suite_seed,
        })
    } else {
        None
    };
    let oracle = OracleEstimator::new(&datasets);
    let slearner = SLearnerEstimator { config: run.slearner };
    let estimators: Vec<&dyn CateEstimator> = run
        .estimators
        .iter()
        .map(|name| -> &dyn CateEstimator {
            match name {
                EstimatorName::IclModel => icl.as_ref().expect("checked above"),
                EstimatorName::SLearner => &slearner,
                EstimatorName::Oracle => &oracle,
                EstimatorName::Zero => &ZeroEstimator,
            }
        })
        .collect();
    let report = run_benchmark(&datasets, &estimators, &run.protocol)?;
    let suite: Vec<serde_json::Value> = configs
        .iter()
        .map(|c| c.to_json().and_then(|s| Ok(serde_json::from_str(&s)?)))
        .collect::<whatif_core::Result<_>>()?;
    out.write("suite.json", serde_json::Value::Array(suite).to_string().as_bytes())?;
    out.write("report.csv", report.to_csv().as_bytes())?;
    out.write("report.txt", report.to_text().as_bytes())?;
    if !report.failures.is_empty() {
        out.write("failures.txt", (report.failures.join("\n") + "\n").as_bytes())?;
    }
    Ok(())
}

fn export_scm(run: &ExportRun, out: &mut Outputs) -> Result<()> {
    let mut rng = rng_from_seed(run.seed);
    let graph = sample_cpg(&run.graph, &mut rng)?;
    let scm = instantiate_scm(graph, &run.mechanisms, &mut rng)?;
    out.write("scm.json", scm.to_json()?.as_bytes())?;
    if run.samples > 0 {
        let table = scm.sample_observational(run.samples, &mut rng)?;
        out.write("samples.csv", table.to_csv_string().as_bytes())?;
    }
    Ok(())
}
