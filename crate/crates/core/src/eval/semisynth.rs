use std::path::PathBuf;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::covariates::CovariateGenerator;
use crate::error::{Error, Result};
use crate::scm::Mechanism;
use crate::seed::rng_from_seed;
use crate::stats;
use crate::table::{Column, ColumnKind, ColumnRole, SampleTable};

pub const SEMISYNTH_FORMAT_VERSION: u32 = 1;
pub const TREATMENT: &str = "T";
pub const OUTCOME: &str = "Y";
const MIN_ROWS: usize = 100;
const BISECTION_TOLERANCE: f64 = 1e-3;
const HIDDEN_UNITS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CovariateSource {
    Generated(CovariateGenerator),
    Csv { path: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseKind {
    Linear,
    Nonlinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectShape {
    /// τ(x) varies with x and has unit standard deviation before scaling.
    Heterogeneous,
    /// τ(x) = effect_strength everywhere.
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SemiSynthConfig {
    pub source: CovariateSource,
    pub response: ResponseKind,
    pub effect_shape: EffectShape,
    pub effect_strength: f64,
    pub outcome_noise: f64,
    pub treated_fraction: f64,
    /// Propensities are clipped to `[overlap, 1 - overlap]`.
    pub overlap: f64,
    /// Slope on the standardized propensity score.
    pub propensity_slope: f64,
    pub seed: u64,
}

impl Default for SemiSynthConfig {
    fn default() -> Self {
        SemiSynthConfig {
            source: CovariateSource::Generated(CovariateGenerator::default()),
            response: ResponseKind::Linear,
            effect_shape: EffectShape::Heterogeneous,
            effect_strength: 1.0,
            outcome_noise: 0.1,
            treated_fraction: 0.5,
            overlap: 0.1,
            propensity_slope: 1.0,
            seed: 0,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct VersionedConfig {
    version: u32,
    #[serde(flatten)]
    config: SemiSynthConfig,
}

impl SemiSynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.overlap > 0.0 && self.overlap <= 0.5) {
            return Err(Error::config("overlap must lie in (0, 0.5]"));
        }
        if !(self.treated_fraction > 0.0 && self.treated_fraction < 1.0) {
            return Err(Error::config("treated_fraction must lie in (0, 1)"));
        }
        if !(self.outcome_noise >= 0.0) || !self.effect_strength.is_finite() || !self.propensity_slope.is_finite() {
            return Err(Error::config("outcome_noise must be >= 0 and strengths finite"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&VersionedConfig {
            version: SEMISYNTH_FORMAT_VERSION,
            config: self.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let v: VersionedConfig = serde_json::from_str(text)?;
        if v.version != SEMISYNTH_FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported semi-synthetic config version {}", v.version)));
        }
        Ok(v.config)
    }

    /// Loads or generates the covariate table named by `source`.
    pub fn covariates(&self) -> Result<SampleTable> {
        match &self.source {
            CovariateSource::Generated(g) => g.generate(self.seed),
            CovariateSource::Csv { path } => {
                let file = std::fs::File::open(path)?;
                SampleTable::read_csv(std::io::BufReader::new(file))
            }
        }
    }
}

/// Quantities known only to the benchmark, never to estimators.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenTruth {
    pub tau: Vec<f64>,
    pub mu0: Vec<f64>,
    pub propensity: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkDataset {
    pub name: String,
    /// Covariates, treatment `T` (0/1) and outcome `Y`.
    pub table: SampleTable,
    pub truth: HiddenTruth,
    /// Intercept found for the propensity model.
    pub propensity_intercept: f64,
}

/// Standardized design: continuous columns z-scored, categoricals as K−1
/// dummies of class 0 vs each other class, all columns centered and scaled.
pub fn standardized_design(covariates: &SampleTable) -> Vec<Vec<f64>> {
    let mut columns: Vec<Vec<f64>> = Vec::new();
    for c in covariates.covariate_indices() {
        let values = covariates.column_values(c);
        match covariates.columns()[c].kind {
            ColumnKind::Continuous => columns.push(values),
            ColumnKind::Categorical { classes } => {
                for k in 1..classes {
                    columns.push(values.iter().map(|&v| if v as usize == k { 1.0 } else { 0.0 }).collect());
                }
            }
        }
    }
    let columns: Vec<Vec<f64>> = columns
        .into_iter()
        .map(|col| {
            let (m, s) = (stats::mean(&col), stats::std_pop(&col));
            let s = if s > 1e-12 { s } else { 1.0 };
            col.into_iter().map(|v| (v - m) / s).collect()
        })
        .collect();
    (0..covariates.row_count())
        .map(|r| columns.iter().map(|col| col[r]).collect())
        .collect()
}

fn unit_direction<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn response<R: Rng + ?Sized>(design: &[Vec<f64>], kind: ResponseKind, rng: &mut R) -> Vec<f64> {
    let dim = design[0].len();
    match kind {
        ResponseKind::Linear => {
            let w = unit_direction(dim, rng);
            design.iter().map(|x| x.iter().zip(&w).map(|(a, b)| a * b).sum()).collect()
        }
        ResponseKind::Nonlinear => {
            let m = Mechanism::random_tanh(dim, HIDDEN_UNITS, rng);
            design.iter().map(|x| m.eval(x)).collect()
        }
    }
}

/// Centers and scales to unit population standard deviation. A constant
/// input maps to zeros.
fn standardize(values: &[f64]) -> Vec<f64> {
    let (m, s) = (stats::mean(values), stats::std_pop(values));
    if s > 1e-12 {
        values.iter().map(|v| (v - m) / s).collect()
    } else {
        vec![0.0; values.len()]
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn propensities(score: &[f64], slope: f64, intercept: f64, overlap: f64) -> Vec<f64> {
    score
        .iter()
        .map(|s| sigmoid(slope * s + intercept).clamp(overlap, 1.0 - overlap))
        .collect()
}

/// Intercept whose clipped propensities average to `target`.
fn solve_intercept(score: &[f64], slope: f64, overlap: f64, target: f64) -> Result<f64> {
    let mean_at = |b: f64| stats::mean(&propensities(score, slope, b, overlap));
    let (mut lo, mut hi) = (-60.0, 60.0);
    if mean_at(lo) > target + BISECTION_TOLERANCE || mean_at(hi) < target - BISECTION_TOLERANCE {
        return Err(Error::config(format!(
            "treated fraction {target} is unreachable with overlap clip {overlap}"
        )));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let m = mean_at(mid);
        if (m - target).abs() <= BISECTION_TOLERANCE {
            return Ok(mid);
        }
        if m < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::config("propensity intercept bisection did not converge"))
}

pub fn build_semi_synthetic(covariates: &SampleTable, config: &SemiSynthConfig) -> Result<BenchmarkDataset> {
    config.validate()?;
    let cov_cols = covariates.covariate_indices();
    if cov_cols.len() < 2 || covariates.row_count() < MIN_ROWS {
        return Err(Error::config(format!(
            "semi-synthetic data needs >= 2 covariate columns and >= {MIN_ROWS} rows"
        )));
    }
    let covariates = covariates.select_columns(&cov_cols);
    let n = covariates.row_count();
    let design = standardized_design(&covariates);
    let mut rng = rng_from_seed(config.seed);

    let score = standardize(&response(&design, ResponseKind::Linear, &mut rng));
    let (intercept, propensity) = if config.overlap >= 0.5 {
        (0.0, vec![0.5; n])
    } else {
        let b = solve_intercept(&score, config.propensity_slope, config.overlap, config.treated_fraction)?;
        (b, propensities(&score, config.propensity_slope, b, config.overlap))
    };

    let shape = match config.effect_shape {
        EffectShape::Heterogeneous => standardize(&response(&design, config.response, &mut rng)),
        EffectShape::Constant => vec![1.0; n],
    };
    let tau: Vec<f64> = shape.iter().map(|g| config.effect_strength * g).collect();
    let mu0 = standardize(&response(&design, config.response, &mut rng));

    let mut columns = covariates.columns().to_vec();
    columns.push(Column::new(TREATMENT, ColumnKind::Categorical { classes: 2 }, ColumnRole::Treatment));
    columns.push(Column::new(OUTCOME, ColumnKind::Continuous, ColumnRole::Outcome));
    let mut data = Vec::with_capacity(n * columns.len());
    for r in 0..n {
        let t = if rng.random::<f64>() < propensity[r] { 1.0 } else { 0.0 };
        let noise: f64 = rng.sample(StandardNormal);
        data.extend_from_slice(covariates.row(r));
        data.push(t);
        data.push(mu0[r] + t * tau[r] + config.outcome_noise * noise);
    }
    Ok(BenchmarkDataset {
        name: format!("semisynth-{}", config.seed),
        table: SampleTable::from_rows(columns, data)?,
        truth: HiddenTruth { tau, mu0, propensity },
        propensity_intercept: intercept,
    })
}

impl BenchmarkDataset {
    pub fn from_config(config: &SemiSynthConfig) -> Result<Self> {
        build_semi_synthetic(&config.covariates()?, config)
    }

    pub fn treatment(&self) -> Vec<f64> {
        self.table.column_values(self.table.require_column(TREATMENT).expect("benchmark schema"))
    }

    pub fn treated_fraction(&self) -> f64 {
        stats::mean(&self.treatment())
    }

    /// Covariate columns only.
    pub fn covariates(&self) -> SampleTable {
        self.table.select_columns(&self.table.covariate_indices())
    }
}
