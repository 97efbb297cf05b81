use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::covariates::CovariateGenerator;
use super::semisynth::{BenchmarkDataset, CovariateSource, EffectShape, ResponseKind, SemiSynthConfig, OUTCOME, TREATMENT};
use crate::baseline::{SLearnerConfig, SLearnerModel};
use crate::error::{Error, Result};
use crate::model::{predict_cate, ModelParameters, PredictOptions};
use crate::seed::{derive_seed, rng_from_seed, streams};
use crate::stats;
use crate::table::SampleTable;

/// Root mean squared error between estimated and true effects.
pub fn pehe(estimates: &[f64], truth: &[f64]) -> Result<f64> {
    if estimates.is_empty() {
        return Err(Error::Empty("effect estimates"));
    }
    if estimates.len() != truth.len() {
        return Err(Error::Contract("estimates and truth differ in length".into()));
    }
    let mse = estimates
        .iter()
        .zip(truth)
        .map(|(e, t)| (e - t).powi(2))
        .sum::<f64>()
        / estimates.len() as f64;
    Ok(mse.sqrt())
}

/// One fit/query task handed to an estimator. `query_rows` index the full
/// dataset and exist so oracles can look up hidden truth.
pub struct BenchmarkTask<'a> {
    pub dataset: usize,
    pub context: &'a SampleTable,
    pub queries: &'a SampleTable,
    pub query_rows: &'a [usize],
}

pub trait CateEstimator: Sync {
    fn name(&self) -> String;
    fn estimate(&self, task: &BenchmarkTask<'_>) -> Result<Vec<f64>>;
}

pub struct ZeroEstimator;

impl CateEstimator for ZeroEstimator {
    fn name(&self) -> String {
        "zero".into()
    }

    fn estimate(&self, task: &BenchmarkTask<'_>) -> Result<Vec<f64>> {
        Ok(vec![0.0; task.query_rows.len()])
    }
}

/// Reads hidden truth; used to validate the harness.
pub struct OracleEstimator {
    pub tau: Vec<Vec<f64>>,
}

impl OracleEstimator {
    pub fn new(datasets: &[BenchmarkDataset]) -> Self {
        OracleEstimator {
            tau: datasets.iter().map(|d| d.truth.tau.clone()).collect(),
        }
    }
}

impl CateEstimator for OracleEstimator {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn estimate(&self, task: &BenchmarkTask<'_>) -> Result<Vec<f64>> {
        let tau = self
            .tau
            .get(task.dataset)
            .ok_or_else(|| Error::Contract("oracle has no truth for this dataset".into()))?;
        Ok(task.query_rows.iter().map(|&r| tau[r]).collect())
    }
}

pub struct SLearnerEstimator {
    pub config: SLearnerConfig,
}

impl CateEstimator for SLearnerEstimator {
    fn name(&self) -> String {
        "s-learner".into()
    }

    fn estimate(&self, task: &BenchmarkTask<'_>) -> Result<Vec<f64>> {
        let model = SLearnerModel::fit(task.context, self.config)?;
        Ok(model.estimate_cate(task.queries)?.into_iter().map(|e| e.estimate).collect())
    }
}

/// In-context model; contexts above `max_context` rows are subsampled.
pub struct IclEstimator {
    pub params: ModelParameters<f32>,
    pub max_context: usize,
    pub seed: u64,
}

impl CateEstimator for IclEstimator {
    fn name(&self) -> String {
        "icl-model".into()
    }

    fn estimate(&self, task: &BenchmarkTask<'_>) -> Result<Vec<f64>> {
        let n = task.context.row_count();
        let context = if n > self.max_context {
            let mut rng = rng_from_seed(derive_seed(self.seed, streams::SUBSAMPLE, task.dataset as u64));
            let mut rows = rand::seq::index::sample(&mut rng, n, self.max_context).into_vec();
            rows.sort_unstable();
            task.context.select_rows(&rows)
        } else {
            task.context.clone()
        };
        let options = PredictOptions {
            bootstrap: None,
            truncate: true,
        };
        Ok(predict_cate(&self.params, &context, TREATMENT, OUTCOME, task.queries, &options)?
            .into_iter()
            .map(|e| e.estimate)
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkProtocol {
    pub fit_fraction: f64,
    pub seed: u64,
}

impl Default for BenchmarkProtocol {
    fn default() -> Self {
        BenchmarkProtocol {
            fit_fraction: 0.8,
            seed: 0,
        }
    }
}

impl BenchmarkProtocol {
    /// Sorted fit and query row indices for dataset `index`.
    pub fn split(&self, rows: usize, index: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        if !(self.fit_fraction > 0.0 && self.fit_fraction < 1.0) {
            return Err(Error::config("fit_fraction must lie in (0, 1)"));
        }
        let mut order: Vec<usize> = (0..rows).collect();
        order.shuffle(&mut rng_from_seed(derive_seed(self.seed, streams::BENCHMARK, index as u64)));
        let fit_len = ((rows as f64) * self.fit_fraction).round() as usize;
        let fit_len = fit_len.clamp(1, rows.saturating_sub(1));
        let (mut fit, mut query) = (order[..fit_len].to_vec(), order[fit_len..].to_vec());
        fit.sort_unstable();
        query.sort_unstable();
        Ok((fit, query))
    }
}

/// PEHE per dataset and estimator; `None` marks an estimator failure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub datasets: Vec<String>,
    pub estimators: Vec<String>,
    /// `cells[dataset][estimator]`.
    pub cells: Vec<Vec<Option<f64>>>,
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation across datasets.
    pub std: f64,
    pub count: usize,
}

impl BenchmarkReport {
    pub fn column(&self, estimator: usize) -> Vec<f64> {
        self.cells.iter().filter_map(|row| row[estimator]).collect()
    }

    pub fn summary(&self, estimator: usize) -> Option<Summary> {
        let values = self.column(estimator);
        (!values.is_empty()).then(|| Summary {
            mean: stats::mean(&values),
            std: stats::std_sample(&values),
            count: values.len(),
        })
    }

    /// Long-format CSV `dataset,estimator,pehe` followed by `mean` and `std`
    /// rows per estimator. Values use shortest round-trip formatting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("dataset,estimator,pehe\n");
        for (d, row) in self.datasets.iter().zip(&self.cells) {
            for (e, cell) in self.estimators.iter().zip(row) {
                let value = cell.map(|v| v.to_string()).unwrap_or_default();
                writeln!(out, "{d},{e},{value}").unwrap();
            }
        }
        for (label, pick) in [("mean", 0), ("std", 1)] {
            for (i, e) in self.estimators.iter().enumerate() {
                let value = self
                    .summary(i)
                    .map(|s| if pick == 0 { s.mean } else { s.std }.to_string())
                    .unwrap_or_default();
                writeln!(out, "{label},{e},{value}").unwrap();
            }
        }
        out
    }

    /// Aligned plain-text table: one row per dataset plus a mean ± std row.
    pub fn to_text(&self) -> String {
        let mut rows: Vec<Vec<String>> = Vec::new();
        let mut header = vec!["#".to_string()];
        header.extend(self.estimators.iter().cloned());
        rows.push(header);
        for (i, row) in self.cells.iter().enumerate() {
            let mut line = vec![(i + 1).to_string()];
            line.extend(row.iter().map(|c| c.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into())));
            rows.push(line);
        }
        let mut summary = vec!["Mean ± Std".to_string()];
        summary.extend((0..self.estimators.len()).map(|i| {
            self.summary(i)
                .map(|s| format!("{:.3} ± {:.3}", s.mean, s.std))
                .unwrap_or_else(|| "-".into())
        }));
        rows.push(summary);
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, r) in rows.iter().enumerate() {
            let cells: Vec<String> = r
                .iter()
                .zip(&widths)
                .map(|(s, w)| format!("{s:>w$}", w = w))
                .collect();
            writeln!(out, "{}", cells.join("  ")).unwrap();
            if i == 0 || i == rows.len() - 2 {
                let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
                writeln!(out, "{}", rule.join("  ")).unwrap();
            }
        }
        out
    }
}

/// Scores every estimator on every dataset. Estimator errors become
/// missing cells and are listed in `failures`.
pub fn run_benchmark(
    datasets: &[BenchmarkDataset],
    estimators: &[&dyn CateEstimator],
    protocol: &BenchmarkProtocol,
) -> Result<BenchmarkReport> {
    if datasets.is_empty() {
        return Err(Error::Empty("benchmark datasets"));
    }
    let results: Vec<(Vec<Option<f64>>, Vec<String>)> = datasets
        .par_iter()
        .enumerate()
        .map(|(i, d)| -> Result<_> {
            let (fit, query) = protocol.split(d.table.row_count(), i)?;
            let context = d.table.select_rows(&fit);
            let queries = d.covariates().select_rows(&query);
            let truth: Vec<f64> = query.iter().map(|&r| d.truth.tau[r]).collect();
            let task = BenchmarkTask {
                dataset: i,
                context: &context,
                queries: &queries,
                query_rows: &query,
            };
            let mut row = Vec::with_capacity(estimators.len());
            let mut failures = Vec::new();
            for e in estimators {
                match e.estimate(&task).and_then(|est| pehe(&est, &truth)) {
                    Ok(v) if v.is_finite() => row.push(Some(v)),
                    Ok(v) => {
                        failures.push(format!("{}/{}: non-finite PEHE {v}", d.name, e.name()));
                        row.push(None);
                    }
                    Err(err) => {
                        failures.push(format!("{}/{}: {err}", d.name, e.name()));
                        row.push(None);
                    }
                }
            }
            Ok((row, failures))
        })
        .collect::<Result<_>>()?;
    let (cells, failures): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    Ok(BenchmarkReport {
        datasets: datasets.iter().map(|d| d.name.clone()).collect(),
        estimators: estimators.iter().map(|e| e.name()).collect(),
        cells,
        failures: failures.into_iter().flatten().collect(),
    })
}

/// Ten configurations varying response complexity, treated fraction,
/// overlap, effect strength and outcome noise.
pub fn benchmark_suite(seed: u64, rows: usize) -> Vec<SemiSynthConfig> {
    let responses = [ResponseKind::Linear, ResponseKind::Nonlinear];
    let fractions = [0.5, 0.3, 0.2, 0.4, 0.5];
    let overlaps = [0.05, 0.1, 0.2, 0.05, 0.1];
    let strengths = [1.0, 0.5, 2.0, 1.0, 1.5];
    let noises = [0.1, 0.5, 0.25, 1.0, 0.1];
    (0..10)
        .map(|i| SemiSynthConfig {
            source: CovariateSource::Generated(CovariateGenerator {
                rows,
                ..CovariateGenerator::default()
            }),
            response: responses[i % 2],
            effect_shape: EffectShape::Heterogeneous,
            effect_strength: strengths[i % 5],
            outcome_noise: noises[(i + i / 5) % 5],
            treated_fraction: fractions[i % 5],
            overlap: overlaps[(i / 2) % 5],
            propensity_slope: 1.0,
            seed: derive_seed(seed, streams::BENCHMARK, 1000 + i as u64),
        })
        .collect()
}

/// Builds the suite's datasets, naming them `1..=10`.
pub fn build_suite(configs: &[SemiSynthConfig]) -> Result<Vec<BenchmarkDataset>> {
    configs
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            let mut d = BenchmarkDataset::from_config(c)?;
            d.name = format!("dataset-{:02}", i + 1);
            Ok(d)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pehe_examples() {
        assert_eq!(pehe(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(pehe(&[2.0, 3.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert!((pehe(&[0.0, 0.0], &[3.0, 4.0]).unwrap() - 2.5 * 2f64.sqrt()).abs() < 1e-12);
        assert!(pehe(&[], &[]).is_err());
    }

    #[test]
    fn split_is_disjoint_and_covering() {
        let p = BenchmarkProtocol::default();
        let (fit, query) = p.split(100, 3).unwrap();
        assert_eq!(fit.len(), 80);
        assert_eq!(query.len(), 20);
        let mut all: Vec<usize> = fit.iter().chain(&query).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(p.split(100, 3).unwrap(), (fit, query));
    }

    #[test]
    fn missing_cells_are_skipped_in_summary() {
        let r = BenchmarkReport {
            datasets: vec!["a".into(), "b".into(), "c".into()],
            estimators: vec!["x".into()],
            cells: vec![vec![Some(1.0)], vec![None], vec![Some(3.0)]],
            failures: vec![],
        };
        let s = r.summary(0).unwrap();
        assert_eq!((s.mean, s.count), (2.0, 2));
        assert!((s.std - 2f64.sqrt()).abs() < 1e-12);
        assert!(r.to_csv().contains("b,x,\n"));
        assert!(r.to_text().contains("Mean ± Std"));
    }
}
