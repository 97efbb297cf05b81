//! S-learner: one ridge regressor over random Fourier features of
//! `(covariates, treatment)`, with τ̂(x) = μ(x, 1) − μ(x, 0).

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::artifact::{Artifact, Tensor};
use crate::error::{Error, Result};
use crate::seed::rng_from_seed;
use crate::stats;
use crate::table::{ColumnKind, ColumnRole, SampleTable};
use crate::CateEstimate;

pub const SLEARNER_KIND: &str = "slearner";
const MIN_ROWS: usize = 10;
const BANDWIDTH_SAMPLE: usize = 400;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SLearnerConfig {
    pub features: usize,
    /// Penalty added to the sum of squared residuals.
    pub ridge: f64,
    pub seed: u64,
}

impl Default for SLearnerConfig {
    fn default() -> Self {
        SLearnerConfig {
            features: 200,
            ridge: 1e-3,
            seed: 0,
        }
    }
}

/// One covariate column's encoding: z-score for continuous, one-hot for
/// categorical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedColumn {
    pub name: String,
    pub kind: ColumnKind,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateEncoder {
    pub columns: Vec<EncodedColumn>,
}

impl CovariateEncoder {
    pub fn fit(table: &SampleTable) -> Self {
        let columns = table
            .covariate_indices()
            .into_iter()
            .map(|c| {
                let col = &table.columns()[c];
                let values = table.column_values(c);
                let std = stats::std_pop(&values);
                EncodedColumn {
                    name: col.name.clone(),
                    kind: col.kind,
                    mean: stats::mean(&values),
                    std: if std > 1e-12 { std } else { 1.0 },
                }
            })
            .collect();
        CovariateEncoder { columns }
    }

    pub fn width(&self) -> usize {
        self.columns.iter().map(|c| c.kind.encoded_width()).sum()
    }

    /// Encodes every row of `table`, locating columns by name.
    pub fn encode(&self, table: &SampleTable) -> Result<Vec<Vec<f64>>> {
        let idx = self
            .columns
            .iter()
            .map(|c| {
                let i = table.require_column(&c.name)?;
                if table.columns()[i].kind != c.kind {
                    return Err(Error::Contract(format!("column '{}' changed kind", c.name)));
                }
                Ok(i)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(table
            .rows()
            .map(|row| {
                let mut out = Vec::with_capacity(self.width());
                for (c, &i) in self.columns.iter().zip(&idx) {
                    match c.kind {
                        ColumnKind::Continuous => out.push((row[i] - c.mean) / c.std),
                        ColumnKind::Categorical { classes } => {
                            out.extend((0..classes).map(|k| if k == row[i] as usize { 1.0 } else { 0.0 }))
                        }
                    }
                }
                out
            })
            .collect())
    }
}

/// Fitted S-learner.
#[derive(Debug, Clone, PartialEq)]
pub struct SLearnerModel {
    pub config: SLearnerConfig,
    pub encoder: CovariateEncoder,
    pub bandwidth: f64,
    /// Frequencies, `features × (covariate width + 1)`.
    pub frequencies: DMatrix<f64>,
    pub phases: DVector<f64>,
    pub weights: DVector<f64>,
    pub intercept: f64,
}

fn check_treatment(table: &SampleTable) -> Result<Vec<f64>> {
    let t = table
        .role_index(ColumnRole::Treatment)
        .ok_or_else(|| Error::Contract("table lacks a treatment column".into()))?;
    let values = table.column_values(t);
    if values.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Contract("treatment must be a 0/1 indicator".into()));
    }
    let treated = values.iter().filter(|&&v| v == 1.0).count();
    if treated == 0 || treated == values.len() {
        return Err(Error::Positivity("only one treatment arm present".into()));
    }
    Ok(values)
}

fn median_distance(points: &[Vec<f64>]) -> f64 {
    let mut d = Vec::with_capacity(points.len() * points.len() / 2);
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            d.push(
                points[i]
                    .iter()
                    .zip(&points[j])
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt(),
            );
        }
    }
    let m = stats::median(&d);
    if m.is_finite() && m > 1e-12 {
        m
    } else {
        1.0
    }
}

impl SLearnerModel {
    /// Fits μ(x, t) on a table with treatment (0/1) and outcome roles.
    pub fn fit(context: &SampleTable, config: SLearnerConfig) -> Result<SLearnerModel> {
        if config.features == 0 || !(config.ridge > 0.0) {
            return Err(Error::config("S-learner needs features > 0 and ridge > 0"));
        }
        if context.row_count() < MIN_ROWS {
            return Err(Error::Contract(format!("S-learner needs at least {MIN_ROWS} rows")));
        }
        let treatment = check_treatment(context)?;
        let y_col = context
            .role_index(ColumnRole::Outcome)
            .ok_or_else(|| Error::Contract("table lacks an outcome column".into()))?;
        let y = context.column_values(y_col);
        let encoder = CovariateEncoder::fit(context);
        let mut inputs = encoder.encode(context)?;
        for (row, t) in inputs.iter_mut().zip(&treatment) {
            row.push(*t);
        }
        let mut rng = rng_from_seed(config.seed);
        let n = inputs.len();
        let sample: Vec<Vec<f64>> = if n > BANDWIDTH_SAMPLE {
            rand::seq::index::sample(&mut rng, n, BANDWIDTH_SAMPLE)
                .into_iter()
                .map(|i| inputs[i].clone())
                .collect()
        } else {
            inputs.clone()
        };
        let bandwidth = median_distance(&sample);
        let p = inputs[0].len();
        let frequencies =
            DMatrix::from_fn(config.features, p, |_, _| rng.sample::<f64, _>(StandardNormal) / bandwidth);
        let phases =
            DVector::from_fn(config.features, |_, _| rng.random_range(0.0..std::f64::consts::TAU));
        let mut model = SLearnerModel {
            config,
            encoder,
            bandwidth,
            frequencies,
            phases,
            weights: DVector::zeros(config.features),
            intercept: 0.0,
        };
        let phi = model.features(&inputs);
        let phi_mean = DVector::from_fn(config.features, |j, _| phi.column(j).mean());
        let y_mean = stats::mean(&y);
        let mut centered = phi.clone();
        for mut row in centered.row_iter_mut() {
            row -= phi_mean.transpose();
        }
        let yc = DVector::from_iterator(n, y.iter().map(|v| v - y_mean));
        let gram = centered.transpose() * &centered
            + DMatrix::identity(config.features, config.features) * config.ridge;
        let rhs = centered.transpose() * yc;
        let chol = gram
            .cholesky()
            .ok_or_else(|| Error::Contract("ridge system is not positive definite".into()))?;
        model.weights = chol.solve(&rhs);
        model.intercept = y_mean - phi_mean.dot(&model.weights);
        if !model.weights.iter().all(|w| w.is_finite()) || !model.intercept.is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        Ok(model)
    }

    fn features(&self, inputs: &[Vec<f64>]) -> DMatrix<f64> {
        let p = self.frequencies.ncols();
        let z = DMatrix::from_fn(inputs.len(), p, |i, j| inputs[i][j]);
        let scale = (2.0 / self.config.features as f64).sqrt();
        let mut proj = z * self.frequencies.transpose();
        for mut row in proj.row_iter_mut() {
            for (v, b) in row.iter_mut().zip(self.phases.iter()) {
                *v = scale * (*v + b).cos();
            }
        }
        proj
    }

    /// μ(x, t) for each row of `covariates` at a fixed treatment value.
    pub fn predict_outcome(&self, covariates: &SampleTable, treatment: f64) -> Result<Vec<f64>> {
        let mut inputs = self.encoder.encode(covariates)?;
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        for row in &mut inputs {
            row.push(treatment);
        }
        let mu = self.features(&inputs) * &self.weights;
        Ok(mu.iter().map(|v| v + self.intercept).collect())
    }

    /// τ̂(x) = μ(x, 1) − μ(x, 0) per query row.
    pub fn estimate_cate(&self, queries: &SampleTable) -> Result<Vec<CateEstimate>> {
        let treated = self.predict_outcome(queries, 1.0)?;
        let control = self.predict_outcome(queries, 0.0)?;
        Ok(treated
            .into_iter()
            .zip(control)
            .map(|(a, b)| CateEstimate::point(a - b))
            .collect())
    }

    pub fn to_artifact(&self) -> Result<Artifact> {
        let mut a = Artifact::new(SLEARNER_KIND);
        a.set("features", self.config.features);
        a.set("ridge", self.config.ridge);
        a.set("seed", self.config.seed);
        a.set("bandwidth", self.bandwidth);
        a.set("intercept", self.intercept);
        a.set("encoder", serde_json::to_string(&self.encoder)?);
        let (d, p) = self.frequencies.shape();
        let row_major: Vec<f64> = (0..d).flat_map(|i| (0..p).map(move |j| (i, j))).map(|(i, j)| self.frequencies[(i, j)]).collect();
        a.push_tensor(Tensor::from_f64("frequencies", vec![d, p], &row_major));
        a.push_tensor(Tensor::from_f64("phases", vec![d], self.phases.as_slice()));
        a.push_tensor(Tensor::from_f64("weights", vec![d], self.weights.as_slice()));
        Ok(a)
    }

    /// Restores an exported model; tensors come back at 32-bit precision.
    pub fn from_artifact(a: &Artifact) -> Result<SLearnerModel> {
        if a.kind != SLEARNER_KIND {
            return Err(Error::Format(format!("expected slearner artifact, found '{}'", a.kind)));
        }
        let config = SLearnerConfig {
            features: a.parse("features")?,
            ridge: a.parse("ridge")?,
            seed: a.parse("seed")?,
        };
        let f = a.tensor("frequencies")?;
        let [d, p] = f.shape[..] else {
            return Err(Error::Format("frequencies must be a matrix".into()));
        };
        let vector = |name: &str| -> Result<DVector<f64>> {
            let t = a.tensor(name)?;
            if t.data.len() != d {
                return Err(Error::Format(format!("tensor '{name}' has wrong length")));
            }
            Ok(DVector::from_iterator(d, t.data.iter().map(|&v| v as f64)))
        };
        Ok(SLearnerModel {
            config,
            encoder: serde_json::from_str(a.require("encoder")?)?,
            bandwidth: a.parse("bandwidth")?,
            frequencies: DMatrix::from_row_iterator(d, p, f.data.iter().map(|&v| v as f64)),
            phases: vector("phases")?,
            weights: vector("weights")?,
            intercept: a.parse("intercept")?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::table::Column;

    fn table(rows: &[(f64, f64, f64)]) -> SampleTable {
        let cols = vec![
            Column::covariate("x", ColumnKind::Continuous),
            Column::new("t", ColumnKind::Categorical { classes: 2 }, ColumnRole::Treatment),
            Column::new("y", ColumnKind::Continuous, ColumnRole::Outcome),
        ];
        SampleTable::from_rows(cols, rows.iter().flat_map(|&(x, t, y)| [x, t, y]).collect()).unwrap()
    }

    #[test]
    fn constant_outcome_gives_zero_effect() {
        let rows: Vec<_> = (0..40).map(|i| (i as f64 * 0.1, (i % 2) as f64, 3.0)).collect();
        let m = SLearnerModel::fit(&table(&rows), SLearnerConfig::default()).unwrap();
        for e in m.estimate_cate(&table(&rows)).unwrap() {
            assert!(e.estimate.abs() < 1e-6);
        }
        for mu in m.predict_outcome(&table(&rows), 1.0).unwrap() {
            assert!((mu - 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn single_arm_is_a_positivity_error() {
        let rows: Vec<_> = (0..20).map(|i| (i as f64, 1.0, i as f64)).collect();
        assert!(matches!(
            SLearnerModel::fit(&table(&rows), SLearnerConfig::default()),
            Err(Error::Positivity(_))
        ));
    }

    #[test]
    fn too_few_rows_rejected() {
        let rows: Vec<_> = (0..5).map(|i| (i as f64, (i % 2) as f64, 1.0)).collect();
        assert!(SLearnerModel::fit(&table(&rows), SLearnerConfig::default()).is_err());
    }

    #[test]
    fn artifact_round_trip_keeps_estimates_close() {
        let rows: Vec<_> = (0..60).map(|i| (i as f64 * 0.05, (i % 2) as f64, i as f64 * 0.1 + (i % 2) as f64)).collect();
        let m = SLearnerModel::fit(&table(&rows), SLearnerConfig::default()).unwrap();
        let back = SLearnerModel::from_artifact(&Artifact::from_bytes(&m.to_artifact().unwrap().to_bytes().unwrap()).unwrap()).unwrap();
        let a = m.estimate_cate(&table(&rows)).unwrap();
        let b = back.estimate_cate(&table(&rows)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x.estimate - y.estimate).abs() < 1e-3);
        }
    }
}
