use rand::Rng;
use serde::{Deserialize, Serialize};

use super::network::forward;
use super::params::ModelParameters;
use crate::episode::{encode, EncodeOptions, Episode, EpisodeMeta};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_from_seed, streams};
use crate::stats;
use crate::table::{ColumnRole, SampleTable};
use crate::CateEstimate;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig { replicates: 20, seed: 0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictOptions {
    pub bootstrap: Option<BootstrapConfig>,
    /// Drop trailing covariates instead of failing when they exceed `d_max`.
    pub truncate: bool,
}

const INTERVAL: (f64, f64) = (0.1, 0.9);

/// Builds an inference episode from a context table whose treatment column
/// holds 0/1 indicators. Query tables may carry extra columns; covariates are
/// matched by name.
pub fn inference_episode(
    params: &ModelParameters<f32>,
    context: &SampleTable,
    treatment: &str,
    outcome: &str,
    queries: &SampleTable,
    truncate: bool,
) -> Result<Episode> {
    let context = context.with_roles(Some(treatment), Some(outcome))?;
    let t = context.require_column(treatment)?;
    let values = context.column_values(t);
    if values.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Contract(format!("treatment column '{treatment}' must hold 0/1")));
    }
    if !(values.contains(&0.0) && values.contains(&1.0)) {
        return Err(Error::Positivity(format!("treatment column '{treatment}' has a single arm")));
    }
    if queries.is_empty() {
        return Err(Error::Empty("query rows"));
    }
    let options = EncodeOptions {
        d_max: params.config.d_max,
        truncate,
        drop_order: Vec::new(),
    };
    let meta = EpisodeMeta {
        scm_seed: 0,
        treatment: 0,
        t1: 1.0,
        t0: 0.0,
        null_effect: false,
    };
    encode(&context, queries, None, &options, meta)
}

fn predict_once(params: &ModelParameters<f32>, episode: &Episode) -> Result<Vec<f64>> {
    let scale = episode.norm.outcome_std;
    Ok(forward(params, episode)?
        .into_iter()
        .map(|p| p as f64 * scale)
        .collect())
}

/// CATE per query row in outcome units, with optional bootstrap intervals
/// from context resamples.
pub fn predict_cate(
    params: &ModelParameters<f32>,
    context: &SampleTable,
    treatment: &str,
    outcome: &str,
    queries: &SampleTable,
    options: &PredictOptions,
) -> Result<Vec<CateEstimate>> {
    let episode = inference_episode(params, context, treatment, outcome, queries, options.truncate)?;
    let point = predict_once(params, &episode)?;
    let Some(boot) = options.bootstrap else {
        return Ok(point.into_iter().map(CateEstimate::point).collect());
    };
    if boot.replicates < 2 {
        return Err(Error::config("bootstrap needs at least 2 replicates"));
    }
    let n = context.row_count();
    let t_col = context.require_column(treatment)?;
    let mut draws: Vec<Vec<f64>> = vec![Vec::with_capacity(boot.replicates); point.len()];
    for b in 0..boot.replicates {
        let mut rng = rng_from_seed(derive_seed(boot.seed, streams::BOOTSTRAP, b as u64));
        let rows = loop {
            let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let treated = rows.iter().filter(|&&r| context.get(r, t_col) == 1.0).count();
            if treated > 0 && treated < rows.len() {
                break rows;
            }
        };
        let resample = context.select_rows(&rows);
        let ep = inference_episode(params, &resample, treatment, outcome, queries, options.truncate)?;
        for (d, p) in draws.iter_mut().zip(predict_once(params, &ep)?) {
            d.push(p);
        }
    }
    Ok(point
        .into_iter()
        .zip(draws)
        .map(|(estimate, d)| CateEstimate {
            estimate,
            interval: Some((stats::quantile(&d, INTERVAL.0), stats::quantile(&d, INTERVAL.1))),
        })
        .collect())
}

/// Covariate columns of `table` other than the named treatment and outcome.
pub fn covariate_view(table: &SampleTable, treatment: &str, outcome: &str) -> Result<SampleTable> {
    let roles = table.with_roles(Some(treatment), Some(outcome))?;
    let cols: Vec<usize> = (0..roles.width())
        .filter(|&c| roles.columns()[c].role == ColumnRole::Covariate)
        .collect();
    Ok(roles.select_columns(&cols))
}
