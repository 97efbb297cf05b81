//! What-if queries over stored datasets: per-row CATE, intervention
//! ranking and root-cause probes.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};
use whatif_core::baseline::{SLearnerConfig, SLearnerModel};
use whatif_core::model::{predict_cate, BootstrapConfig, ModelParameters, PredictOptions};
use whatif_core::seed::{derive_seed, rng_from_seed, streams};
use whatif_core::table::{Column, ColumnKind, ColumnRole, SampleTable};
use whatif_core::{stats, CateEstimate, Error as CoreError};

use crate::error::{Result, ServiceError};
use crate::store::Store;

const INTERVAL: (f64, f64) = (0.1, 0.9);
const RESAMPLE_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EstimatorSpec {
    SLearner(SLearnerConfig),
    Checkpoint { id: String },
}

impl Default for EstimatorSpec {
    fn default() -> Self {
        EstimatorSpec::SLearner(SLearnerConfig::default())
    }
}

pub enum Estimator {
    SLearner(SLearnerConfig),
    Icl(Box<ModelParameters<f32>>),
}

impl Estimator {
    pub fn load(store: &Store, spec: &EstimatorSpec) -> Result<Estimator> {
        Ok(match spec {
            EstimatorSpec::SLearner(config) => Estimator::SLearner(*config),
            EstimatorSpec::Checkpoint { id } => Estimator::Icl(Box::new(store.checkpoint(id)?.params)),
        })
    }

    /// Point CATE per query row. `context` holds covariates, a 0/1
    /// `treatment` column and `outcome`.
    pub fn point(&self, context: &SampleTable, treatment: &str, outcome: &str, queries: &SampleTable) -> Result<Vec<f64>> {
        let estimates = match self {
            Estimator::SLearner(config) => {
                let context = context.with_roles(Some(treatment), Some(outcome))?;
                SLearnerModel::fit(&context, *config)?.estimate_cate(queries)?
            }
            Estimator::Icl(params) => {
                let options = PredictOptions {
                    bootstrap: None,
                    truncate: true,
                };
                predict_cate(params, context, treatment, outcome, queries, &options)?
            }
        };
        Ok(estimates.into_iter().map(|e| e.estimate).collect())
    }
}

/// Per-row estimates plus their mean over the query rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimates {
    pub rows: Vec<CateEstimate>,
    pub mean: CateEstimate,
}

/// Point estimates, with 10th–90th percentile intervals from refits on
/// context rows resampled with replacement when `bootstrap` is set.
pub fn estimate_effects(
    estimator: &Estimator,
    context: &SampleTable,
    treatment: &str,
    outcome: &str,
    queries: &SampleTable,
    bootstrap: Option<BootstrapConfig>,
) -> Result<EffectEstimates> {
    let point = estimator.point(context, treatment, outcome, queries)?;
    let mean = stats::mean(&point);
    let Some(boot) = bootstrap else {
        return Ok(EffectEstimates {
            rows: point.into_iter().map(CateEstimate::point).collect(),
            mean: CateEstimate::point(mean),
        });
    };
    if boot.replicates < 2 {
        return Err(ServiceError::Invalid("bootstrap needs at least 2 replicates".into()));
    }
    let t_col = context.require_column(treatment)?;
    let draws = (0..boot.replicates)
        .map(|b| {
            let sample = resample_both_arms(context, t_col, derive_seed(boot.seed, streams::BOOTSTRAP, b as u64))?;
            estimator.point(&sample, treatment, outcome, queries)
        })
        .collect::<Result<Vec<_>>>()?;
    let interval = |values: &[f64]| (stats::quantile(values, INTERVAL.0), stats::quantile(values, INTERVAL.1));
    let rows = point
        .iter()
        .enumerate()
        .map(|(q, &estimate)| {
            let column: Vec<f64> = draws.iter().map(|d| d[q]).collect();
            CateEstimate {
                estimate,
                interval: Some(interval(&column)),
            }
        })
        .collect();
    let means: Vec<f64> = draws.iter().map(|d| stats::mean(d)).collect();
    Ok(EffectEstimates {
        rows,
        mean: CateEstimate {
            estimate: mean,
            interval: Some(interval(&means)),
        },
    })
}

fn resample_both_arms(table: &SampleTable, t_col: usize, seed: u64) -> Result<SampleTable> {
    let n = table.row_count();
    let mut rng = rng_from_seed(seed);
    for _ in 0..RESAMPLE_ATTEMPTS {
        let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let arms: BTreeSet<u64> = rows.iter().map(|&r| table.get(r, t_col).to_bits()).collect();
        if arms.len() > 1 {
            return Ok(table.select_rows(&rows));
        }
    }
    Err(CoreError::Positivity("bootstrap resamples keep losing a treatment arm".into()).into())
}

/// Half-open dataset row range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowRange {
    pub start: usize,
    pub end: usize,
}

/// Binary contrast `do(T = t1)` versus `do(T = t0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Contrast {
    pub t0: f64,
    pub t1: f64,
}

/// Rewrites `column` as a 0/1 indicator for `contrast`. Binary 0/1 columns
/// are used as they are; other categoricals keep only rows at `t0` or `t1`;
/// continuous columns are split at the contrast midpoint. Without an
/// explicit contrast, non-binary columns use their quartiles.
pub fn binarize(table: &SampleTable, column: &str, contrast: Option<Contrast>) -> Result<(SampleTable, Contrast)> {
    let c = table.require_column(column)?;
    let kind = table.columns()[c].kind;
    let values = table.column_values(c);
    let binary = values.iter().all(|&v| v == 0.0 || v == 1.0);
    let contrast = match contrast {
        Some(k) => {
            if !(k.t0.is_finite() && k.t1.is_finite()) || k.t0 == k.t1 {
                return Err(ServiceError::Invalid(format!("contrast for '{column}' needs two distinct finite values")));
            }
            k
        }
        None if binary => Contrast { t0: 0.0, t1: 1.0 },
        None => {
            let (mut t0, mut t1) = (stats::quantile(&values, 0.25), stats::quantile(&values, 0.75));
            if kind.is_categorical() {
                t0 = t0.round();
                t1 = t1.round();
            }
            if t1 - t0 <= 1e-9 {
                return Err(CoreError::DegenerateTreatment(format!("'{column}' has no spread between its quartiles")).into());
            }
            Contrast { t0, t1 }
        }
    };
    let (rows, indicator): (Vec<usize>, Vec<f64>) = if binary && contrast == (Contrast { t0: 0.0, t1: 1.0 }) {
        ((0..values.len()).collect(), values)
    } else if kind.is_categorical() {
        values
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == contrast.t0 || v == contrast.t1)
            .map(|(r, &v)| (r, f64::from(v == contrast.t1)))
            .unzip()
    } else {
        let mid = 0.5 * (contrast.t0 + contrast.t1);
        let high = contrast.t1 > contrast.t0;
        values
            .iter()
            .enumerate()
            .map(|(r, &v)| (r, f64::from((v >= mid) == high)))
            .unzip()
    };
    let mut out = table.select_rows(&rows);
    out.replace_column(c, ColumnKind::Categorical { classes: 2 }, &indicator)?;
    Ok((out, contrast))
}

/// Query covariates: explicit rows, a dataset row range, or every row.
pub fn query_table(
    table: &SampleTable,
    excluded: &[&str],
    rows: Option<RowRange>,
    explicit: Option<&[BTreeMap<String, f64>]>,
) -> Result<SampleTable> {
    let cols: Vec<usize> = (0..table.width())
        .filter(|&c| !excluded.contains(&table.columns()[c].name.as_str()))
        .collect();
    let covariates = table.select_columns(&cols);
    if let Some(explicit) = explicit {
        if rows.is_some() {
            return Err(ServiceError::Invalid("give either rows or queries, not both".into()));
        }
        let columns: Vec<Column> = covariates
            .columns()
            .iter()
            .map(|c| Column::new(c.name.clone(), c.kind, ColumnRole::Covariate))
            .collect();
        let mut data = Vec::with_capacity(explicit.len() * columns.len());
        for (i, row) in explicit.iter().enumerate() {
            for col in &columns {
                let v = row
                    .get(&col.name)
                    .ok_or_else(|| ServiceError::Invalid(format!("query {i} lacks column '{}'", col.name)))?;
                data.push(*v);
            }
        }
        if explicit.is_empty() {
            return Err(ServiceError::Invalid("queries must not be empty".into()));
        }
        return Ok(SampleTable::from_rows(columns, data)?);
    }
    match rows {
        None => Ok(covariates),
        Some(RowRange { start, end }) => {
            if start >= end || end > table.row_count() {
                return Err(ServiceError::Invalid(format!(
                    "row range {start}..{end} outside 0..{}",
                    table.row_count()
                )));
            }
            Ok(covariates.select_rows(&(start..end).collect::<Vec<_>>()))
        }
    }
}

fn check_columns(table: &SampleTable, names: &[&str]) -> Result<()> {
    for name in names {
        if table.column_index(name).is_none() {
            return Err(ServiceError::Invalid(format!("unknown column '{name}'")));
        }
    }
    Ok(())
}

fn bootstrap_config(enabled: bool, seed: u64) -> Option<BootstrapConfig> {
    enabled.then_some(BootstrapConfig { replicates: 20, seed })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CateQuery {
    pub dataset: String,
    pub treatment: String,
    pub outcome: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contrast: Option<Contrast>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rows: Option<RowRange>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub queries: Option<Vec<BTreeMap<String, f64>>>,
    #[serde(default)]
    pub estimator: EstimatorSpec,
    #[serde(default)]
    pub bootstrap: bool,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CateResponse {
    pub query: CateQuery,
    pub contrast: Contrast,
    pub estimates: Vec<CateEstimate>,
    pub mean: CateEstimate,
}

pub fn estimate(store: &Store, query: CateQuery) -> Result<CateResponse> {
    let table = store.dataset(&query.dataset)?.table()?;
    check_columns(&table, &[&query.treatment, &query.outcome])?;
    if query.treatment == query.outcome {
        return Err(ServiceError::Invalid("treatment and outcome must differ".into()));
    }
    let estimator = Estimator::load(store, &query.estimator)?;
    let queries = query_table(&table, &[&query.treatment, &query.outcome], query.rows, query.queries.as_deref())?;
    let (context, contrast) = binarize(&table, &query.treatment, query.contrast)?;
    let effects = estimate_effects(
        &estimator,
        &context,
        &query.treatment,
        &query.outcome,
        &queries,
        bootstrap_config(query.bootstrap, query.seed),
    )?;
    Ok(CateResponse {
        query,
        contrast,
        estimates: effects.rows,
        mean: effects.mean,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    Maximize,
    Minimize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub treatment: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contrast: Option<Contrast>,
}

impl Candidate {
    pub fn label(&self) -> String {
        match (&self.name, self.contrast) {
            (Some(name), _) => name.clone(),
            (None, Some(k)) => format!("{}: {} -> {}", self.treatment, k.t0, k.t1),
            (None, None) => self.treatment.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRequest {
    pub dataset: String,
    pub outcome: String,
    pub candidates: Vec<Candidate>,
    #[serde(default)]
    pub objective: Objective,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rows: Option<RowRange>,
    #[serde(default)]
    pub estimator: EstimatorSpec,
    #[serde(default)]
    pub bootstrap: bool,
    #[serde(default)]
    pub seed: u64,
}

/// One ranked candidate. Flagged candidates carry no estimate or rank and
/// follow the ranked ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedItem {
    pub rank: Option<usize>,
    pub name: String,
    pub treatment: String,
    pub contrast: Option<Contrast>,
    pub estimate: Option<f64>,
    pub interval: Option<(f64, f64)>,
    pub flag: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub objective: Objective,
    pub items: Vec<RankedItem>,
}

/// Errors that disqualify one candidate rather than the whole request.
fn candidate_flag(e: &ServiceError) -> Option<String> {
    match e {
        ServiceError::Core(
            CoreError::Positivity(_) | CoreError::DegenerateTreatment(_) | CoreError::Contract(_) | CoreError::Capacity { .. },
        ) => Some(e.to_string()),
        _ => None,
    }
}

pub fn rank(store: &Store, request: &RankRequest) -> Result<Ranking> {
    if request.candidates.is_empty() {
        return Err(ServiceError::Invalid("at least one candidate is required".into()));
    }
    let table = store.dataset(&request.dataset)?.table()?;
    check_columns(&table, &[&request.outcome])?;
    let mut names = BTreeSet::new();
    for c in &request.candidates {
        check_columns(&table, &[&c.treatment])?;
        if c.treatment == request.outcome {
            return Err(ServiceError::Invalid(format!("candidate '{}' is the outcome", c.treatment)));
        }
        if !names.insert(c.label()) {
            return Err(ServiceError::Invalid(format!("duplicate candidate '{}'", c.label())));
        }
    }
    let estimator = Estimator::load(store, &request.estimator)?;
    let mut items = Vec::with_capacity(request.candidates.len());
    for candidate in &request.candidates {
        let run = || -> Result<(Contrast, CateEstimate)> {
            let queries = query_table(&table, &[&candidate.treatment, &request.outcome], request.rows, None)?;
            let (context, contrast) = binarize(&table, &candidate.treatment, candidate.contrast)?;
            let effects = estimate_effects(
                &estimator,
                &context,
                &candidate.treatment,
                &request.outcome,
                &queries,
                bootstrap_config(request.bootstrap, request.seed),
            )?;
            Ok((contrast, effects.mean))
        };
        let mut item = RankedItem {
            rank: None,
            name: candidate.label(),
            treatment: candidate.treatment.clone(),
            contrast: candidate.contrast,
            estimate: None,
            interval: None,
            flag: None,
        };
        match run() {
            Ok((contrast, mean)) => {
                item.contrast = Some(contrast);
                item.estimate = Some(mean.estimate);
                item.interval = mean.interval;
            }
            Err(e) => item.flag = Some(candidate_flag(&e).ok_or(e)?),
        }
        items.push(item);
    }
    items.sort_by(|a, b| match (a.estimate, b.estimate) {
        (Some(x), Some(y)) => {
            let order = match request.objective {
                Objective::Maximize => y.total_cmp(&x),
                Objective::Minimize => x.total_cmp(&y),
            };
            order.then_with(|| a.name.cmp(&b.name))
        }
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.name.cmp(&b.name),
    });
    for (i, item) in items.iter_mut().filter(|i| i.estimate.is_some()).enumerate() {
        item.rank = Some(i + 1);
    }
    Ok(Ranking {
        objective: request.objective,
        items,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RootCauseRequest {
    pub dataset: String,
    pub target: String,
    pub candidates: Vec<String>,
    /// Overrides of the default probe value (median, or mode for
    /// categoricals).
    #[serde(default)]
    pub probe_values: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rows: Option<RowRange>,
    #[serde(default)]
    pub estimator: EstimatorSpec,
    #[serde(default)]
    pub bootstrap: bool,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RootCauseItem {
    pub candidate: String,
    pub probe_value: Option<f64>,
    /// Which rows count as `do(B = probe)`: `"=="` for categoricals, `">="`
    /// for continuous columns.
    pub rule: String,
    pub effect: Option<f64>,
    pub interval: Option<(f64, f64)>,
    pub flag: Option<String>,
}

/// Mode of a categorical column; ties go to the lowest class.
fn mode(values: &[f64]) -> f64 {
    let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
    for v in values {
        *counts.entry(*v as u64).or_insert(0) += 1;
    }
    let best = counts.values().copied().max().unwrap_or(0);
    counts.into_iter().find(|&(_, n)| n == best).map(|(k, _)| k as f64).unwrap_or(0.0)
}

/// Effect on the target of moving each candidate to its probe value,
/// estimated as the CATE of the indicator `B == b` (categorical) or `B >= b`
/// (continuous), sorted by magnitude.
pub fn root_cause(store: &Store, request: &RootCauseRequest) -> Result<Vec<RootCauseItem>> {
    if request.candidates.is_empty() {
        return Err(ServiceError::Invalid("at least one candidate is required".into()));
    }
    if request.candidates.contains(&request.target) {
        return Err(ServiceError::Invalid(format!("target '{}' cannot be a candidate", request.target)));
    }
    let unique: BTreeSet<&String> = request.candidates.iter().collect();
    if unique.len() != request.candidates.len() {
        return Err(ServiceError::Invalid("duplicate candidates".into()));
    }
    let table = store.dataset(&request.dataset)?.table()?;
    check_columns(&table, &[&request.target])?;
    for c in &request.candidates {
        check_columns(&table, &[c])?;
    }
    for name in request.probe_values.keys() {
        if !request.candidates.contains(name) {
            return Err(ServiceError::Invalid(format!("probe value given for non-candidate '{name}'")));
        }
    }
    let estimator = Estimator::load(store, &request.estimator)?;
    let mut items = Vec::with_capacity(request.candidates.len());
    for name in &request.candidates {
        let c = table.require_column(name)?;
        let kind = table.columns()[c].kind;
        let values = table.column_values(c);
        let rule = if kind.is_categorical() { "==" } else { ">=" };
        let mut item = RootCauseItem {
            candidate: name.clone(),
            probe_value: None,
            rule: rule.into(),
            effect: None,
            interval: None,
            flag: None,
        };
        if values.iter().all(|&v| v == values[0]) {
            item.flag = Some("untestable: constant column".into());
            items.push(item);
            continue;
        }
        let probe = request.probe_values.get(name).copied().unwrap_or_else(|| {
            if kind.is_categorical() {
                mode(&values)
            } else {
                stats::median(&values)
            }
        });
        item.probe_value = Some(probe);
        let indicator: Vec<f64> = values
            .iter()
            .map(|&v| f64::from(if kind.is_categorical() { v == probe } else { v >= probe }))
            .collect();
        let run = || -> Result<CateEstimate> {
            let queries = query_table(&table, &[name, &request.target], request.rows, None)?;
            let mut context = table.clone();
            context.replace_column(c, ColumnKind::Categorical { classes: 2 }, &indicator)?;
            let effects = estimate_effects(
                &estimator,
                &context,
                name,
                &request.target,
                &queries,
                bootstrap_config(request.bootstrap, request.seed),
            )?;
            Ok(effects.mean)
        };
        match run() {
            Ok(mean) => {
                item.effect = Some(mean.estimate);
                item.interval = mean.interval;
            }
            Err(e) => item.flag = Some(format!("untestable: {}", candidate_flag(&e).ok_or(e)?)),
        }
        items.push(item);
    }
    items.sort_by(|a, b| match (a.effect, b.effect) {
        (Some(x), Some(y)) => y.abs().total_cmp(&x.abs()).then_with(|| a.candidate.cmp(&b.candidate)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.candidate.cmp(&b.candidate),
    });
    Ok(items)
}
