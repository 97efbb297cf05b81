//! Pretraining episodes: observational context, query covariates and
//! ground-truth ITE targets drawn from one SCM.
//!
//! Encoding is shared with inference: continuous covariates and the outcome
//! are z-scored with statistics computed from the context rows only,
//! categorical covariates are one-hot encoded, and the covariate block is
//! zero-padded to `d_max` slots.

use std::collections::BTreeMap;

use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact::{Artifact, Tensor};
use crate::error::{Error, Result};
use crate::scm::{
    instantiate_scm, paired_potential_outcomes, sample_cpg, GraphConfig, MechanismPrior, Scm,
};
use crate::seed::{derive_seed, rng_from_seed, streams};
use crate::stats;
use crate::table::{Column, ColumnKind, ColumnRole, SampleTable};

pub const TREATMENT_COLUMN: &str = "T";
pub const OUTCOME_COLUMN: &str = "Y";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TreatmentPolicy {
    /// Uniform over non-sink nodes with a path to the sink and a
    /// non-degenerate contrast.
    Uniform,
    Node { index: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorConfig {
    pub graph: GraphConfig,
    pub mechanisms: MechanismPrior,
    pub context_min: usize,
    pub context_max: usize,
    pub queries: usize,
    pub d_max: usize,
    pub treatment_policy: TreatmentPolicy,
    /// Probability that the chosen treatment's outgoing coefficients are
    /// zeroed, giving a null-effect episode.
    pub null_effect_prob: f64,
    /// Post-treatment noise draws averaged per target (1 = single ITE).
    pub ite_draws: usize,
    pub probe_samples: usize,
    pub max_retries: usize,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            graph: GraphConfig::default(),
            mechanisms: MechanismPrior::default(),
            context_min: 48,
            context_max: 128,
            queries: 16,
            d_max: 16,
            treatment_policy: TreatmentPolicy::Uniform,
            null_effect_prob: 0.15,
            ite_draws: 1,
            probe_samples: 1000,
            max_retries: 16,
        }
    }
}

impl PriorConfig {
    /// Five-node, all-continuous, linear-only prior used for training
    /// sanity checks.
    pub fn narrow_linear() -> Self {
        PriorConfig {
            graph: GraphConfig {
                min_nodes: 5,
                max_nodes: 5,
                ..GraphConfig::default()
            },
            mechanisms: MechanismPrior {
                categorical_prob: 0.0,
                nonlinear_prob: 0.0,
                ..MechanismPrior::default()
            },
            context_min: 48,
            context_max: 96,
            ..PriorConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.graph.validate()?;
        self.mechanisms.validate()?;
        if self.context_min < 2 || self.context_max < self.context_min {
            return Err(Error::config("context range must satisfy 2 <= min <= max"));
        }
        if self.queries == 0 || self.d_max == 0 || self.ite_draws == 0 {
            return Err(Error::config("queries, d_max and ite_draws must be positive"));
        }
        if !(0.0..=1.0).contains(&self.null_effect_prob) {
            return Err(Error::config("null_effect_prob must lie in [0, 1]"));
        }
        if self.probe_samples < 4 || self.max_retries == 0 {
            return Err(Error::config("probe_samples >= 4 and max_retries >= 1 required"));
        }
        Ok(())
    }
}

/// Per-slot statistics used to encode covariates, plus outcome statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    /// Covariate columns kept after truncation, in slot order.
    pub columns: Vec<String>,
    /// Mean/std per valid slot (one-hot slots carry 0/1).
    pub slot_mean: Vec<f64>,
    pub slot_std: Vec<f64>,
    pub outcome_mean: f64,
    pub outcome_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub scm_seed: u64,
    pub treatment: usize,
    pub t1: f64,
    pub t0: f64,
    pub null_effect: bool,
}

/// One fixed-shape training unit. Covariate blocks are row-major with
/// `d_max` slots per row; slots at or beyond `covariate_dim` are padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub d_max: usize,
    pub covariate_dim: usize,
    pub context_x: Vec<f32>,
    pub context_t: Vec<f32>,
    pub context_y: Vec<f32>,
    pub query_x: Vec<f32>,
    /// ITE targets in outcome-standardized units (divided by outcome std).
    pub targets: Vec<f32>,
    pub norm: Normalization,
    pub meta: EpisodeMeta,
}

impl Episode {
    pub fn context_len(&self) -> usize {
        self.context_t.len()
    }

    pub fn query_len(&self) -> usize {
        self.query_x.len() / self.d_max
    }

    /// 1 for real covariate slots, 0 for padding.
    pub fn validity_mask(&self) -> Vec<f32> {
        (0..self.d_max)
            .map(|s| if s < self.covariate_dim { 1.0 } else { 0.0 })
            .collect()
    }

    /// Targets converted back to outcome units.
    pub fn targets_in_outcome_units(&self) -> Vec<f64> {
        self.targets
            .iter()
            .map(|&t| t as f64 * self.norm.outcome_std)
            .collect()
    }
}

/// How covariate columns are fitted into `d_max` slots.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodeOptions {
    pub d_max: usize,
    /// When false, exceeding `d_max` is a capacity error.
    pub truncate: bool,
    /// Column names in the order they are dropped when truncating; columns
    /// not listed are dropped last-first after these.
    pub drop_order: Vec<String>,
}

/// Encodes a context table (covariates, treatment indicator in {0,1},
/// outcome) and query covariates into model inputs. `targets` are raw ITEs
/// in outcome units.
pub fn encode(
    context: &SampleTable,
    queries: &SampleTable,
    targets: Option<&[f64]>,
    options: &EncodeOptions,
    meta: EpisodeMeta,
) -> Result<Episode> {
    let t_col = context
        .role_index(ColumnRole::Treatment)
        .ok_or_else(|| Error::Contract("context lacks a treatment column".into()))?;
    let y_col = context
        .role_index(ColumnRole::Outcome)
        .ok_or_else(|| Error::Contract("context lacks an outcome column".into()))?;
    if context.is_empty() {
        return Err(Error::Empty("context rows"));
    }
    let mut kept: Vec<usize> = context.covariate_indices();
    let width = |cols: &[usize]| -> usize {
        cols.iter().map(|&c| context.columns()[c].kind.encoded_width()).sum()
    };
    if width(&kept) > options.d_max {
        if !options.truncate {
            return Err(Error::Capacity {
                needed: width(&kept),
                capacity: options.d_max,
            });
        }
        let mut order: Vec<usize> = options
            .drop_order
            .iter()
            .filter_map(|name| context.column_index(name))
            .filter(|c| kept.contains(c))
            .collect();
        order.extend(kept.iter().rev().filter(|c| !order.contains(c)).copied().collect::<Vec<_>>());
        for c in order {
            if width(&kept) <= options.d_max {
                break;
            }
            kept.retain(|&k| k != c);
        }
    }
    // Query columns are matched to context columns by name.
    let query_cols = kept
        .iter()
        .map(|&c| {
            let col = &context.columns()[c];
            let q = queries.require_column(&col.name)?;
            if queries.columns()[q].kind != col.kind {
                return Err(Error::Contract(format!(
                    "query column '{}' kind differs from context",
                    col.name
                )));
            }
            Ok(q)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut slot_mean = Vec::new();
    let mut slot_std = Vec::new();
    for &c in &kept {
        match context.columns()[c].kind {
            ColumnKind::Continuous => {
                let values = context.column_values(c);
                slot_mean.push(stats::mean(&values));
                slot_std.push(guard_std(stats::std_pop(&values)));
            }
            ColumnKind::Categorical { classes } => {
                slot_mean.extend(std::iter::repeat_n(0.0, classes));
                slot_std.extend(std::iter::repeat_n(1.0, classes));
            }
        }
    }
    let covariate_dim = slot_mean.len();
    let y_values = context.column_values(y_col);
    let outcome_mean = stats::mean(&y_values);
    let outcome_std = guard_std(stats::std_pop(&y_values));

    let encode_rows = |table: &SampleTable, cols: &[usize]| -> Vec<f32> {
        let mut out = Vec::with_capacity(table.row_count() * options.d_max);
        for row in table.rows() {
            let start = out.len();
            let mut slot = 0;
            for (&c, col) in cols.iter().zip(kept.iter().map(|&k| &context.columns()[k])) {
                match col.kind {
                    ColumnKind::Continuous => {
                        out.push(((row[c] - slot_mean[slot]) / slot_std[slot]) as f32);
                        slot += 1;
                    }
                    ColumnKind::Categorical { classes } => {
                        let k = row[c] as usize;
                        out.extend((0..classes).map(|j| if j == k { 1.0f32 } else { 0.0 }));
                        slot += classes;
                    }
                }
            }
            out.resize(start + options.d_max, 0.0);
        }
        out
    };
    let context_x = encode_rows(context, &kept);
    let query_x = encode_rows(queries, &query_cols);
    let context_t = context
        .column_values(t_col)
        .into_iter()
        .map(|t| {
            if t == 0.0 || t == 1.0 {
                Ok(t as f32)
            } else {
                Err(Error::Contract(format!("treatment indicator {t} is not 0/1")))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let context_y = y_values
        .iter()
        .map(|y| ((y - outcome_mean) / outcome_std) as f32)
        .collect();
    let targets = match targets {
        Some(t) if t.len() != queries.row_count() => {
            return Err(Error::Contract("one target per query row required".into()))
        }
        Some(t) => t.iter().map(|v| (v / outcome_std) as f32).collect(),
        None => vec![0.0; queries.row_count()],
    };
    Ok(Episode {
        d_max: options.d_max,
        covariate_dim,
        context_x,
        context_t,
        context_y,
        query_x,
        targets,
        norm: Normalization {
            columns: kept.iter().map(|&c| context.columns()[c].name.clone()).collect(),
            slot_mean,
            slot_std,
            outcome_mean,
            outcome_std,
        },
        meta,
    })
}

fn guard_std(s: f64) -> f64 {
    if s > 1e-12 && s.is_finite() {
        s
    } else {
        1.0
    }
}

/// Un-encoded episode: tables ready for [`encode`], plus raw targets.
#[derive(Debug, Clone, PartialEq)]
pub struct RawEpisode {
    pub context: SampleTable,
    pub queries: SampleTable,
    pub targets: Vec<f64>,
    pub drop_order: Vec<String>,
    pub meta: EpisodeMeta,
}

impl RawEpisode {
    pub fn encode(&self, d_max: usize) -> Result<Episode> {
        let options = EncodeOptions {
            d_max,
            truncate: true,
            drop_order: self.drop_order.clone(),
        };
        encode(
            &self.context,
            &self.queries,
            Some(&self.targets),
            &options,
            self.meta.clone(),
        )
    }
}

/// Binary contrast (t0, t1) for a candidate treatment, or `None` when the
/// node's probe marginal is degenerate.
pub fn treatment_contrast(scm: &Scm, node: usize, probe: &SampleTable) -> Option<(f64, f64)> {
    match scm.kind(node) {
        ColumnKind::Categorical { classes: 2 } => Some((0.0, 1.0)),
        kind => {
            let values = probe.column_values(node);
            let (mut t0, mut t1) = (stats::quantile(&values, 0.25), stats::quantile(&values, 0.75));
            if kind.is_categorical() {
                t0 = t0.round();
                t1 = t1.round();
            }
            (t1 - t0 > 1e-9).then_some((t0, t1))
        }
    }
}

fn treatment_indicator(kind: ColumnKind, value: f64, t0: f64, t1: f64) -> f64 {
    match kind {
        ColumnKind::Categorical { classes: 2 } => value,
        _ => {
            if value >= 0.5 * (t0 + t1) {
                1.0
            } else {
                0.0
            }
        }
    }
}

/// Builds a raw episode from a given SCM.
pub fn raw_episode_from_scm<R: RngCore + ?Sized>(
    scm: &Scm,
    prior: &PriorConfig,
    rng: &mut R,
) -> Result<RawEpisode> {
    let probe = scm.sample_observational(prior.probe_samples, rng)?;
    let sink = scm.sink();
    let eligible: Vec<(usize, (f64, f64))> = match prior.treatment_policy {
        TreatmentPolicy::Node { index } => {
            let c = (index < sink && scm.graph.has_path(index, sink))
                .then(|| treatment_contrast(scm, index, &probe))
                .flatten();
            c.map(|c| vec![(index, c)]).unwrap_or_default()
        }
        TreatmentPolicy::Uniform => (0..sink)
            .filter(|&j| scm.graph.has_path(j, sink))
            .filter_map(|j| treatment_contrast(scm, j, &probe).map(|c| (j, c)))
            .collect(),
    };
    if eligible.is_empty() {
        return Err(Error::DegenerateTreatment("no eligible treatment node".into()));
    }
    let (treatment, (t0, t1)) = eligible[rng.random_range(0..eligible.len())];
    let null_effect = rng.random::<f64>() < prior.null_effect_prob;
    let mut scm = scm.clone();
    if null_effect {
        scm.sever_effects_of(treatment);
    }

    let n_ctx = rng.random_range(prior.context_min..=prior.context_max);
    let observed = scm.sample_observational(n_ctx, rng)?;
    let covariate_nodes = scm.pre_treatment_nodes(treatment);
    let mut columns: Vec<Column> = covariate_nodes
        .iter()
        .map(|&j| Column::covariate(Scm::column_name(j), scm.kind(j)))
        .collect();
    columns.push(Column::new(
        TREATMENT_COLUMN,
        ColumnKind::Categorical { classes: 2 },
        ColumnRole::Treatment,
    ));
    columns.push(Column::new(OUTCOME_COLUMN, ColumnKind::Continuous, ColumnRole::Outcome));
    let t_kind = scm.kind(treatment);
    let mut data = Vec::with_capacity(n_ctx * columns.len());
    for row in observed.rows() {
        data.extend(covariate_nodes.iter().map(|&j| row[j]));
        data.push(treatment_indicator(t_kind, row[treatment], t0, t1));
        data.push(row[sink]);
    }
    let context = SampleTable::from_rows(columns, data)?;

    let potential = paired_potential_outcomes(&scm, treatment, t1, t0, prior.queries, rng)?;
    let queries = potential.covariates();
    let targets = if prior.ite_draws == 1 {
        potential.ite()
    } else {
        let mut overrides = vec![None; scm.node_count()];
        (0..queries.row_count())
            .map(|r| {
                for (c, &j) in potential.covariate_nodes.iter().enumerate() {
                    overrides[j] = Some(queries.get(r, c));
                }
                scm.mean_effect(&mut overrides, treatment, t1, t0, prior.ite_draws, rng)
                    .estimate
            })
            .collect()
    };

    let mut by_distance: Vec<usize> = covariate_nodes.clone();
    by_distance.sort_by_key(|&j| std::cmp::Reverse((j.abs_diff(treatment), j)));
    Ok(RawEpisode {
        context,
        queries,
        targets,
        drop_order: by_distance.into_iter().map(Scm::column_name).collect(),
        meta: EpisodeMeta {
            scm_seed: scm.seed,
            treatment,
            t1,
            t0,
            null_effect,
        },
    })
}

pub fn episode_from_scm<R: RngCore + ?Sized>(
    scm: &Scm,
    prior: &PriorConfig,
    rng: &mut R,
) -> Result<Episode> {
    raw_episode_from_scm(scm, prior, rng)?.encode(prior.d_max)
}

/// Samples an SCM from the prior and turns it into an episode, resampling
/// when no node qualifies as a treatment.
pub fn generate_raw_episode<R: RngCore + ?Sized>(prior: &PriorConfig, rng: &mut R) -> Result<RawEpisode> {
    prior.validate()?;
    let mut last = None;
    for _ in 0..prior.max_retries {
        let graph = sample_cpg(&prior.graph, rng)?;
        let scm = instantiate_scm(graph, &prior.mechanisms, rng)?;
        match raw_episode_from_scm(&scm, prior, rng) {
            Ok(raw) => return Ok(raw),
            Err(e @ Error::DegenerateTreatment(_)) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.unwrap_or_else(|| Error::DegenerateTreatment("retries exhausted".into())))
}

pub fn generate_episode<R: RngCore + ?Sized>(prior: &PriorConfig, rng: &mut R) -> Result<Episode> {
    generate_raw_episode(prior, rng)?.encode(prior.d_max)
}

/// Seed of episode `index` under `master_seed`.
pub fn episode_seed(master_seed: u64, index: u64) -> u64 {
    derive_seed(master_seed, streams::EPISODE, index)
}

/// `size` independent episodes; episode `i` depends only on
/// `(master_seed, i)`.
pub fn generate_batch(prior: &PriorConfig, size: usize, master_seed: u64) -> Result<Vec<Episode>> {
    (0..size)
        .into_par_iter()
        .map(|i| generate_episode(prior, &mut rng_from_seed(episode_seed(master_seed, i as u64))))
        .collect()
}

/// Packs episodes into a manifest-plus-payload artifact of kind `episodes`.
pub fn episodes_to_artifact(episodes: &[Episode]) -> Result<Artifact> {
    let mut a = Artifact::new("episodes");
    a.set("count", episodes.len());
    for (i, e) in episodes.iter().enumerate() {
        let p = format!("e{i}");
        a.set(format!("{p}.d_max"), e.d_max);
        a.set(format!("{p}.covariate_dim"), e.covariate_dim);
        a.set(format!("{p}.meta"), serde_json::to_string(&e.meta)?);
        a.set(format!("{p}.norm"), serde_json::to_string(&e.norm)?);
        let (n, q) = (e.context_len(), e.query_len());
        a.push_tensor(Tensor::new(format!("{p}.context_x"), vec![n, e.d_max], e.context_x.clone()));
        a.push_tensor(Tensor::new(format!("{p}.context_t"), vec![n], e.context_t.clone()));
        a.push_tensor(Tensor::new(format!("{p}.context_y"), vec![n], e.context_y.clone()));
        a.push_tensor(Tensor::new(format!("{p}.query_x"), vec![q, e.d_max], e.query_x.clone()));
        a.push_tensor(Tensor::new(format!("{p}.targets"), vec![q], e.targets.clone()));
    }
    Ok(a)
}

pub fn episodes_from_artifact(a: &Artifact) -> Result<Vec<Episode>> {
    if a.kind != "episodes" {
        return Err(Error::Format(format!("expected episodes artifact, found '{}'", a.kind)));
    }
    let count: usize = a.parse("count")?;
    (0..count)
        .map(|i| {
            let p = format!("e{i}");
            let tensor = |name: &str| a.tensor(&format!("{p}.{name}")).map(|t| t.data.clone());
            Ok(Episode {
                d_max: a.parse(&format!("{p}.d_max"))?,
                covariate_dim: a.parse(&format!("{p}.covariate_dim"))?,
                context_x: tensor("context_x")?,
                context_t: tensor("context_t")?,
                context_y: tensor("context_y")?,
                query_x: tensor("query_x")?,
                targets: tensor("targets")?,
                norm: serde_json::from_str(a.require(&format!("{p}.norm"))?)?,
                meta: serde_json::from_str(a.require(&format!("{p}.meta"))?)?,
            })
        })
        .collect()
}

/// Count of episodes per treatment node, for prior diagnostics.
pub fn treatment_histogram(episodes: &[Episode]) -> BTreeMap<usize, usize> {
    let mut h = BTreeMap::new();
    for e in episodes {
        *h.entry(e.meta.treatment).or_insert(0) += 1;
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_of_one_matches_single_episode() {
        let prior = PriorConfig::default();
        let batch = generate_batch(&prior, 1, 42).unwrap();
        let single = generate_episode(&prior, &mut rng_from_seed(episode_seed(42, 0))).unwrap();
        assert_eq!(batch[0], single);
    }

    #[test]
    fn batch_has_distinct_scms_and_reproduces() {
        let prior = PriorConfig::default();
        let a = generate_batch(&prior, 8, 5).unwrap();
        let seeds: std::collections::BTreeSet<u64> = a.iter().map(|e| e.meta.scm_seed).collect();
        assert_eq!(seeds.len(), 8);
        assert_eq!(a, generate_batch(&prior, 8, 5).unwrap());
    }

    #[test]
    fn padding_mask_covers_trailing_slots() {
        let prior = PriorConfig::default();
        for e in generate_batch(&prior, 16, 9).unwrap() {
            let mask = e.validity_mask();
            assert_eq!(mask.iter().filter(|&&m| m == 0.0).count(), e.d_max - e.covariate_dim);
            for row in e.context_x.chunks(e.d_max).chain(e.query_x.chunks(e.d_max)) {
                assert!(row[e.covariate_dim..].iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn truncation_respects_capacity() {
        let prior = PriorConfig {
            d_max: 3,
            graph: GraphConfig {
                min_nodes: 10,
                max_nodes: 10,
                ..GraphConfig::default()
            },
            ..PriorConfig::default()
        };
        for e in generate_batch(&prior, 8, 1).unwrap() {
            assert!(e.covariate_dim <= 3);
        }
    }

    #[test]
    fn capacity_error_without_truncation() {
        let raw = generate_raw_episode(&PriorConfig::default(), &mut rng_from_seed(3)).unwrap();
        let needed: usize = raw
            .context
            .covariate_indices()
            .iter()
            .map(|&c| raw.context.columns()[c].kind.encoded_width())
            .sum();
        if needed > 0 {
            let options = EncodeOptions {
                d_max: needed - 1,
                truncate: false,
                drop_order: vec![],
            };
            let err = encode(&raw.context, &raw.queries, None, &options, raw.meta.clone()).unwrap_err();
            assert!(matches!(err, Error::Capacity { .. }));
        }
    }

    #[test]
    fn artifact_round_trip() {
        let episodes = generate_batch(&PriorConfig::default(), 3, 77).unwrap();
        let art = episodes_to_artifact(&episodes).unwrap();
        let back = episodes_from_artifact(&Artifact::from_bytes(&art.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back, episodes);
    }
}
