//! Ground-truth causal effects: paired potential outcomes under shared
//! noise and Monte Carlo CATE.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_value, Scm};
use crate::error::{Error, Result};
use crate::table::{Column, ColumnKind, ColumnRole, SampleTable};

/// Pre-treatment covariates plus `Y1`, `Y0`, `ITE` (auxiliary columns).
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialOutcomes {
    pub table: SampleTable,
    /// Node index of each covariate column, in column order.
    pub covariate_nodes: Vec<usize>,
}

impl PotentialOutcomes {
    pub fn ite(&self) -> Vec<f64> {
        self.table.column_values(self.table.width() - 1)
    }

    pub fn covariates(&self) -> SampleTable {
        let cols: Vec<usize> = (0..self.covariate_nodes.len()).collect();
        self.table.select_columns(&cols)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CateTruth {
    pub estimate: f64,
    pub standard_error: f64,
}

impl Scm {
    /// Non-descendants of `treatment`, excluding the treatment and the sink.
    pub fn pre_treatment_nodes(&self, treatment: usize) -> Vec<usize> {
        let desc = self.graph.descendants(treatment);
        (0..self.node_count())
            .filter(|&j| j != treatment && j != self.sink() && !desc.contains(&j))
            .collect()
    }

    pub(crate) fn check_treatment(&self, treatment: usize, t1: f64, t0: f64) -> Result<()> {
        if treatment >= self.node_count() || treatment == self.sink() {
            return Err(Error::InvalidIntervention(format!(
                "node {treatment} cannot be a treatment"
            )));
        }
        if !self.graph.has_path(treatment, self.sink()) {
            return Err(Error::DegenerateTreatment(format!(
                "node {treatment} has no directed path to the outcome"
            )));
        }
        for v in [t1, t0] {
            check_value(self.kind(treatment), v).map_err(Error::InvalidIntervention)?;
        }
        Ok(())
    }

    /// Y(t1) − Y(t0) for one unit: `overrides` must already pin the
    /// pre-treatment nodes (or leave them free); the treatment slot is
    /// overwritten. Returns (Y1, Y0, forward pass under t1).
    #[allow(clippy::too_many_arguments)]
    fn paired_pass(
        &self,
        noise: &[f64],
        overrides: &mut [Option<f64>],
        treatment: usize,
        t1: f64,
        t0: f64,
        out1: &mut [f64],
        out0: &mut [f64],
    ) -> (f64, f64) {
        overrides[treatment] = Some(t1);
        self.forward(noise, overrides, out1);
        overrides[treatment] = Some(t0);
        self.forward(noise, overrides, out0);
        overrides[treatment] = None;
        (out1[self.sink()], out0[self.sink()])
    }

    /// Mean and standard error of Y(t1) − Y(t0) over `n_mc` redraws of the
    /// noise, with the pre-treatment nodes pinned by `overrides`.
    pub(crate) fn mean_effect<R: Rng + ?Sized>(
        &self,
        overrides: &mut [Option<f64>],
        treatment: usize,
        t1: f64,
        t0: f64,
        n_mc: usize,
        rng: &mut R,
    ) -> CateTruth {
        let width = self.node_count();
        let (mut out1, mut out0) = (vec![0.0; width], vec![0.0; width]);
        let diffs: Vec<f64> = (0..n_mc)
            .map(|_| {
                let noise = self.draw_noise(rng);
                let (y1, y0) = self.paired_pass(&noise, overrides, treatment, t1, t0, &mut out1, &mut out0);
                y1 - y0
            })
            .collect();
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let var = if diffs.len() > 1 {
            diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        CateTruth {
            estimate: mean,
            standard_error: (var / n).sqrt(),
        }
    }
}

/// Draws `n` units; each unit's noise is shared by the `do(T=t1)` and
/// `do(T=t0)` forward passes, so `ITE = Y1 − Y0` isolates the treatment.
pub fn paired_potential_outcomes<R: Rng + ?Sized>(
    scm: &Scm,
    treatment: usize,
    t1: f64,
    t0: f64,
    n: usize,
    rng: &mut R,
) -> Result<PotentialOutcomes> {
    scm.check_treatment(treatment, t1, t0)?;
    if n == 0 {
        return Err(Error::config("sample size must be at least 1"));
    }
    let covariate_nodes = scm.pre_treatment_nodes(treatment);
    let mut columns: Vec<Column> = covariate_nodes
        .iter()
        .map(|&j| Column::covariate(Scm::column_name(j), scm.kind(j)))
        .collect();
    for name in ["Y1", "Y0", "ITE"] {
        columns.push(Column::new(name, ColumnKind::Continuous, ColumnRole::Auxiliary));
    }
    let width = scm.node_count();
    let mut overrides = vec![None; width];
    let (mut out1, mut out0) = (vec![0.0; width], vec![0.0; width]);
    let mut data = Vec::with_capacity(n * columns.len());
    for _ in 0..n {
        let noise = scm.draw_noise(rng);
        let (y1, y0) = scm.paired_pass(&noise, &mut overrides, treatment, t1, t0, &mut out1, &mut out0);
        data.extend(covariate_nodes.iter().map(|&j| out1[j]));
        data.extend([y1, y0, y1 - y0]);
    }
    Ok(PotentialOutcomes {
        table: SampleTable::from_rows(columns, data)?,
        covariate_nodes,
    })
}

/// `E[Y | do(T=t1), X=x] − E[Y | do(T=t0), X=x]` by Monte Carlo, where `x`
/// assigns every pre-treatment node and the remaining noise is redrawn.
pub fn ground_truth_cate<R: Rng + ?Sized>(
    scm: &Scm,
    treatment: usize,
    t1: f64,
    t0: f64,
    x: &[(usize, f64)],
    n_mc: usize,
    rng: &mut R,
) -> Result<CateTruth> {
    if n_mc < 2 {
        return Err(Error::config("n_mc must be at least 2"));
    }
    scm.check_treatment(treatment, t1, t0)?;
    let required: BTreeSet<usize> = scm.pre_treatment_nodes(treatment).into_iter().collect();
    let given: BTreeSet<usize> = x.iter().map(|&(j, _)| j).collect();
    if given != required || given.len() != x.len() {
        return Err(Error::config(format!(
            "covariate assignment must fix exactly the pre-treatment nodes {required:?}"
        )));
    }
    let mut overrides = vec![None; scm.node_count()];
    for &(j, v) in x {
        check_value(scm.kind(j), v).map_err(Error::config)?;
        overrides[j] = Some(v);
    }
    Ok(scm.mean_effect(&mut overrides, treatment, t1, t0, n_mc, rng))
}
