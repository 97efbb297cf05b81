//! Causal what-if workbench.
//!
//! * [`scm`] samples production-line causal process graphs, instantiates
//!   mixed continuous/categorical structural causal models and computes
//!   ground-truth interventional effects.
//! * [`episode`] turns SCM draws into fixed-shape pretraining episodes.
//! * [`model`] is a small in-context transformer that reads an episode's
//!   observational context and predicts treatment effects for query rows.
//! * [`baseline`] holds the S-learner used for comparison.
//! * [`eval`] builds semi-synthetic benchmarks and scores estimators by PEHE.

// Validation uses `!(x > 0.0)` on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod artifact;
pub mod baseline;
pub mod episode;
pub mod error;
pub mod eval;
pub mod model;
pub mod scm;
pub mod seed;
pub mod stats;
pub mod table;

pub use error::{Error, Result};
pub use table::{Column, ColumnKind, ColumnRole, SampleTable};

use serde::{Deserialize, Serialize};

/// Point estimate of τ(x), optionally with a bootstrap interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CateEstimate {
    pub estimate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interval: Option<(f64, f64)>,
}

impl CateEstimate {
    pub fn point(estimate: f64) -> Self {
        CateEstimate {
            estimate,
            interval: None,
        }
    }
}
