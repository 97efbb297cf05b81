use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_from_seed;
use crate::stats;
use crate::table::{Column, ColumnKind, SampleTable};

/// Correlated mixed-type covariates standing in for machine logs.
///
/// Continuous columns are noisy linear mixtures of a few shared latent
/// factors; categorical columns bin another mixture at equal-mass cut
/// points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CovariateGenerator {
    pub rows: usize,
    pub continuous: usize,
    pub categorical: usize,
    pub max_classes: usize,
    pub factors: usize,
    /// Idiosyncratic noise added to each column's factor mixture.
    pub noise: f64,
}

impl Default for CovariateGenerator {
    fn default() -> Self {
        CovariateGenerator {
            rows: 1000,
            continuous: 6,
            categorical: 2,
            max_classes: 4,
            factors: 3,
            noise: 0.5,
        }
    }
}

impl CovariateGenerator {
    pub fn generate(&self, seed: u64) -> Result<SampleTable> {
        if self.rows == 0 || self.continuous + self.categorical == 0 || self.factors == 0 {
            return Err(Error::config("covariate generator needs rows, columns and factors"));
        }
        if self.categorical > 0 && self.max_classes < 2 {
            return Err(Error::config("max_classes must be at least 2"));
        }
        let mut rng = rng_from_seed(seed);
        let n = self.rows;
        let latent: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..self.factors).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let mixture = |rng: &mut crate::seed::WorkRng| -> Vec<f64> {
            let loading: Vec<f64> = (0..self.factors).map(|_| rng.sample(StandardNormal)).collect();
            latent
                .iter()
                .map(|f| {
                    let base: f64 = f.iter().zip(&loading).map(|(a, b)| a * b).sum();
                    base + self.noise * rng.sample::<f64, _>(StandardNormal)
                })
                .collect()
        };
        let mut columns = Vec::new();
        let mut values: Vec<Vec<f64>> = Vec::new();
        for j in 0..self.continuous {
            let scale = rng.random_range(0.5..5.0);
            let offset = rng.random_range(-10.0..10.0);
            columns.push(Column::covariate(format!("sensor_{j}"), ColumnKind::Continuous));
            values.push(mixture(&mut rng).into_iter().map(|v| offset + scale * v).collect());
        }
        for j in 0..self.categorical {
            let classes = rng.random_range(2..=self.max_classes);
            let raw = mixture(&mut rng);
            let cuts: Vec<f64> = (1..classes)
                .map(|k| stats::quantile(&raw, k as f64 / classes as f64))
                .collect();
            columns.push(Column::covariate(format!("state_{j}"), ColumnKind::Categorical { classes }));
            values.push(raw.iter().map(|v| cuts.iter().filter(|&&c| *v > c).count() as f64).collect());
        }
        let data = (0..n).flat_map(|r| values.iter().map(move |col| col[r])).collect();
        SampleTable::from_rows(columns, data)
    }
}
