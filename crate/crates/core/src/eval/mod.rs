//! Semi-synthetic benchmarks with known effects, scored by PEHE.

mod benchmark;
mod covariates;
mod semisynth;

pub use benchmark::{
    benchmark_suite, build_suite, pehe, run_benchmark, BenchmarkProtocol, BenchmarkReport, BenchmarkTask,
    CateEstimator, IclEstimator, OracleEstimator, SLearnerEstimator, Summary, ZeroEstimator,
};
pub use covariates::CovariateGenerator;
pub use semisynth::{
    build_semi_synthetic, standardized_design, BenchmarkDataset, CovariateSource, EffectShape, HiddenTruth,
    ResponseKind, SemiSynthConfig, OUTCOME, SEMISYNTH_FORMAT_VERSION, TREATMENT,
};
