//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Runs without the libtest harness so output order is stable.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use common::scms;
use whatif_core::baseline::{SLearnerConfig, SLearnerModel};
use whatif_core::episode::{generate_episode, PriorConfig};
use whatif_core::eval::{
    benchmark_suite, build_suite, pehe, run_benchmark, BenchmarkDataset, BenchmarkProtocol, CateEstimator,
    CovariateGenerator, CovariateSource, EffectShape, IclEstimator, ResponseKind, SLearnerEstimator, SemiSynthConfig,
};
use whatif_core::model::{batch_loss, forward, train_with, ModelConfig, ModelParameters, TrainConfig};
use whatif_core::scm::{
    ground_truth_cate, instantiate_scm, paired_potential_outcomes, sample_cpg, sample_forward_edges, GraphConfig,
    InterventionSpec, MechanismPrior,
};
use whatif_core::seed::{derive_seed, rng_from_seed, streams};
use whatif_service::runs::{execute, replay, CheckpointRef, EstimatorName, EvaluateRun, RunSpec, TrainRun};
use whatif_service::store::sha256_hex;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

#[derive(Default)]
struct Shared {
    trained: Option<ModelParameters<f32>>,
}

struct Criterion {
    name: &'static str,
    budget: Option<Duration>,
    run: fn(&mut Shared) -> Outcome,
}

fn main() {
    let criteria = [
        Criterion {
            name: "generator invariants",
            budget: Some(Duration::from_secs(10)),
            run: generator_invariants,
        },
        Criterion {
            name: "do-operator oracle",
            budget: Some(Duration::from_secs(30)),
            run: do_operator_oracle,
        },
        Criterion {
            name: "CATE oracle",
            budget: Some(Duration::from_secs(5)),
            run: cate_oracle,
        },
        Criterion {
            name: "PEHE arithmetic",
            budget: Some(Duration::from_secs(1)),
            run: pehe_arithmetic,
        },
        Criterion {
            name: "gradient check",
            budget: Some(Duration::from_secs(60)),
            run: gradient_check,
        },
        Criterion {
            name: "attention set-invariance",
            budget: Some(Duration::from_secs(30)),
            run: attention_invariance,
        },
        Criterion {
            name: "training sanity",
            budget: Some(Duration::from_secs(600)),
            run: training_sanity,
        },
        Criterion {
            name: "S-learner recovery",
            budget: Some(Duration::from_secs(30)),
            run: slearner_recovery,
        },
        Criterion {
            name: "benchmark protocol",
            budget: None,
            run: benchmark_protocol,
        },
        Criterion {
            name: "reproducibility",
            budget: None,
            run: reproducibility,
        },
    ];
    let mut shared = Shared::default();
    let mut failed = 0;
    for criterion in &criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| (criterion.run)(&mut shared)))
            .unwrap_or_else(|panic| Err(panic_message(panic.as_ref())));
        let elapsed = start.elapsed();
        let outcome = match (outcome, criterion.budget) {
            (Ok(detail), Some(budget)) if elapsed > budget => {
                Err(format!("{detail}; over the {}s budget", budget.as_secs()))
            }
            (other, _) => other,
        };
        let (label, detail) = match outcome {
            Ok(detail) => ("PASS", detail),
            Err(detail) => {
                failed += 1;
                ("FAIL", detail)
            }
        };
        println!("{label}  {:<26} {:>8.2}s  {detail}", criterion.name, elapsed.as_secs_f64());
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn panic_message(panic: &(dyn std::any::Any + Send)) -> String {
    let text = panic
        .downcast_ref::<String>()
        .cloned()
        .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "unknown panic".into());
    format!("panicked: {text}")
}

fn generator_invariants(_: &mut Shared) -> Outcome {
    let config = GraphConfig::default();
    for seed in 0..1000 {
        let g = sample_cpg(&config, &mut rng_from_seed(seed)).map_err(|e| e.to_string())?;
        let n = g.node_count();
        ensure!(g.edges().all(|(i, j)| i < j && j < n), "draw {seed}: edge against topological order");
        ensure!(g.sink_index() == n - 1 && g.out_degree(n - 1) == 0, "draw {seed}: sink is not last");
        for node in 0..n - 1 {
            ensure!(g.out_degree(node) > 0, "draw {seed}: node {node} is a second sink");
            ensure!(g.in_degree(node) <= config.max_in_degree, "draw {seed}: node {node} over the in-degree cap");
        }
    }
    let nodes = 8;
    let draws = 10_000;
    let mut hits = vec![0usize; nodes - 1];
    let mut trials = vec![0usize; nodes - 1];
    let mut rng = rng_from_seed(11);
    for _ in 0..draws {
        for (j, parents) in sample_forward_edges(nodes, &config, &mut rng).iter().enumerate() {
            for i in 0..j {
                trials[j - i - 1] += 1;
                hits[j - i - 1] += usize::from(parents.contains(&i));
            }
        }
    }
    let mut worst: f64 = 0.0;
    for gap in 0..nodes - 1 {
        let freq = hits[gap] as f64 / trials[gap] as f64;
        let expected = config.p0 * (-config.lambda * gap as f64).exp();
        worst = worst.max((freq - expected).abs());
    }
    ensure!(worst < 0.02, "edge frequency off by {worst:.4}");
    Ok(format!("1000 graphs valid; max edge-frequency gap {worst:.4} < 0.02"))
}

fn do_operator_oracle(_: &mut Shared) -> Outcome {
    let graph = GraphConfig {
        min_nodes: 3,
        max_nodes: 4,
        ..GraphConfig::default()
    };
    let prior = MechanismPrior {
        categorical_prob: 1.0,
        min_classes: 2,
        max_classes: 2,
        ..MechanismPrior::default()
    };
    let mut worst: f64 = 0.0;
    for seed in 0..10u64 {
        let mut rng = rng_from_seed(100 + seed);
        let scm = instantiate_scm(sample_cpg(&graph, &mut rng).unwrap(), &prior, &mut rng).unwrap();
        let node = seed as usize % (scm.node_count() - 1);
        let cut = scm
            .apply_do(&InterventionSpec {
                node,
                value: (seed % 2) as f64,
            })
            .unwrap();
        let exact = common::enumerate_binary_sink(&cut);
        let sink = cut
            .sample_observational(100_000, &mut rng_from_seed(seed))
            .unwrap()
            .column_values(cut.sink());
        let empirical = sink.iter().filter(|&&v| v == 1.0).count() as f64 / sink.len() as f64;
        worst = worst.max((empirical - exact).abs());
    }
    ensure!(worst < 0.02, "total variation {worst:.4}");
    Ok(format!("max total variation {worst:.4} < 0.02 over 10 SCMs"))
}

fn cate_oracle(_: &mut Shared) -> Outcome {
    let constant = scms::constant_effect();
    let po = paired_potential_outcomes(&constant, 1, 1.0, 0.0, 10_000, &mut rng_from_seed(1)).unwrap();
    let worst = po.ite().iter().map(|ite| (ite - 2.0).abs()).fold(0.0, f64::max);
    ensure!(worst < 1e-12, "constant-effect ITE off by {worst:e}");
    let truth = ground_truth_cate(&constant, 1, 1.0, 0.0, &[(0, 0.5)], 1000, &mut rng_from_seed(2)).unwrap();
    ensure!(
        (truth.estimate - 2.0).abs() <= 3.0 * truth.standard_error + 1e-12,
        "ground-truth CATE {} (se {})",
        truth.estimate,
        truth.standard_error
    );
    let interaction = scms::interaction();
    let po = paired_potential_outcomes(&interaction, 1, 1.0, 0.0, 10_000, &mut rng_from_seed(3)).unwrap();
    let x = po.table.column_values(0);
    let worst_interaction = x.iter().zip(po.ite()).map(|(x, ite)| (x - ite).abs()).fold(0.0, f64::max);
    ensure!(worst_interaction < 1e-12, "interaction ITE off by {worst_interaction:e}");
    Ok(format!(
        "ITE=2 to {worst:.1e}; CATE {:.6}; ITE=X to {worst_interaction:.1e}",
        truth.estimate
    ))
}

fn pehe_arithmetic(_: &mut Shared) -> Outcome {
    let truth = [1.0, -2.0, 0.5];
    let oracle = pehe(&truth, &truth).unwrap();
    let biased = pehe(&truth.map(|t| t + 1.0), &truth).unwrap();
    let worked = pehe(&[0.0, 0.0], &[3.0, 4.0]).unwrap();
    ensure!(oracle == 0.0, "oracle PEHE {oracle}");
    ensure!((biased - 1.0).abs() < 1e-12, "unit-bias PEHE {biased}");
    ensure!((worked - 3.5355).abs() < 1e-4, "worked example {worked}");
    Ok(format!("oracle {oracle}, unit bias {biased}, worked example {worked:.4}"))
}

fn gradient_check(_: &mut Shared) -> Outcome {
    let config = common::tiny_config();
    let mut worst: f64 = 0.0;
    for draw in 0..20u64 {
        let episode = common::random_episode(1000 + draw, config.d_max, 4, 3);
        worst = worst.max(common::gradient_check_error(&config, draw, &episode));
    }
    ensure!(worst < 1e-4, "max relative error {worst:e}");
    Ok(format!("max relative error {worst:.2e} < 1e-4 over 20 draws"))
}

fn attention_invariance(_: &mut Shared) -> Outcome {
    let config = ModelConfig::default();
    let params = ModelParameters::<f32>::init(&config, 21).unwrap();
    let mut worst = 0.0f32;
    for i in 0..100u64 {
        let episode = common::random_episode(500 + i, config.d_max, 32 + (i as usize % 64), 8);
        let base = forward(&params, &episode).unwrap();
        let permuted = common::permute_context(&episode, &common::shuffled(episode.context_len(), i));
        worst = worst.max(common::max_abs_diff(&base, &forward(&params, &permuted).unwrap()));
    }
    ensure!(worst < 1e-5, "prediction drift {worst:e}");
    Ok(format!("max drift {worst:.2e} < 1e-5 over 100 episodes"))
}

const SANITY_STEPS: usize = 500;
const SMOOTHING: usize = 50;

fn training_sanity(shared: &mut Shared) -> Outcome {
    let prior = PriorConfig::narrow_linear();
    let model = ModelConfig::default();
    let train = TrainConfig {
        steps: SANITY_STEPS,
        seed: 1,
        ..TrainConfig::default()
    };
    let outcome = train_with(&prior, &model, &train, None, |_| {}).map_err(|e| e.to_string())?;
    let first = outcome.window_mean(0, SMOOTHING).unwrap();
    let last = outcome.window_mean(SANITY_STEPS - SMOOTHING, SMOOTHING).unwrap();
    let ratio = last / first;
    let init = ModelParameters::<f32>::init(&model, train.init_seed()).unwrap();
    let mut wins = 0;
    for i in 0..100 {
        let episode = generate_episode(&prior, &mut rng_from_seed(derive_seed(1, streams::HELD_OUT, i))).unwrap();
        let batch = std::slice::from_ref(&episode);
        if batch_loss(&outcome.params, batch).unwrap() < batch_loss(&init, batch).unwrap() {
            wins += 1;
        }
    }
    shared.trained = Some(outcome.params);
    ensure!(ratio <= 0.8, "smoothed loss ratio {ratio:.3} > 0.8");
    ensure!(wins >= 95, "beats initialization on {wins}/100 held-out episodes");
    Ok(format!("loss {first:.4} -> {last:.4} (ratio {ratio:.3} <= 0.8); {wins}/100 held-out wins"))
}

fn slearner_recovery(_: &mut Shared) -> Outcome {
    let mut errors = Vec::new();
    for seed in 0..5u64 {
        let config = SemiSynthConfig {
            source: CovariateSource::Generated(CovariateGenerator {
                rows: 2000,
                ..CovariateGenerator::default()
            }),
            response: ResponseKind::Linear,
            effect_shape: EffectShape::Constant,
            effect_strength: 2.0,
            outcome_noise: 0.1,
            overlap: 0.4,
            seed,
            ..SemiSynthConfig::default()
        };
        let dataset = BenchmarkDataset::from_config(&config).unwrap();
        let model = SLearnerModel::fit(&dataset.table, SLearnerConfig::default()).unwrap();
        let estimates = model.estimate_cate(&dataset.covariates()).unwrap();
        let error = estimates.iter().map(|e| (e.estimate - 2.0).abs()).sum::<f64>() / estimates.len() as f64;
        errors.push(error);
    }
    let worst = errors.iter().copied().fold(0.0, f64::max);
    ensure!(worst < 0.1, "mean |tau - 2| per dataset {errors:.4?}");
    Ok(format!("mean |tau - 2| <= {worst:.4} < 0.1 on 5 datasets"))
}

fn benchmark_protocol(shared: &mut Shared) -> Outcome {
    let params = shared
        .trained
        .clone()
        .ok_or("needs the model from the training criterion")?;
    let datasets = build_suite(&benchmark_suite(0, 1000)).unwrap();
    let icl = IclEstimator {
        params,
        max_context: 512,
        seed: 0,
    };
    let slearner = SLearnerEstimator {
        config: SLearnerConfig::default(),
    };
    let estimators: [&dyn CateEstimator; 2] = [&icl, &slearner];
    let report = run_benchmark(&datasets, &estimators, &BenchmarkProtocol::default()).unwrap();
    ensure!(report.failures.is_empty(), "estimator failures: {:?}", report.failures);
    ensure!(report.datasets.len() == 10, "{} datasets", report.datasets.len());
    ensure!(report.estimators == ["icl-model", "s-learner"], "estimators {:?}", report.estimators);

    let csv = report.to_csv();
    let mut cells: Vec<Vec<f64>> = vec![Vec::new(); 2];
    let mut stated: Vec<(String, String, f64)> = Vec::new();
    for line in csv.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        let value: f64 = fields[2].parse().map_err(|_| format!("unparsable cell in '{line}'"))?;
        let e = report.estimators.iter().position(|n| n == fields[1]).unwrap();
        match fields[0] {
            "mean" | "std" => stated.push((fields[0].into(), fields[1].into(), value)),
            _ => cells[e].push(value),
        }
    }
    ensure!(cells.iter().all(|c| c.len() == 10), "expected 10 cells per estimator");
    ensure!(stated.len() == 4, "expected mean and std rows for both estimators");
    for (label, name, value) in &stated {
        let column = &cells[report.estimators.iter().position(|n| n == name).unwrap()];
        let n = column.len() as f64;
        let mean = column.iter().sum::<f64>() / n;
        let recomputed = match label.as_str() {
            "mean" => mean,
            _ => (column.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt(),
        };
        ensure!(
            recomputed.to_bits() == value.to_bits(),
            "{label} for {name}: report {value} vs recomputed {recomputed}"
        );
    }
    let text = report.to_text();
    ensure!(text.lines().filter(|l| l.starts_with("Mean ± Std")).count() == 1, "text report lacks its summary row");
    let means: Vec<String> = stated
        .iter()
        .filter(|s| s.0 == "mean")
        .map(|s| format!("{} {:.3}", s.1, s.2))
        .collect();
    Ok(format!("10 datasets x 2 estimators, summary exact; mean PEHE {}", means.join(", ")))
}

fn files_equal(a: &Path, b: &Path, name: &str) -> std::result::Result<(), String> {
    let left = std::fs::read(a.join(name)).map_err(|e| format!("{name}: {e}"))?;
    let right = std::fs::read(b.join(name)).map_err(|e| format!("{name}: {e}"))?;
    ensure!(left == right, "{name} differs between runs");
    Ok(())
}

fn reproduce(spec: &RunSpec, root: &Path, label: &str) -> std::result::Result<usize, String> {
    let first = root.join(format!("{label}-1"));
    let second = root.join(format!("{label}-2"));
    let replayed = root.join(format!("{label}-replay"));
    let manifest = execute(spec, &first).map_err(|e| e.to_string())?;
    execute(spec, &second).map_err(|e| e.to_string())?;
    for name in manifest.outputs.keys().map(String::as_str).chain(["manifest.json"]) {
        files_equal(&first, &second, name)?;
    }
    replay(&first.join("manifest.json"), &replayed).map_err(|e| e.to_string())?;
    files_equal(&first, &replayed, "manifest.json")?;
    Ok(manifest.outputs.len())
}

fn reproducibility(_: &mut Shared) -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let prior = PriorConfig::narrow_linear();
    let train = RunSpec::Train(TrainRun {
        model: ModelConfig {
            d_max: prior.d_max,
            ..ModelConfig::default()
        },
        prior,
        train: TrainConfig {
            steps: 60,
            checkpoint_every: 20,
            seed: 3,
            ..TrainConfig::default()
        },
    });
    let train_files = reproduce(&train, dir.path(), "train")?;
    let checkpoint = dir.path().join("train-1").join("checkpoint.ckpt");
    let bytes = std::fs::read(&checkpoint).map_err(|e| e.to_string())?;
    let evaluate = RunSpec::Evaluate(EvaluateRun {
        suite_seed: 4,
        rows: 500,
        protocol: BenchmarkProtocol::default(),
        estimators: vec![EstimatorName::IclModel, EstimatorName::SLearner],
        slearner: SLearnerConfig::default(),
        max_context: 256,
        checkpoint: Some(CheckpointRef {
            sha256: sha256_hex(&bytes),
            path: checkpoint,
        }),
    });
    let report_files = reproduce(&evaluate, dir.path(), "evaluate")?;
    Ok(format!(
        "train ({train_files} files) and evaluate ({report_files} files) manifests reproduced byte for byte twice"
    ))
}
