#![allow(dead_code)]

use rand::Rng;
use rand_distr::StandardNormal;
use whatif_core::episode::{Episode, EpisodeMeta, Normalization};
use whatif_core::model::ModelConfig;
use whatif_core::seed::rng_from_seed;

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        ffn_dim: 16,
        d_max: 4,
        dropout: 0.0,
    }
}

/// Episode with Gaussian covariates, random arms and outcomes.
pub fn random_episode(seed: u64, d_max: usize, context: usize, queries: usize) -> Episode {
    let mut rng = rng_from_seed(seed);
    let mut normal = |n: usize| -> Vec<f32> { (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect() };
    let context_x = normal(context * d_max);
    let context_y = normal(context);
    let query_x = normal(queries * d_max);
    let targets = normal(queries);
    let mut rng = rng_from_seed(seed ^ 0xABCD);
    let context_t = (0..context).map(|i| if i % 2 == 0 || rng.random::<bool>() { 1.0 } else { 0.0 }).collect();
    Episode {
        d_max,
        covariate_dim: d_max,
        context_x,
        context_t,
        context_y,
        query_x,
        targets,
        norm: Normalization {
            columns: (0..d_max).map(|i| format!("X{i}")).collect(),
            slot_mean: vec![0.0; d_max],
            slot_std: vec![1.0; d_max],
            outcome_mean: 0.0,
            outcome_std: 1.0,
        },
        meta: EpisodeMeta {
            scm_seed: seed,
            treatment: 0,
            t1: 1.0,
            t0: 0.0,
            null_effect: false,
        },
    }
}

/// Reorders context rows of an episode.
pub fn permute_context(ep: &Episode, order: &[usize]) -> Episode {
    let d = ep.d_max;
    let mut out = ep.clone();
    out.context_x = order.iter().flat_map(|&r| ep.context_x[r * d..(r + 1) * d].to_vec()).collect();
    out.context_t = order.iter().map(|&r| ep.context_t[r]).collect();
    out.context_y = order.iter().map(|&r| ep.context_y[r]).collect();
    out
}

pub fn permute_queries(ep: &Episode, order: &[usize]) -> Episode {
    let d = ep.d_max;
    let mut out = ep.clone();
    out.query_x = order.iter().flat_map(|&r| ep.query_x[r * d..(r + 1) * d].to_vec()).collect();
    out.targets = order.iter().map(|&r| ep.targets[r]).collect();
    out
}

pub fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(&mut rng_from_seed(seed));
    v
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

/// Largest relative discrepancy between analytic and central-difference
/// gradients over every parameter, computed in f64.
pub fn gradient_check_error(config: &ModelConfig, param_seed: u64, episode: &Episode) -> f64 {
    use whatif_core::model::{loss_and_grad, ModelParameters};
    const STEP: f64 = 1e-5;
    // Central-difference roundoff is about 1e-11 here; gradients that are
    // exactly zero (key biases) would otherwise divide noise by noise.
    const FLOOR: f64 = 1e-6;
    let mut params = ModelParameters::<f64>::init(config, param_seed).unwrap();
    // Non-trivial layer-norm affine parameters exercise their gradients.
    let mut rng = rng_from_seed(param_seed.wrapping_add(1));
    for l in &mut params.layers {
        l.ln1_gain.mapv_inplace(|_| 1.0 + 0.3 * rng.sample::<f64, _>(StandardNormal));
        l.ln2_bias.mapv_inplace(|_| 0.2 * rng.sample::<f64, _>(StandardNormal));
        l.bq.mapv_inplace(|_| 0.2 * rng.sample::<f64, _>(StandardNormal));
    }
    let batch = std::slice::from_ref(episode);
    let (_, grad) = loss_and_grad(&params, batch).unwrap();
    let analytic: Vec<f64> = grad.tensors().iter().flat_map(|t| t.to_vec()).collect();
    let sizes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    let mut worst: f64 = 0.0;
    let mut flat = 0;
    for (ti, &size) in sizes.iter().enumerate() {
        for i in 0..size {
            let original = params.tensors()[ti][i];
            params.tensors_mut()[ti][i] = original + STEP;
            let plus = loss_and_grad(&params, batch).unwrap().0;
            params.tensors_mut()[ti][i] = original - STEP;
            let minus = loss_and_grad(&params, batch).unwrap().0;
            params.tensors_mut()[ti][i] = original;
            let numeric = (plus - minus) / (2.0 * STEP);
            let a = analytic[flat];
            let rel = (a - numeric).abs() / (a.abs().max(numeric.abs()).max(FLOOR));
            worst = worst.max(rel);
            flat += 1;
        }
    }
    worst
}

pub mod scms {
    use whatif_core::scm::{
        CausalProcessGraph, EquationFunction, Interaction, Mechanism, NodeSpec, NoiseSpec, Scm, ScmNode,
        StructuralEquation,
    };
    use whatif_core::ColumnKind;

    pub fn root(sigma: f64) -> ScmNode {
        linear(vec![], vec![], sigma)
    }

    pub fn linear(parents: Vec<usize>, weights: Vec<f64>, sigma: f64) -> ScmNode {
        let function = if weights.is_empty() {
            Mechanism::Zero
        } else {
            Mechanism::Linear { weights, bias: 0.0 }
        };
        ScmNode {
            spec: NodeSpec {
                kind: ColumnKind::Continuous,
                parents,
            },
            equation: StructuralEquation {
                function: EquationFunction::Additive(function),
                noise: vec![NoiseSpec::gaussian(sigma)],
            },
        }
    }

    pub fn categorical(parents: Vec<usize>, scores: Vec<Mechanism>, sigma: f64) -> ScmNode {
        let classes = scores.len();
        ScmNode {
            spec: NodeSpec {
                kind: ColumnKind::Categorical { classes },
                parents,
            },
            equation: StructuralEquation {
                function: EquationFunction::Argmax(scores),
                noise: vec![NoiseSpec::gaussian(sigma); classes],
            },
        }
    }

    pub fn build(n: usize, edges: &[(usize, usize)], nodes: Vec<ScmNode>) -> Scm {
        let graph = CausalProcessGraph::from_edges(n, edges.iter().copied()).unwrap();
        Scm::from_parts(graph, nodes, 0).unwrap()
    }

    /// X0 ~ N(0,1); T = X1 := 0.5·X0 + N(0,1); Y = X2 := X0 + 2·T + N(0,0.5).
    pub fn constant_effect() -> Scm {
        build(
            3,
            &[(0, 1), (0, 2), (1, 2)],
            vec![root(1.0), linear(vec![0], vec![0.5], 1.0), linear(vec![0, 1], vec![1.0, 2.0], 0.5)],
        )
    }

    /// X0 ~ N(0,1); T = X1 ~ N(0,1); Y = X2 := T·X0 + N(0,0.5).
    pub fn interaction() -> Scm {
        let y = ScmNode {
            spec: NodeSpec {
                kind: ColumnKind::Continuous,
                parents: vec![0, 1],
            },
            equation: StructuralEquation {
                function: EquationFunction::Additive(Mechanism::Quadratic {
                    weights: vec![0.0, 0.0],
                    interactions: vec![Interaction {
                        left: 0,
                        right: 1,
                        coef: 1.0,
                    }],
                    bias: 0.0,
                }),
                noise: vec![NoiseSpec::gaussian(0.5)],
            },
        };
        build(3, &[(0, 2), (1, 2)], vec![root(1.0), root(1.0), y])
    }
}

/// Standard normal CDF via the complementary error function (fractional
/// error below 1.2e-7).
pub fn normal_cdf(x: f64) -> f64 {
    let z = -x / std::f64::consts::SQRT_2;
    let t = 1.0 / (1.0 + 0.5 * z.abs());
    let poly = -z * z - 1.265_512_23
        + t * (1.000_023_68
            + t * (0.374_091_96
                + t * (0.096_784_18
                    + t * (-0.186_288_06
                        + t * (0.278_868_07
                            + t * (-1.135_203_98 + t * (1.488_515_87 + t * (-0.822_152_23 + t * 0.170_872_77))))))));
    let erfc = t * poly.exp();
    let erfc = if z >= 0.0 { erfc } else { 2.0 - erfc };
    0.5 * erfc
}

/// Exact distribution of every binary node of a fully binary SCM with
/// Gaussian class noise, by enumerating all 2^n assignments. Returns the
/// sink's probability of class 1.
pub fn enumerate_binary_sink(scm: &whatif_core::scm::Scm) -> f64 {
    use whatif_core::scm::EquationFunction;
    let n = scm.node_count();
    let mut p_sink = 0.0;
    for assignment in 0..(1usize << n) {
        let value = |j: usize| ((assignment >> j) & 1) as f64;
        let mut p = 1.0;
        for j in 0..n {
            let node = &scm.nodes[j];
            let p1 = match &node.equation.function {
                EquationFunction::Constant(c) => *c,
                EquationFunction::Argmax(scores) => {
                    let input: Vec<f64> = node
                        .spec
                        .parents
                        .iter()
                        .flat_map(|&q| if value(q) == 1.0 { [0.0, 1.0] } else { [1.0, 0.0] })
                        .collect();
                    let gap = scores[1].eval(&input) - scores[0].eval(&input);
                    let s = (node.equation.noise[0].scale.powi(2) + node.equation.noise[1].scale.powi(2)).sqrt();
                    normal_cdf(gap / s)
                }
                EquationFunction::Additive(_) => panic!("binary SCM expected"),
            };
            p *= if value(j) == 1.0 { p1 } else { 1.0 - p1 };
        }
        if value(scm.sink()) == 1.0 {
            p_sink += p;
        }
    }
    p_sink
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Least-squares slope of `y` on `x` with intercept.
pub fn ols_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}
