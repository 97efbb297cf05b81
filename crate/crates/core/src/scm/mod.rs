//! Structural causal models over causal process graphs.
//!
//! Continuous nodes follow an additive noise model `X := f(PA) + N`;
//! categorical nodes take the argmax over `K` noisy class scores
//! `f_k(PA) + N_k`. Categorical parents enter mechanisms one-hot encoded.
//!
//! Exogenous noise is drawn per row as one flat vector (one slot per
//! continuous node, `K` slots per categorical node) before the
//! deterministic forward pass, which is what lets paired potential outcomes
//! share noise between two interventions.

mod effects;
mod graph;
mod mechanism;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

pub use effects::{
    ground_truth_cate, paired_potential_outcomes, CateTruth, PotentialOutcomes,
};
pub use graph::{sample_cpg, sample_forward_edges, CausalProcessGraph, GraphConfig};
pub use mechanism::{Interaction, Mechanism, NoiseFamily, NoiseSpec};

use crate::error::{Error, Result};
use crate::seed::rng_from_seed;
use crate::table::{Column, ColumnKind, ColumnRole, SampleTable};

/// Node kinds share the table's column kinds.
pub type NodeKind = ColumnKind;

pub const SCM_FORMAT: &str = "whatif-scm";
pub const SCM_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub kind: NodeKind,
    pub parents: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EquationFunction {
    Additive(Mechanism),
    Argmax(Vec<Mechanism>),
    /// Installed by the do-operator.
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuralEquation {
    pub function: EquationFunction,
    /// One spec for continuous nodes, `K` for categorical ones. Kept after
    /// an intervention so noise streams stay aligned with the original SCM.
    pub noise: Vec<NoiseSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScmNode {
    pub spec: NodeSpec,
    pub equation: StructuralEquation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MechanismPrior {
    /// Probability that a node is categorical.
    pub categorical_prob: f64,
    pub min_classes: usize,
    pub max_classes: usize,
    /// Probability that a node's mechanisms are tanh networks.
    pub nonlinear_prob: f64,
    pub coef_range: f64,
    pub hidden_units: usize,
    pub noise_scale_min: f64,
    pub noise_scale_max: f64,
    pub categorical_noise: NoiseFamily,
}

impl Default for MechanismPrior {
    fn default() -> Self {
        MechanismPrior {
            categorical_prob: 0.3,
            min_classes: 2,
            max_classes: 5,
            nonlinear_prob: 0.5,
            coef_range: 2.0,
            hidden_units: 8,
            noise_scale_min: 0.1,
            noise_scale_max: 1.0,
            categorical_noise: NoiseFamily::Gaussian,
        }
    }
}

impl MechanismPrior {
    pub fn validate(&self) -> Result<()> {
        let prob_ok = |p: f64| (0.0..=1.0).contains(&p);
        if !prob_ok(self.categorical_prob) || !prob_ok(self.nonlinear_prob) {
            return Err(Error::config("mechanism probabilities must lie in [0, 1]"));
        }
        if self.min_classes < 2 || self.max_classes < self.min_classes {
            return Err(Error::config("class range must satisfy 2 <= min <= max"));
        }
        if !(self.noise_scale_min > 0.0 && self.noise_scale_max >= self.noise_scale_min) {
            return Err(Error::config("noise scales must satisfy 0 < min <= max"));
        }
        if !(self.coef_range >= 0.0) || self.hidden_units == 0 {
            return Err(Error::config("coef_range must be >= 0 and hidden_units >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterventionSpec {
    pub node: usize,
    /// Real value for continuous nodes, class index for categorical ones.
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scm {
    pub graph: CausalProcessGraph,
    pub nodes: Vec<ScmNode>,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct ScmDocument {
    format: String,
    version: u32,
    #[serde(flatten)]
    scm: Scm,
}

/// Draws kinds and equations for every node of `graph`.
pub fn instantiate_scm<R: RngCore + ?Sized>(
    graph: CausalProcessGraph,
    prior: &MechanismPrior,
    rng: &mut R,
) -> Result<Scm> {
    prior.validate()?;
    let seed = rng.next_u64();
    let mut rng = rng_from_seed(seed);
    let n = graph.node_count();
    let mut kinds = Vec::with_capacity(n);
    let mut nodes = Vec::with_capacity(n);
    for j in 0..n {
        let kind = if rng.random::<f64>() < prior.categorical_prob {
            ColumnKind::Categorical {
                classes: rng.random_range(prior.min_classes..=prior.max_classes),
            }
        } else {
            ColumnKind::Continuous
        };
        kinds.push(kind);
        let parents = graph.parents(j);
        let input_dim: usize = parents.iter().map(|&p| kinds[p].encoded_width()).sum();
        let nonlinear = rng.random::<f64>() < prior.nonlinear_prob;
        let draw_mechanism = |rng: &mut crate::seed::WorkRng| {
            if parents.is_empty() {
                Mechanism::Zero
            } else if nonlinear {
                Mechanism::random_tanh(input_dim, prior.hidden_units, rng)
            } else {
                Mechanism::random_linear(input_dim, prior.coef_range, rng)
            }
        };
        let draw_scale =
            |rng: &mut crate::seed::WorkRng| rng.random_range(prior.noise_scale_min..=prior.noise_scale_max);
        let equation = match kind {
            ColumnKind::Continuous => StructuralEquation {
                function: EquationFunction::Additive(draw_mechanism(&mut rng)),
                noise: vec![NoiseSpec::gaussian(draw_scale(&mut rng))],
            },
            ColumnKind::Categorical { classes } => {
                let scores = (0..classes).map(|_| draw_mechanism(&mut rng)).collect();
                let noise = (0..classes)
                    .map(|_| NoiseSpec {
                        family: prior.categorical_noise,
                        scale: draw_scale(&mut rng),
                    })
                    .collect();
                StructuralEquation {
                    function: EquationFunction::Argmax(scores),
                    noise,
                }
            }
        };
        nodes.push(ScmNode {
            spec: NodeSpec { kind, parents },
            equation,
        });
    }
    let scm = Scm { graph, nodes, seed };
    scm.check()?;
    Ok(scm)
}

impl Scm {
    /// Assembles an SCM from hand-written nodes; parents must match the
    /// graph's edges.
    pub fn from_parts(graph: CausalProcessGraph, nodes: Vec<ScmNode>, seed: u64) -> Result<Scm> {
        let scm = Scm { graph, nodes, seed };
        scm.check()?;
        Ok(scm)
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn sink(&self) -> usize {
        self.graph.sink_index()
    }

    pub fn kind(&self, node: usize) -> NodeKind {
        self.nodes[node].spec.kind
    }

    pub fn column_name(node: usize) -> String {
        format!("X{node}")
    }

    /// Nodes whose equation was replaced by an intervention.
    pub fn intervened_nodes(&self) -> Vec<usize> {
        (0..self.node_count())
            .filter(|&j| matches!(self.nodes[j].equation.function, EquationFunction::Constant(_)))
            .collect()
    }

    /// Validates per-node consistency and graph invariants. Single-sink is
    /// only required when no node has been intervened on.
    pub fn check(&self) -> Result<()> {
        let n = self.graph.node_count();
        if self.nodes.len() != n {
            return Err(Error::Contract(format!(
                "{} equations for {n} nodes",
                self.nodes.len()
            )));
        }
        let mutilated = !self.intervened_nodes().is_empty();
        self.graph.check(None, !mutilated)?;
        for (j, node) in self.nodes.iter().enumerate() {
            if node.spec.parents != self.graph.parents(j) {
                return Err(Error::Contract(format!("node {j} parents disagree with graph")));
            }
            let input_dim: usize = node
                .spec
                .parents
                .iter()
                .map(|&p| self.nodes[p].spec.kind.encoded_width())
                .sum();
            let check_mech = |m: &Mechanism| match m.input_dim() {
                None if input_dim == 0 => Ok(()),
                Some(d) if d == input_dim && m.slots_in_range() => Ok(()),
                _ => Err(Error::Contract(format!(
                    "node {j} mechanism input dimension does not match {input_dim} encoded parent slots"
                ))),
            };
            let eq = &node.equation;
            if eq.noise.len() != node.spec.kind.encoded_width() {
                return Err(Error::Contract(format!("node {j} has wrong noise spec count")));
            }
            if eq.noise.iter().any(|s| !(s.scale > 0.0)) {
                return Err(Error::Contract(format!("node {j} noise scale must be > 0")));
            }
            match (&eq.function, node.spec.kind) {
                (EquationFunction::Additive(m), ColumnKind::Continuous) => check_mech(m)?,
                (EquationFunction::Argmax(ms), ColumnKind::Categorical { classes }) => {
                    if ms.len() != classes {
                        return Err(Error::Contract(format!("node {j} needs {classes} score mechanisms")));
                    }
                    ms.iter().try_for_each(check_mech)?;
                }
                (EquationFunction::Constant(v), kind) => {
                    check_value(kind, *v).map_err(|e| Error::Contract(format!("node {j}: {e}")))?
                }
                _ => return Err(Error::Contract(format!("node {j} equation does not match its kind"))),
            }
        }
        Ok(())
    }

    /// Total number of exogenous noise slots per row.
    pub fn noise_width(&self) -> usize {
        self.nodes.iter().map(|n| n.equation.noise.len()).sum()
    }

    /// Draws one row of exogenous noise in node order.
    pub fn draw_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut noise = Vec::with_capacity(self.noise_width());
        for node in &self.nodes {
            for spec in &node.equation.noise {
                noise.push(spec.draw(rng));
            }
        }
        noise
    }

    /// Deterministic forward pass from a noise row. `overrides[j] = Some(v)`
    /// pins node `j` to `v` exactly like a do-intervention.
    pub fn forward(&self, noise: &[f64], overrides: &[Option<f64>], out: &mut [f64]) {
        let mut input = Vec::new();
        let mut offset = 0;
        for (j, node) in self.nodes.iter().enumerate() {
            let width = node.equation.noise.len();
            let eps = &noise[offset..offset + width];
            offset += width;
            if let Some(Some(v)) = overrides.get(j) {
                out[j] = *v;
                continue;
            }
            input.clear();
            for &p in &node.spec.parents {
                match self.nodes[p].spec.kind {
                    ColumnKind::Continuous => input.push(out[p]),
                    ColumnKind::Categorical { classes } => {
                        let k = out[p] as usize;
                        input.extend((0..classes).map(|c| if c == k { 1.0 } else { 0.0 }));
                    }
                }
            }
            out[j] = match &node.equation.function {
                EquationFunction::Constant(v) => *v,
                EquationFunction::Additive(m) => m.eval(&input) + eps[0],
                EquationFunction::Argmax(scores) => {
                    let mut best = 0;
                    let mut best_score = f64::NEG_INFINITY;
                    for (k, m) in scores.iter().enumerate() {
                        let s = m.eval(&input) + eps[k];
                        if s > best_score {
                            best_score = s;
                            best = k;
                        }
                    }
                    best as f64
                }
            };
        }
    }

    fn table_columns(&self) -> Vec<Column> {
        (0..self.node_count())
            .map(|j| {
                let role = if j == self.sink() {
                    ColumnRole::Outcome
                } else {
                    ColumnRole::Covariate
                };
                Column::new(Self::column_name(j), self.kind(j), role)
            })
            .collect()
    }

    /// Ancestral sampling of `n` rows; one column per node, the sink marked
    /// as outcome.
    pub fn sample_observational<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<SampleTable> {
        if n == 0 {
            return Err(Error::config("sample size must be at least 1"));
        }
        let width = self.node_count();
        let overrides = vec![None; width];
        let mut data = vec![0.0; n * width];
        for row in data.chunks_exact_mut(width) {
            let noise = self.draw_noise(rng);
            self.forward(&noise, &overrides, row);
        }
        SampleTable::from_rows(self.table_columns(), data)
    }

    /// The do-operator: a mutilated copy in which `intervention.node` loses
    /// its parents and takes the constant value.
    pub fn apply_do(&self, intervention: &InterventionSpec) -> Result<Scm> {
        let node = intervention.node;
        if node >= self.node_count() {
            return Err(Error::InvalidIntervention(format!("node {node} does not exist")));
        }
        if node == self.sink() {
            return Err(Error::InvalidIntervention(
                "the sink is the outcome and cannot be intervened on".into(),
            ));
        }
        check_value(self.kind(node), intervention.value).map_err(Error::InvalidIntervention)?;
        let mut out = self.clone();
        out.graph.remove_incoming(node);
        let target = &mut out.nodes[node];
        target.spec.parents.clear();
        target.equation.function = EquationFunction::Constant(intervention.value);
        out.check()?;
        Ok(out)
    }

    pub fn sample_interventional<R: Rng + ?Sized>(
        &self,
        intervention: &InterventionSpec,
        n: usize,
        rng: &mut R,
    ) -> Result<SampleTable> {
        self.apply_do(intervention)?.sample_observational(n, rng)
    }

    /// Input-slot range that `parent` occupies in `child`'s encoded input.
    fn input_range(&self, child: usize, parent: usize) -> Option<std::ops::Range<usize>> {
        let mut start = 0;
        for &p in &self.nodes[child].spec.parents {
            let w = self.nodes[p].spec.kind.encoded_width();
            if p == parent {
                return Some(start..start + w);
            }
            start += w;
        }
        None
    }

    /// Zeroes all coefficients through which `node` acts on its children.
    /// The graph keeps its edges; the node simply has no causal effect.
    pub fn sever_effects_of(&mut self, node: usize) {
        for child in self.graph.children(node) {
            let Some(range) = self.input_range(child, node) else {
                continue;
            };
            match &mut self.nodes[child].equation.function {
                EquationFunction::Additive(m) => m.sever_inputs(range),
                EquationFunction::Argmax(ms) => {
                    for m in ms {
                        m.sever_inputs(range.clone());
                    }
                }
                EquationFunction::Constant(_) => {}
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = ScmDocument {
            format: SCM_FORMAT.into(),
            version: SCM_VERSION,
            scm: self.clone(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Scm> {
        let doc: ScmDocument = serde_json::from_str(text)?;
        if doc.format != SCM_FORMAT || doc.version != SCM_VERSION {
            return Err(Error::Format(format!(
                "expected {SCM_FORMAT} v{SCM_VERSION}, found {} v{}",
                doc.format, doc.version
            )));
        }
        doc.scm.check()?;
        Ok(doc.scm)
    }
}

pub(crate) fn check_value(kind: NodeKind, value: f64) -> std::result::Result<(), String> {
    if !value.is_finite() {
        return Err(format!("value {value} is not finite"));
    }
    if let ColumnKind::Categorical { classes } = kind {
        if value < 0.0 || value.fract() != 0.0 || value as usize >= classes {
            return Err(format!("value {value} is not a class index below {classes}"));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from_seed;

    fn random_scm(seed: u64, prior: &MechanismPrior) -> Scm {
        let mut rng = rng_from_seed(seed);
        let cfg = GraphConfig {
            min_nodes: 6,
            max_nodes: 6,
            ..GraphConfig::default()
        };
        let g = sample_cpg(&cfg, &mut rng).unwrap();
        instantiate_scm(g, prior, &mut rng).unwrap()
    }

    #[test]
    fn all_continuous_prior() {
        let prior = MechanismPrior {
            categorical_prob: 0.0,
            ..Default::default()
        };
        let scm = random_scm(3, &prior);
        assert!((0..scm.node_count()).all(|j| scm.kind(j) == ColumnKind::Continuous));
    }

    #[test]
    fn all_categorical_prior_with_three_classes() {
        let prior = MechanismPrior {
            categorical_prob: 1.0,
            min_classes: 3,
            max_classes: 3,
            ..Default::default()
        };
        let scm = random_scm(5, &prior);
        for node in &scm.nodes {
            assert_eq!(node.spec.kind, ColumnKind::Categorical { classes: 3 });
            match &node.equation.function {
                EquationFunction::Argmax(ms) => assert_eq!(ms.len(), 3),
                other => panic!("unexpected {other:?}"),
            }
        }
    }

    #[test]
    fn instantiation_is_seed_deterministic() {
        let prior = MechanismPrior::default();
        assert_eq!(random_scm(11, &prior), random_scm(11, &prior));
        assert_ne!(random_scm(11, &prior), random_scm(12, &prior));
    }

    #[test]
    fn do_on_root_only_swaps_its_equation() {
        let scm = random_scm(2, &MechanismPrior {
            categorical_prob: 0.0,
            ..Default::default()
        });
        let cut = scm.apply_do(&InterventionSpec { node: 0, value: 3.0 }).unwrap();
        assert_eq!(cut.graph, scm.graph);
        assert_eq!(cut.nodes[0].equation.function, EquationFunction::Constant(3.0));
        assert_eq!(cut.nodes[1..], scm.nodes[1..]);
    }

    #[test]
    fn do_on_sink_rejected() {
        let scm = random_scm(2, &MechanismPrior::default());
        let err = scm
            .apply_do(&InterventionSpec {
                node: scm.sink(),
                value: 0.0,
            })
            .unwrap_err();
        assert!(matches!(err, Error::InvalidIntervention(_)));
    }

    #[test]
    fn categorical_intervention_value_checked() {
        let prior = MechanismPrior {
            categorical_prob: 1.0,
            min_classes: 3,
            max_classes: 3,
            ..Default::default()
        };
        let scm = random_scm(8, &prior);
        assert!(scm.apply_do(&InterventionSpec { node: 0, value: 3.0 }).is_err());
        assert!(scm.apply_do(&InterventionSpec { node: 0, value: 1.5 }).is_err());
        assert!(scm.apply_do(&InterventionSpec { node: 0, value: 2.0 }).is_ok());
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let scm = random_scm(9, &MechanismPrior::default());
        let a = scm.sample_observational(50, &mut rng_from_seed(1)).unwrap();
        let b = scm.sample_observational(50, &mut rng_from_seed(1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.width(), scm.node_count());
    }

    #[test]
    fn json_round_trip() {
        let scm = random_scm(21, &MechanismPrior::default());
        let back = Scm::from_json(&scm.to_json().unwrap()).unwrap();
        assert_eq!(back, scm);
    }

    #[test]
    fn json_version_checked() {
        let scm = random_scm(21, &MechanismPrior::default());
        let text = scm.to_json().unwrap().replace("\"version\": 1", "\"version\": 99");
        assert!(matches!(Scm::from_json(&text), Err(Error::Format(_))));
    }
}
