//! Causal process graphs: topologically ordered DAGs whose edge probability
//! decays with node distance, with a bounded in-degree and a single sink.

use std::collections::{BTreeSet, VecDeque};

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphConfig {
    pub min_nodes: usize,
    pub max_nodes: usize,
    /// Edge probability between adjacent nodes.
    pub p0: f64,
    /// Exponential decay rate per unit of extra distance.
    pub lambda: f64,
    pub max_in_degree: usize,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            min_nodes: 4,
            max_nodes: 10,
            p0: 0.6,
            lambda: 0.5,
            max_in_degree: 3,
        }
    }
}

impl GraphConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_nodes < 2 || self.max_nodes < self.min_nodes {
            return Err(Error::config(format!(
                "node count range [{}, {}] must satisfy 2 <= min <= max",
                self.min_nodes, self.max_nodes
            )));
        }
        if !(self.p0 > 0.0 && self.p0 <= 1.0) {
            return Err(Error::config(format!("p0 = {} outside (0, 1]", self.p0)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!("lambda = {} must be >= 0", self.lambda)));
        }
        if self.max_in_degree == 0 {
            return Err(Error::config("max_in_degree must be at least 1"));
        }
        Ok(())
    }

    /// Inclusion probability for an edge spanning `gap` intermediate nodes.
    pub fn edge_probability(&self, gap: usize) -> f64 {
        self.p0 * (-self.lambda * gap as f64).exp()
    }
}

/// A DAG over nodes `0..node_count` in topological order; every edge points
/// from a lower to a higher index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CausalProcessGraph {
    node_count: usize,
    edges: BTreeSet<(usize, usize)>,
    sink_index: usize,
}

impl CausalProcessGraph {
    /// Builds a graph from explicit edges. The sink is the last node.
    pub fn from_edges(node_count: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        if node_count < 1 {
            return Err(Error::config("graph needs at least one node"));
        }
        let edges: BTreeSet<_> = edges.into_iter().collect();
        for &(i, j) in &edges {
            if i >= j || j >= node_count {
                return Err(Error::Contract(format!(
                    "edge ({i}, {j}) does not point forward within {node_count} nodes"
                )));
            }
        }
        Ok(CausalProcessGraph {
            node_count,
            edges,
            sink_index: node_count - 1,
        })
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn sink_index(&self) -> usize {
        self.sink_index
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn has_edge(&self, parent: usize, child: usize) -> bool {
        self.edges.contains(&(parent, child))
    }

    pub fn parents(&self, node: usize) -> Vec<usize> {
        self.edges
            .iter()
            .filter(|&&(_, j)| j == node)
            .map(|&(i, _)| i)
            .collect()
    }

    pub fn children(&self, node: usize) -> Vec<usize> {
        self.edges
            .range((node, 0)..(node + 1, 0))
            .map(|&(_, j)| j)
            .collect()
    }

    pub fn in_degree(&self, node: usize) -> usize {
        self.edges.iter().filter(|&&(_, j)| j == node).count()
    }

    pub fn out_degree(&self, node: usize) -> usize {
        self.edges.range((node, 0)..(node + 1, 0)).count()
    }

    /// All nodes reachable from `node` (excluding `node` itself), ascending.
    pub fn descendants(&self, node: usize) -> BTreeSet<usize> {
        let mut seen = BTreeSet::new();
        let mut queue = VecDeque::from([node]);
        while let Some(n) = queue.pop_front() {
            for c in self.children(n) {
                if seen.insert(c) {
                    queue.push_back(c);
                }
            }
        }
        seen
    }

    pub fn has_path(&self, from: usize, to: usize) -> bool {
        from == to || self.descendants(from).contains(&to)
    }

    pub(crate) fn remove_incoming(&mut self, node: usize) {
        self.edges.retain(|&(_, j)| j != node);
    }

    /// Checks the structural invariants. `max_in_degree` is skipped when
    /// `None`; single-sink can be relaxed for mutilated graphs.
    pub fn check(&self, max_in_degree: Option<usize>, require_single_sink: bool) -> Result<()> {
        for &(i, j) in &self.edges {
            if i >= j || j >= self.node_count {
                return Err(Error::Contract(format!("edge ({i}, {j}) breaks topological order")));
            }
        }
        if self.sink_index != self.node_count - 1 {
            return Err(Error::Contract("sink must be the last node".into()));
        }
        if require_single_sink {
            if self.out_degree(self.sink_index) != 0 {
                return Err(Error::Contract("sink has outgoing edges".into()));
            }
            if let Some(n) = (0..self.sink_index).find(|&n| self.out_degree(n) == 0) {
                return Err(Error::Contract(format!("node {n} is a second sink")));
            }
        }
        if let Some(cap) = max_in_degree {
            if let Some(n) = (0..self.sink_index).find(|&n| self.in_degree(n) > cap) {
                return Err(Error::Contract(format!(
                    "node {n} has in-degree {} > {cap}",
                    self.in_degree(n)
                )));
            }
        }
        Ok(())
    }
}

/// Independent forward edges with probability `p0·exp(−lambda·(j−i−1))`,
/// before any in-degree capping or sink rewiring. Returned per child as
/// ascending parent lists.
pub fn sample_forward_edges<R: Rng + ?Sized>(
    node_count: usize,
    config: &GraphConfig,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    (0..node_count)
        .map(|j| {
            (0..j)
                .filter(|&i| rng.random::<f64>() < config.edge_probability(j - i - 1))
                .collect()
        })
        .collect()
}

/// Samples a causal process graph.
pub fn sample_cpg<R: Rng + ?Sized>(config: &GraphConfig, rng: &mut R) -> Result<CausalProcessGraph> {
    config.validate()?;
    let node_count = rng.random_range(config.min_nodes..=config.max_nodes);
    let mut parents = sample_forward_edges(node_count, config, rng);
    for list in parents.iter_mut() {
        if list.len() > config.max_in_degree {
            let mut keep: Vec<usize> = index::sample(rng, list.len(), config.max_in_degree)
                .into_iter()
                .map(|k| list[k])
                .collect();
            keep.sort_unstable();
            *list = keep;
        }
    }
    let sink = node_count - 1;
    let mut edges: BTreeSet<(usize, usize)> = parents
        .iter()
        .enumerate()
        .flat_map(|(j, ps)| ps.iter().map(move |&i| (i, j)))
        .collect();
    for i in 0..sink {
        if edges.range((i, 0)..(i + 1, 0)).next().is_none() {
            edges.insert((i, sink));
        }
    }
    let graph = CausalProcessGraph {
        node_count,
        edges,
        sink_index: sink,
    };
    debug_assert!(graph.check(Some(config.max_in_degree), true).is_ok());
    Ok(graph)
}
