use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Edge, GraphBuilder, HeteroGraph, NodeRef, Split};
use crate::error::{Error, Result};

/// Planted-cluster query/product graph with cluster-correlated text.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub clusters: usize,
    pub queries: usize,
    pub products: usize,
    /// Edge probability between nodes of the same cluster.
    pub p_intra: f64,
    /// Edge probability between nodes of different clusters.
    pub p_inter: f64,
    pub vocab_size: usize,
    pub tokens_per_node: usize,
    /// Probability that a token is drawn from the node's cluster vocabulary
    /// rather than the whole vocabulary.
    pub text_signal: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            clusters: 4,
            queries: 500,
            products: 500,
            p_intra: 0.04,
            p_inter: 0.004,
            vocab_size: 200,
            tokens_per_node: 8,
            text_signal: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !prob(self.p_intra) || !prob(self.p_inter) || !prob(self.text_signal) {
            return Err(Error::contract("probabilities must lie in [0, 1]"));
        }
        if self.clusters < 2 {
            return Err(Error::contract(
                "need at least two clusters for intra > inter to mean anything",
            ));
        }
        if self.p_intra <= self.p_inter {
            return Err(Error::contract(format!(
                "intra-cluster probability {} must exceed inter-cluster probability {}",
                self.p_intra, self.p_inter
            )));
        }
        if self.queries < self.clusters || self.products < self.clusters {
            return Err(Error::contract(
                "each type needs at least one node per cluster",
            ));
        }
        if self.vocab_size < self.clusters || self.tokens_per_node == 0 {
            return Err(Error::contract(
                "vocabulary must cover every cluster and texts must be non-empty",
            ));
        }
        Ok(())
    }

    pub fn cluster_of(&self, node: NodeRef) -> usize {
        node.id % self.clusters
    }
}

pub const QUERY_TYPE: &str = "query";
pub const PRODUCT_TYPE: &str = "product";
pub const CLICK_RELATION: &str = "clicks";
pub const COPURCHASE_RELATION: &str = "co_purchased";

/// Builds the graph. Node `i` of either type belongs to cluster
/// `i % clusters`; node labels are cluster ids; `clicks` edges are labelled
/// 0 when both endpoints share a cluster and 1 otherwise. Labelled nodes
/// and labelled edges are split 60/10/30.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<HeteroGraph> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let c = spec.clusters;
    let block = spec.vocab_size / c;

    let text_for = |cluster: usize, rng: &mut ChaCha8Rng| -> String {
        (0..spec.tokens_per_node)
            .map(|_| {
                let w = if rng.gen_bool(spec.text_signal) {
                    cluster * block + rng.gen_range(0..block)
                } else {
                    rng.gen_range(0..spec.vocab_size)
                };
                format!("w{w}")
            })
            .collect::<Vec<_>>()
            .join(" ")
    };
    let qtext: Vec<String> = (0..spec.queries)
        .map(|i| text_for(i % c, &mut rng))
        .collect();
    let ptext: Vec<String> = (0..spec.products)
        .map(|i| text_for(i % c, &mut rng))
        .collect();

    let mut b = GraphBuilder::new();
    let q = b.node_type(QUERY_TYPE, qtext);
    let p = b.node_type(PRODUCT_TYPE, ptext);
    let clicks = b.relation(q, CLICK_RELATION, p);
    let copurchase = b.relation(p, COPURCHASE_RELATION, p);

    let prob = |u: usize, v: usize| {
        if u % c == v % c {
            spec.p_intra
        } else {
            spec.p_inter
        }
    };
    let mut click_edges = Vec::new();
    for u in 0..spec.queries {
        for v in 0..spec.products {
            if rng.gen_bool(prob(u, v)) {
                b.edge(clicks, u, v);
                click_edges.push((u, v));
            }
        }
    }
    for u in 0..spec.products {
        for v in u + 1..spec.products {
            if rng.gen_bool(prob(u, v)) {
                b.edge(copurchase, u, v);
            }
        }
    }

    let splits = |n: usize, rng: &mut ChaCha8Rng| -> Vec<Split> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let train = n * 6 / 10;
        let valid = n / 10;
        let mut out = vec![Split::Test; n];
        for (rank, &i) in order.iter().enumerate() {
            out[i] = if rank < train {
                Split::Train
            } else if rank < train + valid {
                Split::Valid
            } else {
                Split::Test
            };
        }
        out
    };

    let nodes: Vec<NodeRef> = (0..spec.queries)
        .map(|i| NodeRef::new(q, i))
        .chain((0..spec.products).map(|i| NodeRef::new(p, i)))
        .collect();
    let node_splits = splits(nodes.len(), &mut rng);
    for (n, s) in nodes.iter().zip(node_splits) {
        b.node_label(*n, spec.cluster_of(*n), s);
    }
    let edge_splits = splits(click_edges.len(), &mut rng);
    for (&(u, v), s) in click_edges.iter().zip(edge_splits) {
        let class = usize::from(u % c != v % c);
        b.edge_label(
            Edge {
                rel: clicks,
                src: u,
                dst: v,
            },
            class,
            s,
        );
    }
    b.build()
}

/// Newman modularity of a node partition, treating every stored edge as an
/// undirected edge.
pub fn modularity(graph: &HeteroGraph, community: impl Fn(NodeRef) -> usize) -> f64 {
    let m = graph.num_edges() as f64;
    if m == 0.0 {
        return 0.0;
    }
    let k = graph
        .all_nodes()
        .iter()
        .map(|&n| community(n))
        .max()
        .unwrap_or(0)
        + 1;
    let mut inside = vec![0.0; k];
    let mut degree = vec![0.0; k];
    for (r, rel) in graph.relations().iter().enumerate() {
        for &(s, d) in graph.edges(r) {
            let a = community(NodeRef::new(rel.src_type, s));
            let b = community(NodeRef::new(rel.dst_type, d));
            if a == b {
                inside[a] += 1.0;
            }
            degree[a] += 1.0;
            degree[b] += 1.0;
        }
    }
    (0..k)
        .map(|c| inside[c] / m - (degree[c] / (2.0 * m)).powi(2))
        .sum()
}
