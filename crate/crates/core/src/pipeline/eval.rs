use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{encode_nodes_no_grad, LmGnnModel, TextFeatures};
use super::{derive_seed, Task};
use crate::error::{Error, Result};
use crate::gnn::{gnn_forward, NodeFeatures};
use crate::graph::{sample_neighbors, HeteroGraph, NodeRef, SamplerConfig, Split};
use crate::metrics::{accuracy, f1_scores, mrr, EvalReport, RankedQuery};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub sampler: SamplerConfig,
    /// Targets per forward pass when computing embeddings.
    pub batch_size: usize,
    pub seed: u64,
    /// Tail types with at most this many nodes are ranked exhaustively.
    pub full_corruption_limit: usize,
    /// Filtered negatives per query for larger tail types.
    pub sampled_negatives: usize,
    /// Evaluate only the first this-many queries of a split.
    pub max_queries: Option<usize>,
}

impl EvalConfig {
    pub fn new(sampler: SamplerConfig, seed: u64) -> Self {
        EvalConfig {
            sampler,
            batch_size: 256,
            seed,
            full_corruption_limit: 10_000,
            sampled_negatives: 500,
            max_queries: None,
        }
    }
}

/// Precomputed text embeddings, looked up by node.
pub struct FeatureTable {
    index: HashMap<NodeRef, usize>,
    table: Tensor,
}

impl FeatureTable {
    /// Encodes every texted node without gradients.
    pub fn compute(model: &LmGnnModel, text: &TextFeatures, chunk: usize) -> Result<Self> {
        let nodes = text.texted_nodes();
        let table = encode_nodes_no_grad(model, text, &nodes, chunk)?;
        let index = nodes.into_iter().enumerate().map(|(i, n)| (n, i)).collect();
        Ok(FeatureTable { index, table })
    }

    /// Constant feature rows for the texted members of `nodes`.
    pub fn features(&self, tape: &Tape, nodes: &[NodeRef]) -> NodeFeatures {
        let present: Vec<NodeRef> = nodes
            .iter()
            .copied()
            .filter(|n| self.index.contains_key(n))
            .collect();
        let f = self.table.cols();
        let mut data = Vec::with_capacity(present.len() * f);
        for n in &present {
            data.extend_from_slice(self.table.row(self.index[n]));
        }
        let values =
            tape.constant(Tensor::new(vec![present.len(), f], data).expect("rows of width f"));
        NodeFeatures::new(&present, values)
    }
}

/// Final-layer embeddings of `nodes`, one row each, computed in chunks of
/// `config.batch_size` targets with the configured sampler.
pub fn node_embeddings(
    model: &LmGnnModel,
    graph: &HeteroGraph,
    features: &FeatureTable,
    nodes: &[NodeRef],
    config: &EvalConfig,
) -> Result<Tensor> {
    let h = model.gnn.out_dim();
    let mut out = vec![0.0; nodes.len() * h];
    for (c, chunk) in nodes.chunks(config.batch_size.max(1)).enumerate() {
        let ego = sample_neighbors(
            graph,
            chunk,
            &config.sampler,
            derive_seed(config.seed, &[c as u64]),
        )?;
        let tape = Tape::no_grad();
        let feats = features.features(&tape, ego.input_nodes());
        let rows = gnn_forward(&tape, &model.gnn, &ego, Some(&feats))?;
        let value = tape.value(rows);
        let base = c * config.batch_size.max(1);
        for (i, n) in chunk.iter().enumerate() {
            let p = ego
                .target_position(*n)
                .expect("every chunk node is a target");
            out[(base + i) * h..(base + i + 1) * h].copy_from_slice(value.row(p));
        }
    }
    Tensor::new(vec![nodes.len(), h], out)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn truncate<T>(mut v: Vec<T>, max: Option<usize>) -> Vec<T> {
    if let Some(m) = max {
        v.truncate(m);
    }
    v
}

/// Evaluates `task` on `split`. `full` supplies labels and the edges used
/// to filter link candidates; `message` is the graph messages flow over.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &LmGnnModel,
    full: &HeteroGraph,
    message: &HeteroGraph,
    text: &TextFeatures,
    task: Task,
    target_relation: Option<usize>,
    split: Split,
    config: &EvalConfig,
) -> Result<EvalReport> {
    let features = FeatureTable::compute(model, text, config.batch_size)?;
    let all = full.all_nodes();
    let emb = node_embeddings(model, message, &features, &all, config)?;
    let row = |n: NodeRef| emb.row(full.global_index(n));
    let mut metrics = BTreeMap::new();
    let mut negative_mode = None;
    let num_queries;
    match task {
        Task::Link => {
            let rel = target_relation
                .ok_or_else(|| Error::contract("link evaluation needs a target relation"))?;
            let queries = truncate(full.labelled_edges(rel, split), config.max_queries);
            if queries.is_empty() {
                return Err(Error::contract(format!(
                    "relation {rel} has no {} edges to rank",
                    split.as_str()
                )));
            }
            let tail_type = full.relations()[rel].dst_type;
            let tails = full.node_counts()[tail_type];
            let exhaustive = tails <= config.full_corruption_limit;
            negative_mode = Some(if exhaustive {
                "full".to_string()
            } else {
                format!("sampled{}", config.sampled_negatives)
            });
            let mut ranked = Vec::with_capacity(queries.len());
            for (q, l) in queries.iter().enumerate() {
                let (h, t) = (l.edge.head(full), l.edge.tail(full));
                let candidates: Vec<usize> = if exhaustive {
                    (0..tails)
                        .filter(|&c| c != t.id && !full.has_edge(rel, h.id, c))
                        .collect()
                } else {
                    let mut rng =
                        ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[u64::MAX, q as u64]));
                    let mut picked = Vec::with_capacity(config.sampled_negatives);
                    let mut attempts = 0;
                    while picked.len() < config.sampled_negatives
                        && attempts < 20 * config.sampled_negatives
                    {
                        attempts += 1;
                        let c = rng.gen_range(0..tails);
                        if c != t.id && !full.has_edge(rel, h.id, c) {
                            picked.push(c);
                        }
                    }
                    picked
                };
                if candidates.is_empty() {
                    continue;
                }
                let hv = row(h);
                let negatives = candidates
                    .iter()
                    .map(|&c| {
                        model
                            .link_decoder
                            .score(hv, rel, row(NodeRef::new(tail_type, c)))
                    })
                    .collect::<Result<Vec<f64>>>()?;
                ranked.push(RankedQuery {
                    positive: model.link_decoder.score(hv, rel, row(t))?,
                    negatives,
                });
            }
            num_queries = ranked.len();
            metrics.insert("mrr".to_string(), mrr(&ranked)?);
        }
        Task::Node => {
            let labels = truncate(full.labelled_nodes(split), config.max_queries);
            if labels.is_empty() {
                return Err(Error::contract(format!(
                    "no {} node labels",
                    split.as_str()
                )));
            }
            let tape = Tape::no_grad();
            let rows: Vec<Vec<f64>> = labels.iter().map(|l| row(l.node).to_vec()).collect();
            let x = tape.constant(Tensor::from_rows(&rows)?);
            let logits = model.node_head.logits(&tape, x)?;
            let value = tape.value(logits);
            let pred: Vec<usize> = (0..labels.len()).map(|i| argmax(value.row(i))).collect();
            let gold: Vec<usize> = labels.iter().map(|l| l.class).collect();
            let f1 = f1_scores(&pred, &gold, model.node_head.classes())?;
            metrics.insert("accuracy".to_string(), accuracy(&pred, &gold)?);
            metrics.insert("macro_f1".to_string(), f1.macro_f1);
            metrics.insert("micro_f1".to_string(), f1.micro_f1);
            num_queries = labels.len();
        }
        Task::Edge => {
            let labels = truncate(
                full.edge_labels()
                    .iter()
                    .filter(|l| l.split == split)
                    .copied()
                    .collect(),
                config.max_queries,
            );
            if labels.is_empty() {
                return Err(Error::contract(format!(
                    "no {} edge labels",
                    split.as_str()
                )));
            }
            let tape = Tape::no_grad();
            let heads: Vec<Vec<f64>> = labels
                .iter()
                .map(|l| row(l.edge.head(full)).to_vec())
                .collect();
            let tails: Vec<Vec<f64>> = labels
                .iter()
                .map(|l| row(l.edge.tail(full)).to_vec())
                .collect();
            let hv = tape.constant(Tensor::from_rows(&heads)?);
            let tv = tape.constant(Tensor::from_rows(&tails)?);
            let logits = model.edge_head.edge_logits(&tape, hv, tv)?;
            let value = tape.value(logits);
            let pred: Vec<usize> = (0..labels.len()).map(|i| argmax(value.row(i))).collect();
            let gold: Vec<usize> = labels.iter().map(|l| l.class).collect();
            let f1 = f1_scores(&pred, &gold, model.edge_head.classes())?;
            metrics.insert("macro_f1".to_string(), f1.macro_f1);
            metrics.insert("micro_f1".to_string(), f1.micro_f1);
            metrics.insert("accuracy".to_string(), accuracy(&pred, &gold)?);
            for (c, v) in f1.per_class.iter().enumerate() {
                metrics.insert(format!("f1_class{c}"), *v);
            }
            num_queries = labels.len();
        }
    }
    Ok(EvalReport {
        task: task.as_str().to_string(),
        split: split.as_str().to_string(),
        metrics,
        negative_mode,
        num_queries,
    })
}
