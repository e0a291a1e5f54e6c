//! Relational graph convolution with a self projection, applied over the
//! blocks of a sampled ego-network.

use std::collections::HashMap;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Block, EgoBatch, NodeRef};
use crate::tensor::{Module, Param, ParamGroup, SparseRows, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Aggregation {
    /// Plain sum over sampled neighbours.
    Sum,
    /// Each relation's sum divided by that relation's sampled neighbour count.
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GnnConfig {
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    /// Number of message relations (stored relations, plus reverses if used).
    pub relations: usize,
    pub aggregation: Aggregation,
    /// Apply ReLU after the last layer too.
    pub activate_last: bool,
}

impl GnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.hidden_dim == 0 || self.layers == 0 {
            return Err(Error::Config(format!(
                "invalid graph encoder shape {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RgcnLayer {
    pub w_self: Param,
    pub w_rel: Vec<Param>,
    pub aggregation: Aggregation,
    pub activate: bool,
}

impl RgcnLayer {
    pub fn new(
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        relations: usize,
        aggregation: Aggregation,
        activate: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w_self = Param::new(
            format!("{prefix}.w_self"),
            ParamGroup::Gnn,
            Tensor::glorot(in_dim, out_dim, rng),
        );
        let w_rel = (0..relations)
            .map(|r| {
                Param::new(
                    format!("{prefix}.w_rel{r}"),
                    ParamGroup::Gnn,
                    Tensor::glorot(in_dim, out_dim, rng),
                )
            })
            .collect();
        RgcnLayer {
            w_self,
            w_rel,
            aggregation,
            activate,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w_self.value().shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.w_self.value().shape()[1]
    }
}

/// One layer over one block: `σ(W_self h_n + Σ_r Σ_{n'} agg(W_r h_{n'}))`
/// for every target `n`, where `h_in` holds one row per block source.
pub fn rgcn_layer_forward(tape: &Tape, layer: &RgcnLayer, block: &Block, h_in: Var) -> Result<Var> {
    let shape = tape.shape(h_in);
    if shape.len() != 2 || shape[0] != block.sources.len() || shape[1] != layer.in_dim() {
        return Err(Error::shape(
            "rgcn_layer_forward",
            &shape,
            &[block.sources.len(), layer.in_dim()],
        ));
    }
    if block.edges.len() != layer.w_rel.len() {
        return Err(Error::contract(format!(
            "block has {} message relations, layer has {}",
            block.edges.len(),
            layer.w_rel.len()
        )));
    }
    let n_t = block.num_targets;
    let targets: Vec<usize> = (0..n_t).collect();
    let mut out = tape.matmul(tape.gather_rows(h_in, &targets)?, tape.param(&layer.w_self))?;
    for (r, edges) in block.edges.iter().enumerate() {
        if edges.is_empty() {
            continue;
        }
        let weights: Vec<f64> = match layer.aggregation {
            Aggregation::Sum => vec![1.0; edges.len()],
            Aggregation::Mean => {
                let mut count = vec![0usize; n_t];
                for &(t, _) in edges {
                    count[t] += 1;
                }
                edges.iter().map(|&(t, _)| 1.0 / count[t] as f64).collect()
            }
        };
        let entries: Vec<(usize, usize, f64)> = edges
            .iter()
            .zip(weights)
            .map(|(&(t, s), w)| (t, s, w))
            .collect();
        let adj = Rc::new(SparseRows::from_entries(
            n_t,
            block.sources.len(),
            &entries,
        )?);
        let agg = tape.spmm(&adj, h_in)?;
        out = tape.add(out, tape.matmul(agg, tape.param(&layer.w_rel[r]))?)?;
    }
    Ok(if layer.activate { tape.relu(out) } else { out })
}

/// Input feature rows keyed by node, e.g. text-encoder outputs.
pub struct NodeFeatures {
    pub rows: HashMap<NodeRef, usize>,
    pub values: Var,
}

impl NodeFeatures {
    pub fn new(nodes: &[NodeRef], values: Var) -> Self {
        let rows = nodes.iter().enumerate().map(|(i, &n)| (n, i)).collect();
        NodeFeatures { rows, values }
    }
}

/// Stacked layers plus learned input tables for node types without text.
#[derive(Clone, Debug, PartialEq)]
pub struct RgcnStack {
    pub config: GnnConfig,
    pub layers: Vec<RgcnLayer>,
    /// Per node type: an embedding table when the type has no features.
    pub type_tables: Vec<Option<Param>>,
}

impl RgcnStack {
    /// `featureless[t]` gives the node count of type `t` if it needs a
    /// learned input table.
    pub fn new(config: GnnConfig, featureless: &[Option<usize>], seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = (0..config.layers)
            .map(|l| {
                let in_dim = if l == 0 {
                    config.in_dim
                } else {
                    config.hidden_dim
                };
                let activate = l + 1 < config.layers || config.activate_last;
                RgcnLayer::new(
                    &format!("gnn.layer{l}"),
                    in_dim,
                    config.hidden_dim,
                    config.relations,
                    config.aggregation,
                    activate,
                    &mut rng,
                )
            })
            .collect();
        let type_tables = featureless
            .iter()
            .enumerate()
            .map(|(t, n)| {
                n.map(|n| {
                    Param::new(
                        format!("gnn.type_emb{t}"),
                        ParamGroup::Gnn,
                        Tensor::uniform(&[n, config.in_dim], 0.5, &mut rng),
                    )
                })
            })
            .collect();
        Ok(RgcnStack {
            config,
            layers,
            type_tables,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.config.hidden_dim
    }
}

impl Module for RgcnStack {
    fn params(&self) -> Vec<&Param> {
        let mut v = Vec::new();
        for l in &self.layers {
            v.push(&l.w_self);
            v.extend(l.w_rel.iter());
        }
        v.extend(self.type_tables.iter().flatten());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = Vec::new();
        for l in &mut self.layers {
            v.push(&mut l.w_self);
            v.extend(l.w_rel.iter_mut());
        }
        v.extend(self.type_tables.iter_mut().flatten());
        v
    }
}

/// Assembles the layer-0 input rows for `nodes` from `features` and the
/// stack's featureless-type tables.
pub fn input_rows(
    tape: &Tape,
    stack: &RgcnStack,
    nodes: &[NodeRef],
    features: Option<&NodeFeatures>,
) -> Result<Var> {
    // Each part is gathered separately, then one final gather restores order.
    let mut feature_idx = Vec::new();
    let mut table_idx: Vec<Vec<usize>> = vec![Vec::new(); stack.type_tables.len()];
    let mut origin: Vec<(usize, usize)> = Vec::with_capacity(nodes.len());
    let mut missing = Vec::new();
    for &n in nodes {
        match stack.type_tables.get(n.ty) {
            Some(Some(_)) => {
                origin.push((1 + n.ty, table_idx[n.ty].len()));
                table_idx[n.ty].push(n.id);
            }
            _ => match features.and_then(|f| f.rows.get(&n)) {
                Some(&row) => {
                    origin.push((0, feature_idx.len()));
                    feature_idx.push(row);
                }
                None => missing.push(n),
            },
        }
    }
    if !missing.is_empty() {
        let list: Vec<String> = missing.iter().take(10).map(ToString::to_string).collect();
        return Err(Error::contract(format!(
            "missing input features for {} node(s): {}",
            missing.len(),
            list.join(", ")
        )));
    }
    let mut parts = Vec::new();
    let mut offset = vec![0usize; 1 + stack.type_tables.len()];
    let mut total = 0;
    if !feature_idx.is_empty() {
        let f = features.expect("feature rows were found");
        parts.push(tape.gather_rows(f.values, &feature_idx)?);
        total += feature_idx.len();
    }
    for (t, idx) in table_idx.iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        offset[1 + t] = total;
        let table = stack.type_tables[t]
            .as_ref()
            .expect("indexed types have tables");
        parts.push(tape.gather_rows(tape.param(table), idx)?);
        total += idx.len();
    }
    if parts.len() == 1 && origin.iter().enumerate().all(|(i, &(_, j))| i == j) {
        return Ok(parts[0]);
    }
    let all = tape.concat_rows(&parts)?;
    let order: Vec<usize> = origin.iter().map(|&(src, j)| offset[src] + j).collect();
    tape.gather_rows(all, &order)
}

/// Runs every layer of the stack over the batch's blocks, input side first;
/// returns one row per batch target.
pub fn gnn_forward(
    tape: &Tape,
    stack: &RgcnStack,
    batch: &EgoBatch,
    features: Option<&NodeFeatures>,
) -> Result<Var> {
    if stack.layers.len() != batch.num_layers() {
        return Err(Error::contract(format!(
            "stack has {} layers, batch has {}",
            stack.layers.len(),
            batch.num_layers()
        )));
    }
    let mut h = input_rows(tape, stack, batch.input_nodes(), features)?;
    for (layer, block) in stack.layers.iter().zip(&batch.blocks) {
        h = rgcn_layer_forward(tape, layer, block, h)?;
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{sample_neighbors, GraphBuilder, HeteroGraph, SamplerConfig};
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn layer_with(
        w_self: Tensor,
        w_rel: Vec<Tensor>,
        aggregation: Aggregation,
        activate: bool,
    ) -> RgcnLayer {
        RgcnLayer {
            w_self: Param::new("s", ParamGroup::Gnn, w_self),
            w_rel: w_rel
                .into_iter()
                .enumerate()
                .map(|(i, t)| Param::new(format!("r{i}"), ParamGroup::Gnn, t))
                .collect(),
            aggregation,
            activate,
        }
    }

    fn eval(layer: &RgcnLayer, block: &Block, h: Tensor) -> Tensor {
        let tape = Tape::no_grad();
        let x = tape.constant(h);
        let out = rgcn_layer_forward(&tape, layer, block, x).unwrap();
        let t = tape.value(out).clone();
        t
    }

    #[test]
    fn isolated_node_with_identity_self_is_relu() {
        let block = Block {
            sources: vec![NodeRef::new(0, 0)],
            num_targets: 1,
            target_positions: vec![0],
            edges: vec![vec![]],
        };
        let layer = layer_with(
            Tensor::identity(3),
            vec![Tensor::zeros(&[3, 3])],
            Aggregation::Sum,
            true,
        );
        let out = eval(&layer, &block, mat(&[&[1.0, -2.0, 0.5]]));
        assert_eq!(out.data(), &[1.0, 0.0, 0.5]);
        let zero = layer_with(
            Tensor::zeros(&[3, 3]),
            vec![Tensor::zeros(&[3, 3])],
            Aggregation::Sum,
            true,
        );
        assert_eq!(
            eval(&zero, &block, mat(&[&[1.0, -2.0, 0.5]])).data(),
            &[0.0; 3]
        );
    }

    #[test]
    fn hand_computed_two_relation_layer() {
        // Target 0 hears node 1 over relation 0 and nodes 1, 2 over relation 1.
        let n = |i| NodeRef::new(0, i);
        let block = Block {
            sources: vec![n(0), n(1), n(2)],
            num_targets: 1,
            target_positions: vec![0],
            edges: vec![vec![(0, 1)], vec![(0, 1), (0, 2)]],
        };
        let h = mat(&[&[1.0, 2.0], &[0.5, -1.0], &[3.0, 1.0]]);
        let ws = mat(&[&[1.0, 0.0], &[0.5, 2.0]]);
        let w0 = mat(&[&[2.0, -1.0], &[0.0, 1.0]]);
        let w1 = mat(&[&[0.5, 0.5], &[-1.0, 1.0]]);
        // row-vector convention: h W
        // self: [1,2]·ws = [1 + 1, 0 + 4] = [2, 4]
        // r0: [0.5,-1]·w0 = [1, -0.5 - 1] = [1, -1.5]
        // r1 sum: ([0.5,-1] + [3,1])·w1 = [3.5, 0]·w1 = [1.75, 1.75]
        let sum = layer_with(
            ws.clone(),
            vec![w0.clone(), w1.clone()],
            Aggregation::Sum,
            true,
        );
        let out = eval(&sum, &block, h.clone());
        let want = [2.0 + 1.0 + 1.75, 4.0 - 1.5 + 1.75];
        assert!((out.data()[0] - want[0]).abs() < 1e-12 && (out.data()[1] - want[1]).abs() < 1e-12);
        // r1 mean halves its term
        let mean = layer_with(ws, vec![w0, w1], Aggregation::Mean, true);
        let out = eval(&mean, &block, h);
        let want = [2.0 + 1.0 + 0.875, 4.0 - 1.5 + 0.875];
        assert!((out.data()[0] - want[0]).abs() < 1e-12 && (out.data()[1] - want[1]).abs() < 1e-12);
    }

    #[test]
    fn misaligned_rows_rejected() {
        let block = Block {
            sources: vec![NodeRef::new(0, 0), NodeRef::new(0, 1)],
            num_targets: 1,
            target_positions: vec![0],
            edges: vec![vec![(0, 1)]],
        };
        let layer = layer_with(
            Tensor::identity(2),
            vec![Tensor::identity(2)],
            Aggregation::Sum,
            true,
        );
        let tape = Tape::no_grad();
        let x = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(
            rgcn_layer_forward(&tape, &layer, &block, x),
            Err(Error::Shape { .. })
        ));
    }

    fn random_graph(n: usize, rels: usize, p: f64, rng: &mut ChaCha8Rng) -> HeteroGraph {
        let mut b = GraphBuilder::new();
        let t = b.node_type("v", vec![String::new(); n]);
        for r in 0..rels {
            let rel = b.relation(t, &format!("r{r}"), t);
            for u in 0..n {
                for v in 0..n {
                    if rng.gen_bool(p) {
                        b.edge(rel, u, v);
                    }
                }
            }
        }
        b.build().unwrap()
    }

    /// Dense `L`-layer evaluation over every node with explicit adjacency.
    fn dense_forward(g: &HeteroGraph, stack: &RgcnStack, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let rels = g.message_relations(true);
        let n = g.num_nodes();
        let mut h = x.to_vec();
        for layer in &stack.layers {
            let (fi, fo) = (layer.in_dim(), layer.out_dim());
            let apply = |w: &Tensor, v: &[f64]| -> Vec<f64> {
                (0..fo)
                    .map(|j| (0..fi).map(|i| v[i] * w.get2(i, j)).sum())
                    .collect()
            };
            let mut next = vec![vec![0.0; fo]; n];
            for node in 0..n {
                let mut acc = apply(layer.w_self.value(), &h[node]);
                for (r, rel) in rels.iter().enumerate() {
                    let senders: Vec<usize> = (0..n)
                        .filter(|&s| {
                            if rel.reverse {
                                g.has_edge(rel.base, node, s)
                            } else {
                                g.has_edge(rel.base, s, node)
                            }
                        })
                        .collect();
                    if senders.is_empty() {
                        continue;
                    }
                    let norm = match layer.aggregation {
                        Aggregation::Sum => 1.0,
                        Aggregation::Mean => senders.len() as f64,
                    };
                    for s in senders {
                        for (a, m) in acc
                            .iter_mut()
                            .zip(apply(&layer.w_rel[r].value().clone(), &h[s]))
                        {
                            *a += m / norm;
                        }
                    }
                }
                if layer.activate {
                    acc.iter_mut().for_each(|a| *a = a.max(0.0));
                }
                next[node] = acc;
            }
            h = next;
        }
        h
    }

    #[test]
    fn saturating_sample_equals_dense_computation() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for trial in 0..6 {
            let n = rng.gen_range(3..=10);
            let g = random_graph(n, 2, 0.25, &mut rng);
            for aggregation in [Aggregation::Sum, Aggregation::Mean] {
                let cfg = GnnConfig {
                    in_dim: 3,
                    hidden_dim: 4,
                    layers: 2,
                    relations: 4,
                    aggregation,
                    activate_last: trial % 2 == 0,
                };
                let stack = RgcnStack::new(cfg, &[None], trial).unwrap();
                let x: Vec<Vec<f64>> = (0..n)
                    .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .collect();
                let want = dense_forward(&g, &stack, &x);
                let targets: Vec<NodeRef> = (0..n).map(|i| NodeRef::new(0, i)).collect();
                let batch = sample_neighbors(&g, &targets, &SamplerConfig::full(2), 0).unwrap();
                let tape = Tape::no_grad();
                let all = tape.constant(Tensor::from_rows(&x).unwrap());
                let feats = NodeFeatures::new(&targets, all);
                let out = gnn_forward(&tape, &stack, &batch, Some(&feats)).unwrap();
                let out = tape.value(out);
                for (i, t) in batch.targets.iter().enumerate() {
                    for j in 0..4 {
                        assert!((out.get2(i, j) - want[t.id][j]).abs() < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn relation_permutation_is_equivariant() {
        let n = |i| NodeRef::new(0, i);
        let block = Block {
            sources: vec![n(0), n(1), n(2), n(3)],
            num_targets: 2,
            target_positions: vec![0, 1],
            edges: vec![vec![(0, 2), (1, 3)], vec![(0, 3)], vec![(1, 2), (0, 1)]],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layer = RgcnLayer::new("l", 3, 3, 3, Aggregation::Mean, true, &mut rng);
        let h = Tensor::uniform(&[4, 3], 1.0, &mut rng);
        let base = eval(&layer, &block, h.clone());
        let perm = [2, 0, 1];
        let mut permuted_block = block.clone();
        let mut permuted_layer = layer.clone();
        for (new, &old) in perm.iter().enumerate() {
            permuted_block.edges[new] = block.edges[old].clone();
            permuted_layer.w_rel[new] = layer.w_rel[old].clone();
        }
        assert!(base.max_abs_diff(&eval(&permuted_layer, &permuted_block, h)) < 1e-12);
    }

    #[test]
    fn neighbour_order_does_not_matter() {
        let n = |i| NodeRef::new(0, i);
        let mut block = Block {
            sources: (0..6).map(n).collect(),
            num_targets: 2,
            target_positions: vec![0, 1],
            edges: vec![vec![(0, 2), (0, 3), (0, 4), (1, 5), (1, 2), (0, 1)]],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let h = Tensor::uniform(&[6, 2], 1.0, &mut rng);
        for aggregation in [Aggregation::Sum, Aggregation::Mean] {
            let layer = RgcnLayer::new("l", 2, 2, 1, aggregation, false, &mut rng);
            let base = eval(&layer, &block, h.clone());
            for _ in 0..5 {
                block.edges[0].shuffle(&mut rng);
                assert!(base.max_abs_diff(&eval(&layer, &block, h.clone())) < 1e-12);
            }
        }
    }

    #[test]
    fn relation_weight_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = random_graph(8, 2, 0.3, &mut rng);
        let cfg = GnnConfig {
            in_dim: 3,
            hidden_dim: 3,
            layers: 2,
            relations: 4,
            aggregation: Aggregation::Mean,
            activate_last: false,
        };
        let mut stack = RgcnStack::new(cfg, &[Some(8)], 1).unwrap();
        let targets = [NodeRef::new(0, 0), NodeRef::new(0, 5)];
        let batch = sample_neighbors(&g, &targets, &SamplerConfig::new(3, 2), 2).unwrap();
        let weights = Tensor::uniform(&[2, 3], 1.0, &mut rng);
        let objective = |s: &RgcnStack, tape: &Tape| -> Var {
            let out = gnn_forward(tape, s, &batch, None).unwrap();
            let w = tape.constant(weights.clone());
            tape.sum(tape.mul(out, w).unwrap())
        };
        let tape = Tape::new();
        let loss = objective(&stack, &tape);
        let grads = tape.param_grads(&tape.backward(loss).unwrap());
        for name in ["gnn.layer0.w_rel1", "gnn.layer1.w_rel2", "gnn.type_emb0"] {
            let analytic = grads.iter().find(|(n, _)| n == name).unwrap().1.clone();
            let mut fd = Vec::new();
            for i in 0..analytic.numel() {
                let mut value_at = |delta: f64| {
                    let p = stack
                        .params_mut()
                        .into_iter()
                        .find(|p| p.name() == name)
                        .unwrap();
                    p.value_mut().data_mut()[i] += delta;
                    let tape = Tape::no_grad();
                    let v = objective(&stack, &tape);
                    let out = tape.value(v).item();
                    let p = stack
                        .params_mut()
                        .into_iter()
                        .find(|p| p.name() == name)
                        .unwrap();
                    p.value_mut().data_mut()[i] -= delta;
                    out
                };
                fd.push((value_at(1e-3) - value_at(-1e-3)) / 2e-3);
            }
            let fd = Tensor::new(analytic.shape().to_vec(), fd).unwrap();
            let rel = analytic.max_abs_diff(&fd) / analytic.norm().max(fd.norm()).max(1e-12);
            assert!(rel < 1e-3, "{name}: {rel}");
        }
    }

    #[test]
    fn missing_features_are_listed() {
        let g = random_graph(4, 1, 0.5, &mut ChaCha8Rng::seed_from_u64(0));
        let cfg = GnnConfig {
            in_dim: 2,
            hidden_dim: 2,
            layers: 1,
            relations: 2,
            aggregation: Aggregation::Sum,
            activate_last: false,
        };
        let stack = RgcnStack::new(cfg, &[None], 0).unwrap();
        let batch =
            sample_neighbors(&g, &[NodeRef::new(0, 0)], &SamplerConfig::full(1), 0).unwrap();
        let tape = Tape::no_grad();
        let feats = NodeFeatures::new(&[], tape.constant(Tensor::zeros(&[0, 2])));
        let err = gnn_forward(&tape, &stack, &batch, Some(&feats))
            .unwrap_err()
            .to_string();
        assert!(err.contains("(0, 0)"), "{err}");
    }

    #[test]
    fn one_layer_stack_matches_single_layer() {
        let g = random_graph(3, 1, 0.0, &mut ChaCha8Rng::seed_from_u64(0));
        let cfg = GnnConfig {
            in_dim: 2,
            hidden_dim: 2,
            layers: 1,
            relations: 2,
            aggregation: Aggregation::Sum,
            activate_last: true,
        };
        let stack = RgcnStack::new(cfg, &[None], 4).unwrap();
        let batch =
            sample_neighbors(&g, &[NodeRef::new(0, 1)], &SamplerConfig::full(1), 0).unwrap();
        let x = mat(&[&[0.3, -0.7]]);
        let tape = Tape::no_grad();
        let v = tape.constant(x.clone());
        let out = gnn_forward(
            &tape,
            &stack,
            &batch,
            Some(&NodeFeatures::new(&[NodeRef::new(0, 1)], v)),
        )
        .unwrap();
        let direct = eval(&stack.layers[0], &batch.blocks[0], x);
        assert_eq!(*tape.value(out), direct);
    }
}
