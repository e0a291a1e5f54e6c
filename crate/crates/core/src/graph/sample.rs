use std::collections::HashMap;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{HeteroGraph, MessageRelation, NodeRef};
use crate::error::{Error, Result};

/// Fanout value meaning "take every neighbour".
pub const FULL_FANOUT: usize = usize::MAX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// One fanout per message relation, or a single value applied to all.
    pub fanouts: Vec<usize>,
    pub num_layers: usize,
    pub include_reverse: bool,
    /// Merge repeated nodes into one source entry. When off, every sampled
    /// occurrence becomes its own source (a sampling tree).
    pub dedup: bool,
}

impl SamplerConfig {
    pub fn new(fanout: usize, num_layers: usize) -> Self {
        SamplerConfig {
            fanouts: vec![fanout],
            num_layers,
            include_reverse: true,
            dedup: true,
        }
    }

    pub fn full(num_layers: usize) -> Self {
        SamplerConfig::new(FULL_FANOUT, num_layers)
    }

    fn fanout(&self, rel: usize) -> usize {
        if self.fanouts.len() == 1 {
            self.fanouts[0]
        } else {
            self.fanouts[rel]
        }
    }
}

/// One message-passing layer. Targets occupy the first `num_targets`
/// source positions, so the self term of a target reads its own row.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub sources: Vec<NodeRef>,
    pub num_targets: usize,
    /// Position in `sources` of each target (always `0..num_targets`).
    pub target_positions: Vec<usize>,
    /// Per message relation, `(target position, source position)` pairs.
    pub edges: Vec<Vec<(usize, usize)>>,
}

impl Block {
    pub fn targets(&self) -> &[NodeRef] {
        &self.sources[..self.num_targets]
    }
}

/// Layered sampled neighbourhood of a set of target nodes. `blocks[0]`
/// consumes the input features; the last block produces the targets.
#[derive(Clone, Debug, PartialEq)]
pub struct EgoBatch {
    pub blocks: Vec<Block>,
    pub targets: Vec<NodeRef>,
    pub relations: Vec<MessageRelation>,
}

impl EgoBatch {
    pub fn num_layers(&self) -> usize {
        self.blocks.len()
    }

    /// Nodes whose input features are needed.
    pub fn input_nodes(&self) -> &[NodeRef] {
        &self.blocks[0].sources
    }

    pub fn target_position(&self, node: NodeRef) -> Option<usize> {
        self.targets.iter().position(|&t| t == node)
    }

    /// Distinct nodes among the inputs.
    pub fn unique_input_count(&self) -> usize {
        let mut v = self.input_nodes().to_vec();
        v.sort_unstable();
        v.dedup();
        v.len()
    }
}

/// Samples a layered ego-network. Each expanded node draws at most
/// `fanout` neighbours per message relation, uniformly without
/// replacement, once per batch; the same draw serves every layer in which
/// the node appears. Duplicate targets are merged.
pub fn sample_neighbors(
    graph: &HeteroGraph,
    targets: &[NodeRef],
    config: &SamplerConfig,
    seed: u64,
) -> Result<EgoBatch> {
    if targets.is_empty() {
        return Err(Error::contract(
            "sample_neighbors needs at least one target",
        ));
    }
    if config.num_layers == 0 {
        return Err(Error::contract("sample_neighbors needs at least one layer"));
    }
    let relations = graph.message_relations(config.include_reverse);
    if config.fanouts.is_empty()
        || (config.fanouts.len() != 1 && config.fanouts.len() != relations.len())
        || config.fanouts.contains(&0)
    {
        return Err(Error::contract(format!(
            "need one positive fanout or one per message relation ({}), got {:?}",
            relations.len(),
            config.fanouts
        )));
    }
    for t in targets {
        if t.ty >= graph.node_counts().len() || t.id >= graph.node_counts()[t.ty] {
            return Err(Error::contract(format!(
                "target {t} is not a node of the graph"
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Occurrences: with dedup each node has exactly one, otherwise every
    // sampled neighbour gets a fresh one.
    let mut occ_node: Vec<NodeRef> = Vec::new();
    let mut occ_children: Vec<Option<Vec<Vec<usize>>>> = Vec::new();
    let mut canonical: HashMap<NodeRef, usize> = HashMap::new();
    let mut new_occ = |node: NodeRef,
                       occ_node: &mut Vec<NodeRef>,
                       occ_children: &mut Vec<Option<Vec<Vec<usize>>>>|
     -> usize {
        if config.dedup {
            if let Some(&o) = canonical.get(&node) {
                return o;
            }
        }
        occ_node.push(node);
        occ_children.push(None);
        let o = occ_node.len() - 1;
        if config.dedup {
            canonical.insert(node, o);
        }
        o
    };

    let mut layer_targets: Vec<usize> = Vec::new();
    {
        let mut seen = HashMap::new();
        for &t in targets {
            if seen.insert(t, ()).is_none() {
                layer_targets.push(new_occ(t, &mut occ_node, &mut occ_children));
            }
        }
    }
    let final_targets: Vec<NodeRef> = layer_targets.iter().map(|&o| occ_node[o]).collect();

    let mut blocks = Vec::with_capacity(config.num_layers);
    for _ in 0..config.num_layers {
        let mut sources = layer_targets.clone();
        let mut position: HashMap<usize, usize> =
            sources.iter().enumerate().map(|(p, &o)| (o, p)).collect();
        let mut edges = vec![Vec::new(); relations.len()];
        for (tpos, &occ) in layer_targets.iter().enumerate() {
            if occ_children[occ].is_none() {
                let node = occ_node[occ];
                let mut children = Vec::with_capacity(relations.len());
                for (r, rel) in relations.iter().enumerate() {
                    if rel.receiver_type != node.ty {
                        children.push(Vec::new());
                        continue;
                    }
                    let senders = graph.message_senders(*rel, node);
                    let fanout = config.fanout(r);
                    let picked: Vec<usize> = if senders.len() <= fanout {
                        senders.to_vec()
                    } else {
                        let mut idx = index::sample(&mut rng, senders.len(), fanout).into_vec();
                        idx.sort_unstable();
                        idx.into_iter().map(|i| senders[i]).collect()
                    };
                    let occs = picked
                        .into_iter()
                        .map(|id| {
                            new_occ(
                                NodeRef::new(rel.sender_type, id),
                                &mut occ_node,
                                &mut occ_children,
                            )
                        })
                        .collect();
                    children.push(occs);
                }
                occ_children[occ] = Some(children);
            }
            let children = occ_children[occ].as_ref().expect("expanded above");
            for (r, kids) in children.iter().enumerate() {
                for &kid in kids {
                    let spos = *position.entry(kid).or_insert_with(|| {
                        sources.push(kid);
                        sources.len() - 1
                    });
                    edges[r].push((tpos, spos));
                }
            }
        }
        let num_targets = layer_targets.len();
        blocks.push(Block {
            sources: sources.iter().map(|&o| occ_node[o]).collect(),
            num_targets,
            target_positions: (0..num_targets).collect(),
            edges,
        });
        layer_targets = sources;
    }
    blocks.reverse();
    Ok(EgoBatch {
        blocks,
        targets: final_targets,
        relations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphBuilder;
    use std::collections::{BTreeSet, VecDeque};

    fn homogeneous(n: usize, edges: &[(usize, usize)]) -> HeteroGraph {
        let mut b = GraphBuilder::new();
        let t = b.node_type("v", vec![String::new(); n]);
        let r = b.relation(t, "e", t);
        for &(s, d) in edges {
            b.edge(r, s, d);
        }
        b.build().unwrap()
    }

    fn complete(n: usize) -> HeteroGraph {
        let edges: Vec<_> = (0..n)
            .flat_map(|u| (0..n).filter(move |&v| v != u).map(move |v| (u, v)))
            .collect();
        homogeneous(n, &edges)
    }

    /// Nodes within `hops` undirected hops, by breadth-first search.
    fn bfs(g: &HeteroGraph, start: usize, hops: usize) -> BTreeSet<usize> {
        let adj = g.undirected_adjacency();
        let mut dist = vec![usize::MAX; adj.len()];
        dist[start] = 0;
        let mut q = VecDeque::from([start]);
        while let Some(u) = q.pop_front() {
            for &v in &adj[u] {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    q.push_back(v);
                }
            }
        }
        (0..adj.len()).filter(|&v| dist[v] <= hops).collect()
    }

    #[test]
    fn isolated_target_sources_are_itself() {
        let g = homogeneous(3, &[(1, 2)]);
        let b = sample_neighbors(&g, &[NodeRef::new(0, 0)], &SamplerConfig::new(5, 2), 1).unwrap();
        for block in &b.blocks {
            assert_eq!(block.sources, vec![NodeRef::new(0, 0)]);
        }
    }

    #[test]
    fn empty_targets_rejected() {
        let g = homogeneous(2, &[(0, 1)]);
        assert!(sample_neighbors(&g, &[], &SamplerConfig::new(1, 1), 0).is_err());
    }

    #[test]
    fn complete_graph_respects_bound() {
        let g = complete(60);
        let mut cfg = SamplerConfig::new(20, 2);
        cfg.include_reverse = false;
        let b = sample_neighbors(&g, &[NodeRef::new(0, 0)], &cfg, 3).unwrap();
        assert!(b.input_nodes().len() <= 421);
        cfg.dedup = false;
        let b = sample_neighbors(&g, &[NodeRef::new(0, 0)], &cfg, 3).unwrap();
        assert_eq!(b.input_nodes().len(), 421);
    }

    #[test]
    fn path_graph_samples_stay_in_two_hop_neighbourhood() {
        let g = homogeneous(5, &[(0, 1), (1, 2), (2, 3), (3, 4)]);
        for seed in 0..50 {
            for start in 0..5 {
                let b = sample_neighbors(
                    &g,
                    &[NodeRef::new(0, start)],
                    &SamplerConfig::new(1, 2),
                    seed,
                )
                .unwrap();
                let truth = bfs(&g, start, 2);
                for s in b.input_nodes() {
                    assert!(
                        truth.contains(&s.id),
                        "seed {seed} start {start} got {}",
                        s.id
                    );
                }
            }
        }
    }

    #[test]
    fn saturating_fanout_gives_full_neighbourhood() {
        let g = homogeneous(8, &[(0, 1), (1, 2), (2, 3), (5, 4), (6, 0), (7, 7)]);
        for start in 0..8 {
            let b = sample_neighbors(&g, &[NodeRef::new(0, start)], &SamplerConfig::full(2), 0)
                .unwrap();
            let got: BTreeSet<usize> = b.input_nodes().iter().map(|n| n.id).collect();
            assert_eq!(got, bfs(&g, start, 2), "start {start}");
        }
    }

    #[test]
    fn sources_contain_targets_and_indices_resolve() {
        let g = complete(12);
        let targets = [NodeRef::new(0, 1), NodeRef::new(0, 5), NodeRef::new(0, 1)];
        let b = sample_neighbors(&g, &targets, &SamplerConfig::new(3, 3), 9).unwrap();
        assert_eq!(b.targets, vec![NodeRef::new(0, 1), NodeRef::new(0, 5)]);
        for (l, block) in b.blocks.iter().enumerate() {
            assert!(block.sources.len() >= block.num_targets);
            for es in &block.edges {
                for &(t, s) in es {
                    assert!(t < block.num_targets && s < block.sources.len());
                }
            }
            if l + 1 < b.blocks.len() {
                assert_eq!(block.targets(), b.blocks[l + 1].sources.as_slice());
            }
        }
        assert_eq!(b.blocks.last().unwrap().targets(), b.targets.as_slice());
    }

    #[test]
    fn identical_seeds_identical_batches() {
        let g = complete(30);
        let t = [NodeRef::new(0, 3)];
        let a = sample_neighbors(&g, &t, &SamplerConfig::new(4, 2), 77).unwrap();
        let b = sample_neighbors(&g, &t, &SamplerConfig::new(4, 2), 77).unwrap();
        assert_eq!(a, b);
    }
}
