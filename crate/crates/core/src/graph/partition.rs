use std::cmp::Reverse;
use std::collections::BinaryHeap;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{HeteroGraph, NodeRef};
use crate::error::{Error, Result};

/// Two-level partition: every node belongs to one leaf, and leaves `2g`
/// and `2g + 1` form level-1 group `g`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartitionMap {
    leaf_of: Vec<Vec<usize>>,
    num_leaves: usize,
}

impl PartitionMap {
    pub fn leaf(&self, node: NodeRef) -> usize {
        self.leaf_of[node.ty][node.id]
    }

    pub fn group(&self, node: NodeRef) -> usize {
        self.leaf(node) / 2
    }

    pub fn group_of_leaf(&self, leaf: usize) -> usize {
        leaf / 2
    }

    pub fn num_leaves(&self) -> usize {
        self.num_leaves
    }

    pub fn num_groups(&self) -> usize {
        self.num_leaves.div_ceil(2)
    }

    pub fn leaf_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_leaves];
        for l in self.leaf_of.iter().flatten() {
            sizes[*l] += 1;
        }
        sizes
    }
}

/// Grows `leaf_count` balanced partitions one after another. Each leaf
/// starts from a random unassigned node and repeatedly absorbs the frontier
/// node with the most edges into the leaf (ties go to the node discovered
/// first), restarting from a random node when the frontier runs dry.
pub fn assign_partitions(
    graph: &HeteroGraph,
    leaf_count: usize,
    seed: u64,
) -> Result<PartitionMap> {
    let n = graph.num_nodes();
    if leaf_count < 2 || leaf_count > n {
        return Err(Error::contract(format!(
            "leaf_count must lie in [2, {n}], got {leaf_count}"
        )));
    }
    let adj = graph.undirected_adjacency();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut next_seed = 0;

    const UNASSIGNED: usize = usize::MAX;
    let mut leaf = vec![UNASSIGNED; n];
    let mut gain = vec![0usize; n];
    let mut discovered = vec![usize::MAX; n];

    for l in 0..leaf_count {
        let size = n / leaf_count + usize::from(l < n % leaf_count);
        let mut heap: BinaryHeap<(usize, Reverse<usize>, usize)> = BinaryHeap::new();
        let mut clock = 0usize;
        let mut touched: Vec<usize> = Vec::new();
        let mut taken = 0;
        while taken < size {
            let v = loop {
                match heap.pop() {
                    Some((g, _, v)) if leaf[v] == UNASSIGNED && gain[v] == g => break Some(v),
                    Some(_) => continue,
                    None => break None,
                }
            };
            let v = match v {
                Some(v) => v,
                None => {
                    while leaf[order[next_seed]] != UNASSIGNED {
                        next_seed += 1;
                    }
                    order[next_seed]
                }
            };
            leaf[v] = l;
            taken += 1;
            for &u in &adj[v] {
                if leaf[u] == UNASSIGNED {
                    if gain[u] == 0 {
                        discovered[u] = clock;
                        clock += 1;
                        touched.push(u);
                    }
                    gain[u] += 1;
                    heap.push((gain[u], Reverse(discovered[u]), u));
                }
            }
        }
        for u in touched {
            gain[u] = 0;
        }
    }

    let mut leaf_of = Vec::with_capacity(graph.node_counts().len());
    let mut at = 0;
    for &c in graph.node_counts() {
        leaf_of.push(leaf[at..at + c].to_vec());
        at += c;
    }
    Ok(PartitionMap {
        leaf_of,
        num_leaves: leaf_count,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TargetMode {
    Global,
    PartitionLocal,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetSample<T> {
    pub items: Vec<T>,
    /// Leaf the batch was drawn from in partition-local mode.
    pub leaf: Option<usize>,
    /// Set when the pool was smaller than the batch and items were drawn
    /// with replacement.
    pub with_replacement: bool,
}

/// Draws a training batch from `items`. Global mode samples uniformly
/// without replacement; partition-local mode first picks a leaf uniformly
/// (among leaves holding at least one item, located via `anchor`) and then
/// samples only within it.
pub fn sample_targets<T: Clone, R: Rng + ?Sized>(
    items: &[T],
    anchor: impl Fn(&T) -> NodeRef,
    batch_size: usize,
    mode: TargetMode,
    partitions: Option<&PartitionMap>,
    rng: &mut R,
) -> Result<TargetSample<T>> {
    if batch_size == 0 {
        return Err(Error::contract("batch_size must be positive"));
    }
    if items.is_empty() {
        return Err(Error::contract("no training entities to sample from"));
    }
    let (pool, leaf): (Vec<usize>, Option<usize>) = match mode {
        TargetMode::Global => ((0..items.len()).collect(), None),
        TargetMode::PartitionLocal => {
            let pm = partitions
                .ok_or_else(|| Error::contract("partition-local sampling needs a partition map"))?;
            let mut by_leaf = vec![Vec::new(); pm.num_leaves()];
            for (i, it) in items.iter().enumerate() {
                by_leaf[pm.leaf(anchor(it))].push(i);
            }
            let nonempty: Vec<usize> = (0..by_leaf.len())
                .filter(|&l| !by_leaf[l].is_empty())
                .collect();
            let l = nonempty[rng.gen_range(0..nonempty.len())];
            (std::mem::take(&mut by_leaf[l]), Some(l))
        }
    };
    if pool.len() >= batch_size {
        let picked = index::sample(rng, pool.len(), batch_size);
        let items = picked.into_iter().map(|i| items[pool[i]].clone()).collect();
        Ok(TargetSample {
            items,
            leaf,
            with_replacement: false,
        })
    } else {
        let items = (0..batch_size)
            .map(|_| items[pool[rng.gen_range(0..pool.len())]].clone())
            .collect();
        Ok(TargetSample {
            items,
            leaf,
            with_replacement: true,
        })
    }
}
