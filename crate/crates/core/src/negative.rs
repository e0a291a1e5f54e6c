//! Positive/negative triplet batches for the structure-prediction loss.
//!
//! Independent mode draws a fresh corrupt node for every negative, touching
//! up to `2n + kn` distinct endpoints for `n` positives. Joint mode draws one
//! shared pool of `n` corrupt nodes and builds all `kn` negatives from it, so
//! a batch never touches more than `3n` distinct endpoints.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{HeteroGraph, NodeRef};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Triplet {
    pub head: NodeRef,
    pub rel: usize,
    pub tail: NodeRef,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Head,
    Tail,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NegativeMode {
    Independent,
    Joint,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TripletBatch {
    /// Positives first, then the negatives of positive 0, of positive 1, ...
    pub triplets: Vec<Triplet>,
    /// `+1.0` for positives, `-1.0` for negatives.
    pub labels: Vec<f64>,
    pub positives: usize,
    pub negatives_per_positive: usize,
    /// Which endpoint each negative replaced; `None` for positives.
    pub corrupted: Vec<Option<Slot>>,
    /// Index of the positive each triplet derives from.
    pub source: Vec<usize>,
    pub distinct_endpoints: Vec<NodeRef>,
    /// Shared corrupt-node pool in joint mode; empty in independent mode.
    pub pool: Vec<NodeRef>,
    /// Set when some negative could not be made different from its positive.
    pub degenerate: bool,
}

impl TripletBatch {
    fn from_positives(positives: &[Triplet], k: usize) -> Self {
        let n = positives.len();
        let mut b = TripletBatch {
            triplets: Vec::with_capacity(n * (k + 1)),
            labels: Vec::with_capacity(n * (k + 1)),
            positives: n,
            negatives_per_positive: k,
            corrupted: Vec::with_capacity(n * (k + 1)),
            source: Vec::with_capacity(n * (k + 1)),
            distinct_endpoints: Vec::new(),
            pool: Vec::new(),
            degenerate: false,
        };
        for (i, p) in positives.iter().enumerate() {
            b.triplets.push(*p);
            b.labels.push(1.0);
            b.corrupted.push(None);
            b.source.push(i);
        }
        b
    }

    fn push_negative(&mut self, t: Triplet, slot: Slot, source: usize) {
        self.triplets.push(t);
        self.labels.push(-1.0);
        self.corrupted.push(Some(slot));
        self.source.push(source);
    }

    fn refresh_endpoints(&mut self) {
        let mut seen = HashSet::new();
        self.distinct_endpoints.clear();
        for t in &self.triplets {
            for n in [t.head, t.tail] {
                if seen.insert(n) {
                    self.distinct_endpoints.push(n);
                }
            }
        }
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    pub fn negatives(&self) -> usize {
        self.labels.iter().filter(|&&y| y < 0.0).count()
    }
}

fn check(positives: &[Triplet], k: usize, graph: &HeteroGraph) -> Result<()> {
    if k == 0 {
        return Err(Error::contract("need at least one negative per positive"));
    }
    if positives.is_empty() {
        return Err(Error::contract("need at least one positive triplet"));
    }
    for p in positives {
        let rel = graph
            .relations()
            .get(p.rel)
            .ok_or_else(|| Error::contract(format!("unknown relation {}", p.rel)))?;
        if p.head.ty != rel.src_type || p.tail.ty != rel.dst_type {
            return Err(Error::contract(format!(
                "triplet {p:?} does not match relation {}",
                rel.name
            )));
        }
    }
    Ok(())
}

/// Uniform node of `ty` other than `avoid`; `None` if the type has one node.
fn other_node<R: Rng>(graph: &HeteroGraph, avoid: NodeRef, rng: &mut R) -> Option<NodeRef> {
    let n = graph.node_counts()[avoid.ty];
    if n < 2 {
        return None;
    }
    let mut id = rng.gen_range(0..n - 1);
    if id >= avoid.id {
        id += 1;
    }
    Some(NodeRef::new(avoid.ty, id))
}

fn replace(t: Triplet, slot: Slot, node: NodeRef) -> Triplet {
    match slot {
        Slot::Head => Triplet { head: node, ..t },
        Slot::Tail => Triplet { tail: node, ..t },
    }
}

fn endpoint(t: &Triplet, slot: Slot) -> NodeRef {
    match slot {
        Slot::Head => t.head,
        Slot::Tail => t.tail,
    }
}

fn coin<R: Rng>(rng: &mut R) -> Slot {
    if rng.gen_bool(0.5) {
        Slot::Head
    } else {
        Slot::Tail
    }
}

/// `k` negatives per positive, each replacing the head or the tail (fair
/// coin) with a uniformly drawn different node of the same type.
pub fn corrupt_independent(
    positives: &[Triplet],
    k: usize,
    graph: &HeteroGraph,
    seed: u64,
) -> Result<TripletBatch> {
    check(positives, k, graph)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batch = TripletBatch::from_positives(positives, k);
    for (i, p) in positives.iter().enumerate() {
        for _ in 0..k {
            let slot = coin(&mut rng);
            let original = endpoint(p, slot);
            let node = other_node(graph, original, &mut rng).unwrap_or_else(|| {
                batch.degenerate = true;
                original
            });
            batch.push_negative(replace(*p, slot, node), slot, i);
        }
    }
    batch.refresh_endpoints();
    Ok(batch)
}

/// `k` negatives per positive built from one shared pool of `n` corrupt
/// nodes. Pool member `i` takes the type of a randomly chosen endpoint of
/// positive `i`, so every positive can be corrupted from the pool. A
/// negative replaces a slot whose type has pool members with a pool node
/// different from the original endpoint where one exists.
pub fn corrupt_joint(
    positives: &[Triplet],
    k: usize,
    graph: &HeteroGraph,
    seed: u64,
) -> Result<TripletBatch> {
    check(positives, k, graph)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let num_types = graph.node_counts().len();
    let mut pool: Vec<Vec<NodeRef>> = vec![Vec::new(); num_types];
    let mut batch = TripletBatch::from_positives(positives, k);
    for p in positives {
        let ty = endpoint(p, coin(&mut rng)).ty;
        let node = NodeRef::new(ty, rng.gen_range(0..graph.node_counts()[ty]));
        pool[ty].push(node);
        batch.pool.push(node);
    }
    for (i, p) in positives.iter().enumerate() {
        let usable: Vec<Slot> = [Slot::Head, Slot::Tail]
            .into_iter()
            .filter(|&s| !pool[endpoint(p, s).ty].is_empty())
            .collect();
        if usable.is_empty() {
            return Err(Error::contract(format!(
                "no pool members for either endpoint of {p:?}"
            )));
        }
        for _ in 0..k {
            let slot = if usable.len() == 2 {
                coin(&mut rng)
            } else {
                usable[0]
            };
            let original = endpoint(p, slot);
            let members = &pool[original.ty];
            let distinct = members.iter().filter(|&&m| m != original).count();
            let node = if distinct == 0 {
                batch.degenerate = true;
                original
            } else {
                let pick = rng.gen_range(0..distinct);
                *members
                    .iter()
                    .filter(|&&m| m != original)
                    .nth(pick)
                    .expect("in range")
            };
            batch.push_negative(replace(*p, slot, node), slot, i);
        }
    }
    batch.refresh_endpoints();
    Ok(batch)
}

pub fn corrupt(
    mode: NegativeMode,
    positives: &[Triplet],
    k: usize,
    graph: &HeteroGraph,
    seed: u64,
) -> Result<TripletBatch> {
    match mode {
        NegativeMode::Independent => corrupt_independent(positives, k, graph, seed),
        NegativeMode::Joint => corrupt_joint(positives, k, graph, seed),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FilterReport {
    pub resampled: usize,
    pub dropped: usize,
}

const FILTER_RETRIES: usize = 10;

/// Replaces negatives that are existing edges of `graph` by resampling the
/// corrupted endpoint (up to ten tries), dropping those that stay edges.
pub fn filter_known_edges(
    batch: &TripletBatch,
    graph: &HeteroGraph,
    seed: u64,
) -> (TripletBatch, FilterReport) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = batch.clone();
    out.triplets.clear();
    out.labels.clear();
    out.corrupted.clear();
    out.source.clear();
    let mut report = FilterReport::default();
    let exists = |t: &Triplet| graph.has_edge(t.rel, t.head.id, t.tail.id);
    for (idx, t) in batch.triplets.iter().enumerate() {
        let Some(slot) = batch.corrupted[idx] else {
            out.triplets.push(*t);
            out.labels.push(batch.labels[idx]);
            out.corrupted.push(None);
            out.source.push(batch.source[idx]);
            continue;
        };
        let mut candidate = *t;
        if exists(&candidate) {
            let positive = batch.triplets[batch.source[idx]];
            let original = endpoint(&positive, slot);
            let mut fixed = false;
            for _ in 0..FILTER_RETRIES {
                match other_node(graph, original, &mut rng) {
                    Some(n) => {
                        candidate = replace(positive, slot, n);
                        if !exists(&candidate) {
                            fixed = true;
                            break;
                        }
                    }
                    None => break,
                }
            }
            if !fixed {
                report.dropped += 1;
                continue;
            }
            report.resampled += 1;
        }
        out.push_negative(candidate, slot, batch.source[idx]);
    }
    out.refresh_endpoints();
    (out, report)
}
