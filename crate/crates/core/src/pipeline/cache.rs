use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::NodeRef;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheConfig {
    pub capacity: usize,
    /// An entry computed at step `s` may be returned at step `t` only if
    /// `t - s <= staleness_limit`.
    pub staleness_limit: u64,
}

#[derive(Clone, Debug)]
struct Entry {
    value: Vec<f64>,
    stamp: u64,
    tick: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CacheCounters {
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
}

impl CacheCounters {
    pub fn hit_rate(&self) -> Option<f64> {
        let total = self.hits + self.misses;
        (total > 0).then(|| self.hits as f64 / total as f64)
    }
}

/// Text embeddings keyed by node, stamped with the optimizer step that
/// produced them. Least recently used entries are evicted at capacity.
#[derive(Clone, Debug)]
pub struct EmbeddingCache {
    config: CacheConfig,
    entries: HashMap<NodeRef, Entry>,
    lru: BTreeMap<u64, NodeRef>,
    clock: u64,
    pub counters: CacheCounters,
}

impl EmbeddingCache {
    pub fn new(config: CacheConfig) -> Self {
        EmbeddingCache {
            config,
            entries: HashMap::new(),
            lru: BTreeMap::new(),
            clock: 0,
            counters: CacheCounters::default(),
        }
    }

    pub fn config(&self) -> CacheConfig {
        self.config
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn touch(&mut self, node: NodeRef) {
        self.clock += 1;
        let e = self.entries.get_mut(&node).expect("touched entry exists");
        self.lru.remove(&e.tick);
        e.tick = self.clock;
        self.lru.insert(self.clock, node);
    }

    /// Looks `node` up at optimizer step `step`, counting a hit or a miss.
    /// Stale entries are dropped.
    pub fn get(&mut self, node: NodeRef, step: u64) -> Option<&[f64]> {
        let fresh = match self.entries.get(&node) {
            Some(e) => step.saturating_sub(e.stamp) <= self.config.staleness_limit,
            None => false,
        };
        if !fresh {
            self.counters.misses += 1;
            if let Some(e) = self.entries.remove(&node) {
                self.lru.remove(&e.tick);
            }
            return None;
        }
        self.counters.hits += 1;
        self.touch(node);
        Some(&self.entries[&node].value)
    }

    pub fn insert(&mut self, node: NodeRef, value: Vec<f64>, step: u64) {
        if self.config.capacity == 0 {
            return;
        }
        if let Some(e) = self.entries.get_mut(&node) {
            e.value = value;
            e.stamp = step;
            self.touch(node);
            return;
        }
        if self.entries.len() >= self.config.capacity {
            let (&tick, &old) = self.lru.iter().next().expect("full cache has entries");
            self.lru.remove(&tick);
            self.entries.remove(&old);
            self.counters.evictions += 1;
        }
        self.clock += 1;
        self.entries.insert(
            node,
            Entry {
                value,
                stamp: step,
                tick: self.clock,
            },
        );
        self.lru.insert(self.clock, node);
    }
}

/// Rows for `nodes`, served from the cache where fresh and otherwise
/// computed by `encode` in chunks of at most `sub_batch` nodes (and then
/// cached). Without a cache every node is encoded.
pub fn cache_get_or_encode(
    mut cache: Option<&mut EmbeddingCache>,
    nodes: &[NodeRef],
    step: u64,
    sub_batch: usize,
    dim: usize,
    mut encode: impl FnMut(&[NodeRef]) -> Result<Tensor>,
) -> Result<Tensor> {
    if sub_batch == 0 {
        return Err(Error::contract("sub-batch size must be positive"));
    }
    let mut out = vec![0.0; nodes.len() * dim];
    let mut missing = Vec::new();
    for (i, &n) in nodes.iter().enumerate() {
        match cache.as_deref_mut().and_then(|c| c.get(n, step)) {
            Some(v) => out[i * dim..(i + 1) * dim].copy_from_slice(v),
            None => missing.push(i),
        }
    }
    for chunk in missing.chunks(sub_batch) {
        let batch: Vec<NodeRef> = chunk.iter().map(|&i| nodes[i]).collect();
        let t = encode(&batch)?;
        if t.shape() != [batch.len(), dim] {
            return Err(Error::shape(
                "cache_get_or_encode",
                &[batch.len(), dim],
                t.shape(),
            ));
        }
        for (k, &i) in chunk.iter().enumerate() {
            let row = &t.data()[k * dim..(k + 1) * dim];
            out[i * dim..(i + 1) * dim].copy_from_slice(row);
            if let Some(c) = cache.as_deref_mut() {
                c.insert(nodes[i], row.to_vec(), step);
            }
        }
    }
    Tensor::new(vec![nodes.len(), dim], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    fn n(i: usize) -> NodeRef {
        NodeRef::new(0, i)
    }

    fn cache(capacity: usize, staleness_limit: u64) -> EmbeddingCache {
        EmbeddingCache::new(CacheConfig {
            capacity,
            staleness_limit,
        })
    }

    /// Encoder whose output depends on the call count, so reuse is visible.
    fn counting_encoder(calls: &Cell<usize>) -> impl FnMut(&[NodeRef]) -> Result<Tensor> + '_ {
        move |nodes: &[NodeRef]| {
            calls.set(calls.get() + 1);
            let data = nodes
                .iter()
                .flat_map(|x| [x.id as f64, calls.get() as f64])
                .collect();
            Tensor::new(vec![nodes.len(), 2], data)
        }
    }

    #[test]
    fn capacity_zero_always_misses() {
        let mut c = cache(0, 100);
        let calls = Cell::new(0);
        for step in 0..3 {
            let t = cache_get_or_encode(
                Some(&mut c),
                &[n(1), n(2)],
                step,
                8,
                2,
                counting_encoder(&calls),
            )
            .unwrap();
            assert_eq!(t.data()[0], 1.0);
        }
        assert_eq!(c.counters.hits, 0);
        assert_eq!(c.counters.misses, 6);
        assert!(c.is_empty());
        let direct = cache_get_or_encode(
            None,
            &[n(1), n(2)],
            0,
            8,
            2,
            counting_encoder(&Cell::new(0)),
        )
        .unwrap();
        let mut c0 = cache(0, 0);
        let cached = cache_get_or_encode(
            Some(&mut c0),
            &[n(1), n(2)],
            0,
            8,
            2,
            counting_encoder(&Cell::new(0)),
        )
        .unwrap();
        assert_eq!(direct, cached);
    }

    #[test]
    fn hit_within_window_returns_same_vector() {
        let mut c = cache(10, 5);
        let calls = Cell::new(0);
        let a =
            cache_get_or_encode(Some(&mut c), &[n(3)], 0, 8, 2, counting_encoder(&calls)).unwrap();
        let b =
            cache_get_or_encode(Some(&mut c), &[n(3)], 5, 8, 2, counting_encoder(&calls)).unwrap();
        assert_eq!(a, b);
        assert_eq!(calls.get(), 1);
        assert_eq!(c.counters.hit_rate(), Some(0.5));
    }

    #[test]
    fn stale_entry_is_reencoded() {
        let mut c = cache(10, 10);
        let calls = Cell::new(0);
        cache_get_or_encode(Some(&mut c), &[n(0)], 0, 8, 2, counting_encoder(&calls)).unwrap();
        let b =
            cache_get_or_encode(Some(&mut c), &[n(0)], 20, 8, 2, counting_encoder(&calls)).unwrap();
        assert_eq!(c.counters.hits, 0);
        assert_eq!(b.data()[1], 2.0);
        // the refreshed entry carries the new stamp
        assert!(c.get(n(0), 30).is_some());
    }

    #[test]
    fn lru_eviction_keeps_size_bounded() {
        let mut c = cache(2, 100);
        c.insert(n(0), vec![0.0], 0);
        c.insert(n(1), vec![1.0], 0);
        assert!(c.get(n(0), 0).is_some());
        c.insert(n(2), vec![2.0], 0);
        assert_eq!(c.len(), 2);
        assert_eq!(c.counters.evictions, 1);
        assert!(c.get(n(1), 0).is_none());
        assert!(c.get(n(0), 0).is_some());
        assert!(c.get(n(2), 0).is_some());
    }

    #[test]
    fn misses_are_encoded_in_sub_batches() {
        let mut sizes = Vec::new();
        let nodes: Vec<NodeRef> = (0..10).map(n).collect();
        cache_get_or_encode(None, &nodes, 0, 4, 1, |b: &[NodeRef]| {
            sizes.push(b.len());
            Tensor::new(vec![b.len(), 1], vec![0.0; b.len()])
        })
        .unwrap();
        assert_eq!(sizes, vec![4, 4, 2]);
    }
}
