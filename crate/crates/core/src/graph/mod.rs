//! Heterogeneous graph storage: typed node sets, per-relation CSR
//! adjacency in both directions, node text, labels, and splits.

mod io;
mod partition;
mod sample;
mod synth;

pub use io::{load_graph, save_graph};
pub use partition::{assign_partitions, sample_targets, PartitionMap, TargetMode, TargetSample};
pub use sample::{sample_neighbors, Block, EgoBatch, SamplerConfig, FULL_FANOUT};
pub use synth::{generate_synthetic, modularity, SyntheticSpec};

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A node identified by its type and its dense per-type index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeRef {
    pub ty: usize,
    pub id: usize,
}

impl NodeRef {
    pub fn new(ty: usize, id: usize) -> Self {
        NodeRef { ty, id }
    }
}

impl fmt::Display for NodeRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.ty, self.id)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub src_type: usize,
    pub name: String,
    pub dst_type: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "valid" => Some(Split::Valid),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Edge {
    pub rel: usize,
    pub src: usize,
    pub dst: usize,
}

impl Edge {
    pub fn head(&self, g: &HeteroGraph) -> NodeRef {
        NodeRef::new(g.relations[self.rel].src_type, self.src)
    }

    pub fn tail(&self, g: &HeteroGraph) -> NodeRef {
        NodeRef::new(g.relations[self.rel].dst_type, self.dst)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeLabel {
    pub node: NodeRef,
    pub class: usize,
    pub split: Split,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EdgeLabel {
    pub edge: Edge,
    pub class: usize,
    pub split: Split,
}

/// Compressed sparse rows: neighbours of row `i` are
/// `targets[offsets[i]..offsets[i + 1]]`, sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Csr {
    offsets: Vec<usize>,
    targets: Vec<usize>,
}

impl Csr {
    fn build(rows: usize, pairs: impl Iterator<Item = (usize, usize)>) -> Self {
        let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); rows];
        for (r, c) in pairs {
            buckets[r].push(c);
        }
        let mut offsets = Vec::with_capacity(rows + 1);
        let mut targets = Vec::new();
        offsets.push(0);
        for mut b in buckets {
            b.sort_unstable();
            targets.extend(b);
            offsets.push(targets.len());
        }
        Csr { offsets, targets }
    }

    pub fn neighbors(&self, row: usize) -> &[usize] {
        &self.targets[self.offsets[row]..self.offsets[row + 1]]
    }

    pub fn degree(&self, row: usize) -> usize {
        self.offsets[row + 1] - self.offsets[row]
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        self.neighbors(row).binary_search(&col).is_ok()
    }

    pub fn nnz(&self) -> usize {
        self.targets.len()
    }
}

/// A relation as seen by message passing: either a stored relation (messages
/// flow from its source type to its destination type) or its reverse.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MessageRelation {
    pub base: usize,
    pub reverse: bool,
    /// Type of the nodes that send messages.
    pub sender_type: usize,
    /// Type of the nodes that receive messages.
    pub receiver_type: usize,
}

#[derive(Clone, Debug)]
pub struct HeteroGraph {
    node_types: Vec<String>,
    node_counts: Vec<usize>,
    relations: Vec<Relation>,
    edges: Vec<Vec<(usize, usize)>>,
    forward: Vec<Csr>,
    reverse: Vec<Csr>,
    text: Vec<Vec<String>>,
    node_labels: Vec<NodeLabel>,
    edge_labels: Vec<EdgeLabel>,
}

impl PartialEq for HeteroGraph {
    fn eq(&self, other: &Self) -> bool {
        self.node_types == other.node_types
            && self.node_counts == other.node_counts
            && self.relations == other.relations
            && self.edges == other.edges
            && self.text == other.text
            && self.node_labels == other.node_labels
            && self.edge_labels == other.edge_labels
    }
}

/// Incremental construction of a [`HeteroGraph`]; `build` validates.
#[derive(Clone, Debug, Default)]
pub struct GraphBuilder {
    node_types: Vec<String>,
    text: Vec<Vec<String>>,
    relations: Vec<Relation>,
    edges: Vec<Vec<(usize, usize)>>,
    node_labels: Vec<NodeLabel>,
    edge_labels: Vec<EdgeLabel>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        GraphBuilder::default()
    }

    /// Declares a node type with one text entry per node.
    pub fn node_type(&mut self, name: &str, texts: Vec<String>) -> usize {
        self.node_types.push(name.to_string());
        self.text.push(texts);
        self.node_types.len() - 1
    }

    pub fn relation(&mut self, src_type: usize, name: &str, dst_type: usize) -> usize {
        self.relations.push(Relation {
            src_type,
            name: name.to_string(),
            dst_type,
        });
        self.edges.push(Vec::new());
        self.relations.len() - 1
    }

    pub fn edge(&mut self, rel: usize, src: usize, dst: usize) {
        self.edges[rel].push((src, dst));
    }

    pub fn node_label(&mut self, node: NodeRef, class: usize, split: Split) {
        self.node_labels.push(NodeLabel { node, class, split });
    }

    pub fn edge_label(&mut self, edge: Edge, class: usize, split: Split) {
        self.edge_labels.push(EdgeLabel { edge, class, split });
    }

    pub fn build(self) -> Result<HeteroGraph> {
        let node_counts: Vec<usize> = self.text.iter().map(Vec::len).collect();
        for (r, rel) in self.relations.iter().enumerate() {
            if rel.src_type >= node_counts.len() || rel.dst_type >= node_counts.len() {
                return Err(Error::contract(format!(
                    "relation {} references unknown type",
                    rel.name
                )));
            }
            for &(s, d) in &self.edges[r] {
                if s >= node_counts[rel.src_type] || d >= node_counts[rel.dst_type] {
                    return Err(Error::contract(format!(
                        "edge ({s}, {d}) of relation {} out of range",
                        rel.name
                    )));
                }
            }
        }
        let mut seen = HashMap::new();
        for l in &self.node_labels {
            if l.node.ty >= node_counts.len() || l.node.id >= node_counts[l.node.ty] {
                return Err(Error::contract(format!(
                    "label for unknown node {}",
                    l.node
                )));
            }
            if seen.insert(l.node, ()).is_some() {
                return Err(Error::contract(format!("node {} labelled twice", l.node)));
            }
        }
        for l in &self.edge_labels {
            let e = l.edge;
            let ok = e.rel < self.relations.len() && self.edges[e.rel].contains(&(e.src, e.dst));
            if !ok {
                return Err(Error::contract(format!("label for unknown edge {e:?}")));
            }
        }
        let forward = self
            .relations
            .iter()
            .zip(&self.edges)
            .map(|(rel, es)| Csr::build(node_counts[rel.src_type], es.iter().copied()))
            .collect();
        let reverse = self
            .relations
            .iter()
            .zip(&self.edges)
            .map(|(rel, es)| Csr::build(node_counts[rel.dst_type], es.iter().map(|&(s, d)| (d, s))))
            .collect();
        Ok(HeteroGraph {
            node_types: self.node_types,
            node_counts,
            relations: self.relations,
            edges: self.edges,
            forward,
            reverse,
            text: self.text,
            node_labels: self.node_labels,
            edge_labels: self.edge_labels,
        })
    }
}

impl HeteroGraph {
    pub fn node_types(&self) -> &[String] {
        &self.node_types
    }

    pub fn type_index(&self, name: &str) -> Option<usize> {
        self.node_types.iter().position(|t| t == name)
    }

    pub fn node_counts(&self) -> &[usize] {
        &self.node_counts
    }

    pub fn num_nodes(&self) -> usize {
        self.node_counts.iter().sum()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.iter().map(Vec::len).sum()
    }

    pub fn relations(&self) -> &[Relation] {
        &self.relations
    }

    pub fn relation_index(&self, name: &str) -> Option<usize> {
        self.relations.iter().position(|r| r.name == name)
    }

    /// Edges of a relation in insertion order; duplicates are kept.
    pub fn edges(&self, rel: usize) -> &[(usize, usize)] {
        &self.edges[rel]
    }

    pub fn forward(&self, rel: usize) -> &Csr {
        &self.forward[rel]
    }

    pub fn reverse(&self, rel: usize) -> &Csr {
        &self.reverse[rel]
    }

    pub fn has_edge(&self, rel: usize, src: usize, dst: usize) -> bool {
        self.forward[rel].contains(src, dst)
    }

    pub fn text(&self, node: NodeRef) -> &str {
        &self.text[node.ty][node.id]
    }

    /// A node type carries text when any of its nodes has non-empty text.
    pub fn type_has_text(&self, ty: usize) -> bool {
        self.text[ty].iter().any(|t| !t.is_empty())
    }

    pub fn node_labels(&self) -> &[NodeLabel] {
        &self.node_labels
    }

    pub fn edge_labels(&self) -> &[EdgeLabel] {
        &self.edge_labels
    }

    pub fn num_node_classes(&self) -> usize {
        self.node_labels
            .iter()
            .map(|l| l.class + 1)
            .max()
            .unwrap_or(0)
    }

    pub fn num_edge_classes(&self) -> usize {
        self.edge_labels
            .iter()
            .map(|l| l.class + 1)
            .max()
            .unwrap_or(0)
    }

    pub fn nodes_of_type(&self, ty: usize) -> impl Iterator<Item = NodeRef> {
        (0..self.node_counts[ty]).map(move |id| NodeRef::new(ty, id))
    }

    pub fn all_nodes(&self) -> Vec<NodeRef> {
        (0..self.node_types.len())
            .flat_map(|t| self.nodes_of_type(t))
            .collect()
    }

    /// Global position of a node when all types are laid out in order.
    pub fn global_index(&self, node: NodeRef) -> usize {
        self.node_counts[..node.ty].iter().sum::<usize>() + node.id
    }

    /// Stored relations followed, optionally, by their reverses.
    pub fn message_relations(&self, include_reverse: bool) -> Vec<MessageRelation> {
        let mut out: Vec<MessageRelation> = self
            .relations
            .iter()
            .enumerate()
            .map(|(i, r)| MessageRelation {
                base: i,
                reverse: false,
                sender_type: r.src_type,
                receiver_type: r.dst_type,
            })
            .collect();
        if include_reverse {
            out.extend(
                self.relations
                    .iter()
                    .enumerate()
                    .map(|(i, r)| MessageRelation {
                        base: i,
                        reverse: true,
                        sender_type: r.dst_type,
                        receiver_type: r.src_type,
                    }),
            );
        }
        out
    }

    /// Nodes that send messages to `node` under `rel`.
    pub fn message_senders(&self, rel: MessageRelation, node: NodeRef) -> &[usize] {
        debug_assert_eq!(node.ty, rel.receiver_type);
        if rel.reverse {
            self.forward[rel.base].neighbors(node.id)
        } else {
            self.reverse[rel.base].neighbors(node.id)
        }
    }

    /// Labelled edges of a relation in the given split.
    pub fn labelled_edges(&self, rel: usize, split: Split) -> Vec<EdgeLabel> {
        self.edge_labels
            .iter()
            .filter(|l| l.edge.rel == rel && l.split == split)
            .copied()
            .collect()
    }

    pub fn labelled_nodes(&self, split: Split) -> Vec<NodeLabel> {
        self.node_labels
            .iter()
            .filter(|l| l.split == split)
            .copied()
            .collect()
    }

    /// Copy of the graph with the validation and test edges of `rel` removed
    /// from the adjacency, for message passing during link prediction.
    pub fn without_heldout_edges(&self, rel: usize) -> HeteroGraph {
        let held: Vec<(usize, usize)> = self
            .edge_labels
            .iter()
            .filter(|l| l.edge.rel == rel && l.split != Split::Train)
            .map(|l| (l.edge.src, l.edge.dst))
            .collect();
        self.without_edges(rel, &held)
    }

    /// Copy of the graph with one stored copy of each listed `(src, dst)`
    /// pair of `rel` removed from the adjacency. Labels are kept.
    pub fn without_edges(&self, rel: usize, removed: &[(usize, usize)]) -> HeteroGraph {
        let mut held: HashMap<(usize, usize), usize> = HashMap::new();
        for &e in removed {
            *held.entry(e).or_default() += 1;
        }
        let mut g = self.clone();
        g.edges[rel].retain(|e| match held.get_mut(e) {
            Some(c) if *c > 0 => {
                *c -= 1;
                false
            }
            _ => true,
        });
        let r = &g.relations[rel];
        g.forward[rel] = Csr::build(g.node_counts[r.src_type], g.edges[rel].iter().copied());
        g.reverse[rel] = Csr::build(
            g.node_counts[r.dst_type],
            g.edges[rel].iter().map(|&(s, d)| (d, s)),
        );
        g
    }

    /// Undirected neighbour lists over all relations, indexed by global node
    /// position.
    pub fn undirected_adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_nodes()];
        for (r, rel) in self.relations.iter().enumerate() {
            for &(s, d) in &self.edges[r] {
                let a = self.global_index(NodeRef::new(rel.src_type, s));
                let b = self.global_index(NodeRef::new(rel.dst_type, d));
                adj[a].push(b);
                if a != b {
                    adj[b].push(a);
                }
            }
        }
        adj
    }

    pub fn node_at_global(&self, mut idx: usize) -> NodeRef {
        for (ty, &n) in self.node_counts.iter().enumerate() {
            if idx < n {
                return NodeRef::new(ty, idx);
            }
            idx -= n;
        }
        panic!("global index out of range");
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> HeteroGraph {
        let mut b = GraphBuilder::new();
        let a = b.node_type("a", vec!["x".into(), "y".into(), "z".into()]);
        let r = b.relation(a, "to", a);
        b.edge(r, 0, 1);
        b.edge(r, 0, 2);
        b.edge(r, 2, 1);
        b.edge_label(
            Edge {
                rel: r,
                src: 0,
                dst: 2,
            },
            0,
            Split::Test,
        );
        b.build().unwrap()
    }

    #[test]
    fn reverse_csr_matches_forward() {
        let g = tiny();
        for u in 0..3 {
            for v in 0..3 {
                assert_eq!(g.forward(0).contains(u, v), g.reverse(0).contains(v, u));
            }
        }
        assert_eq!(g.forward(0).nnz(), g.reverse(0).nnz());
    }

    #[test]
    fn heldout_edges_are_removed() {
        let g = tiny().without_heldout_edges(0);
        assert!(!g.has_edge(0, 0, 2));
        assert!(g.has_edge(0, 0, 1));
        assert_eq!(g.num_edges(), 2);
    }

    #[test]
    fn builder_rejects_out_of_range_edge() {
        let mut b = GraphBuilder::new();
        let a = b.node_type("a", vec![String::new()]);
        let r = b.relation(a, "self", a);
        b.edge(r, 0, 1);
        assert!(b.build().is_err());
    }

    #[test]
    fn message_senders_follow_direction() {
        let g = tiny();
        let rels = g.message_relations(true);
        assert_eq!(rels.len(), 2);
        // node 1 receives from 0 and 2 along the stored direction
        assert_eq!(g.message_senders(rels[0], NodeRef::new(0, 1)), &[0, 2]);
        // and from nobody along the reverse
        assert!(g.message_senders(rels[1], NodeRef::new(0, 1)).is_empty());
        assert_eq!(g.message_senders(rels[1], NodeRef::new(0, 0)), &[1, 2]);
    }
}
