use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::{Edge, GraphBuilder, HeteroGraph, NodeRef, Split};
use crate::error::{Error, Result};

pub const NODES_FILE: &str = "nodes.tsv";
pub const EDGES_FILE: &str = "edges.tsv";
pub const NODE_LABELS_FILE: &str = "node_labels.tsv";
pub const EDGE_LABELS_FILE: &str = "edge_labels.tsv";

struct TsvFile {
    path: PathBuf,
    content: String,
}

impl TsvFile {
    fn open(dir: &Path, name: &str) -> Result<Self> {
        let path = dir.join(name);
        let content = fs::read_to_string(&path).map_err(|e| Error::Load {
            file: path.clone(),
            line: 0,
            msg: e.to_string(),
        })?;
        Ok(TsvFile { path, content })
    }

    /// Data rows with their 1-based line numbers, header skipped.
    fn rows(&self) -> impl Iterator<Item = (usize, &str)> {
        self.content
            .lines()
            .enumerate()
            .skip(1)
            .map(|(i, l)| (i + 1, l.strip_suffix('\r').unwrap_or(l)))
            .filter(|(_, l)| !l.is_empty())
    }

    fn err(&self, line: usize, msg: impl Into<String>) -> Error {
        Error::Load {
            file: self.path.clone(),
            line,
            msg: msg.into(),
        }
    }

    fn fields<'a>(&self, line: usize, row: &'a str, n: usize) -> Result<Vec<&'a str>> {
        let f: Vec<&str> = row.split('\t').collect();
        if f.len() != n {
            return Err(self.err(line, format!("expected {n} fields, found {}", f.len())));
        }
        Ok(f)
    }

    fn usize_field(&self, line: usize, s: &str, what: &str) -> Result<usize> {
        s.trim()
            .parse()
            .map_err(|_| self.err(line, format!("malformed {what} {s:?}")))
    }
}

/// Loads a graph directory (`nodes.tsv`, `edges.tsv`, `node_labels.tsv`,
/// `edge_labels.tsv`). Node types are numbered by first appearance in
/// `nodes.tsv`, relations by first appearance in `edges.tsv`.
pub fn load_graph(dir: impl AsRef<Path>) -> Result<HeteroGraph> {
    let dir = dir.as_ref();
    let nodes = TsvFile::open(dir, NODES_FILE)?;

    let mut type_names: Vec<String> = Vec::new();
    let mut texts: Vec<Vec<Option<String>>> = Vec::new();
    for (line, row) in nodes.rows() {
        let mut parts = row.splitn(3, '\t');
        let (Some(ty), Some(id), text) = (parts.next(), parts.next(), parts.next()) else {
            return Err(nodes.err(line, "expected node_type, local_id, text"));
        };
        let id = nodes.usize_field(line, id, "local_id")?;
        let t = match type_names.iter().position(|n| n == ty) {
            Some(t) => t,
            None => {
                type_names.push(ty.to_string());
                texts.push(Vec::new());
                type_names.len() - 1
            }
        };
        let slots = &mut texts[t];
        if slots.len() <= id {
            slots.resize(id + 1, None);
        }
        if slots[id].is_some() {
            return Err(nodes.err(line, format!("duplicate node {ty} {id}")));
        }
        slots[id] = Some(text.unwrap_or("").to_string());
    }

    let mut builder = GraphBuilder::new();
    for (name, slots) in type_names.iter().zip(texts) {
        if let Some(gap) = slots.iter().position(Option::is_none) {
            return Err(Error::Load {
                file: nodes.path.clone(),
                line: 0,
                msg: format!("local ids of type {name} are not dense: {gap} missing"),
            });
        }
        builder.node_type(name, slots.into_iter().flatten().collect());
    }
    let counts: Vec<usize> = builder_counts(&builder);
    let type_of = |f: &TsvFile, line: usize, name: &str| -> Result<usize> {
        type_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| f.err(line, format!("unknown node type {name:?}")))
    };
    let check_id = |f: &TsvFile, line: usize, ty: usize, id: usize| -> Result<()> {
        if id >= counts[ty] {
            return Err(f.err(
                line,
                format!(
                    "endpoint {id} out of range for type {} with {} nodes",
                    type_names[ty], counts[ty]
                ),
            ));
        }
        Ok(())
    };

    let edges = TsvFile::open(dir, EDGES_FILE)?;
    let mut rel_index: HashMap<(usize, String, usize), usize> = HashMap::new();
    for (line, row) in edges.rows() {
        let f = edges.fields(line, row, 5)?;
        let st = type_of(&edges, line, f[0])?;
        let dt = type_of(&edges, line, f[3])?;
        let s = edges.usize_field(line, f[1], "src_id")?;
        let d = edges.usize_field(line, f[4], "dst_id")?;
        check_id(&edges, line, st, s)?;
        check_id(&edges, line, dt, d)?;
        let key = (st, f[2].to_string(), dt);
        let r = match rel_index.get(&key) {
            Some(&r) => r,
            None => {
                let r = builder.relation(st, f[2], dt);
                rel_index.insert(key, r);
                r
            }
        };
        builder.edge(r, s, d);
    }

    let parse_split = |f: &TsvFile, line: usize, s: &str| -> Result<Split> {
        Split::parse(s.trim()).ok_or_else(|| f.err(line, format!("unknown split {s:?}")))
    };

    let labels = TsvFile::open(dir, NODE_LABELS_FILE)?;
    let mut labelled: HashMap<NodeRef, usize> = HashMap::new();
    for (line, row) in labels.rows() {
        let f = labels.fields(line, row, 4)?;
        let ty = type_of(&labels, line, f[0])?;
        let id = labels.usize_field(line, f[1], "local_id")?;
        check_id(&labels, line, ty, id)?;
        let class = labels.usize_field(line, f[2], "class_id")?;
        let split = parse_split(&labels, line, f[3])?;
        let node = NodeRef::new(ty, id);
        if let Some(prev) = labelled.insert(node, line) {
            return Err(labels.err(line, format!("node already labelled on line {prev}")));
        }
        builder.node_label(node, class, split);
    }

    let elabels = TsvFile::open(dir, EDGE_LABELS_FILE)?;
    for (line, row) in elabels.rows() {
        let f = elabels.fields(line, row, 7)?;
        let st = type_of(&elabels, line, f[0])?;
        let dt = type_of(&elabels, line, f[3])?;
        let s = elabels.usize_field(line, f[1], "src_id")?;
        let d = elabels.usize_field(line, f[4], "dst_id")?;
        check_id(&elabels, line, st, s)?;
        check_id(&elabels, line, dt, d)?;
        let rel = *rel_index
            .get(&(st, f[2].to_string(), dt))
            .ok_or_else(|| elabels.err(line, format!("unknown relation {:?}", f[2])))?;
        let class = elabels.usize_field(line, f[5], "class_id")?;
        let split = parse_split(&elabels, line, f[6])?;
        builder.edge_label(
            Edge {
                rel,
                src: s,
                dst: d,
            },
            class,
            split,
        );
    }

    builder.build().map_err(|e| Error::Load {
        file: dir.to_path_buf(),
        line: 0,
        msg: e.to_string(),
    })
}

fn builder_counts(b: &GraphBuilder) -> Vec<usize> {
    b.text.iter().map(Vec::len).collect()
}

fn clean(text: &str) -> String {
    text.replace(['\t', '\n', '\r'], " ")
}

/// Writes the four TSV files. Output is a pure function of the graph.
pub fn save_graph(graph: &HeteroGraph, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let types = graph.node_types();

    let mut w = BufWriter::new(fs::File::create(dir.join(NODES_FILE))?);
    writeln!(w, "node_type\tlocal_id\ttext")?;
    for node in graph.all_nodes() {
        writeln!(
            w,
            "{}\t{}\t{}",
            types[node.ty],
            node.id,
            clean(graph.text(node))
        )?;
    }
    w.flush()?;

    let mut w = BufWriter::new(fs::File::create(dir.join(EDGES_FILE))?);
    writeln!(w, "src_type\tsrc_id\trelation\tdst_type\tdst_id")?;
    for (r, rel) in graph.relations().iter().enumerate() {
        for &(s, d) in graph.edges(r) {
            writeln!(
                w,
                "{}\t{s}\t{}\t{}\t{d}",
                types[rel.src_type], rel.name, types[rel.dst_type]
            )?;
        }
    }
    w.flush()?;

    let mut w = BufWriter::new(fs::File::create(dir.join(NODE_LABELS_FILE))?);
    writeln!(w, "node_type\tlocal_id\tclass_id\tsplit")?;
    for l in graph.node_labels() {
        writeln!(
            w,
            "{}\t{}\t{}\t{}",
            types[l.node.ty], l.node.id, l.class, l.split
        )?;
    }
    w.flush()?;

    let mut w = BufWriter::new(fs::File::create(dir.join(EDGE_LABELS_FILE))?);
    writeln!(
        w,
        "src_type\tsrc_id\trelation\tdst_type\tdst_id\tclass_id\tsplit"
    )?;
    for l in graph.edge_labels() {
        let rel = &graph.relations()[l.edge.rel];
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            types[rel.src_type],
            l.edge.src,
            rel.name,
            types[rel.dst_type],
            l.edge.dst,
            l.class,
            l.split
        )?;
    }
    w.flush()?;
    Ok(())
}
