use serde::{Deserialize, Serialize};

use crate::decoders::{DistMult, LinearHead};
use crate::error::{Error, Result};
use crate::gnn::{Aggregation, GnnConfig, RgcnStack};
use crate::graph::{HeteroGraph, NodeRef};
use crate::tensor::{Module, Param, ParamGroup, Tape, Tensor, Var};
use crate::text::{tokenize, TextEncoderConfig, TextEncoderModel, TokenBatch, Vocab};

/// Shape-relevant description of a graph; a model is only usable on graphs
/// with the same schema.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub node_types: Vec<String>,
    pub node_counts: Vec<usize>,
    pub texted: Vec<bool>,
    pub relations: Vec<(String, String, String)>,
    pub node_classes: usize,
    pub edge_classes: usize,
}

impl Schema {
    pub fn of(graph: &HeteroGraph) -> Self {
        let types = graph.node_types();
        Schema {
            node_types: types.to_vec(),
            node_counts: graph.node_counts().to_vec(),
            texted: (0..types.len()).map(|t| graph.type_has_text(t)).collect(),
            relations: graph
                .relations()
                .iter()
                .map(|r| {
                    (
                        types[r.src_type].clone(),
                        r.name.clone(),
                        types[r.dst_type].clone(),
                    )
                })
                .collect(),
            node_classes: graph.num_node_classes(),
            edge_classes: graph.num_edge_classes(),
        }
    }

    pub fn check_compatible(&self, graph: &HeteroGraph) -> Result<()> {
        let other = Schema::of(graph);
        let mismatch = |what: &str, a: &dyn std::fmt::Debug, b: &dyn std::fmt::Debug| {
            Err(Error::Config(format!(
                "checkpoint {what} {a:?} does not match graph {what} {b:?}"
            )))
        };
        if self.node_types != other.node_types {
            return mismatch("node types", &self.node_types, &other.node_types);
        }
        if self.node_counts != other.node_counts {
            return mismatch("node counts", &self.node_counts, &other.node_counts);
        }
        if self.texted != other.texted {
            return mismatch("text availability", &self.texted, &other.texted);
        }
        if self.relations != other.relations {
            return mismatch("relations", &self.relations, &other.relations);
        }
        if self.node_classes < other.node_classes || self.edge_classes < other.edge_classes {
            return mismatch(
                "class counts",
                &(self.node_classes, self.edge_classes),
                &(other.node_classes, other.edge_classes),
            );
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub text: TextEncoderConfig,
    /// One text encoder per texted node type instead of a shared one.
    pub per_type_encoders: bool,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub aggregation: Aggregation,
    pub activate_last: bool,
    pub include_reverse: bool,
    pub head_bias: bool,
}

/// Text encoder(s), graph encoder, and every decoder of the joint model.
#[derive(Clone, Debug, PartialEq)]
pub struct LmGnnModel {
    pub config: ModelConfig,
    pub schema: Schema,
    pub vocab: Vocab,
    pub encoders: Vec<TextEncoderModel>,
    pub encoder_of_type: Vec<Option<usize>>,
    /// Relation vectors scoring text embeddings during pre-fine-tuning.
    pub lm_decoder: DistMult,
    pub gnn: RgcnStack,
    pub link_decoder: DistMult,
    pub node_head: LinearHead,
    pub edge_head: LinearHead,
}

impl LmGnnModel {
    pub fn new(config: ModelConfig, schema: Schema, vocab: Vocab, seed: u64) -> Result<Self> {
        if config.text.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "text encoder vocabulary {} differs from vocabulary file {}",
                config.text.vocab_size,
                vocab.len()
            )));
        }
        let mut encoders = Vec::new();
        let mut encoder_of_type = Vec::new();
        for (t, &texted) in schema.texted.iter().enumerate() {
            if !texted {
                encoder_of_type.push(None);
            } else if config.per_type_encoders {
                encoders.push(TextEncoderModel::new(
                    config.text.clone(),
                    &format!("lm.t{t}"),
                    seed ^ (t as u64 + 1),
                )?);
                encoder_of_type.push(Some(encoders.len() - 1));
            } else {
                if encoders.is_empty() {
                    encoders.push(TextEncoderModel::new(config.text.clone(), "lm", seed)?);
                }
                encoder_of_type.push(Some(0));
            }
        }
        let relations = schema.relations.len();
        let message_relations = relations * if config.include_reverse { 2 } else { 1 };
        let gnn_config = GnnConfig {
            in_dim: config.text.dim,
            hidden_dim: config.hidden_dim,
            layers: config.num_layers,
            relations: message_relations,
            aggregation: config.aggregation,
            activate_last: config.activate_last,
        };
        let featureless: Vec<Option<usize>> = schema
            .texted
            .iter()
            .zip(&schema.node_counts)
            .map(|(&texted, &n)| (!texted).then_some(n))
            .collect();
        let gnn = RgcnStack::new(gnn_config, &featureless, seed.wrapping_add(101))?;
        let h = config.hidden_dim;
        Ok(LmGnnModel {
            lm_decoder: DistMult::new(
                "lm_decoder",
                ParamGroup::LmDecoder,
                relations.max(1),
                config.text.dim,
                seed.wrapping_add(202),
            ),
            link_decoder: DistMult::new(
                "link_decoder",
                ParamGroup::Head,
                relations.max(1),
                h,
                seed.wrapping_add(303),
            ),
            node_head: LinearHead::new(
                "node_head",
                h,
                schema.node_classes.max(1),
                config.head_bias,
                seed.wrapping_add(404),
            ),
            edge_head: LinearHead::new(
                "edge_head",
                2 * h,
                schema.edge_classes.max(1),
                config.head_bias,
                seed.wrapping_add(505),
            ),
            gnn,
            encoders,
            encoder_of_type,
            schema,
            vocab,
            config,
        })
    }

    pub fn text_dim(&self) -> usize {
        self.config.text.dim
    }

    pub fn is_texted(&self, ty: usize) -> bool {
        self.encoder_of_type.get(ty).is_some_and(Option::is_some)
    }

    /// Copies every parameter value from `other` (same architecture).
    pub fn load_values_from(&mut self, other: &LmGnnModel) {
        for (dst, src) in self.params_mut().into_iter().zip(other.params()) {
            debug_assert_eq!(dst.name(), src.name());
            *dst.value_mut() = src.value().clone();
        }
    }
}

impl Module for LmGnnModel {
    fn params(&self) -> Vec<&Param> {
        let mut v = Vec::new();
        for e in &self.encoders {
            v.extend(e.params());
        }
        v.extend(self.lm_decoder.params());
        v.extend(self.gnn.params());
        v.extend(self.link_decoder.params());
        v.extend(self.node_head.params());
        v.extend(self.edge_head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = Vec::new();
        for e in &mut self.encoders {
            v.extend(e.params_mut());
        }
        v.extend(self.lm_decoder.params_mut());
        v.extend(self.gnn.params_mut());
        v.extend(self.link_decoder.params_mut());
        v.extend(self.node_head.params_mut());
        v.extend(self.edge_head.params_mut());
        v
    }
}

/// Token ids of every node of every texted type.
#[derive(Clone, Debug, PartialEq)]
pub struct TextFeatures {
    ids: Vec<Option<Vec<Vec<usize>>>>,
}

impl TextFeatures {
    pub fn new(graph: &HeteroGraph, model: &LmGnnModel) -> Result<Self> {
        let max_len = model.config.text.max_len;
        let ids = (0..graph.node_types().len())
            .map(|t| {
                if !model.is_texted(t) {
                    return Ok(None);
                }
                graph
                    .nodes_of_type(t)
                    .map(|n| tokenize(&model.vocab, graph.text(n), max_len))
                    .collect::<Result<Vec<_>>>()
                    .map(Some)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TextFeatures { ids })
    }

    pub fn tokens(&self, node: NodeRef) -> Option<&[usize]> {
        self.ids
            .get(node.ty)?
            .as_ref()
            .map(|rows| rows[node.id].as_slice())
    }

    pub fn is_texted(&self, ty: usize) -> bool {
        self.ids.get(ty).is_some_and(Option::is_some)
    }

    /// Every node that has text, in type-then-id order.
    pub fn texted_nodes(&self) -> Vec<NodeRef> {
        let mut out = Vec::new();
        for (t, rows) in self.ids.iter().enumerate() {
            if let Some(rows) = rows {
                out.extend((0..rows.len()).map(|i| NodeRef::new(t, i)));
            }
        }
        out
    }
}

/// `[CLS]` embeddings of `nodes` (all texted), one row per node, in order.
pub fn encode_nodes(
    tape: &Tape,
    model: &LmGnnModel,
    text: &TextFeatures,
    nodes: &[NodeRef],
) -> Result<Var> {
    if nodes.is_empty() {
        return Ok(tape.constant(Tensor::zeros(&[0, model.text_dim()])));
    }
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); model.encoders.len()];
    for (i, n) in nodes.iter().enumerate() {
        let e = model
            .encoder_of_type
            .get(n.ty)
            .copied()
            .flatten()
            .ok_or_else(|| Error::contract(format!("node {n} has no text encoder")))?;
        groups[e].push(i);
    }
    let mut parts = Vec::new();
    let mut order = vec![0usize; nodes.len()];
    let mut offset = 0;
    for (e, members) in groups.iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let rows: Vec<Vec<usize>> = members
            .iter()
            .map(|&i| text.tokens(nodes[i]).expect("texted node").to_vec())
            .collect();
        let batch = TokenBatch::from_rows(&rows)?.trimmed();
        parts.push(model.encoders[e].encode_cls(tape, &batch)?);
        for (k, &i) in members.iter().enumerate() {
            order[i] = offset + k;
        }
        offset += members.len();
    }
    if parts.len() == 1 {
        return Ok(parts[0]).and_then(|p| {
            if order.iter().enumerate().all(|(i, &o)| i == o) {
                Ok(p)
            } else {
                tape.gather_rows(p, &order)
            }
        });
    }
    let all = tape.concat_rows(&parts)?;
    tape.gather_rows(all, &order)
}

/// Forward-only encoding in chunks of `chunk` nodes.
pub fn encode_nodes_no_grad(
    model: &LmGnnModel,
    text: &TextFeatures,
    nodes: &[NodeRef],
    chunk: usize,
) -> Result<Tensor> {
    let f = model.text_dim();
    let mut data = Vec::with_capacity(nodes.len() * f);
    for part in nodes.chunks(chunk.max(1)) {
        let tape = Tape::no_grad();
        let v = encode_nodes(&tape, model, text, part)?;
        data.extend_from_slice(tape.value(v).data());
    }
    Tensor::new(vec![nodes.len(), f], data)
}
