use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::budget::{split_train_inference, NodeBudget};
use super::cache::{cache_get_or_encode, CacheConfig, EmbeddingCache};
use super::checkpoint::{save_checkpoint, CheckpointMeta};
use super::eval::{evaluate, EvalConfig, FeatureTable};
use super::model::{encode_nodes, encode_nodes_no_grad, LmGnnModel, TextFeatures};
use super::{derive_seed, EpochRecord, MetricsLog, StageKind, StageSpec, StepRecord, Task};
use crate::decoders::{edge_loss, link_loss, node_loss};
use crate::error::{Error, Result};
use crate::gnn::{gnn_forward, NodeFeatures};
use crate::graph::{
    assign_partitions, sample_neighbors, sample_targets, EdgeLabel, EgoBatch, HeteroGraph,
    NodeLabel, NodeRef, PartitionMap, SamplerConfig, Split, TargetMode,
};
use crate::metrics::EvalReport;
use crate::negative::{corrupt, NegativeMode, Triplet};
use crate::tensor::{Adam, AdamConfig, Module, Tape, Var};
use crate::text::TokenBatch;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub task: Task,
    pub stages: Vec<StageSpec>,
    /// Positive edges, labelled nodes or labelled edges per step.
    pub batch_size: usize,
    /// Caps the number of steps in an epoch (an epoch otherwise covers the
    /// training pool once in expectation).
    pub steps_per_epoch: Option<usize>,
    pub learning_rate: f64,
    pub sampler: SamplerConfig,
    pub negatives_k: usize,
    pub negative_mode: NegativeMode,
    pub budget: NodeBudget,
    pub cache: Option<CacheConfig>,
    pub target_mode: TargetMode,
    /// Initialise the link decoder from the pre-fine-tuned relation vectors
    /// when the dimensions agree.
    pub warm_decoder: bool,
    pub eval: EvalConfig,
    pub seed: u64,
}

/// The graph views and training pools one run works with.
pub struct TaskData {
    pub full: HeteroGraph,
    /// Graph messages flow over: held-out target edges removed for link
    /// prediction, the full graph otherwise.
    pub message: HeteroGraph,
    pub text: TextFeatures,
    pub target_relation: Option<usize>,
    pub partitions: Option<PartitionMap>,
    link_train: Vec<Triplet>,
    pretrain_edges: Vec<Triplet>,
    node_train: Vec<NodeLabel>,
    edge_train: Vec<EdgeLabel>,
}

fn triplets_of(graph: &HeteroGraph, rel: usize) -> impl Iterator<Item = Triplet> + '_ {
    let r = &graph.relations()[rel];
    graph.edges(rel).iter().map(move |&(s, d)| Triplet {
        head: NodeRef::new(r.src_type, s),
        rel,
        tail: NodeRef::new(r.dst_type, d),
    })
}

impl TaskData {
    /// `partition` is `(leaf count, seed)` for partition-local targets.
    pub fn new(
        full: HeteroGraph,
        model: &LmGnnModel,
        task: Task,
        target_relation: Option<&str>,
        partition: Option<(usize, u64)>,
    ) -> Result<Self> {
        model.schema.check_compatible(&full)?;
        let target_relation =
            match target_relation {
                Some(name) => Some(full.relation_index(name).ok_or_else(|| {
                    Error::Config(format!("graph has no relation named {name:?}"))
                })?),
                None if task == Task::Link => {
                    let labelled = (0..full.relations().len())
                        .find(|&r| full.edge_labels().iter().any(|l| l.edge.rel == r));
                    Some(labelled.unwrap_or(0)).filter(|_| !full.relations().is_empty())
                }
                None => None,
            };
        let message = match (task, target_relation) {
            (Task::Link, Some(rel)) => full.without_heldout_edges(rel),
            _ => full.clone(),
        };
        let text = TextFeatures::new(&full, model)?;
        let link_train = target_relation
            .map(|r| triplets_of(&message, r).collect())
            .unwrap_or_default();
        let pretrain_edges = (0..message.relations().len())
            .filter(|&r| {
                let rel = &message.relations()[r];
                text.is_texted(rel.src_type) && text.is_texted(rel.dst_type)
            })
            .flat_map(|r| triplets_of(&message, r))
            .collect();
        let partitions = match partition {
            Some((leaves, seed)) => Some(assign_partitions(&message, leaves, seed)?),
            None => None,
        };
        Ok(TaskData {
            node_train: full.labelled_nodes(Split::Train),
            edge_train: full
                .edge_labels()
                .iter()
                .filter(|l| l.split == Split::Train)
                .copied()
                .collect(),
            full,
            message,
            text,
            target_relation,
            partitions,
            link_train,
            pretrain_edges,
        })
    }

    /// Number of training items an epoch of `spec` draws from.
    pub fn pool_len(&self, spec: &StageSpec) -> usize {
        match (spec.kind, spec.task) {
            (StageKind::PreFineTuneLM, _) => self.pretrain_edges.len(),
            (_, Task::Link) => self.link_train.len(),
            (_, Task::Node) => self.node_train.len(),
            (_, Task::Edge) => self.edge_train.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageOutcome {
    pub kind: StageKind,
    /// Mean training loss of every epoch.
    pub epoch_losses: Vec<f64>,
    /// Validation metric after every epoch (GNN stages only).
    pub epoch_metrics: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub best_metric: Option<f64>,
}

struct StepOut {
    loss: Var,
    unique_nodes: usize,
    targets: Vec<NodeRef>,
}

/// Owns the mutable training state shared by the stages of one run.
pub struct Trainer<'a> {
    pub config: &'a TrainConfig,
    pub data: &'a TaskData,
    pub log: &'a mut MetricsLog,
    pub cache: Option<EmbeddingCache>,
    /// Optimizer steps taken so far; cache entries are stamped with it.
    pub global_step: u64,
    /// Where a diagnostic snapshot goes if a loss turns non-finite.
    pub snapshot_dir: Option<PathBuf>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: &'a TrainConfig, data: &'a TaskData, log: &'a mut MetricsLog) -> Self {
        Trainer {
            config,
            data,
            log,
            cache: config.cache.map(EmbeddingCache::new),
            global_step: 0,
            snapshot_dir: None,
        }
    }

    fn steps_per_epoch(&self, spec: &StageSpec) -> usize {
        let pool = self.data.pool_len(spec);
        let steps = pool.div_ceil(self.config.batch_size.max(1)).max(1);
        self.config
            .steps_per_epoch
            .map_or(steps, |cap| steps.min(cap))
    }

    /// Text features for `nodes` (all texted) with gradients through the
    /// encoder for a budgeted subset and cached or forward-only rows for the
    /// rest.
    fn live_text_features(
        &mut self,
        tape: &Tape,
        model: &LmGnnModel,
        nodes: &[NodeRef],
        seed: u64,
    ) -> Result<NodeFeatures> {
        let split = split_train_inference(nodes, &self.config.budget, seed)?;
        let train = encode_nodes(tape, model, &self.data.text, &split.train)?;
        let step = self.global_step;
        let f = model.text_dim();
        if let Some(cache) = &mut self.cache {
            let value = tape.value(train);
            for (i, &n) in split.train.iter().enumerate() {
                cache.insert(n, value.row(i).to_vec(), step);
            }
        }
        let rest: Vec<NodeRef> = split.inference.concat();
        if rest.is_empty() {
            return Ok(NodeFeatures::new(&split.train, train));
        }
        let text = &self.data.text;
        let inferred = cache_get_or_encode(
            self.cache.as_mut(),
            &rest,
            step,
            self.config.budget.inference_batch_size,
            f,
            |b| encode_nodes_no_grad(model, text, b, b.len()),
        )?;
        let values = tape.concat_rows(&[train, tape.constant(inferred)])?;
        let order: Vec<NodeRef> = split.train.iter().chain(&rest).copied().collect();
        Ok(NodeFeatures::new(&order, values))
    }

    fn gnn_features(
        &mut self,
        tape: &Tape,
        model: &LmGnnModel,
        ego: &EgoBatch,
        frozen: Option<&FeatureTable>,
        seed: u64,
    ) -> Result<NodeFeatures> {
        if let Some(table) = frozen {
            return Ok(table.features(tape, ego.input_nodes()));
        }
        let mut seen = HashSet::new();
        let texted: Vec<NodeRef> = ego
            .input_nodes()
            .iter()
            .copied()
            .filter(|n| model.is_texted(n.ty) && seen.insert(*n))
            .collect();
        self.live_text_features(tape, model, &texted, seed)
    }

    fn pretrain_loss(&mut self, tape: &Tape, model: &LmGnnModel, seed: u64) -> Result<StepOut> {
        let cfg = self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sample = sample_targets(
            &self.data.pretrain_edges,
            |t| t.head,
            cfg.batch_size,
            cfg.target_mode,
            self.data.partitions.as_ref(),
            &mut rng,
        )?;
        let batch = corrupt(
            cfg.negative_mode,
            &sample.items,
            cfg.negatives_k,
            &self.data.message,
            derive_seed(seed, &[1]),
        )?;
        let nodes = batch.distinct_endpoints.clone();
        let feats = self.live_text_features(tape, model, &nodes, derive_seed(seed, &[2]))?;
        let heads: Vec<usize> = batch.triplets.iter().map(|t| feats.rows[&t.head]).collect();
        let tails: Vec<usize> = batch.triplets.iter().map(|t| feats.rows[&t.tail]).collect();
        let rels: Vec<usize> = batch.triplets.iter().map(|t| t.rel).collect();
        let hv = tape.gather_rows(feats.values, &heads)?;
        let tv = tape.gather_rows(feats.values, &tails)?;
        let scores = model.lm_decoder.score_rows(tape, hv, &rels, tv)?;
        Ok(StepOut {
            loss: link_loss(tape, &batch, scores)?,
            unique_nodes: nodes.len(),
            targets: nodes,
        })
    }

    fn embed_targets(
        &mut self,
        tape: &Tape,
        model: &LmGnnModel,
        targets: &[NodeRef],
        frozen: Option<&FeatureTable>,
        seed: u64,
        hide: Option<(usize, &[(usize, usize)])>,
    ) -> Result<(EgoBatch, Var)> {
        let pruned;
        let graph = match hide {
            Some((rel, edges)) => {
                pruned = self.data.message.without_edges(rel, edges);
                &pruned
            }
            None => &self.data.message,
        };
        let ego = sample_neighbors(
            graph,
            targets,
            &self.config.sampler,
            derive_seed(seed, &[3]),
        )?;
        let feats = self.gnn_features(tape, model, &ego, frozen, derive_seed(seed, &[4]))?;
        let h = gnn_forward(tape, &model.gnn, &ego, Some(&feats))?;
        Ok((ego, h))
    }

    fn gnn_loss(
        &mut self,
        tape: &Tape,
        model: &LmGnnModel,
        task: Task,
        frozen: Option<&FeatureTable>,
        seed: u64,
    ) -> Result<StepOut> {
        let cfg = self.config;
        let data = self.data;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let parts = data.partitions.as_ref();
        let rows_of = |ego: &EgoBatch, nodes: &mut dyn Iterator<Item = NodeRef>| -> Vec<usize> {
            nodes
                .map(|n| ego.target_position(n).expect("node is a batch target"))
                .collect()
        };
        match task {
            Task::Link => {
                let s = sample_targets(
                    &data.link_train,
                    |t| t.head,
                    cfg.batch_size,
                    cfg.target_mode,
                    parts,
                    &mut rng,
                )?;
                let batch = corrupt(
                    cfg.negative_mode,
                    &s.items,
                    cfg.negatives_k,
                    &data.message,
                    derive_seed(seed, &[1]),
                )?;
                let targets = batch.distinct_endpoints.clone();
                // The edges being scored must not also carry messages.
                let rel = data
                    .target_relation
                    .expect("link data has a target relation");
                let positives: Vec<(usize, usize)> =
                    s.items.iter().map(|t| (t.head.id, t.tail.id)).collect();
                let (ego, h) = self.embed_targets(
                    tape,
                    model,
                    &targets,
                    frozen,
                    seed,
                    Some((rel, &positives)),
                )?;
                let heads = rows_of(&ego, &mut batch.triplets.iter().map(|t| t.head));
                let tails = rows_of(&ego, &mut batch.triplets.iter().map(|t| t.tail));
                let rels: Vec<usize> = batch.triplets.iter().map(|t| t.rel).collect();
                let hv = tape.gather_rows(h, &heads)?;
                let tv = tape.gather_rows(h, &tails)?;
                let scores = model.link_decoder.score_rows(tape, hv, &rels, tv)?;
                let loss = link_loss(tape, &batch, scores)?;
                Ok(StepOut {
                    loss,
                    unique_nodes: ego.unique_input_count(),
                    targets,
                })
            }
            Task::Node => {
                let s = sample_targets(
                    &data.node_train,
                    |l| l.node,
                    cfg.batch_size,
                    cfg.target_mode,
                    parts,
                    &mut rng,
                )?;
                let targets: Vec<NodeRef> = s.items.iter().map(|l| l.node).collect();
                let (ego, h) = self.embed_targets(tape, model, &targets, frozen, seed, None)?;
                let rows = rows_of(&ego, &mut targets.iter().copied());
                let x = tape.gather_rows(h, &rows)?;
                let labels: Vec<usize> = s.items.iter().map(|l| l.class).collect();
                let loss = node_loss(tape, &model.node_head, x, &labels)?;
                Ok(StepOut {
                    loss,
                    unique_nodes: ego.unique_input_count(),
                    targets,
                })
            }
            Task::Edge => {
                let full = &data.full;
                let s = sample_targets(
                    &data.edge_train,
                    |l| l.edge.head(full),
                    cfg.batch_size,
                    cfg.target_mode,
                    parts,
                    &mut rng,
                )?;
                let targets: Vec<NodeRef> = s
                    .items
                    .iter()
                    .flat_map(|l| [l.edge.head(full), l.edge.tail(full)])
                    .collect();
                let (ego, h) = self.embed_targets(tape, model, &targets, frozen, seed, None)?;
                let heads = rows_of(&ego, &mut s.items.iter().map(|l| l.edge.head(full)));
                let tails = rows_of(&ego, &mut s.items.iter().map(|l| l.edge.tail(full)));
                let hv = tape.gather_rows(h, &heads)?;
                let tv = tape.gather_rows(h, &tails)?;
                let labels: Vec<usize> = s.items.iter().map(|l| l.class).collect();
                let loss = edge_loss(tape, &model.edge_head, hv, tv, &labels)?;
                Ok(StepOut {
                    loss,
                    unique_nodes: ego.unique_input_count(),
                    targets,
                })
            }
        }
    }

    fn nan_snapshot(
        &self,
        label: &str,
        epoch: usize,
        step: usize,
        seed: u64,
        loss: f64,
        out: &StepOut,
    ) -> Result<()> {
        let Some(dir) = &self.snapshot_dir else {
            return Ok(());
        };
        let snapshot = serde_json::json!({
            "stage": label,
            "epoch": epoch,
            "step": step,
            "global_step": self.global_step,
            "seed": seed,
            "loss": loss.to_string(),
            "targets": out.targets.iter().map(ToString::to_string).collect::<Vec<_>>(),
        });
        fs::create_dir_all(dir)?;
        fs::write(
            dir.join("nan_snapshot.json"),
            serde_json::to_string_pretty(&snapshot)?,
        )?;
        Ok(())
    }

    /// Trains one stage. For stages with a graph encoder the validation
    /// metric is computed after every epoch and the best epoch's parameters
    /// are restored at the end.
    pub fn train_stage(
        &mut self,
        model: &mut LmGnnModel,
        index: usize,
        spec: &StageSpec,
    ) -> Result<StageOutcome> {
        if spec.kind == StageKind::PreFineTuneLM && spec.task != Task::Link {
            return Err(Error::contract(format!(
                "pre-fine-tuning predicts edges; task {} is not supported",
                spec.task
            )));
        }
        let label = spec.kind.as_str();
        let cfg = self.config;
        let mut adam = Adam::new(AdamConfig::with_lr(
            spec.learning_rate.unwrap_or(cfg.learning_rate),
        ))?;
        let steps = self.steps_per_epoch(spec);
        let mut outcome = StageOutcome {
            kind: spec.kind,
            epoch_losses: Vec::new(),
            epoch_metrics: Vec::new(),
            best_epoch: None,
            best_metric: None,
        };
        let mut best: Option<LmGnnModel> = None;
        for epoch in 0..spec.epochs {
            // The text encoder cannot change during a stage that freezes it.
            let frozen = if spec.kind.uses_gnn() && !spec.kind.trains_lm() {
                Some(FeatureTable::compute(
                    model,
                    &self.data.text,
                    cfg.eval.batch_size,
                )?)
            } else {
                None
            };
            let mut total = 0.0;
            for step in 0..steps {
                let seed = derive_seed(cfg.seed, &[index as u64, epoch as u64, step as u64]);
                let start = Instant::now();
                let before = self.cache.as_ref().map(|c| c.counters);
                let tape = Tape::with_groups(spec.kind.trainable());
                let out = if spec.kind == StageKind::PreFineTuneLM {
                    self.pretrain_loss(&tape, model, seed)?
                } else {
                    self.gnn_loss(&tape, model, spec.task, frozen.as_ref(), seed)?
                };
                let loss = tape.value(out.loss).item();
                if !loss.is_finite() {
                    self.nan_snapshot(label, epoch, step, seed, loss, &out)?;
                    return Err(Error::Numerical(format!(
                        "{label} loss is {loss} at epoch {epoch}, step {step}"
                    )));
                }
                let grads = tape.param_grads(&tape.backward(out.loss)?);
                adam.step(&mut model.params_mut(), &grads)?;
                self.global_step += 1;
                total += loss;
                let cache_hit_rate = match (before, &self.cache) {
                    (Some(b), Some(c)) => {
                        let hits = c.counters.hits - b.hits;
                        let lookups = hits + c.counters.misses - b.misses;
                        (lookups > 0).then(|| hits as f64 / lookups as f64)
                    }
                    _ => None,
                };
                self.log.step(&StepRecord {
                    stage: label.to_string(),
                    step: self.global_step,
                    loss,
                    cache_hit_rate,
                    unique_nodes: out.unique_nodes,
                    elapsed_ms: start.elapsed().as_millis() as u64,
                })?;
            }
            let mean = total / steps as f64;
            outcome.epoch_losses.push(mean);
            if spec.kind.uses_gnn() {
                let report = self.evaluate(model, spec.task, Split::Valid)?;
                let metric = spec.task.primary_metric();
                let value = report.metrics[metric];
                info!("{label} epoch {epoch}: train loss {mean:.4}, valid {metric} {value:.4}");
                self.log.epoch(&EpochRecord {
                    stage: label.to_string(),
                    epoch,
                    split: "valid".into(),
                    metric_name: metric.into(),
                    value,
                })?;
                outcome.epoch_metrics.push(value);
                if outcome.best_metric.is_none_or(|b| value > b) {
                    outcome.best_metric = Some(value);
                    outcome.best_epoch = Some(epoch);
                    best = Some(model.clone());
                }
            } else {
                info!("{label} epoch {epoch}: train loss {mean:.4}");
                self.log.epoch(&EpochRecord {
                    stage: label.to_string(),
                    epoch,
                    split: "train".into(),
                    metric_name: "loss".into(),
                    value: mean,
                })?;
            }
        }
        if let Some(b) = best {
            *model = b;
        }
        self.log.flush()?;
        Ok(outcome)
    }

    pub fn evaluate(&self, model: &LmGnnModel, task: Task, split: Split) -> Result<EvalReport> {
        let d = self.data;
        evaluate(
            model,
            &d.full,
            &d.message,
            &d.text,
            task,
            d.target_relation,
            split,
            &self.config.eval,
        )
    }
}

/// Trains only the text encoder and its relation vectors on edge
/// prediction.
pub fn pre_finetune_lm(
    model: &mut LmGnnModel,
    data: &TaskData,
    config: &TrainConfig,
    epochs: usize,
    log: &mut MetricsLog,
) -> Result<StageOutcome> {
    let mut trainer = Trainer::new(config, data, log);
    trainer.train_stage(
        model,
        0,
        &StageSpec::new(StageKind::PreFineTuneLM, epochs, Task::Link),
    )
}

/// Masked-token pre-training of every text encoder on the graph's texts.
#[allow(clippy::too_many_arguments)]
pub fn mlm_pretrain(
    model: &mut LmGnnModel,
    text: &TextFeatures,
    steps: usize,
    batch_size: usize,
    learning_rate: f64,
    mask_prob: f64,
    seed: u64,
    log: &mut MetricsLog,
) -> Result<Vec<f64>> {
    let mut losses = Vec::new();
    let nodes = text.texted_nodes();
    for e in 0..model.encoders.len() {
        let own: Vec<NodeRef> = nodes
            .iter()
            .copied()
            .filter(|n| model.encoder_of_type[n.ty] == Some(e))
            .collect();
        if own.is_empty() {
            continue;
        }
        let mut adam = Adam::new(AdamConfig::with_lr(learning_rate))?;
        for step in 0..steps {
            let s = derive_seed(seed, &[u64::MAX, e as u64, step as u64]);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let picked = rand::seq::index::sample(&mut rng, own.len(), batch_size.min(own.len()));
            let rows: Vec<Vec<usize>> = picked
                .iter()
                .map(|i| text.tokens(own[i]).expect("texted").to_vec())
                .collect();
            let batch = TokenBatch::from_rows(&rows)?.trimmed();
            let start = Instant::now();
            let r = model.encoders[e].mlm_pretrain_step(
                &mut adam,
                &batch,
                mask_prob,
                derive_seed(s, &[1]),
            )?;
            if !r.empty {
                losses.push(r.loss);
            }
            log.step(&StepRecord {
                stage: "MLM".into(),
                step: step as u64 + 1,
                loss: r.loss,
                cache_hit_rate: None,
                unique_nodes: rows.len(),
                elapsed_ms: start.elapsed().as_millis() as u64,
            })?;
        }
    }
    Ok(losses)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub stages: Vec<StageOutcome>,
    /// Stage whose end-of-stage parameters scored best on validation.
    pub best_stage: Option<usize>,
    pub test: Option<EvalReport>,
}

fn validate_plan(model: &LmGnnModel, data: &TaskData, config: &TrainConfig) -> Result<()> {
    if config.stages.is_empty() {
        return Err(Error::contract("stage plan is empty"));
    }
    if config.batch_size == 0 || config.negatives_k == 0 {
        return Err(Error::contract(
            "batch_size and negatives_k must be positive",
        ));
    }
    config.budget.validate()?;
    if model.gnn.config.in_dim != model.text_dim() {
        return Err(Error::contract(format!(
            "graph encoder expects {}-dimensional inputs, text encoder emits {}",
            model.gnn.config.in_dim,
            model.text_dim()
        )));
    }
    let h = model.gnn.out_dim();
    if model.link_decoder.dim() != h
        || model.node_head.in_dim() != h
        || model.edge_head.in_dim() != 2 * h
    {
        return Err(Error::contract(format!(
            "decoder dimensions do not match graph encoder output {h}"
        )));
    }
    if model.lm_decoder.dim() != model.text_dim() {
        return Err(Error::contract(
            "pre-fine-tuning decoder does not match text dimension",
        ));
    }
    if model.gnn.layers.len() != config.sampler.num_layers
        || config.eval.sampler.num_layers != config.sampler.num_layers
    {
        return Err(Error::contract(format!(
            "graph encoder has {} layers, sampler {}",
            model.gnn.layers.len(),
            config.sampler.num_layers
        )));
    }
    for s in &config.stages {
        if s.kind == StageKind::PreFineTuneLM {
            if s.task != Task::Link {
                return Err(Error::contract("pre-fine-tuning must use the link task"));
            }
            if data.pretrain_edges.is_empty() {
                return Err(Error::contract(
                    "pre-fine-tuning needs a relation between node types with text",
                ));
            }
            continue;
        }
        let empty = match s.task {
            Task::Link => data.link_train.is_empty(),
            Task::Node => data.node_train.is_empty(),
            Task::Edge => data.edge_train.is_empty(),
        };
        if empty {
            return Err(Error::contract(format!(
                "no training data for the {} task",
                s.task
            )));
        }
    }
    Ok(())
}

/// Runs every stage of `config.stages` in order, each starting from the
/// previous one's parameters. With `out_dir`, writes one checkpoint per
/// stage, a `best` checkpoint and `test_report.json`. On return `model`
/// holds the best parameters.
pub fn run_stagewise(
    model: &mut LmGnnModel,
    data: &TaskData,
    config: &TrainConfig,
    log: &mut MetricsLog,
    out_dir: Option<&Path>,
) -> Result<RunOutcome> {
    validate_plan(model, data, config)?;
    let target_name = data
        .target_relation
        .map(|r| data.full.relations()[r].name.clone());
    let meta = |stage: String| CheckpointMeta {
        stage,
        task: config.task,
        target_relation: target_name.clone(),
        eval: config.eval.clone(),
    };
    let mut trainer = Trainer::new(config, data, log);
    trainer.snapshot_dir = out_dir.map(Path::to_path_buf);
    let mut stages = Vec::new();
    let mut best: Option<(f64, usize, LmGnnModel)> = None;
    let mut pretrained = false;
    let mut warmed = false;
    for (i, spec) in config.stages.iter().enumerate() {
        if spec.kind == StageKind::PreFineTuneLM {
            pretrained = true;
        } else if pretrained && !warmed && spec.task == Task::Link && config.warm_decoder {
            warmed = true;
            if model.lm_decoder.dim() == model.link_decoder.dim() {
                *model.link_decoder.relations.value_mut() =
                    model.lm_decoder.relations.value().clone();
            } else {
                info!(
                    "link decoder starts cold: text dimension {} differs from hidden dimension {}",
                    model.lm_decoder.dim(),
                    model.link_decoder.dim()
                );
            }
        }
        let outcome = trainer.train_stage(model, i, spec)?;
        if let Some(dir) = out_dir {
            save_checkpoint(
                &dir.join("checkpoints")
                    .join(format!("stage{}-{}", i + 1, spec.kind)),
                model,
                &meta(spec.kind.to_string()),
            )?;
        }
        if let Some(m) = outcome.best_metric {
            if best.as_ref().is_none_or(|(b, _, _)| m > *b) {
                best = Some((m, i, model.clone()));
            }
        }
        stages.push(outcome);
    }
    let best_stage = best.as_ref().map(|b| b.1);
    if let Some((_, _, m)) = best {
        *model = m;
    }
    let test = if config.stages.iter().any(|s| s.kind.uses_gnn()) {
        Some(trainer.evaluate(model, config.task, Split::Test)?)
    } else {
        None
    };
    if let Some(dir) = out_dir {
        save_checkpoint(
            &dir.join("checkpoints").join("best"),
            model,
            &meta("best".into()),
        )?;
        if let Some(report) = &test {
            fs::write(
                dir.join("test_report.json"),
                serde_json::to_string_pretty(report)?,
            )?;
        }
    }
    trainer.log.flush()?;
    Ok(RunOutcome {
        stages,
        best_stage,
        test,
    })
}
