//! Stage-wise training of text encoder, graph encoder and decoders.

mod budget;
mod cache;
pub mod checkpoint;
mod eval;
mod model;
mod train;

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{GroupSet, ParamGroup};

pub use budget::{split_train_inference, NodeBudget, NodeSplit};
pub use cache::{cache_get_or_encode, CacheConfig, CacheCounters, EmbeddingCache};
pub use eval::{evaluate, node_embeddings, EvalConfig, FeatureTable};
pub use model::{
    encode_nodes, encode_nodes_no_grad, LmGnnModel, ModelConfig, Schema, TextFeatures,
};
pub use train::{
    mlm_pretrain, pre_finetune_lm, run_stagewise, RunOutcome, StageOutcome, TaskData, TrainConfig,
    Trainer,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Link,
    Node,
    Edge,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Link => "link",
            Task::Node => "node",
            Task::Edge => "edge",
        }
    }

    /// Name of the validation metric used for model selection.
    pub fn primary_metric(self) -> &'static str {
        match self {
            Task::Link => "mrr",
            Task::Node => "accuracy",
            Task::Edge => "macro_f1",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "link" => Ok(Task::Link),
            "node" => Ok(Task::Node),
            "edge" => Ok(Task::Edge),
            _ => Err(Error::Config(format!(
                "unknown task {s:?}; expected link, node or edge"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StageKind {
    PreFineTuneLM,
    WarmStartGNN,
    EndToEnd,
    HeadOnly,
}

impl StageKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StageKind::PreFineTuneLM => "PreFineTuneLM",
            StageKind::WarmStartGNN => "WarmStartGNN",
            StageKind::EndToEnd => "EndToEnd",
            StageKind::HeadOnly => "HeadOnly",
        }
    }

    pub fn trainable(self) -> GroupSet {
        match self {
            StageKind::PreFineTuneLM => GroupSet::of(&[ParamGroup::Lm, ParamGroup::LmDecoder]),
            StageKind::WarmStartGNN => GroupSet::of(&[ParamGroup::Gnn, ParamGroup::Head]),
            StageKind::EndToEnd => {
                GroupSet::of(&[ParamGroup::Lm, ParamGroup::Gnn, ParamGroup::Head])
            }
            StageKind::HeadOnly => GroupSet::of(&[ParamGroup::Head]),
        }
    }

    pub fn trains_lm(self) -> bool {
        self.trainable().contains(ParamGroup::Lm)
    }

    pub fn uses_gnn(self) -> bool {
        self != StageKind::PreFineTuneLM
    }
}

impl fmt::Display for StageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StageKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "PreFineTuneLM" => Ok(StageKind::PreFineTuneLM),
            "WarmStartGNN" => Ok(StageKind::WarmStartGNN),
            "EndToEnd" => Ok(StageKind::EndToEnd),
            "HeadOnly" => Ok(StageKind::HeadOnly),
            _ => Err(Error::Config(format!(
                "unknown stage {s:?}; expected PreFineTuneLM, WarmStartGNN, EndToEnd or HeadOnly"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub kind: StageKind,
    pub epochs: usize,
    /// Task trained in this stage; pre-fine-tuning is always link prediction.
    pub task: Task,
    /// Overrides the run's learning rate for this stage.
    #[serde(default)]
    pub learning_rate: Option<f64>,
}

impl StageSpec {
    pub fn new(kind: StageKind, epochs: usize, run_task: Task) -> Self {
        let task = if kind == StageKind::PreFineTuneLM {
            Task::Link
        } else {
            run_task
        };
        StageSpec {
            kind,
            epochs,
            task,
            learning_rate: None,
        }
    }

    pub fn with_learning_rate(self, learning_rate: f64) -> Self {
        StageSpec {
            learning_rate: Some(learning_rate),
            ..self
        }
    }
}

/// Stateless 64-bit mix of a base seed with a path of indices.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    path.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: String,
    pub step: u64,
    pub loss: f64,
    pub cache_hit_rate: Option<f64>,
    pub unique_nodes: usize,
    pub elapsed_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: String,
    pub epoch: usize,
    pub split: String,
    pub metric_name: String,
    pub value: f64,
}

/// JSON-lines training log, kept in memory and optionally mirrored to a file.
#[derive(Default)]
pub struct MetricsLog {
    lines: Vec<String>,
    file: Option<BufWriter<File>>,
}

impl MetricsLog {
    pub fn new() -> Self {
        MetricsLog::default()
    }

    pub fn to_file(path: impl AsRef<Path>) -> Result<Self> {
        Ok(MetricsLog {
            lines: Vec::new(),
            file: Some(BufWriter::new(File::create(path)?)),
        })
    }

    fn push(&mut self, line: String) -> Result<()> {
        if let Some(f) = &mut self.file {
            writeln!(f, "{line}")?;
        }
        self.lines.push(line);
        Ok(())
    }

    pub fn step(&mut self, r: &StepRecord) -> Result<()> {
        self.push(serde_json::to_string(r)?)
    }

    pub fn epoch(&mut self, r: &EpochRecord) -> Result<()> {
        self.push(serde_json::to_string(r)?)
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn step_losses(&self) -> Vec<f64> {
        self.lines
            .iter()
            .filter_map(|l| serde_json::from_str::<StepRecord>(l).ok())
            .map(|r| r.loss)
            .collect()
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(f) = &mut self.file {
            f.flush()?;
        }
        Ok(())
    }
}

/// The log text with every `elapsed_ms` field removed, for comparing runs.
pub fn strip_timestamps(log: &str) -> String {
    log.lines()
        .map(|l| match serde_json::from_str::<serde_json::Value>(l) {
            Ok(serde_json::Value::Object(mut m)) => {
                m.remove("elapsed_ms");
                serde_json::Value::Object(m).to_string()
            }
            _ => l.to_string(),
        })
        .collect::<Vec<_>>()
        .join("\n")
}
