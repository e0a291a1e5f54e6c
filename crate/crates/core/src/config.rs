//! Flat `key = value` run configuration.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::gnn::Aggregation;
use crate::graph::{SamplerConfig, TargetMode};
use crate::negative::NegativeMode;
use crate::pipeline::{
    CacheConfig, EvalConfig, ModelConfig, NodeBudget, StageKind, StageSpec, Task, TrainConfig,
};
use crate::text::TextEncoderConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub graph_dir: PathBuf,
    pub out_dir: PathBuf,
    pub task: Task,
    pub target_relation: Option<String>,
    pub stages: Vec<StageKind>,
    /// One value for every stage, or one per stage.
    pub epochs: Vec<usize>,
    /// Epochs of a warm-start stage when `epochs` is a single value.
    pub warm_start_epochs: usize,
    pub steps_per_epoch: Option<usize>,
    pub batch_size: usize,
    pub fanouts: Vec<usize>,
    pub num_layers: usize,
    pub hidden_dim: usize,
    /// One value for every stage, or one per stage.
    pub learning_rate: Vec<f64>,
    /// Learning rate of an end-to-end stage when `learning_rate` is a single value.
    pub end_to_end_learning_rate: f64,
    pub negatives_k: usize,
    pub negative_mode: NegativeMode,
    pub train_nodes_per_batch: usize,
    pub inference_batch_size: usize,
    pub cache_capacity: usize,
    pub cache_staleness: u64,
    pub target_mode: TargetMode,
    pub partition_leaves: usize,
    pub text_dim: usize,
    pub text_heads: usize,
    pub text_layers: usize,
    pub max_len: usize,
    pub per_type_encoders: bool,
    pub mlm_steps: usize,
    pub mlm_mask_prob: f64,
    pub aggregation: Aggregation,
    pub activate_last: bool,
    pub include_reverse: bool,
    pub head_bias: bool,
    pub warm_decoder: bool,
    pub eval_batch_size: usize,
    pub eval_fanouts: Option<Vec<usize>>,
    pub eval_max_queries: Option<usize>,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            graph_dir: PathBuf::from("graph"),
            out_dir: PathBuf::from("run"),
            task: Task::Link,
            target_relation: None,
            stages: vec![
                StageKind::PreFineTuneLM,
                StageKind::WarmStartGNN,
                StageKind::EndToEnd,
            ],
            epochs: vec![3],
            warm_start_epochs: 1,
            steps_per_epoch: None,
            batch_size: 16,
            fanouts: vec![10],
            num_layers: 2,
            hidden_dim: 128,
            learning_rate: vec![1e-3],
            end_to_end_learning_rate: 1e-4,
            negatives_k: 4,
            negative_mode: NegativeMode::Joint,
            train_nodes_per_batch: 64,
            inference_batch_size: 128,
            cache_capacity: 0,
            cache_staleness: 0,
            target_mode: TargetMode::Global,
            partition_leaves: 8,
            text_dim: 64,
            text_heads: 4,
            text_layers: 2,
            max_len: 32,
            per_type_encoders: false,
            mlm_steps: 0,
            mlm_mask_prob: 0.15,
            aggregation: Aggregation::Mean,
            activate_last: false,
            include_reverse: true,
            head_bias: true,
            warm_decoder: true,
            eval_batch_size: 256,
            eval_fanouts: None,
            eval_max_queries: None,
            seed: 0,
        }
    }
}

fn bad(key: &str, value: &str, expected: &str) -> Error {
    Error::Config(format!(
        "key `{key}`: invalid value {value:?}, expected {expected}"
    ))
}

fn positive(key: &str, value: &str) -> Result<usize> {
    match value.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(bad(key, value, "a positive integer")),
    }
}

fn count(key: &str, value: &str) -> Result<usize> {
    value
        .parse()
        .map_err(|_| bad(key, value, "a non-negative integer"))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(key, value, "true or false")),
    }
}

fn list<T>(key: &str, value: &str, item: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    let v = value
        .split(',')
        .map(|s| item(s.trim()))
        .collect::<Result<Vec<T>>>()?;
    if v.is_empty() {
        return Err(bad(key, value, "a non-empty list"));
    }
    Ok(v)
}

fn rate(key: &str, value: &str) -> Result<f64> {
    let v: f64 = value
        .parse()
        .map_err(|_| bad(key, value, "1e-3, 1e-4 or 1e-5"))?;
    [1e-3, 1e-4, 1e-5]
        .into_iter()
        .find(|&g| (v - g).abs() <= g * 1e-9)
        .ok_or_else(|| bad(key, value, "1e-3, 1e-4 or 1e-5"))
}

/// 0 means "unlimited".
fn optional(key: &str, value: &str) -> Result<Option<usize>> {
    Ok(Some(count(key, value)?).filter(|&v| v > 0))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected key = value, found {line:?}",
                    i + 1
                ))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("key `{key}` given twice")));
            }
            c.set(key, value)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        RunConfig::parse(&text)
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "graph_dir" => self.graph_dir = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "task" => {
                self.task = value
                    .parse()
                    .map_err(|_| bad(key, value, "link, node or edge"))?
            }
            "target_relation" => {
                self.target_relation = Some(value.to_string()).filter(|v| !v.is_empty())
            }
            "stages" => self.stages = list(key, value, |s| s.parse::<StageKind>())?,
            "epochs" => self.epochs = list(key, value, |s| count(key, s))?,
            "warm_start_epochs" => self.warm_start_epochs = count(key, value)?,
            "steps_per_epoch" => self.steps_per_epoch = optional(key, value)?,
            "batch_size" => self.batch_size = positive(key, value)?,
            "fanouts" => self.fanouts = list(key, value, |s| positive(key, s))?,
            "num_layers" => {
                self.num_layers = match value {
                    "1" | "2" | "3" => value.parse().expect("digit"),
                    _ => return Err(bad(key, value, "1, 2 or 3")),
                }
            }
            "hidden_dim" => {
                self.hidden_dim = match value {
                    "128" | "256" | "512" => value.parse().expect("digits"),
                    _ => return Err(bad(key, value, "128, 256 or 512")),
                }
            }
            "learning_rate" => self.learning_rate = list(key, value, |s| rate(key, s))?,
            "end_to_end_learning_rate" => self.end_to_end_learning_rate = rate(key, value)?,
            "negatives_k" => self.negatives_k = positive(key, value)?,
            "negative_mode" => {
                self.negative_mode = match value {
                    "independent" => NegativeMode::Independent,
                    "joint" => NegativeMode::Joint,
                    _ => return Err(bad(key, value, "independent or joint")),
                }
            }
            "train_nodes_per_batch" => self.train_nodes_per_batch = positive(key, value)?,
            "inference_batch_size" => self.inference_batch_size = positive(key, value)?,
            "cache_capacity" => self.cache_capacity = count(key, value)?,
            "cache_staleness" => {
                self.cache_staleness = value
                    .parse()
                    .map_err(|_| bad(key, value, "a non-negative integer"))?
            }
            "target_mode" => {
                self.target_mode = match value {
                    "global" => TargetMode::Global,
                    "partition_local" => TargetMode::PartitionLocal,
                    _ => return Err(bad(key, value, "global or partition_local")),
                }
            }
            "partition_leaves" => self.partition_leaves = positive(key, value)?,
            "text_dim" => self.text_dim = positive(key, value)?,
            "text_heads" => self.text_heads = positive(key, value)?,
            "text_layers" => self.text_layers = positive(key, value)?,
            "max_len" => self.max_len = positive(key, value)?,
            "per_type_encoders" => self.per_type_encoders = flag(key, value)?,
            "mlm_steps" => self.mlm_steps = count(key, value)?,
            "mlm_mask_prob" => {
                self.mlm_mask_prob = match value.parse::<f64>() {
                    Ok(p) if p > 0.0 && p < 1.0 => p,
                    _ => return Err(bad(key, value, "a probability in (0, 1)")),
                }
            }
            "aggregation" => {
                self.aggregation = match value {
                    "sum" => Aggregation::Sum,
                    "mean" => Aggregation::Mean,
                    _ => return Err(bad(key, value, "sum or mean")),
                }
            }
            "activate_last" => self.activate_last = flag(key, value)?,
            "include_reverse" => self.include_reverse = flag(key, value)?,
            "head_bias" => self.head_bias = flag(key, value)?,
            "warm_decoder" => self.warm_decoder = flag(key, value)?,
            "eval_batch_size" => self.eval_batch_size = positive(key, value)?,
            "eval_fanouts" => self.eval_fanouts = Some(list(key, value, |s| positive(key, s))?),
            "eval_max_queries" => self.eval_max_queries = optional(key, value)?,
            "seed" => {
                self.seed = value
                    .parse()
                    .map_err(|_| bad(key, value, "an unsigned integer"))?
            }
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs.len() != 1 && self.epochs.len() != self.stages.len() {
            return Err(Error::Config(format!(
                "key `epochs`: {} values for {} stages",
                self.epochs.len(),
                self.stages.len()
            )));
        }
        if self.learning_rate.len() != 1 && self.learning_rate.len() != self.stages.len() {
            return Err(Error::Config(format!(
                "key `learning_rate`: {} values for {} stages",
                self.learning_rate.len(),
                self.stages.len()
            )));
        }
        if self.text_dim % self.text_heads != 0 {
            return Err(Error::Config(format!(
                "key `text_heads`: {} does not divide text_dim {}",
                self.text_heads, self.text_dim
            )));
        }
        if self.max_len < 2 {
            return Err(Error::Config("key `max_len`: must be at least 2".into()));
        }
        if self.target_mode == TargetMode::PartitionLocal && self.partition_leaves < 2 {
            return Err(Error::Config(
                "key `partition_leaves`: partition-local sampling needs at least 2 leaves".into(),
            ));
        }
        Ok(())
    }

    pub fn stage_plan(&self) -> Vec<StageSpec> {
        self.stages
            .iter()
            .enumerate()
            .map(|(i, &kind)| {
                let epochs = if self.epochs.len() == 1 {
                    if kind == StageKind::WarmStartGNN {
                        self.warm_start_epochs
                    } else {
                        self.epochs[0]
                    }
                } else {
                    self.epochs[i]
                };
                let lr = match self.learning_rate.as_slice() {
                    [_] if kind == StageKind::EndToEnd => self.end_to_end_learning_rate,
                    [lr] => *lr,
                    all => all[i],
                };
                StageSpec::new(kind, epochs, self.task).with_learning_rate(lr)
            })
            .collect()
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            text: TextEncoderConfig {
                vocab_size,
                dim: self.text_dim,
                heads: self.text_heads,
                layers: self.text_layers,
                max_len: self.max_len,
            },
            per_type_encoders: self.per_type_encoders,
            hidden_dim: self.hidden_dim,
            num_layers: self.num_layers,
            aggregation: self.aggregation,
            activate_last: self.activate_last,
            include_reverse: self.include_reverse,
            head_bias: self.head_bias,
        }
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            fanouts: self.fanouts.clone(),
            num_layers: self.num_layers,
            include_reverse: self.include_reverse,
            dedup: true,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut eval_sampler = self.sampler();
        if let Some(f) = &self.eval_fanouts {
            eval_sampler.fanouts = f.clone();
        }
        let mut eval = EvalConfig::new(eval_sampler, self.seed ^ 0x5eed);
        eval.batch_size = self.eval_batch_size;
        eval.max_queries = self.eval_max_queries;
        TrainConfig {
            task: self.task,
            stages: self.stage_plan(),
            batch_size: self.batch_size,
            steps_per_epoch: self.steps_per_epoch,
            learning_rate: self.learning_rate[0],
            sampler: self.sampler(),
            negatives_k: self.negatives_k,
            negative_mode: self.negative_mode,
            budget: NodeBudget {
                train_nodes_per_batch: self.train_nodes_per_batch,
                inference_batch_size: self.inference_batch_size,
            },
            cache: (self.cache_capacity > 0).then_some(CacheConfig {
                capacity: self.cache_capacity,
                staleness_limit: self.cache_staleness,
            }),
            target_mode: self.target_mode,
            warm_decoder: self.warm_decoder,
            eval,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_keys_and_comments() {
        let c = RunConfig::parse(
            "# run\ntask = node\nstages = WarmStartGNN,EndToEnd\nepochs = 2, 5\nhidden_dim = 256\nlearning_rate = 1e-4\n\nfanouts = 5,7\nseed = 9  # trailing\n",
        )
        .unwrap();
        assert_eq!(c.task, Task::Node);
        assert_eq!(
            c.stage_plan().iter().map(|s| s.epochs).collect::<Vec<_>>(),
            vec![2, 5]
        );
        assert_eq!(c.hidden_dim, 256);
        assert_eq!(c.learning_rate, vec![1e-4]);
        assert_eq!(
            c.stage_plan()
                .iter()
                .map(|s| s.learning_rate)
                .collect::<Vec<_>>(),
            vec![Some(1e-4); 2]
        );
        assert_eq!(c.fanouts, vec![5, 7]);
        assert_eq!(c.seed, 9);
    }

    #[test]
    fn single_epoch_value_keeps_warm_start_short() {
        let c = RunConfig::parse("epochs = 4\nwarm_start_epochs = 1").unwrap();
        let e: Vec<usize> = c.stage_plan().iter().map(|s| s.epochs).collect();
        assert_eq!(e, vec![4, 1, 4]);
        let lr: Vec<_> = c
            .stage_plan()
            .iter()
            .map(|s| s.learning_rate.unwrap())
            .collect();
        assert_eq!(lr, vec![1e-3, 1e-3, 1e-4]);
        let c = RunConfig::parse("learning_rate = 1e-4, 1e-5, 1e-3").unwrap();
        let lr: Vec<_> = c
            .stage_plan()
            .iter()
            .map(|s| s.learning_rate.unwrap())
            .collect();
        assert_eq!(lr, vec![1e-4, 1e-5, 1e-3]);
    }

    fn err(text: &str) -> String {
        match RunConfig::parse(text) {
            Err(Error::Config(m)) => m,
            other => panic!("expected a configuration error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_unknown_and_out_of_grid_values() {
        assert!(err("hiden_dim = 128").contains("hiden_dim"));
        assert!(err("hidden_dim = 64").contains("hidden_dim"));
        assert!(err("num_layers = 4").contains("num_layers"));
        assert!(err("learning_rate = 0.01").contains("learning_rate"));
        assert!(err("negative_mode = both").contains("negative_mode"));
        assert!(err("batch_size = 0").contains("batch_size"));
        assert!(err("seed = 1\nseed = 2").contains("seed"));
        assert!(err("stages = PreFineTuneLM,EndToEnd\nepochs = 1,2,3").contains("epochs"));
        assert!(err("learning_rate = 1e-3,1e-4").contains("learning_rate"));
        assert!(err("just a line").contains("line 1"));
    }

    #[test]
    fn cache_disabled_at_capacity_zero() {
        let c = RunConfig::parse("cache_capacity = 0\ncache_staleness = 5").unwrap();
        assert!(c.train_config().cache.is_none());
        let c = RunConfig::parse("cache_capacity = 100\ncache_staleness = 5").unwrap();
        assert_eq!(
            c.train_config().cache,
            Some(CacheConfig {
                capacity: 100,
                staleness_limit: 5
            })
        );
    }
}
