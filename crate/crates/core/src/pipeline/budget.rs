use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::NodeRef;

/// How many texted nodes of a batch get gradients through the text encoder,
/// and how the rest are chunked for forward-only encoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeBudget {
    pub train_nodes_per_batch: usize,
    pub inference_batch_size: usize,
}

impl NodeBudget {
    pub fn validate(&self) -> Result<()> {
        if self.train_nodes_per_batch == 0 || self.inference_batch_size == 0 {
            return Err(Error::contract(format!(
                "node budget fields must be positive, got {} train nodes and sub-batch {}",
                self.train_nodes_per_batch, self.inference_batch_size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeSplit {
    pub train: Vec<NodeRef>,
    pub inference: Vec<Vec<NodeRef>>,
}

/// Picks `train_nodes_per_batch` nodes uniformly from `nodes` (the distinct
/// texted sources of a batch); the rest keep their order and are chunked
/// into sub-batches.
pub fn split_train_inference(
    nodes: &[NodeRef],
    budget: &NodeBudget,
    seed: u64,
) -> Result<NodeSplit> {
    budget.validate()?;
    if budget.train_nodes_per_batch >= nodes.len() {
        return Ok(NodeSplit {
            train: nodes.to_vec(),
            inference: Vec::new(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, nodes.len(), budget.train_nodes_per_batch).into_vec();
    picked.sort_unstable();
    let mut is_train = vec![false; nodes.len()];
    for &i in &picked {
        is_train[i] = true;
    }
    let train = picked.iter().map(|&i| nodes[i]).collect();
    let rest: Vec<NodeRef> = nodes
        .iter()
        .zip(&is_train)
        .filter(|(_, &t)| !t)
        .map(|(n, _)| *n)
        .collect();
    let inference = rest
        .chunks(budget.inference_batch_size)
        .map(<[NodeRef]>::to_vec)
        .collect();
    Ok(NodeSplit { train, inference })
}
