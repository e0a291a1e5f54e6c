//! DistMult structure scoring, its contrastive loss, and classification heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::negative::TripletBatch;
use crate::tensor::{Module, Param, ParamGroup, Tape, Tensor, Var};

/// One diagonal relation vector per relation.
#[derive(Clone, Debug, PartialEq)]
pub struct DistMult {
    pub relations: Param,
}

impl DistMult {
    pub fn new(prefix: &str, group: ParamGroup, relations: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let init = Tensor::uniform(&[relations, dim], 1.0, &mut rng);
        DistMult {
            relations: Param::new(format!("{prefix}.relations"), group, init),
        }
    }

    pub fn num_relations(&self) -> usize {
        self.relations.value().shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.relations.value().shape()[1]
    }

    /// `Σ_i h[i] r[i] t[i]` for plain vectors.
    pub fn score(&self, head: &[f64], rel: usize, tail: &[f64]) -> Result<f64> {
        if rel >= self.num_relations() {
            return Err(Error::Index {
                op: "distmult_score",
                index: rel,
                bound: self.num_relations(),
            });
        }
        if head.len() != self.dim() || tail.len() != self.dim() {
            return Err(Error::shape(
                "distmult_score",
                &[head.len()],
                &[tail.len(), self.dim()],
            ));
        }
        let r = self.relations.value().row(rel);
        // (h * t) * r keeps the score exactly symmetric in head and tail
        Ok(head
            .iter()
            .zip(tail)
            .zip(r)
            .map(|((h, t), r)| h * t * r)
            .sum())
    }

    /// Row-wise scores for `heads[i], rels[i], tails[i]`.
    pub fn score_rows(&self, tape: &Tape, heads: Var, rels: &[usize], tails: Var) -> Result<Var> {
        if let Some(&bad) = rels.iter().find(|&&r| r >= self.num_relations()) {
            return Err(Error::Index {
                op: "distmult_score",
                index: bad,
                bound: self.num_relations(),
            });
        }
        let r = tape.gather_rows(tape.param(&self.relations), rels)?;
        tape.row_sum(tape.mul(tape.mul(heads, tails)?, r)?)
    }
}

impl Module for DistMult {
    fn params(&self) -> Vec<&Param> {
        vec![&self.relations]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.relations]
    }
}

/// Mean over triplets of `softplus(-y * score)`.
pub fn link_loss(tape: &Tape, batch: &TripletBatch, scores: Var) -> Result<Var> {
    let shape = tape.shape(scores);
    if shape != [batch.labels.len()] {
        return Err(Error::contract(format!(
            "{} scores for a batch of {} triplets",
            shape.iter().product::<usize>(),
            batch.labels.len()
        )));
    }
    let neg_y = tape.constant(Tensor::vector(batch.labels.iter().map(|y| -y).collect()));
    Ok(tape.mean(tape.softplus(tape.mul(neg_y, scores)?)))
}

/// Linear classifier, `x W (+ b)`. The edge head reads the concatenation
/// of head and tail embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead {
    pub weight: Param,
    pub bias: Option<Param>,
}

impl LinearHead {
    pub fn new(prefix: &str, in_dim: usize, classes: usize, bias: bool, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LinearHead {
            weight: Param::new(
                format!("{prefix}.w"),
                ParamGroup::Head,
                Tensor::glorot(in_dim, classes, &mut rng),
            ),
            bias: bias.then(|| {
                Param::new(
                    format!("{prefix}.b"),
                    ParamGroup::Head,
                    Tensor::zeros(&[classes]),
                )
            }),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value().shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.weight.value().shape()[1]
    }

    pub fn logits(&self, tape: &Tape, x: Var) -> Result<Var> {
        let y = tape.matmul(x, tape.param(&self.weight))?;
        match &self.bias {
            Some(b) => tape.add_bias(y, tape.param(b)),
            None => Ok(y),
        }
    }

    /// Edge logits from `h_head ‖ h_tail`.
    pub fn edge_logits(&self, tape: &Tape, heads: Var, tails: Var) -> Result<Var> {
        let (h, t) = (tape.shape(heads), tape.shape(tails));
        if h.len() != 2 || h != t || 2 * h[1] != self.in_dim() {
            return Err(Error::shape("edge_logits", &h, &[t[0], self.in_dim()]));
        }
        self.logits(tape, tape.concat_cols(&[heads, tails])?)
    }
}

impl Module for LinearHead {
    fn params(&self) -> Vec<&Param> {
        let mut v = vec![&self.weight];
        v.extend(self.bias.iter());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = vec![&mut self.weight];
        v.extend(self.bias.iter_mut());
        v
    }
}

pub fn node_loss(tape: &Tape, head: &LinearHead, embeddings: Var, labels: &[usize]) -> Result<Var> {
    let logits = head.logits(tape, embeddings)?;
    tape.softmax_cross_entropy(logits, labels)
}

pub fn edge_loss(
    tape: &Tape,
    head: &LinearHead,
    heads: Var,
    tails: Var,
    labels: &[usize],
) -> Result<Var> {
    let logits = head.edge_logits(tape, heads, tails)?;
    tape.softmax_cross_entropy(logits, labels)
}
