//! Accuracy, F1, MRR and macro recall@K.

use std::collections::{BTreeMap, HashSet};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::contract("accuracy of an empty set"));
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Scores {
    pub per_class: Vec<f64>,
    pub macro_f1: f64,
    pub micro_f1: f64,
    /// Classes that occur neither in predictions nor in labels; their F1
    /// is reported as 0.
    pub absent: Vec<usize>,
}

pub fn f1_scores(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<F1Scores> {
    if predictions.len() != labels.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if num_classes == 0 {
        return Err(Error::contract("f1_scores needs at least one class"));
    }
    if let Some(&c) = predictions
        .iter()
        .chain(labels)
        .find(|&&c| c >= num_classes)
    {
        return Err(Error::Index {
            op: "f1_scores",
            index: c,
            bound: num_classes,
        });
    }
    let (mut tp, mut fp, mut fneg) = (
        vec![0usize; num_classes],
        vec![0usize; num_classes],
        vec![0usize; num_classes],
    );
    for (&p, &l) in predictions.iter().zip(labels) {
        if p == l {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fneg[l] += 1;
        }
    }
    let f1 = |tp: usize, fp: usize, fneg: usize| {
        let precision = if tp + fp == 0 {
            0.0
        } else {
            tp as f64 / (tp + fp) as f64
        };
        let recall = if tp + fneg == 0 {
            0.0
        } else {
            tp as f64 / (tp + fneg) as f64
        };
        if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        }
    };
    let per_class: Vec<f64> = (0..num_classes)
        .map(|c| f1(tp[c], fp[c], fneg[c]))
        .collect();
    let absent = (0..num_classes)
        .filter(|&c| tp[c] + fp[c] + fneg[c] == 0)
        .collect();
    let macro_f1 = per_class.iter().sum::<f64>() / num_classes as f64;
    let micro_f1 = f1(tp.iter().sum(), fp.iter().sum(), fneg.iter().sum());
    Ok(F1Scores {
        per_class,
        macro_f1,
        micro_f1,
        absent,
    })
}

/// A positive candidate and the scores of its negative candidates.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedQuery {
    pub positive: f64,
    pub negatives: Vec<f64>,
}

impl RankedQuery {
    /// 1 plus the number of negatives scoring at least as high as the
    /// positive (ties count against the positive).
    pub fn rank(&self) -> usize {
        1 + self
            .negatives
            .iter()
            .filter(|&&s| s >= self.positive)
            .count()
    }
}

pub fn mrr(queries: &[RankedQuery]) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::contract("mrr of an empty query list"));
    }
    if queries.iter().any(|q| q.negatives.is_empty()) {
        return Err(Error::contract("every query needs at least one negative"));
    }
    if queries
        .iter()
        .any(|q| q.positive.is_nan() || q.negatives.iter().any(|s| s.is_nan()))
    {
        return Err(Error::Numerical("NaN score in ranking".into()));
    }
    Ok(queries.iter().map(|q| 1.0 / q.rank() as f64).sum::<f64>() / queries.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallAtK {
    pub value: f64,
    /// Queries skipped because they have no relevant items.
    pub excluded: usize,
}

/// Mean over queries of `|top-K retrieved ∩ relevant| / |relevant|`.
pub fn macro_recall_at_k<T: Eq + Hash>(
    retrieved: &[Vec<T>],
    relevant: &[HashSet<T>],
    k: usize,
) -> Result<RecallAtK> {
    if k == 0 {
        return Err(Error::contract("recall@K needs K >= 1"));
    }
    if retrieved.len() != relevant.len() {
        return Err(Error::contract(
            "retrieved and relevant lists differ in length",
        ));
    }
    let mut total = 0.0;
    let mut counted = 0;
    let mut excluded = 0;
    for (got, want) in retrieved.iter().zip(relevant) {
        if want.is_empty() {
            excluded += 1;
            continue;
        }
        let top: HashSet<&T> = got.iter().take(k).collect();
        let hits = want.iter().filter(|w| top.contains(w)).count();
        total += hits as f64 / want.len() as f64;
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::contract("no query has a relevant item"));
    }
    Ok(RecallAtK {
        value: total / counted as f64,
        excluded,
    })
}

/// Evaluation output written as JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub split: String,
    pub metrics: BTreeMap<String, f64>,
    pub negative_mode: Option<String>,
    pub num_queries: usize,
}
