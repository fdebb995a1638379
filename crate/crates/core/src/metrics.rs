//! Example-based precision, recall and F1.
//!
//! Precision and recall are averaged over examples and F1 is computed from
//! the averaged values. Under hierarchical matching a predicted label counts
//! as a true positive when it is identical to, an ancestor of, or a
//! descendant of some gold label (and symmetrically for recall). Each label is
//! counted at most once.
//!
//! Empty sets: an empty prediction scores precision 1 when the gold set is
//! also empty and 0 otherwise; an empty gold set scores recall 1 when the
//! prediction is also empty and 0 otherwise.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::LabelHierarchy;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("{gold} gold sets but {pred} predicted sets")]
    LengthMismatch { gold: usize, pred: usize },
    #[error("no examples to evaluate")]
    Empty,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchingKind {
    Exact,
    Hierarchical,
}

#[derive(Clone, Copy, Debug)]
pub enum Matching<'a> {
    Exact,
    Hierarchical(&'a LabelHierarchy),
}

impl Matching<'_> {
    pub fn kind(&self) -> MatchingKind {
        match self {
            Matching::Exact => MatchingKind::Exact,
            Matching::Hierarchical(_) => MatchingKind::Hierarchical,
        }
    }

    /// `(tp_precision, tp_recall)` for one example.
    pub fn intersection(&self, gold: &BTreeSet<String>, pred: &BTreeSet<String>) -> (usize, usize) {
        match self {
            Matching::Exact => exact_intersection(gold, pred),
            Matching::Hierarchical(h) => hierarchical_intersection(gold, pred, h),
        }
    }
}

pub fn exact_intersection<T: Ord>(gold: &BTreeSet<T>, pred: &BTreeSet<T>) -> (usize, usize) {
    let n = gold.intersection(pred).count();
    (n, n)
}

pub fn hierarchical_intersection(
    gold: &BTreeSet<String>,
    pred: &BTreeSet<String>,
    h: &LabelHierarchy,
) -> (usize, usize) {
    let tp_precision = pred
        .iter()
        .filter(|q| gold.iter().any(|g| h.related(q, g)))
        .count();
    let tp_recall = gold
        .iter()
        .filter(|g| pred.iter().any(|q| h.related(q, g)))
        .count();
    (tp_precision, tp_recall)
}

/// Per-example precision with the empty-set convention.
pub fn example_precision(tp: usize, pred_len: usize, gold_len: usize) -> f64 {
    if pred_len == 0 {
        if gold_len == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        tp as f64 / pred_len as f64
    }
}

/// Per-example recall with the empty-set convention.
pub fn example_recall(tp: usize, pred_len: usize, gold_len: usize) -> f64 {
    if gold_len == 0 {
        if pred_len == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        tp as f64 / gold_len as f64
    }
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleScores {
    pub precision: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub p: usize,
    pub matching: MatchingKind,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub per_example: Option<Vec<ExampleScores>>,
}

pub fn example_based_metrics(
    gold_sets: &[BTreeSet<String>],
    pred_sets: &[BTreeSet<String>],
    matching: Matching<'_>,
    keep_per_example: bool,
) -> Result<MetricsReport, MetricsError> {
    if gold_sets.len() != pred_sets.len() {
        return Err(MetricsError::LengthMismatch {
            gold: gold_sets.len(),
            pred: pred_sets.len(),
        });
    }
    if gold_sets.is_empty() {
        return Err(MetricsError::Empty);
    }
    let per_example: Vec<ExampleScores> = gold_sets
        .iter()
        .zip(pred_sets)
        .map(|(gold, pred)| {
            let (tp_p, tp_r) = matching.intersection(gold, pred);
            ExampleScores {
                precision: example_precision(tp_p, pred.len(), gold.len()),
                recall: example_recall(tp_r, pred.len(), gold.len()),
            }
        })
        .collect();
    let p = per_example.len();
    let precision = per_example.iter().map(|e| e.precision).sum::<f64>() / p as f64;
    let recall = per_example.iter().map(|e| e.recall).sum::<f64>() / p as f64;
    Ok(MetricsReport {
        precision,
        recall,
        f1: f1_score(precision, recall),
        p,
        matching: matching.kind(),
        per_example: keep_per_example.then_some(per_example),
    })
}
