//! Ranking, label-set decoding and global threshold search.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Document, LabelHierarchy, LabelVocabulary};
use crate::heads::{predict_count_distribution, CountDistribution, ScoreVector};
use crate::metrics::{
    example_based_metrics, example_precision, example_recall, f1_score, Matching,
};
use crate::preprocess::EmbeddingTable;
use crate::trainer::{ModelBundle, TrainError};

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("the count head was not trained; top-K decoding is unavailable")]
    CountHeadUntrained,
    #[error("threshold search needs at least one example")]
    NoExamples,
    #[error("{scores} score vectors but {gold} gold sets")]
    LengthMismatch { scores: usize, gold: usize },
    #[error("score vector has {found} entries, vocabulary has {expected}")]
    VocabularyMismatch { expected: usize, found: usize },
    #[error("unknown decoding mode `{0}`")]
    UnknownMode(String),
    #[error(transparent)]
    Model(#[from] TrainError),
}

/// Label indices by descending score; equal scores keep ascending index order.
pub fn rank_labels(scores: &ScoreVector) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores.0[b].total_cmp(&scores.0[a]).then(a.cmp(&b)));
    order
}

/// The `K` highest-ranked labels, `K` being the most probable count (capped at
/// the vocabulary size).
pub fn decode_topk(scores: &ScoreVector, counts: &CountDistribution) -> BTreeSet<usize> {
    let k = counts.argmax_count().min(scores.len());
    rank_labels(scores).into_iter().take(k).collect()
}

/// Labels scoring strictly above `threshold`.
pub fn decode_threshold(scores: &ScoreVector, threshold: f64) -> BTreeSet<usize> {
    scores
        .0
        .iter()
        .enumerate()
        .filter(|(_, s)| **s > threshold)
        .map(|(i, _)| i)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceSplit {
    Train,
    Validation,
}

impl fmt::Display for SourceSplit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SourceSplit::Train => "train",
            SourceSplit::Validation => "validation",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalThreshold {
    pub value: f64,
    pub achieved_f1: f64,
    pub source_split: SourceSplit,
}

/// Candidate thresholds in ascending order: one below the smallest score,
/// the midpoint between each pair of adjacent distinct scores, and one above
/// the largest score.
pub fn threshold_candidates(score_sets: &[ScoreVector]) -> Vec<f64> {
    let mut values: Vec<f64> = score_sets
        .iter()
        .flat_map(|s| s.0.iter().copied())
        .collect();
    values.sort_by(f64::total_cmp);
    values.dedup();
    let (Some(&lo), Some(&hi)) = (values.first(), values.last()) else {
        return vec![0.0];
    };
    let mut out = Vec::with_capacity(values.len() + 1);
    out.push(lo - 1.0);
    out.extend(values.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
    out.push(hi + 1.0);
    out
}

/// Per-document running counts for the sweep.
struct SweepDoc {
    gold: Vec<String>,
    covered: Vec<bool>,
    pred_len: usize,
    tp_precision: usize,
    tp_recall: usize,
}

impl SweepDoc {
    fn precision(&self) -> f64 {
        example_precision(self.tp_precision, self.pred_len, self.gold.len())
    }

    fn recall(&self) -> f64 {
        example_recall(self.tp_recall, self.pred_len, self.gold.len())
    }
}

/// Finds the global threshold that maximises example-based F1 over
/// `score_sets`. Candidates are swept from the highest down, adding labels to
/// predictions incrementally; on ties the smaller threshold wins.
pub fn search_threshold(
    score_sets: &[ScoreVector],
    gold_sets: &[BTreeSet<String>],
    vocab: &LabelVocabulary,
    hierarchy: Option<&LabelHierarchy>,
    source_split: SourceSplit,
) -> Result<GlobalThreshold, InferenceError> {
    if score_sets.len() != gold_sets.len() {
        return Err(InferenceError::LengthMismatch {
            scores: score_sets.len(),
            gold: gold_sets.len(),
        });
    }
    if score_sets.is_empty() {
        return Err(InferenceError::NoExamples);
    }
    if let Some(bad) = score_sets.iter().find(|s| s.len() != vocab.len()) {
        return Err(InferenceError::VocabularyMismatch {
            expected: vocab.len(),
            found: bad.len(),
        });
    }
    let related = |q: &str, g: &str| match hierarchy {
        Some(h) => h.related(q, g),
        None => q == g,
    };

    let mut docs: Vec<SweepDoc> = gold_sets
        .iter()
        .map(|g| SweepDoc {
            gold: g.iter().cloned().collect(),
            covered: vec![false; g.len()],
            pred_len: 0,
            tp_precision: 0,
            tp_recall: 0,
        })
        .collect();
    let mut sum_p: f64 = docs.iter().map(SweepDoc::precision).sum();
    let mut sum_r: f64 = docs.iter().map(SweepDoc::recall).sum();
    let n = docs.len() as f64;

    let mut entries: Vec<(f64, usize, usize)> = score_sets
        .iter()
        .enumerate()
        .flat_map(|(d, s)| s.0.iter().enumerate().map(move |(l, &v)| (v, d, l)))
        .collect();
    entries.sort_by(|a, b| b.0.total_cmp(&a.0));

    // Candidates indexed from the top: candidates[len - 1] lies above every score.
    let candidates = threshold_candidates(score_sets);
    let mut best_index = candidates.len() - 1;
    let mut best_f1 = f1_score(sum_p / n, sum_r / n);
    let mut pos = 0;
    let mut index = candidates.len() - 1;
    while pos < entries.len() {
        let value = entries[pos].0;
        while pos < entries.len() && entries[pos].0 == value {
            let (_, d, l) = entries[pos];
            let doc = &mut docs[d];
            let label = vocab.label(l);
            let (old_p, old_r) = (doc.precision(), doc.recall());
            doc.pred_len += 1;
            if doc.gold.iter().any(|g| related(label, g)) {
                doc.tp_precision += 1;
            }
            for (g, covered) in doc.gold.iter().zip(doc.covered.iter_mut()) {
                if !*covered && related(label, g) {
                    *covered = true;
                    doc.tp_recall += 1;
                }
            }
            sum_p += doc.precision() - old_p;
            sum_r += doc.recall() - old_r;
            pos += 1;
        }
        index -= 1;
        let f1 = f1_score(sum_p / n, sum_r / n);
        // Running sums drift slightly, so near-equal values count as ties.
        if f1 >= best_f1 - 1e-12 {
            best_f1 = best_f1.max(f1);
            best_index = index;
        }
    }

    let value = candidates[best_index];
    let matching = hierarchy.map_or(Matching::Exact, Matching::Hierarchical);
    let achieved_f1 = threshold_f1(score_sets, gold_sets, vocab, value, matching);
    Ok(GlobalThreshold {
        value,
        achieved_f1,
        source_split,
    })
}

/// Example-based F1 obtained by decoding every score vector at `threshold`.
pub fn threshold_f1(
    score_sets: &[ScoreVector],
    gold_sets: &[BTreeSet<String>],
    vocab: &LabelVocabulary,
    threshold: f64,
    matching: Matching<'_>,
) -> f64 {
    let pred: Vec<BTreeSet<String>> = score_sets
        .iter()
        .map(|s| vocab.decode(&decode_threshold(s, threshold)))
        .collect();
    example_based_metrics(gold_sets, &pred, matching, false).map_or(0.0, |r| r.f1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodingMode {
    Topk,
    Threshold,
}

impl FromStr for DecodingMode {
    type Err = InferenceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "topk" => Ok(DecodingMode::Topk),
            "threshold" => Ok(DecodingMode::Threshold),
            other => Err(InferenceError::UnknownMode(other.to_string())),
        }
    }
}

impl fmt::Display for DecodingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecodingMode::Topk => "topk",
            DecodingMode::Threshold => "threshold",
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Decoder<'a> {
    TopK,
    Threshold(&'a GlobalThreshold),
}

impl Decoder<'_> {
    pub fn mode(&self) -> DecodingMode {
        match self {
            Decoder::TopK => DecodingMode::Topk,
            Decoder::Threshold(_) => DecodingMode::Threshold,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictedLabelSet {
    pub doc_id: String,
    pub labels: BTreeSet<String>,
    pub mode: DecodingMode,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub labels: PredictedLabelSet,
    pub scores: ScoreVector,
}

/// Scores one document and decodes its label set.
pub fn predict(
    doc: &Document,
    bundle: &ModelBundle,
    table: &EmbeddingTable,
    decoder: Decoder<'_>,
) -> Result<Prediction, InferenceError> {
    if matches!(decoder, Decoder::TopK) && !bundle.count_head_trained {
        return Err(InferenceError::CountHeadUntrained);
    }
    let (scores, vector) = bundle.score_document(doc, table)?;
    let indices = match decoder {
        Decoder::TopK => {
            let counts = predict_count_distribution(&vector, &bundle.count_head)
                .map_err(TrainError::from)?;
            decode_topk(&scores, &counts)
        }
        Decoder::Threshold(t) => decode_threshold(&scores, t.value),
    };
    Ok(Prediction {
        labels: PredictedLabelSet {
            doc_id: doc.id.clone(),
            labels: bundle.vocab.decode(&indices),
            mode: decoder.mode(),
        },
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sv(v: &[f64]) -> ScoreVector {
        ScoreVector(v.to_vec())
    }

    fn set(items: &[&str]) -> BTreeSet<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    fn vocab(n: usize) -> LabelVocabulary {
        LabelVocabulary::from_labels((0..n).map(|i| format!("l{i}")))
    }

    #[test]
    fn ranking_breaks_ties_by_index() {
        assert_eq!(rank_labels(&sv(&[0.2, 0.9, 0.2, 0.5])), vec![1, 3, 0, 2]);
        assert_eq!(rank_labels(&sv(&[1.0, 1.0, 1.0])), vec![0, 1, 2]);
    }

    #[test]
    fn topk_uses_argmax_count() {
        let counts = CountDistribution(vec![0.1, 0.6, 0.3]);
        assert_eq!(
            decode_topk(&sv(&[0.2, 0.9, 0.2, 0.5]), &counts),
            [1, 3].into()
        );
        // K larger than L is capped.
        let counts = CountDistribution(vec![0.0, 0.0, 1.0]);
        assert_eq!(decode_topk(&sv(&[0.2, 0.9]), &counts), [0, 1].into());
    }

    #[test]
    fn threshold_is_strict() {
        let s = sv(&[0.5, 0.4999, 0.7]);
        assert_eq!(decode_threshold(&s, 0.5), [2].into());
        assert!(decode_threshold(&s, 1.0).is_empty());
    }

    #[test]
    fn candidates_cover_every_distinct_prediction() {
        let c = threshold_candidates(&[sv(&[0.0, 1.0]), sv(&[1.0, 3.0])]);
        assert_eq!(c, vec![-1.0, 0.5, 2.0, 4.0]);
    }

    #[test]
    fn search_finds_separating_threshold() {
        let v = vocab(2);
        let scores = [sv(&[0.9, 0.1]), sv(&[0.2, 0.8])];
        let gold = [set(&["l0"]), set(&["l1"])];
        let t = search_threshold(&scores, &gold, &v, None, SourceSplit::Validation).unwrap();
        assert_eq!(t.achieved_f1, 1.0);
        assert!((t.value - 0.5).abs() < 1e-12);
    }

    #[test]
    fn search_rejects_bad_input() {
        let v = vocab(2);
        assert!(matches!(
            search_threshold(&[], &[], &v, None, SourceSplit::Train),
            Err(InferenceError::NoExamples)
        ));
        assert!(matches!(
            search_threshold(&[sv(&[1.0])], &[set(&[])], &v, None, SourceSplit::Train),
            Err(InferenceError::VocabularyMismatch { .. })
        ));
    }

    #[test]
    fn decoding_mode_round_trip() {
        for m in [DecodingMode::Topk, DecodingMode::Threshold] {
            assert_eq!(m.to_string().parse::<DecodingMode>().unwrap(), m);
        }
        assert!("both".parse::<DecodingMode>().is_err());
        let t = GlobalThreshold {
            value: 0.25,
            achieved_f1: 0.5,
            source_split: SourceSplit::Validation,
        };
        let json = serde_json::to_string(&t).unwrap();
        assert_eq!(
            json,
            r#"{"value":0.25,"achieved_f1":0.5,"source_split":"validation"}"#
        );
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn instance() -> impl Strategy<Value = (Vec<ScoreVector>, Vec<BTreeSet<String>>)> {
            (1usize..5, 1usize..6)
                .prop_flat_map(|(labels, docs)| {
                    let scores = prop::collection::vec(
                        prop::collection::vec((0i32..6).prop_map(|v| v as f64 * 0.25), labels),
                        docs,
                    );
                    let gold = prop::collection::vec(
                        prop::collection::btree_set(
                            (0..labels).prop_map(|i| format!("l{i}")),
                            0..=labels,
                        ),
                        docs,
                    );
                    (scores, gold)
                })
                .prop_map(|(s, g)| (s.into_iter().map(ScoreVector).collect(), g))
        }

        fn hierarchy() -> LabelHierarchy {
            LabelHierarchy::from_edges([("l1", "l0"), ("l2", "l0"), ("l3", "l2")]).unwrap()
        }

        proptest! {
            #[test]
            fn sweep_matches_exhaustive_grid((scores, gold) in instance()) {
                let v = vocab(scores[0].len());
                let h = hierarchy();
                for (hier, matching) in [(None, Matching::Exact), (Some(&h), Matching::Hierarchical(&h))] {
                    let t = search_threshold(&scores, &gold, &v, hier, SourceSplit::Validation).unwrap();
                    let grid: Vec<(f64, f64)> = threshold_candidates(&scores)
                        .into_iter()
                        .map(|c| (c, threshold_f1(&scores, &gold, &v, c, matching)))
                        .collect();
                    let max = grid.iter().map(|g| g.1).fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!((t.achieved_f1 - max).abs() < 1e-9);
                    let smallest = grid.iter().find(|g| g.1 >= max - 1e-9).unwrap().0;
                    prop_assert_eq!(t.value, smallest);
                }
            }

            #[test]
            fn topk_returns_k_highest(
                scores in prop::collection::vec(-3.0f64..3.0, 1..8),
                probs in prop::collection::vec(0.0f64..1.0, 1..5),
            ) {
                let s = ScoreVector(scores);
                let counts = CountDistribution(probs);
                let picked = decode_topk(&s, &counts);
                prop_assert_eq!(picked.len(), counts.argmax_count().min(s.len()));
                let min_in = picked.iter().map(|&i| s.0[i]).fold(f64::INFINITY, f64::min);
                for i in (0..s.len()).filter(|i| !picked.contains(i)) {
                    prop_assert!(s.0[i] <= min_in);
                }
            }
        }
    }
}
