//! Output heads.
//!
//! The label head maps a document vector to non-negative per-label confidence
//! scores (`ReLU(Wx + b)`) and is trained with the log-sum-exp pairwise loss
//!
//! ```text
//! lsep = log(1 + Σ_{v ∉ Y} Σ_{u ∈ Y} exp(f_v - f_u))
//! ```
//!
//! The double sum factorises into `(Σ_v e^{f_v}) (Σ_u e^{-f_u})`, so the loss
//! is `softplus(lse_v(f_v) + lse_u(-f_u))`, which is linear in `L` and never
//! overflows.
//!
//! The count head is an MLP with ReLU hidden layers and a softmax over label
//! counts `1..=n`.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::DocumentVector;
use crate::ops::{add_outer, log_sum_exp, sigmoid, softmax, softplus};
use crate::params::{view, view_mut, Parameters, TensorView, TensorViewMut};

#[derive(Debug, Error, PartialEq)]
pub enum HeadError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("label index {index} out of range for {num_labels} labels")]
    LabelOutOfRange { index: usize, num_labels: usize },
    #[error("label count {count} outside 1..={max}")]
    CountOutOfRange { count: usize, max: usize },
    #[error("negative sample size must be at least 1")]
    EmptySample,
}

const INIT_RANGE: f64 = 0.1;

fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-INIT_RANGE..=INIT_RANGE))
}

/// Per-label confidence scores, all `>= 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreVector(pub Vec<f64>);

impl ScoreVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelScoreHead {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LabelScoreHead {
    pub fn zeros(num_labels: usize, input_dim: usize) -> Self {
        LabelScoreHead {
            weight: Array2::zeros((num_labels, input_dim)),
            bias: Array1::zeros(num_labels),
        }
    }

    pub fn init<R: Rng + ?Sized>(num_labels: usize, input_dim: usize, rng: &mut R) -> Self {
        LabelScoreHead {
            weight: uniform(num_labels, input_dim, rng),
            bias: Array1::zeros(num_labels),
        }
    }

    pub fn num_labels(&self) -> usize {
        self.weight.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    /// `Wx + b` before the ReLU.
    pub fn preactivation(&self, x: ArrayView1<'_, f64>) -> Result<Array1<f64>, HeadError> {
        if x.len() != self.input_dim() {
            return Err(HeadError::DimensionMismatch {
                expected: self.input_dim(),
                found: x.len(),
            });
        }
        Ok(self.weight.dot(&x) + &self.bias)
    }

    /// Accumulates gradients given `d_pre` (w.r.t. the pre-activation) and
    /// returns the gradient w.r.t. `x`.
    pub fn backward(
        &self,
        grads: &mut LabelScoreHead,
        x: ArrayView1<'_, f64>,
        d_pre: ArrayView1<'_, f64>,
    ) -> Array1<f64> {
        add_outer(&mut grads.weight, d_pre, x);
        grads.bias += &d_pre;
        self.weight.t().dot(&d_pre)
    }
}

impl Parameters for LabelScoreHead {
    fn tensors(&self, prefix: &str) -> Vec<TensorView<'_>> {
        vec![
            view!(prefix, "weight", self.weight),
            view!(prefix, "bias", self.bias),
        ]
    }

    fn tensors_mut(&mut self, prefix: &str) -> Vec<TensorViewMut<'_>> {
        vec![
            view_mut!(prefix, "weight", self.weight),
            view_mut!(prefix, "bias", self.bias),
        ]
    }
}

pub fn relu(pre: &Array1<f64>) -> ScoreVector {
    ScoreVector(pre.iter().map(|v| v.max(0.0)).collect())
}

/// Subgradient of ReLU, taken as 0 at the kink.
pub fn relu_backward(pre: &Array1<f64>, d_scores: &[f64]) -> Array1<f64> {
    pre.iter()
        .zip(d_scores)
        .map(|(&p, &d)| if p > 0.0 { d } else { 0.0 })
        .collect()
}

pub fn score_labels(x: &DocumentVector, head: &LabelScoreHead) -> Result<ScoreVector, HeadError> {
    head.preactivation(x.view()).map(|pre| relu(&pre))
}

fn check_gold(scores: &[f64], gold: &BTreeSet<usize>) -> Result<(), HeadError> {
    match gold.iter().next_back() {
        Some(&index) if index >= scores.len() => Err(HeadError::LabelOutOfRange {
            index,
            num_labels: scores.len(),
        }),
        _ => Ok(()),
    }
}

/// `log Σ_{v ∉ Y} e^{f_v}` and `log Σ_{u ∈ Y} e^{-f_u}`; `None` when either
/// side of the pair set is empty.
fn pair_log_sums(scores: &[f64], gold: &BTreeSet<usize>) -> Option<(f64, f64)> {
    if gold.is_empty() || gold.len() == scores.len() {
        return None;
    }
    let irrelevant = (0..scores.len())
        .filter(|i| !gold.contains(i))
        .map(|i| scores[i]);
    let relevant = gold.iter().map(|&i| -scores[i]);
    Some((log_sum_exp(irrelevant), log_sum_exp(relevant)))
}

/// LSEP loss; zero when there are no (irrelevant, relevant) pairs.
pub fn lsep_loss(scores: &[f64], gold: &BTreeSet<usize>) -> Result<f64, HeadError> {
    check_gold(scores, gold)?;
    Ok(pair_log_sums(scores, gold).map_or(0.0, |(a, b)| softplus(a + b)))
}

/// LSEP loss and its gradient with respect to the scores.
pub fn lsep_loss_with_gradient(
    scores: &[f64],
    gold: &BTreeSet<usize>,
) -> Result<(f64, Vec<f64>), HeadError> {
    check_gold(scores, gold)?;
    let mut grad = vec![0.0; scores.len()];
    let Some((a, b)) = pair_log_sums(scores, gold) else {
        return Ok((0.0, grad));
    };
    let z = a + b;
    let outer = sigmoid(z);
    for (i, g) in grad.iter_mut().enumerate() {
        *g = if gold.contains(&i) {
            -outer * (-scores[i] - b).exp()
        } else {
            outer * (scores[i] - a).exp()
        };
    }
    Ok((softplus(z), grad))
}

pub fn lsep_loss_gradient(scores: &[f64], gold: &BTreeSet<usize>) -> Result<Vec<f64>, HeadError> {
    lsep_loss_with_gradient(scores, gold).map(|(_, g)| g)
}

/// Negative sampling settings for LSEP over large label sets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LsepSampling {
    pub neg_sample_size: usize,
    /// Label counts up to this value always use the exact loss.
    pub exact_cutoff: usize,
}

impl Default for LsepSampling {
    fn default() -> Self {
        LsepSampling {
            neg_sample_size: 1024,
            exact_cutoff: 256,
        }
    }
}

/// Draws `m` irrelevant labels uniformly without replacement. Returns `None`
/// when the exact loss should be used instead.
fn sample_irrelevant<R: Rng + ?Sized>(
    num_labels: usize,
    gold: &BTreeSet<usize>,
    sampling: LsepSampling,
    rng: &mut R,
) -> Result<Option<Vec<usize>>, HeadError> {
    if sampling.neg_sample_size == 0 {
        return Err(HeadError::EmptySample);
    }
    let irrelevant: Vec<usize> = (0..num_labels).filter(|i| !gold.contains(i)).collect();
    if num_labels <= sampling.exact_cutoff
        || sampling.neg_sample_size >= irrelevant.len()
        || gold.is_empty()
    {
        return Ok(None);
    }
    let picked = rand::seq::index::sample(rng, irrelevant.len(), sampling.neg_sample_size);
    let mut sample: Vec<usize> = picked.into_iter().map(|k| irrelevant[k]).collect();
    sample.sort_unstable();
    Ok(Some(sample))
}

/// Monte-Carlo estimate of the pair sum `Σ_v Σ_u e^{f_v - f_u}` from a
/// sample of irrelevant labels, rescaled by `|V| / m`.
pub fn sampled_pair_sum(scores: &[f64], gold: &BTreeSet<usize>, sample: &[usize]) -> f64 {
    let irrelevant = scores.len() - gold.len();
    let scale = irrelevant as f64 / sample.len() as f64;
    let rel: f64 = gold.iter().map(|&u| (-scores[u]).exp()).sum();
    let irr: f64 = sample.iter().map(|&v| scores[v].exp()).sum();
    scale * irr * rel
}

/// LSEP with the irrelevant set replaced by a uniform sample and the inner
/// sum rescaled by `|V| / m`. Falls back to the exact loss for small label
/// sets or when the sample would cover every irrelevant label. The gradient
/// is zero outside the sample and the gold set.
pub fn lsep_loss_sampled_with_gradient<R: Rng + ?Sized>(
    scores: &[f64],
    gold: &BTreeSet<usize>,
    sampling: LsepSampling,
    rng: &mut R,
) -> Result<(f64, Vec<f64>), HeadError> {
    check_gold(scores, gold)?;
    let Some(sample) = sample_irrelevant(scores.len(), gold, sampling, rng)? else {
        return lsep_loss_with_gradient(scores, gold);
    };
    let irrelevant = scores.len() - gold.len();
    let log_scale = (irrelevant as f64 / sample.len() as f64).ln();
    let a_raw = log_sum_exp(sample.iter().map(|&v| scores[v]));
    let b = log_sum_exp(gold.iter().map(|&u| -scores[u]));
    let z = log_scale + a_raw + b;
    let outer = sigmoid(z);
    let mut grad = vec![0.0; scores.len()];
    for &v in &sample {
        grad[v] = outer * (scores[v] - a_raw).exp();
    }
    for &u in gold {
        grad[u] = -outer * (-scores[u] - b).exp();
    }
    Ok((softplus(z), grad))
}

pub fn lsep_loss_sampled<R: Rng + ?Sized>(
    scores: &[f64],
    gold: &BTreeSet<usize>,
    sampling: LsepSampling,
    rng: &mut R,
) -> Result<f64, HeadError> {
    lsep_loss_sampled_with_gradient(scores, gold, sampling, rng).map(|(l, _)| l)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// MLP over the document vector producing logits over counts `1..=n`.
#[derive(Clone, Debug, PartialEq)]
pub struct CountHead {
    pub layers: Vec<DenseLayer>,
}

impl CountHead {
    fn build(
        input_dim: usize,
        hidden: &[usize],
        max_labels: usize,
        mut weight: impl FnMut(usize, usize) -> Array2<f64>,
    ) -> Self {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(max_labels);
        let layers = dims
            .windows(2)
            .map(|w| DenseLayer {
                weight: weight(w[1], w[0]),
                bias: Array1::zeros(w[1]),
            })
            .collect();
        CountHead { layers }
    }

    pub fn zeros(input_dim: usize, hidden: &[usize], max_labels: usize) -> Self {
        Self::build(input_dim, hidden, max_labels, |r, c| Array2::zeros((r, c)))
    }

    pub fn init<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        max_labels: usize,
        rng: &mut R,
    ) -> Self {
        Self::build(input_dim, hidden, max_labels, |r, c| uniform(r, c, rng))
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn max_labels(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.nrows())
    }

    pub fn hidden_dims(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(|l| l.weight.nrows())
            .collect()
    }

    /// Logits plus the post-ReLU activations entering each layer.
    fn forward(
        &self,
        x: ArrayView1<'_, f64>,
    ) -> Result<(Array1<f64>, Vec<Array1<f64>>), HeadError> {
        if x.len() != self.input_dim() {
            return Err(HeadError::DimensionMismatch {
                expected: self.input_dim(),
                found: x.len(),
            });
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut act = x.to_owned();
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let mut out = layer.weight.dot(&act) + &layer.bias;
            if k < last {
                out.mapv_inplace(|v| v.max(0.0));
            }
            inputs.push(std::mem::replace(&mut act, out));
        }
        Ok((act, inputs))
    }

    pub fn logits(&self, x: ArrayView1<'_, f64>) -> Result<Array1<f64>, HeadError> {
        self.forward(x).map(|(logits, _)| logits)
    }

    /// Cross-entropy against `gold_count` (already clamped to `1..=n`) and
    /// accumulated parameter gradients.
    pub fn loss_and_backward(
        &self,
        grads: &mut CountHead,
        x: ArrayView1<'_, f64>,
        gold_count: usize,
    ) -> Result<f64, HeadError> {
        let (logits, inputs) = self.forward(x)?;
        let dist = CountDistribution(softmax(&logits).to_vec());
        let loss = count_loss(&dist, gold_count)?;
        let mut delta = Array1::from(dist.0);
        delta[gold_count - 1] -= 1.0;
        for k in (0..self.layers.len()).rev() {
            let input = &inputs[k];
            add_outer(&mut grads.layers[k].weight, delta.view(), input.view());
            grads.layers[k].bias += &delta;
            if k > 0 {
                let back = self.layers[k].weight.t().dot(&delta);
                // `input` is post-ReLU, so a zero entry means the unit was inactive.
                delta = back
                    .iter()
                    .zip(input.iter())
                    .map(|(&d, &a)| if a > 0.0 { d } else { 0.0 })
                    .collect();
            }
        }
        Ok(loss)
    }
}

impl Parameters for CountHead {
    fn tensors(&self, prefix: &str) -> Vec<TensorView<'_>> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(k, l)| {
                [
                    view!(prefix, &format!("layer{k}.weight"), l.weight),
                    view!(prefix, &format!("layer{k}.bias"), l.bias),
                ]
            })
            .collect()
    }

    fn tensors_mut(&mut self, prefix: &str) -> Vec<TensorViewMut<'_>> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(k, l)| {
                [
                    view_mut!(prefix, &format!("layer{k}.weight"), l.weight),
                    view_mut!(prefix, &format!("layer{k}.bias"), l.bias),
                ]
            })
            .collect()
    }
}

/// Probabilities over label counts; entry `k` is the probability of `k + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct CountDistribution(pub Vec<f64>);

impl CountDistribution {
    /// Most probable count; ties go to the smaller count.
    pub fn argmax_count(&self) -> usize {
        let mut best = 0;
        for (k, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = k;
            }
        }
        best + 1
    }
}

pub fn predict_count_distribution(
    x: &DocumentVector,
    head: &CountHead,
) -> Result<CountDistribution, HeadError> {
    head.logits(x.view())
        .map(|logits| CountDistribution(softmax(&logits).to_vec()))
}

/// Clamps a gold label count into `1..=max`, reporting whether it changed.
pub fn clamp_count(count: usize, max: usize) -> (usize, bool) {
    let clamped = count.clamp(1, max.max(1));
    (clamped, clamped != count)
}

pub fn count_loss(dist: &CountDistribution, gold_count: usize) -> Result<f64, HeadError> {
    if gold_count == 0 || gold_count > dist.0.len() {
        return Err(HeadError::CountOutOfRange {
            count: gold_count,
            max: dist.0.len(),
        });
    }
    Ok(-dist.0[gold_count - 1].ln())
}
