//! Hierarchical attention document encoder.
//!
//! Word level: a bidirectional LSTM runs over the tokens of each sentence and
//! additive attention pools its states into a sentence vector. Sentence level:
//! a second bidirectional LSTM runs over the sentence vectors and attention
//! pools them into the document vector. Inverted dropout is applied to every
//! sentence vector and to the document vector in training mode.
//!
//! Forward passes can record a cache from which the matching backward pass
//! accumulates parameter gradients into a zero-initialised [`EncoderParams`].

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ops::{add_outer, masked_softmax, sigmoid};
use crate::params::{view, view_mut, Parameters, TensorView, TensorViewMut};
use crate::preprocess::EncoderInput;

#[derive(Debug, Error, PartialEq)]
pub enum EncoderError {
    #[error("degenerate input: {0}")]
    Degenerate(&'static str),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

const INIT_RANGE: f64 = 0.1;
const FORGET_BIAS: f64 = 1.0;

fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-INIT_RANGE..=INIT_RANGE))
}

/// One direction of an LSTM layer. Gate blocks are stacked in the order
/// input, forget, cell candidate, output.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmDirection {
    pub w_input: Array2<f64>,
    pub w_hidden: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LstmDirection {
    fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        LstmDirection {
            w_input: Array2::zeros((4 * hidden_dim, input_dim)),
            w_hidden: Array2::zeros((4 * hidden_dim, hidden_dim)),
            bias: Array1::zeros(4 * hidden_dim),
        }
    }

    fn init<R: Rng + ?Sized>(input_dim: usize, hidden_dim: usize, rng: &mut R) -> Self {
        let w_input = uniform(4 * hidden_dim, input_dim, rng);
        let w_hidden = uniform(4 * hidden_dim, hidden_dim, rng);
        let mut bias = Array1::zeros(4 * hidden_dim);
        bias.slice_mut(s![hidden_dim..2 * hidden_dim])
            .fill(FORGET_BIAS);
        LstmDirection {
            w_input,
            w_hidden,
            bias,
        }
    }

    fn hidden_dim(&self) -> usize {
        self.w_hidden.ncols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentLayerParams {
    pub forward: LstmDirection,
    pub backward: LstmDirection,
}

impl RecurrentLayerParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        RecurrentLayerParams {
            forward: LstmDirection::zeros(input_dim, hidden_dim),
            backward: LstmDirection::zeros(input_dim, hidden_dim),
        }
    }

    pub fn init<R: Rng + ?Sized>(input_dim: usize, hidden_dim: usize, rng: &mut R) -> Self {
        RecurrentLayerParams {
            forward: LstmDirection::init(input_dim, hidden_dim, rng),
            backward: LstmDirection::init(input_dim, hidden_dim, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.forward.w_input.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.forward.hidden_dim()
    }

    pub fn output_dim(&self) -> usize {
        2 * self.hidden_dim()
    }
}

impl Parameters for RecurrentLayerParams {
    fn tensors(&self, prefix: &str) -> Vec<TensorView<'_>> {
        vec![
            view!(prefix, "fwd.w_input", self.forward.w_input),
            view!(prefix, "fwd.w_hidden", self.forward.w_hidden),
            view!(prefix, "fwd.bias", self.forward.bias),
            view!(prefix, "bwd.w_input", self.backward.w_input),
            view!(prefix, "bwd.w_hidden", self.backward.w_hidden),
            view!(prefix, "bwd.bias", self.backward.bias),
        ]
    }

    fn tensors_mut(&mut self, prefix: &str) -> Vec<TensorViewMut<'_>> {
        vec![
            view_mut!(prefix, "fwd.w_input", self.forward.w_input),
            view_mut!(prefix, "fwd.w_hidden", self.forward.w_hidden),
            view_mut!(prefix, "fwd.bias", self.forward.bias),
            view_mut!(prefix, "bwd.w_input", self.backward.w_input),
            view_mut!(prefix, "bwd.w_hidden", self.backward.w_hidden),
            view_mut!(prefix, "bwd.bias", self.backward.bias),
        ]
    }
}

/// Additive attention: `score_t = context · tanh(W h_t + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub proj_weight: Array2<f64>,
    pub proj_bias: Array1<f64>,
    pub context: Array1<f64>,
}

impl AttentionParams {
    pub fn zeros(in_dim: usize, att_dim: usize) -> Self {
        AttentionParams {
            proj_weight: Array2::zeros((att_dim, in_dim)),
            proj_bias: Array1::zeros(att_dim),
            context: Array1::zeros(att_dim),
        }
    }

    pub fn init<R: Rng + ?Sized>(in_dim: usize, att_dim: usize, rng: &mut R) -> Self {
        let proj_weight = uniform(att_dim, in_dim, rng);
        let context =
            Array1::from_shape_simple_fn(att_dim, || rng.gen_range(-INIT_RANGE..=INIT_RANGE));
        AttentionParams {
            proj_weight,
            proj_bias: Array1::zeros(att_dim),
            context,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.proj_weight.ncols()
    }
}

impl Parameters for AttentionParams {
    fn tensors(&self, prefix: &str) -> Vec<TensorView<'_>> {
        vec![
            view!(prefix, "proj_weight", self.proj_weight),
            view!(prefix, "proj_bias", self.proj_bias),
            view!(prefix, "context", self.context),
        ]
    }

    fn tensors_mut(&mut self, prefix: &str) -> Vec<TensorViewMut<'_>> {
        vec![
            view_mut!(prefix, "proj_weight", self.proj_weight),
            view_mut!(prefix, "proj_bias", self.proj_bias),
            view_mut!(prefix, "context", self.context),
        ]
    }
}

/// Layer sizes of the encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub embedding_dim: usize,
    pub word_hidden: usize,
    pub word_attention: usize,
    pub sentence_hidden: usize,
    pub sentence_attention: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    pub fn output_dim(&self) -> usize {
        2 * self.sentence_hidden
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub word_rnn: RecurrentLayerParams,
    pub word_att: AttentionParams,
    pub sent_rnn: RecurrentLayerParams,
    pub sent_att: AttentionParams,
    pub dropout_rate: f64,
}

impl EncoderParams {
    pub fn zeros(cfg: &EncoderConfig) -> Self {
        EncoderParams {
            word_rnn: RecurrentLayerParams::zeros(cfg.embedding_dim, cfg.word_hidden),
            word_att: AttentionParams::zeros(2 * cfg.word_hidden, cfg.word_attention),
            sent_rnn: RecurrentLayerParams::zeros(2 * cfg.word_hidden, cfg.sentence_hidden),
            sent_att: AttentionParams::zeros(2 * cfg.sentence_hidden, cfg.sentence_attention),
            dropout_rate: cfg.dropout,
        }
    }

    /// Weights uniform in `[-0.1, 0.1]`, biases zero, forget-gate bias 1.
    pub fn init<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> Self {
        let word_rnn = RecurrentLayerParams::init(cfg.embedding_dim, cfg.word_hidden, rng);
        let word_att = AttentionParams::init(2 * cfg.word_hidden, cfg.word_attention, rng);
        let sent_rnn = RecurrentLayerParams::init(2 * cfg.word_hidden, cfg.sentence_hidden, rng);
        let sent_att = AttentionParams::init(2 * cfg.sentence_hidden, cfg.sentence_attention, rng);
        EncoderParams {
            word_rnn,
            word_att,
            sent_rnn,
            sent_att,
            dropout_rate: cfg.dropout,
        }
    }

    pub fn config(&self) -> EncoderConfig {
        EncoderConfig {
            embedding_dim: self.word_rnn.input_dim(),
            word_hidden: self.word_rnn.hidden_dim(),
            word_attention: self.word_att.context.len(),
            sentence_hidden: self.sent_rnn.hidden_dim(),
            sentence_attention: self.sent_att.context.len(),
            dropout: self.dropout_rate,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.sent_rnn.output_dim()
    }
}

impl Parameters for EncoderParams {
    fn tensors(&self, prefix: &str) -> Vec<TensorView<'_>> {
        let p = |n: &str| crate::params::join(prefix, n);
        let mut out = self.word_rnn.tensors(&p("word_rnn"));
        out.extend(self.word_att.tensors(&p("word_att")));
        out.extend(self.sent_rnn.tensors(&p("sent_rnn")));
        out.extend(self.sent_att.tensors(&p("sent_att")));
        out
    }

    fn tensors_mut(&mut self, prefix: &str) -> Vec<TensorViewMut<'_>> {
        let p = |n: &str| crate::params::join(prefix, n);
        let mut out = self.word_rnn.tensors_mut(&p("word_rnn"));
        out.extend(self.word_att.tensors_mut(&p("word_att")));
        out.extend(self.sent_rnn.tensors_mut(&p("sent_rnn")));
        out.extend(self.sent_att.tensors_mut(&p("sent_att")));
        out
    }
}

/// Fixed-width document representation, `2 * sentence_hidden` wide.
#[derive(Clone, Debug, PartialEq)]
pub struct DocumentVector(pub Array1<f64>);

impl DocumentVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn view(&self) -> ArrayView1<'_, f64> {
        self.0.view()
    }
}

struct StepCache {
    pos: usize,
    h_prev: Array1<f64>,
    c_prev: Array1<f64>,
    /// Activated gates `[i, f, g, o]`.
    gates: Array1<f64>,
    tanh_c: Array1<f64>,
}

pub struct BiRnnCache {
    forward: Vec<StepCache>,
    backward: Vec<StepCache>,
}

fn lstm_run(
    dir: &LstmDirection,
    inputs: ArrayView2<'_, f64>,
    positions: impl Iterator<Item = usize>,
    out: &mut Array2<f64>,
    offset: usize,
    record: bool,
) -> Vec<StepCache> {
    let hidden = dir.hidden_dim();
    let mut h = Array1::<f64>::zeros(hidden);
    let mut c = Array1::<f64>::zeros(hidden);
    let mut steps = Vec::new();
    for pos in positions {
        let mut gates = dir.w_input.dot(&inputs.row(pos)) + dir.w_hidden.dot(&h) + &dir.bias;
        for (k, z) in gates.iter_mut().enumerate() {
            *z = if (2 * hidden..3 * hidden).contains(&k) {
                z.tanh()
            } else {
                sigmoid(*z)
            };
        }
        let (i, f, g, o) = (
            gates.slice(s![..hidden]),
            gates.slice(s![hidden..2 * hidden]),
            gates.slice(s![2 * hidden..3 * hidden]),
            gates.slice(s![3 * hidden..]),
        );
        let c_new = &f * &c + &i * &g;
        let tanh_c = c_new.mapv(f64::tanh);
        let h_new = &o * &tanh_c;
        out.slice_mut(s![pos, offset..offset + hidden])
            .assign(&h_new);
        let h_prev = std::mem::replace(&mut h, h_new);
        let c_prev = std::mem::replace(&mut c, c_new);
        if record {
            steps.push(StepCache {
                pos,
                h_prev,
                c_prev,
                gates,
                tanh_c,
            });
        }
    }
    steps
}

fn lstm_backward(
    dir: &LstmDirection,
    grads: &mut LstmDirection,
    inputs: ArrayView2<'_, f64>,
    steps: &[StepCache],
    d_out: ArrayView2<'_, f64>,
    offset: usize,
    mut d_inputs: Option<&mut Array2<f64>>,
) {
    let hidden = dir.hidden_dim();
    let mut dh_next = Array1::<f64>::zeros(hidden);
    let mut dc_next = Array1::<f64>::zeros(hidden);
    let mut dz = Array1::<f64>::zeros(4 * hidden);
    for step in steps.iter().rev() {
        let dh = &d_out.slice(s![step.pos, offset..offset + hidden]) + &dh_next;
        let gates = &step.gates;
        for k in 0..hidden {
            let (i, f, g, o) = (
                gates[k],
                gates[hidden + k],
                gates[2 * hidden + k],
                gates[3 * hidden + k],
            );
            let tc = step.tanh_c[k];
            let dc = dc_next[k] + dh[k] * o * (1.0 - tc * tc);
            dz[k] = dc * g * i * (1.0 - i);
            dz[hidden + k] = dc * step.c_prev[k] * f * (1.0 - f);
            dz[2 * hidden + k] = dc * i * (1.0 - g * g);
            dz[3 * hidden + k] = dh[k] * tc * o * (1.0 - o);
            dc_next[k] = dc * f;
        }
        let x = inputs.row(step.pos);
        add_outer(&mut grads.w_input, dz.view(), x);
        add_outer(&mut grads.w_hidden, dz.view(), step.h_prev.view());
        grads.bias += &dz;
        dh_next = dir.w_hidden.t().dot(&dz);
        if let Some(d_in) = d_inputs.as_deref_mut() {
            let dx = dir.w_input.t().dot(&dz);
            let mut row = d_in.row_mut(step.pos);
            row += &dx;
        }
    }
}

fn check_rows(inputs: ArrayView2<'_, f64>, mask: &[bool], dim: usize) -> Result<(), EncoderError> {
    if inputs.ncols() != dim {
        return Err(EncoderError::DimensionMismatch {
            expected: dim,
            found: inputs.ncols(),
        });
    }
    if mask.len() != inputs.nrows() {
        return Err(EncoderError::DimensionMismatch {
            expected: inputs.nrows(),
            found: mask.len(),
        });
    }
    if !mask.iter().any(|m| *m) {
        return Err(EncoderError::Degenerate("every position is masked"));
    }
    Ok(())
}

fn birnn_run(
    inputs: ArrayView2<'_, f64>,
    mask: &[bool],
    params: &RecurrentLayerParams,
    record: bool,
) -> Result<(Array2<f64>, BiRnnCache), EncoderError> {
    check_rows(inputs, mask, params.input_dim())?;
    let hidden = params.hidden_dim();
    let mut out = Array2::zeros((inputs.nrows(), 2 * hidden));
    let active: Vec<usize> = (0..mask.len()).filter(|&t| mask[t]).collect();
    let forward = lstm_run(
        &params.forward,
        inputs,
        active.iter().copied(),
        &mut out,
        0,
        record,
    );
    let backward = lstm_run(
        &params.backward,
        inputs,
        active.iter().rev().copied(),
        &mut out,
        hidden,
        record,
    );
    Ok((out, BiRnnCache { forward, backward }))
}

/// Bidirectional LSTM over `inputs` (one row per position). Output rows are
/// `[forward ; backward]` hidden states; masked rows are zero and are skipped
/// by the recurrence.
pub fn birnn_forward(
    inputs: ArrayView2<'_, f64>,
    mask: &[bool],
    params: &RecurrentLayerParams,
) -> Result<Array2<f64>, EncoderError> {
    birnn_run(inputs, mask, params, false).map(|(out, _)| out)
}

pub fn birnn_forward_cached(
    inputs: ArrayView2<'_, f64>,
    mask: &[bool],
    params: &RecurrentLayerParams,
) -> Result<(Array2<f64>, BiRnnCache), EncoderError> {
    birnn_run(inputs, mask, params, true)
}

/// Accumulates parameter gradients into `grads` and returns the gradient with
/// respect to `inputs` when `input_grad` is set.
pub fn birnn_backward(
    params: &RecurrentLayerParams,
    grads: &mut RecurrentLayerParams,
    inputs: ArrayView2<'_, f64>,
    cache: &BiRnnCache,
    d_out: ArrayView2<'_, f64>,
    input_grad: bool,
) -> Option<Array2<f64>> {
    let hidden = params.hidden_dim();
    let mut d_inputs = input_grad.then(|| Array2::zeros(inputs.raw_dim()));
    lstm_backward(
        &params.forward,
        &mut grads.forward,
        inputs,
        &cache.forward,
        d_out,
        0,
        d_inputs.as_mut(),
    );
    lstm_backward(
        &params.backward,
        &mut grads.backward,
        inputs,
        &cache.backward,
        d_out,
        hidden,
        d_inputs.as_mut(),
    );
    d_inputs
}

pub struct AttentionCache {
    /// `tanh(W h_t + b)` per position; zero rows where masked.
    projected: Array2<f64>,
    weights: Array1<f64>,
}

pub fn attention_pool_cached(
    states: ArrayView2<'_, f64>,
    mask: &[bool],
    params: &AttentionParams,
) -> Result<(Array1<f64>, AttentionCache), EncoderError> {
    check_rows(states, mask, params.in_dim())?;
    let att_dim = params.context.len();
    let mut projected = Array2::zeros((states.nrows(), att_dim));
    let mut scores = Array1::zeros(states.nrows());
    for t in (0..mask.len()).filter(|&t| mask[t]) {
        let u = (params.proj_weight.dot(&states.row(t)) + &params.proj_bias).mapv(f64::tanh);
        scores[t] = params.context.dot(&u);
        projected.row_mut(t).assign(&u);
    }
    let weights = masked_softmax(&scores, mask);
    let pooled = weights.dot(&states);
    Ok((pooled, AttentionCache { projected, weights }))
}

/// Attention pooling. Weights are a softmax over unmasked positions and are
/// exactly zero at masked ones.
pub fn attention_pool(
    states: ArrayView2<'_, f64>,
    mask: &[bool],
    params: &AttentionParams,
) -> Result<(Array1<f64>, Array1<f64>), EncoderError> {
    attention_pool_cached(states, mask, params).map(|(pooled, cache)| (pooled, cache.weights))
}

/// Returns the gradient with respect to `states`.
pub fn attention_backward(
    params: &AttentionParams,
    grads: &mut AttentionParams,
    states: ArrayView2<'_, f64>,
    mask: &[bool],
    cache: &AttentionCache,
    d_pooled: ArrayView1<'_, f64>,
) -> Array2<f64> {
    let weights = &cache.weights;
    let mut d_states = Array2::zeros(states.raw_dim());
    let d_weights: Array1<f64> = states.dot(&d_pooled);
    let mean: f64 = weights.dot(&d_weights);
    for t in (0..mask.len()).filter(|&t| mask[t]) {
        let mut row = d_states.row_mut(t);
        row.scaled_add(weights[t], &d_pooled);
        let d_score = weights[t] * (d_weights[t] - mean);
        let u = cache.projected.row(t);
        grads.context.scaled_add(d_score, &u);
        let d_pre: Array1<f64> = ndarray::Zip::from(&u)
            .and(&params.context)
            .map_collect(|&u, &c| d_score * c * (1.0 - u * u));
        add_outer(&mut grads.proj_weight, d_pre.view(), states.row(t));
        grads.proj_bias += &d_pre;
        row += &params.proj_weight.t().dot(&d_pre);
    }
    d_states
}

/// Inverted-dropout mask: entries are 0 or `1 / (1 - rate)`.
fn dropout_mask<R: Rng + ?Sized>(
    len: usize,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Option<Array1<f64>> {
    if mode == Mode::Eval || rate <= 0.0 {
        return None;
    }
    let keep = 1.0 - rate;
    Some(Array1::from_shape_simple_fn(len, || {
        if rng.gen::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    }))
}

struct SentenceCache {
    index: usize,
    states: Array2<f64>,
    rnn: BiRnnCache,
    att: AttentionCache,
    dropout: Option<Array1<f64>>,
}

pub struct EncoderCache {
    sentences: Vec<SentenceCache>,
    sentence_inputs: Array2<f64>,
    sentence_mask: Vec<bool>,
    sent_states: Array2<f64>,
    sent_rnn: BiRnnCache,
    sent_att: AttentionCache,
    doc_dropout: Option<Array1<f64>>,
}

/// Encodes a document and records what the backward pass needs.
pub fn encode_forward<R: Rng + ?Sized>(
    input: &EncoderInput,
    params: &EncoderParams,
    mode: Mode,
    rng: &mut R,
) -> Result<(DocumentVector, EncoderCache), EncoderError> {
    if input.dim() != params.word_rnn.input_dim() {
        return Err(EncoderError::DimensionMismatch {
            expected: params.word_rnn.input_dim(),
            found: input.dim(),
        });
    }
    let sentence_mask: Vec<bool> = input.sentence_mask.to_vec();
    let word_out = params.word_rnn.output_dim();
    let mut sentence_inputs = Array2::zeros((input.s_max(), word_out));
    let mut sentences = Vec::new();
    for (index, _) in sentence_mask.iter().enumerate().filter(|(_, m)| **m) {
        let tokens = input.tensor.index_axis(Axis(0), index);
        let token_mask = input.token_mask.row(index).to_vec();
        let (states, rnn) = birnn_forward_cached(tokens, &token_mask, &params.word_rnn)?;
        let (mut pooled, att) =
            attention_pool_cached(states.view(), &token_mask, &params.word_att)?;
        let dropout = dropout_mask(word_out, params.dropout_rate, mode, rng);
        if let Some(m) = &dropout {
            pooled *= m;
        }
        sentence_inputs.row_mut(index).assign(&pooled);
        sentences.push(SentenceCache {
            index,
            states,
            rnn,
            att,
            dropout,
        });
    }
    let (sent_states, sent_rnn) =
        birnn_forward_cached(sentence_inputs.view(), &sentence_mask, &params.sent_rnn)?;
    let (mut doc, sent_att) =
        attention_pool_cached(sent_states.view(), &sentence_mask, &params.sent_att)?;
    let doc_dropout = dropout_mask(doc.len(), params.dropout_rate, mode, rng);
    if let Some(m) = &doc_dropout {
        doc *= m;
    }
    Ok((
        DocumentVector(doc),
        EncoderCache {
            sentences,
            sentence_inputs,
            sentence_mask,
            sent_states,
            sent_rnn,
            sent_att,
            doc_dropout,
        },
    ))
}

pub fn encode_document<R: Rng + ?Sized>(
    input: &EncoderInput,
    params: &EncoderParams,
    mode: Mode,
    rng: &mut R,
) -> Result<DocumentVector, EncoderError> {
    encode_forward(input, params, mode, rng).map(|(doc, _)| doc)
}

/// Backpropagates `d_doc` (gradient w.r.t. the document vector) and
/// accumulates into `grads`. Embeddings are frozen, so no input gradient is
/// produced.
pub fn encode_backward(
    input: &EncoderInput,
    params: &EncoderParams,
    cache: &EncoderCache,
    d_doc: ArrayView1<'_, f64>,
    grads: &mut EncoderParams,
) {
    let mut d_doc = d_doc.to_owned();
    if let Some(m) = &cache.doc_dropout {
        d_doc *= m;
    }
    let d_sent_states = attention_backward(
        &params.sent_att,
        &mut grads.sent_att,
        cache.sent_states.view(),
        &cache.sentence_mask,
        &cache.sent_att,
        d_doc.view(),
    );
    let d_sentence_inputs = birnn_backward(
        &params.sent_rnn,
        &mut grads.sent_rnn,
        cache.sentence_inputs.view(),
        &cache.sent_rnn,
        d_sent_states.view(),
        true,
    )
    .expect("input gradient requested");
    for sentence in &cache.sentences {
        let mut d_pooled = d_sentence_inputs.row(sentence.index).to_owned();
        if let Some(m) = &sentence.dropout {
            d_pooled *= m;
        }
        let token_mask = input.token_mask.row(sentence.index).to_vec();
        let d_states = attention_backward(
            &params.word_att,
            &mut grads.word_att,
            sentence.states.view(),
            &token_mask,
            &sentence.att,
            d_pooled.view(),
        );
        birnn_backward(
            &params.word_rnn,
            &mut grads.word_rnn,
            input.tensor.index_axis(Axis(0), sentence.index),
            &sentence.rnn,
            d_states.view(),
            false,
        );
    }
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_matrix(rows: usize, cols: usize, r: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || r.gen_range(-1.0..1.0))
    }

    fn randomize<P: Parameters>(p: &mut P, scale: f64, r: &mut ChaCha8Rng) {
        for t in p.tensors_mut("") {
            for v in t.data.iter_mut() {
                *v = r.gen_range(-scale..scale);
            }
        }
    }

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// Straight-line scalar LSTM, one direction, over the given positions.
    fn reference_lstm(
        dir: &LstmDirection,
        x: &Array2<f64>,
        order: &[usize],
    ) -> Vec<(usize, Vec<f64>)> {
        let h_dim = dir.w_hidden.ncols();
        let i_dim = dir.w_input.ncols();
        let mut h = vec![0.0; h_dim];
        let mut c = vec![0.0; h_dim];
        let mut out = Vec::new();
        for &t in order {
            let mut z = vec![0.0; 4 * h_dim];
            for r in 0..4 * h_dim {
                let mut acc = dir.bias[r];
                for k in 0..i_dim {
                    acc += dir.w_input[[r, k]] * x[[t, k]];
                }
                for k in 0..h_dim {
                    acc += dir.w_hidden[[r, k]] * h[k];
                }
                z[r] = acc;
            }
            let mut h_new = vec![0.0; h_dim];
            for k in 0..h_dim {
                let i = sig(z[k]);
                let f = sig(z[h_dim + k]);
                let g = z[2 * h_dim + k].tanh();
                let o = sig(z[3 * h_dim + k]);
                c[k] = f * c[k] + i * g;
                h_new[k] = o * c[k].tanh();
            }
            h = h_new;
            out.push((t, h.clone()));
        }
        out
    }

    #[test]
    fn birnn_zero_params_give_zero_output() {
        let params = RecurrentLayerParams::zeros(3, 2);
        let x = random_matrix(4, 3, &mut rng(1));
        let out = birnn_forward(x.view(), &[true, true, false, true], &params).unwrap();
        assert_eq!(out.shape(), &[4, 4]);
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn birnn_single_position_shape() {
        let params = RecurrentLayerParams::init(3, 5, &mut rng(2));
        let x = random_matrix(3, 3, &mut rng(3));
        let out = birnn_forward(x.view(), &[false, true, false], &params).unwrap();
        assert_eq!(out.shape(), &[3, 10]);
        assert!(out
            .row(0)
            .iter()
            .chain(out.row(2).iter())
            .all(|&v| v == 0.0));
        assert!(out.row(1).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn birnn_matches_scalar_reference() {
        let mut r = rng(4);
        let mut params = RecurrentLayerParams::zeros(3, 4);
        randomize(&mut params, 0.8, &mut r);
        let x = random_matrix(3, 3, &mut r);
        let out = birnn_forward(x.view(), &[true; 3], &params).unwrap();
        for (t, h) in reference_lstm(&params.forward, &x, &[0, 1, 2]) {
            for k in 0..4 {
                assert!((out[[t, k]] - h[k]).abs() < 1e-10);
            }
        }
        for (t, h) in reference_lstm(&params.backward, &x, &[2, 1, 0]) {
            for k in 0..4 {
                assert!((out[[t, 4 + k]] - h[k]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn birnn_masked_positions_do_not_advance_state() {
        let mut r = rng(5);
        let params = RecurrentLayerParams::init(2, 3, &mut r);
        let x = random_matrix(4, 2, &mut r);
        let out = birnn_forward(x.view(), &[true, false, true, false], &params).unwrap();
        let compact = ndarray::stack![Axis(0), x.row(0), x.row(2)];
        let dense = birnn_forward(compact.view(), &[true, true], &params).unwrap();
        assert_eq!(out.row(0), dense.row(0));
        assert_eq!(out.row(2), dense.row(1));
    }

    #[test]
    fn birnn_all_masked_is_degenerate() {
        let params = RecurrentLayerParams::zeros(2, 2);
        let x = Array2::zeros((2, 2));
        assert_eq!(
            birnn_forward(x.view(), &[false, false], &params),
            Err(EncoderError::Degenerate("every position is masked"))
        );
    }

    #[test]
    fn attention_singleton_and_symmetry() {
        let params = AttentionParams::init(3, 2, &mut rng(6));
        let states = random_matrix(3, 3, &mut rng(7));
        let (pooled, w) = attention_pool(states.view(), &[false, true, false], &params).unwrap();
        assert_eq!(w.to_vec(), vec![0.0, 1.0, 0.0]);
        assert_eq!(pooled, states.row(1));

        let same = ndarray::stack![Axis(0), states.row(0), states.row(0)];
        let (_, w) = attention_pool(same.view(), &[true, true], &params).unwrap();
        assert!((w[0] - 0.5).abs() < 1e-15 && (w[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn attention_matches_direct_formula() {
        let mut r = rng(8);
        let mut params = AttentionParams::zeros(3, 2);
        randomize(&mut params, 1.0, &mut r);
        let states = random_matrix(4, 3, &mut r);
        let (pooled, w) = attention_pool(states.view(), &[true; 4], &params).unwrap();
        let mut e = [0.0; 4];
        for t in 0..4 {
            let mut score = 0.0;
            for a in 0..2 {
                let mut pre = params.proj_bias[a];
                for k in 0..3 {
                    pre += params.proj_weight[[a, k]] * states[[t, k]];
                }
                score += params.context[a] * pre.tanh();
            }
            e[t] = score.exp();
        }
        let total: f64 = e.iter().sum();
        for t in 0..4 {
            assert!((w[t] - e[t] / total).abs() < 1e-10);
        }
        for k in 0..3 {
            let expected: f64 = (0..4).map(|t| e[t] / total * states[[t, k]]).sum();
            assert!((pooled[k] - expected).abs() < 1e-10);
        }
    }

    #[test]
    fn attention_all_masked_is_degenerate() {
        let params = AttentionParams::zeros(2, 2);
        let states = Array2::zeros((2, 2));
        assert!(attention_pool(states.view(), &[false, false], &params).is_err());
    }

    fn tiny_config() -> EncoderConfig {
        EncoderConfig {
            embedding_dim: 3,
            word_hidden: 2,
            word_attention: 2,
            sentence_hidden: 3,
            sentence_attention: 2,
            dropout: 0.5,
        }
    }

    fn tiny_input(
        r: &mut ChaCha8Rng,
        sentences: &[usize],
        s_max: usize,
        t_max: usize,
    ) -> EncoderInput {
        let mut tensor = ndarray::Array3::zeros((s_max, t_max, 3));
        let mut sentence_mask = Array1::from_elem(s_max, false);
        let mut token_mask = Array2::from_elem((s_max, t_max), false);
        for (s, &n) in sentences.iter().enumerate() {
            sentence_mask[s] = true;
            for t in 0..n {
                token_mask[[s, t]] = true;
                for k in 0..3 {
                    tensor[[s, t, k]] = r.gen_range(-1.0..1.0);
                }
            }
        }
        EncoderInput {
            tensor,
            sentence_mask,
            token_mask,
        }
    }

    #[test]
    fn eval_mode_is_deterministic_and_shaped() {
        let mut r = rng(9);
        let params = EncoderParams::init(&tiny_config(), &mut r);
        let input = tiny_input(&mut r, &[2, 3], 3, 4);
        let a = encode_document(&input, &params, Mode::Eval, &mut rng(1)).unwrap();
        let b = encode_document(&input, &params, Mode::Eval, &mut rng(2)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 6);
    }

    #[test]
    fn single_sentence_document_reduces_to_sentence_level_encoding() {
        let mut r = rng(10);
        let params = EncoderParams::init(&tiny_config(), &mut r);
        let input = tiny_input(&mut r, &[3], 2, 4);
        let doc = encode_document(&input, &params, Mode::Eval, &mut r).unwrap();

        let mask = input.token_mask.row(0).to_vec();
        let states =
            birnn_forward(input.tensor.index_axis(Axis(0), 0), &mask, &params.word_rnn).unwrap();
        let (sentence, _) = attention_pool(states.view(), &mask, &params.word_att).unwrap();
        let seq = sentence.insert_axis(Axis(0));
        let sent_states = birnn_forward(seq.view(), &[true], &params.sent_rnn).unwrap();
        let (expected, _) = attention_pool(sent_states.view(), &[true], &params.sent_att).unwrap();
        assert_eq!(doc.0, expected);
    }

    #[test]
    fn padding_contents_do_not_matter() {
        let mut r = rng(11);
        let params = EncoderParams::init(&tiny_config(), &mut r);
        let input = tiny_input(&mut r, &[2, 1], 3, 3);
        let clean = encode_document(&input, &params, Mode::Eval, &mut r).unwrap();
        let mut noisy = input.clone();
        for s in 0..3 {
            for t in 0..3 {
                if !noisy.token_mask[[s, t]] {
                    for k in 0..3 {
                        noisy.tensor[[s, t, k]] = r.gen_range(-5.0..5.0);
                    }
                }
            }
        }
        assert_eq!(
            clean,
            encode_document(&noisy, &params, Mode::Eval, &mut r).unwrap()
        );
    }

    #[test]
    fn train_mode_dropout_uses_inverted_scaling() {
        let mut r = rng(12);
        let params = EncoderParams::init(&tiny_config(), &mut r);
        let input = tiny_input(&mut r, &[2], 1, 2);
        let eval = encode_document(&input, &params, Mode::Eval, &mut r).unwrap();
        let train = encode_document(&input, &params, Mode::Train, &mut rng(99)).unwrap();
        assert_ne!(eval, train);
        let mut no_drop = params.clone();
        no_drop.dropout_rate = 0.0;
        assert_eq!(
            eval,
            encode_document(&input, &no_drop, Mode::Train, &mut r).unwrap()
        );
    }

    #[test]
    fn dimension_mismatch_reported() {
        let mut r = rng(13);
        let params = EncoderParams::init(&tiny_config(), &mut r);
        let mut input = tiny_input(&mut r, &[1], 1, 1);
        input.tensor = ndarray::Array3::zeros((1, 1, 4));
        assert!(matches!(
            encode_document(&input, &params, Mode::Eval, &mut r),
            Err(EncoderError::DimensionMismatch {
                expected: 3,
                found: 4
            })
        ));
    }

    /// Scalar objective `w · encode(x)` with a fixed dropout stream.
    fn objective(params: &EncoderParams, input: &EncoderInput, w: &Array1<f64>, seed: u64) -> f64 {
        let doc = encode_document(input, params, Mode::Train, &mut rng(seed)).unwrap();
        doc.0.dot(w)
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let mut r = rng(14);
        let mut cfg = tiny_config();
        cfg.dropout = 0.3;
        let mut params = EncoderParams::init(&cfg, &mut r);
        randomize(&mut params, 0.6, &mut r);
        let input = tiny_input(&mut r, &[3, 2, 1], 4, 4);
        let w = Array1::from_shape_simple_fn(6, || r.gen_range(-1.0..1.0));

        let (_, cache) = encode_forward(&input, &params, Mode::Train, &mut rng(77)).unwrap();
        let mut grads = EncoderParams::zeros(&cfg);
        encode_backward(&input, &params, &cache, w.view(), &mut grads);

        let analytic: Vec<(String, Vec<f64>)> = grads
            .tensors("")
            .into_iter()
            .map(|t| (t.name, t.data.to_vec()))
            .collect();
        let h = 1e-4;
        for (ti, (name, grad)) in analytic.iter().enumerate() {
            for (k, &g) in grad.iter().enumerate() {
                let mut plus = params.clone();
                plus.tensors_mut("")[ti].data[k] += h;
                let mut minus = params.clone();
                minus.tensors_mut("")[ti].data[k] -= h;
                let numeric = (objective(&plus, &input, &w, 77)
                    - objective(&minus, &input, &w, 77))
                    / (2.0 * h);
                let rel = (g - numeric).abs() / g.abs().max(numeric.abs()).max(1e-6);
                assert!(rel < 1e-3, "{name}[{k}]: analytic {g} numeric {numeric}");
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn attention_weights_are_a_masked_distribution(
                seed in any::<u64>(),
                mask in prop::collection::vec(any::<bool>(), 1..8),
            ) {
                prop_assume!(mask.iter().any(|m| *m));
                let mut r = rng(seed);
                let mut params = AttentionParams::zeros(3, 2);
                randomize(&mut params, 2.0, &mut r);
                let states = random_matrix(mask.len(), 3, &mut r);
                let (_, w) = attention_pool(states.view(), &mask, &params).unwrap();
                prop_assert!((w.sum() - 1.0).abs() < 1e-6);
                for (wt, m) in w.iter().zip(&mask) {
                    prop_assert!(*wt >= 0.0);
                    if !m { prop_assert_eq!(*wt, 0.0); }
                }
            }

            #[test]
            fn output_widths_follow_hidden_sizes(wh in 1usize..4, sh in 1usize..4, seed in any::<u64>()) {
                let cfg = EncoderConfig {
                    embedding_dim: 3, word_hidden: wh, word_attention: 2,
                    sentence_hidden: sh, sentence_attention: 2, dropout: 0.0,
                };
                let mut r = rng(seed);
                let params = EncoderParams::init(&cfg, &mut r);
                let input = tiny_input(&mut r, &[2, 1], 2, 3);
                let doc = encode_document(&input, &params, Mode::Eval, &mut r).unwrap();
                prop_assert_eq!(doc.len(), 2 * sh);
                prop_assert_eq!(params.sent_rnn.input_dim(), 2 * wh);
            }
        }
    }
}
