//! Two-stage training.
//!
//! Stage 1 trains the encoder and the label head end to end under the LSEP
//! loss for a fixed number of epochs. Stage 2 freezes both, computes document
//! vectors once in evaluation mode and trains only the count head by
//! cross-entropy, with early stopping on the validation count loss. Both
//! stages use Adam with global-norm gradient clipping.
//!
//! All randomness (initialisation, shuffling, dropout, negative sampling)
//! derives from `TrainConfig::seed` through independent ChaCha streams, so a
//! run is reproducible bit for bit.

use std::collections::BTreeSet;

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Document, LabelVocabulary};
use crate::encoder::{
    encode_backward, encode_document, encode_forward, DocumentVector, EncoderConfig, EncoderError,
    EncoderParams, Mode,
};
use crate::heads::{
    clamp_count, lsep_loss_sampled_with_gradient, lsep_loss_with_gradient,
    predict_count_distribution, relu, relu_backward, score_labels, CountHead, HeadError,
    LabelScoreHead, LsepSampling, ScoreVector,
};
use crate::params::{global_norm, Parameters, TensorView, TensorViewMut};
use crate::preprocess::{
    embed_document, tokenize_document, EmbeddingTable, EncoderInput, PreprocessConfig,
    PreprocessError, TokenizedDocument,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("training split is empty")]
    EmptyTrainingSet,
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("non-finite {what} loss in stage {stage}, epoch {epoch}")]
    NonFiniteLoss {
        stage: u8,
        epoch: usize,
        what: &'static str,
    },
    #[error("parameter shapes do not match the optimizer state")]
    ShapeMismatch,
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub stage1_epochs: usize,
    pub batch_size: usize,
    pub early_stop_patience: usize,
    pub stage2_max_epochs: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    /// Global-norm clipping threshold; `0` disables clipping.
    pub grad_clip: f64,
    pub lsep_sampling: LsepSampling,
    /// Apply LSEP to `Wx + b` instead of the ReLU output.
    pub lsep_on_preactivation: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            stage1_epochs: 50,
            batch_size: 32,
            early_stop_patience: 5,
            stage2_max_epochs: 100,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            grad_clip: 5.0,
            lsep_sampling: LsepSampling::default(),
            lsep_on_preactivation: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: &str| Err(TrainError::InvalidConfig(msg.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.stage1_epochs == 0 || self.stage2_max_epochs == 0 {
            return bad("epoch counts must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.early_stop_patience == 0 {
            return bad("early_stop_patience must be at least 1");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if self.lsep_sampling.neg_sample_size == 0 {
            return bad("neg_sample_size must be at least 1");
        }
        Ok(())
    }
}

// Stream identifiers for the per-purpose random generators.
const STREAM_INIT: u64 = 0;
const STREAM_SHUFFLE_1: u64 = 1;
const STREAM_DROPOUT_1: u64 = 2;
const STREAM_SHUFFLE_2: u64 = 3;

fn stream_rng(seed: u64, stream: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((stream << 32) | epoch as u64);
    rng
}

/// Every learned parameter plus what is needed to reproduce preprocessing.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub encoder: EncoderParams,
    pub label_head: LabelScoreHead,
    pub count_head: CountHead,
    pub vocab: LabelVocabulary,
    pub preprocess: PreprocessConfig,
    /// Maximum permitted labels `n`; the count head predicts over `1..=n`.
    pub max_labels: usize,
    pub count_head_trained: bool,
}

impl ModelBundle {
    pub fn new(
        encoder: &EncoderConfig,
        count_hidden: &[usize],
        max_labels: usize,
        preprocess: PreprocessConfig,
        vocab: LabelVocabulary,
        seed: u64,
    ) -> Self {
        let mut rng = stream_rng(seed, STREAM_INIT, 0);
        let encoder_params = EncoderParams::init(encoder, &mut rng);
        let label_head = LabelScoreHead::init(vocab.len(), encoder.output_dim(), &mut rng);
        let count_head = CountHead::init(encoder.output_dim(), count_hidden, max_labels, &mut rng);
        ModelBundle {
            encoder: encoder_params,
            label_head,
            count_head,
            vocab,
            preprocess,
            max_labels,
            count_head_trained: false,
        }
    }

    pub fn tokenize(&self, doc: &Document) -> TokenizedDocument {
        tokenize_document(doc, &self.preprocess.stoplist())
    }

    pub fn embed(
        &self,
        doc: &TokenizedDocument,
        table: &EmbeddingTable,
    ) -> Result<EncoderInput, PreprocessError> {
        embed_document(doc, table, self.preprocess.s_max, self.preprocess.t_max)
    }

    /// Evaluation-mode document vector.
    pub fn document_vector(&self, input: &EncoderInput) -> Result<DocumentVector, EncoderError> {
        // Eval mode draws nothing from the generator.
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        encode_document(input, &self.encoder, Mode::Eval, &mut unused)
    }

    /// Preprocess, encode in evaluation mode and score one document.
    pub fn score_document(
        &self,
        doc: &Document,
        table: &EmbeddingTable,
    ) -> Result<(ScoreVector, DocumentVector), TrainError> {
        let input = self.embed(&self.tokenize(doc), table)?;
        let vector = self.document_vector(&input)?;
        let scores = score_labels(&vector, &self.label_head)?;
        Ok((scores, vector))
    }

    /// Named tensors in artifact order.
    pub fn all_tensors(&self) -> Vec<TensorView<'_>> {
        let mut out = self.encoder.tensors("encoder");
        out.extend(self.label_head.tensors("label_head"));
        out.extend(self.count_head.tensors("count_head"));
        out
    }

    pub fn all_tensors_mut(&mut self) -> Vec<TensorViewMut<'_>> {
        let mut out = self.encoder.tensors_mut("encoder");
        out.extend(self.label_head.tensors_mut("label_head"));
        out.extend(self.count_head.tensors_mut("count_head"));
        out
    }
}

/// Gradients for the stage-1 parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Grads {
    pub encoder: EncoderParams,
    pub label_head: LabelScoreHead,
}

impl Stage1Grads {
    pub fn zeros_like(bundle: &ModelBundle) -> Self {
        Stage1Grads {
            encoder: EncoderParams::zeros(&bundle.encoder.config()),
            label_head: LabelScoreHead::zeros(
                bundle.label_head.num_labels(),
                bundle.label_head.input_dim(),
            ),
        }
    }
}

impl Parameters for Stage1Grads {
    fn tensors(&self, prefix: &str) -> Vec<TensorView<'_>> {
        let mut out = self
            .encoder
            .tensors(&crate::params::join(prefix, "encoder"));
        out.extend(
            self.label_head
                .tensors(&crate::params::join(prefix, "label_head")),
        );
        out
    }

    fn tensors_mut(&mut self, prefix: &str) -> Vec<TensorViewMut<'_>> {
        let mut out = self
            .encoder
            .tensors_mut(&crate::params::join(prefix, "encoder"));
        out.extend(
            self.label_head
                .tensors_mut(&crate::params::join(prefix, "label_head")),
        );
        out
    }
}

fn stage1_views(bundle: &mut ModelBundle) -> Vec<TensorViewMut<'_>> {
    let mut out = bundle.encoder.tensors_mut("encoder");
    out.extend(bundle.label_head.tensors_mut("label_head"));
    out
}

/// Adam moment estimates, one buffer per parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
    pub step: u64,
}

/// One bias-corrected Adam step. Gradients are checked for finiteness before
/// any parameter is touched.
pub fn adam_update(
    params: Vec<TensorViewMut<'_>>,
    grads: &[TensorView<'_>],
    state: &mut OptimizerState,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    if params.len() != grads.len()
        || params
            .iter()
            .zip(grads)
            .any(|(p, g)| p.data.len() != g.data.len())
    {
        return Err(TrainError::ShapeMismatch);
    }
    if let Some(bad) = grads.iter().find(|g| g.data.iter().any(|v| !v.is_finite())) {
        return Err(TrainError::NonFiniteGradient(bad.name.clone()));
    }
    if state.first.is_empty() {
        state.first = grads.iter().map(|g| vec![0.0; g.data.len()]).collect();
        state.second = state.first.clone();
    } else if state.first.len() != grads.len() {
        return Err(TrainError::ShapeMismatch);
    }
    state.step += 1;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let correct1 = 1.0 - b1.powi(state.step as i32);
    let correct2 = 1.0 - b2.powi(state.step as i32);
    for (k, (param, grad)) in params.into_iter().zip(grads).enumerate() {
        let (m, v) = (&mut state.first[k], &mut state.second[k]);
        for i in 0..grad.data.len() {
            let g = grad.data[i];
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let m_hat = m[i] / correct1;
            let v_hat = v[i] / correct2;
            param.data[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_epsilon);
        }
    }
    Ok(())
}

/// Rescales `grads` to global norm `max_norm` if it is larger. Returns whether
/// clipping happened.
fn clip_gradients<P: Parameters>(grads: &mut P, max_norm: f64) -> bool {
    if max_norm <= 0.0 {
        return false;
    }
    let norm = global_norm(&grads.tensors(""));
    if norm > max_norm {
        let scale = max_norm / norm;
        for t in grads.tensors_mut("") {
            t.data.iter_mut().for_each(|v| *v *= scale);
        }
        log::debug!("gradient norm {norm:.4} clipped to {max_norm}");
        true
    } else {
        false
    }
}

fn scale<P: Parameters>(grads: &mut P, factor: f64) {
    for t in grads.tensors_mut("") {
        t.data.iter_mut().for_each(|v| *v *= factor);
    }
}

/// A preprocessed training document.
#[derive(Clone, Debug)]
pub struct Example {
    pub tokens: TokenizedDocument,
    /// Gold labels present in the vocabulary.
    pub gold: BTreeSet<usize>,
    /// Size of the full gold set, before vocabulary filtering.
    pub gold_count: usize,
}

/// Tokenizes documents for training. Degenerate documents (no sentences left
/// after preprocessing) are dropped and their ids returned.
pub fn prepare_examples(docs: &[Document], bundle: &ModelBundle) -> (Vec<Example>, Vec<String>) {
    let mut examples = Vec::with_capacity(docs.len());
    let mut skipped = Vec::new();
    for doc in docs {
        let tokens = bundle.tokenize(doc);
        if tokens.is_degenerate() {
            log::warn!("skipping degenerate document `{}`", doc.id);
            skipped.push(doc.id.clone());
            continue;
        }
        examples.push(Example {
            tokens,
            gold: bundle.vocab.encode(&doc.gold_labels),
            gold_count: doc.gold_labels.len(),
        });
    }
    (examples, skipped)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: u8,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

impl EpochLog {
    /// Tab-separated `stage epoch train_loss val_loss`; a missing validation
    /// loss is written as `NA`.
    pub fn to_line(&self) -> String {
        let val = self
            .val_loss
            .map_or_else(|| "NA".to_string(), |v| format!("{v:.8}"));
        format!(
            "stage{}\t{}\t{:.8}\t{}",
            self.stage, self.epoch, self.train_loss, val
        )
    }
}

/// Stage-1 loss for one document; accumulates gradients when `grads` is given.
#[allow(clippy::too_many_arguments)]
fn stage1_document(
    bundle: &ModelBundle,
    input: &EncoderInput,
    gold: &BTreeSet<usize>,
    mode: Mode,
    rng: &mut ChaCha8Rng,
    cfg: &TrainConfig,
    exact: bool,
    grads: Option<&mut Stage1Grads>,
) -> Result<f64, TrainError> {
    let (doc, cache) = encode_forward(input, &bundle.encoder, mode, rng)?;
    let pre = bundle.label_head.preactivation(doc.view())?;
    let target: Vec<f64> = if cfg.lsep_on_preactivation {
        pre.to_vec()
    } else {
        relu(&pre).0
    };
    let (loss, d_target) = if exact {
        lsep_loss_with_gradient(&target, gold)?
    } else {
        lsep_loss_sampled_with_gradient(&target, gold, cfg.lsep_sampling, rng)?
    };
    if let Some(grads) = grads {
        let d_pre = if cfg.lsep_on_preactivation {
            Array1::from(d_target)
        } else {
            relu_backward(&pre, &d_target)
        };
        let d_doc = bundle
            .label_head
            .backward(&mut grads.label_head, doc.view(), d_pre.view());
        encode_backward(
            input,
            &bundle.encoder,
            &cache,
            d_doc.view(),
            &mut grads.encoder,
        );
    }
    Ok(loss)
}

/// Mean exact LSEP over `examples` in evaluation mode.
pub fn evaluate_stage1_loss(
    bundle: &ModelBundle,
    examples: &[Example],
    table: &EmbeddingTable,
    cfg: &TrainConfig,
) -> Result<Option<f64>, TrainError> {
    if examples.is_empty() {
        return Ok(None);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut total = 0.0;
    for ex in examples {
        let input = bundle.embed(&ex.tokens, table)?;
        total += stage1_document(
            bundle,
            &input,
            &ex.gold,
            Mode::Eval,
            &mut rng,
            cfg,
            true,
            None,
        )?;
    }
    Ok(Some(total / examples.len() as f64))
}

fn ensure_finite(
    value: f64,
    stage: u8,
    epoch: usize,
    what: &'static str,
) -> Result<(), TrainError> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(TrainError::NonFiniteLoss { stage, epoch, what })
    }
}

/// Trains the encoder and label head. The count head is not touched.
pub fn train_stage1(
    bundle: &mut ModelBundle,
    train: &[Example],
    validation: &[Example],
    table: &EmbeddingTable,
    cfg: &TrainConfig,
) -> Result<Vec<EpochLog>, TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let mut state = OptimizerState::default();
    let mut grads = Stage1Grads::zeros_like(bundle);
    let mut log = Vec::with_capacity(cfg.stage1_epochs);
    let mut clipped = 0usize;
    for epoch in 1..=cfg.stage1_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream_rng(cfg.seed, STREAM_SHUFFLE_1, epoch));
        let mut rng = stream_rng(cfg.seed, STREAM_DROPOUT_1, epoch);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grads.fill(0.0);
            for &i in batch {
                let ex = &train[i];
                let input = bundle.embed(&ex.tokens, table)?;
                epoch_loss += stage1_document(
                    bundle,
                    &input,
                    &ex.gold,
                    Mode::Train,
                    &mut rng,
                    cfg,
                    false,
                    Some(&mut grads),
                )?;
            }
            scale(&mut grads, 1.0 / batch.len() as f64);
            clipped += clip_gradients(&mut grads, cfg.grad_clip) as usize;
            let grad_views = grads.tensors("");
            adam_update(stage1_views(bundle), &grad_views, &mut state, cfg)?;
        }
        let train_loss = epoch_loss / train.len() as f64;
        ensure_finite(train_loss, 1, epoch, "training")?;
        let val_loss = evaluate_stage1_loss(bundle, validation, table, cfg)?;
        if let Some(v) = val_loss {
            ensure_finite(v, 1, epoch, "validation")?;
        }
        let entry = EpochLog {
            stage: 1,
            epoch,
            train_loss,
            val_loss,
        };
        log::info!("{}", entry.to_line());
        log.push(entry);
    }
    if clipped > 0 {
        log::info!("stage 1: gradient clipping triggered on {clipped} batches");
    }
    Ok(log)
}

/// Tracks the best validation loss and decides when to stop.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            bad_epochs: 0,
        }
    }

    /// Records an epoch's loss. Returns `(improved, stop)`.
    pub fn record(&mut self, epoch: usize, loss: f64) -> (bool, bool) {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.bad_epochs = 0;
            (true, false)
        } else {
            self.bad_epochs += 1;
            (false, self.bad_epochs >= self.patience)
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Report {
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    /// Documents whose gold count was clamped into `1..=n`.
    pub clamped: usize,
}

struct CountExample {
    vector: DocumentVector,
    count: usize,
}

fn count_examples(
    bundle: &ModelBundle,
    examples: &[Example],
    table: &EmbeddingTable,
    clamped: &mut usize,
) -> Result<Vec<CountExample>, TrainError> {
    examples
        .iter()
        .map(|ex| {
            let input = bundle.embed(&ex.tokens, table)?;
            let vector = bundle.document_vector(&input)?;
            let (count, changed) = clamp_count(ex.gold_count, bundle.max_labels);
            if changed {
                log::debug!(
                    "document `{}`: gold count {} clamped to {count}",
                    ex.tokens.doc_id,
                    ex.gold_count
                );
                *clamped += 1;
            }
            Ok(CountExample { vector, count })
        })
        .collect()
}

fn mean_count_loss(head: &CountHead, examples: &[CountExample]) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for ex in examples {
        let dist = predict_count_distribution(&ex.vector, head)?;
        total += crate::heads::count_loss(&dist, ex.count)?;
    }
    Ok(total / examples.len() as f64)
}

/// Trains the count head on frozen document vectors. Early stopping watches
/// the validation count loss, or the training loss when there is no
/// validation split; the best-scoring parameters are restored.
pub fn train_stage2(
    bundle: &mut ModelBundle,
    train: &[Example],
    validation: &[Example],
    table: &EmbeddingTable,
    cfg: &TrainConfig,
) -> Result<Stage2Report, TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let mut clamped = 0;
    let train_set = count_examples(bundle, train, table, &mut clamped)?;
    let val_set = count_examples(bundle, validation, table, &mut clamped)?;
    if clamped > 0 {
        log::info!(
            "stage 2: {clamped} gold counts clamped into 1..={}",
            bundle.max_labels
        );
    }

    let head = &mut bundle.count_head;
    let mut state = OptimizerState::default();
    let mut grads = CountHead::zeros(head.input_dim(), &head.hidden_dims(), head.max_labels());
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience);
    let mut best = head.clone();
    let mut log = Vec::new();
    for epoch in 1..=cfg.stage2_max_epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut stream_rng(cfg.seed, STREAM_SHUFFLE_2, epoch));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grads.fill(0.0);
            for &i in batch {
                let ex = &train_set[i];
                epoch_loss += head.loss_and_backward(&mut grads, ex.vector.view(), ex.count)?;
            }
            scale(&mut grads, 1.0 / batch.len() as f64);
            clip_gradients(&mut grads, cfg.grad_clip);
            let grad_views = grads.tensors("count_head");
            adam_update(head.tensors_mut("count_head"), &grad_views, &mut state, cfg)?;
        }
        let train_loss = epoch_loss / train_set.len() as f64;
        ensure_finite(train_loss, 2, epoch, "training")?;
        let val_loss = if val_set.is_empty() {
            None
        } else {
            let v = mean_count_loss(head, &val_set)?;
            ensure_finite(v, 2, epoch, "validation")?;
            Some(v)
        };
        let entry = EpochLog {
            stage: 2,
            epoch,
            train_loss,
            val_loss,
        };
        log::info!("{}", entry.to_line());
        log.push(entry);
        let (improved, stop) = stopper.record(epoch, val_loss.unwrap_or(train_loss));
        if improved {
            best = head.clone();
        }
        if stop {
            break;
        }
    }
    *head = best;
    bundle.count_head_trained = true;
    Ok(Stage2Report {
        log,
        best_epoch: stopper.best_epoch(),
        clamped,
    })
}

/// Largest relative error seen in one parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupError {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates skipped because the perturbation moved a label score
    /// across the ReLU kink.
    pub kinks_skipped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupError>,
    pub tolerance: f64,
    pub step: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| g.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor for the relative error.
    pub floor: f64,
    pub lsep_on_preactivation: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-4,
            tolerance: 1e-3,
            floor: 1e-7,
            lsep_on_preactivation: false,
        }
    }
}

const GRAD_CHECK_DROPOUT_SEED: u64 = 0x5eed;

/// Full stage-1 objective (mean LSEP over `samples`) with a fixed dropout
/// stream per sample, plus the sign pattern of every label pre-activation.
fn stage1_objective(
    bundle: &ModelBundle,
    samples: &[(EncoderInput, BTreeSet<usize>)],
    cfg: &TrainConfig,
    grads: Option<&mut Stage1Grads>,
) -> Result<(f64, Vec<bool>), TrainError> {
    let mut total = 0.0;
    let mut pattern = Vec::new();
    let mut grads = grads;
    for (k, (input, gold)) in samples.iter().enumerate() {
        let mut rng = stream_rng(GRAD_CHECK_DROPOUT_SEED, 0, k);
        let mut probe = rng.clone();
        let doc = encode_document(input, &bundle.encoder, Mode::Train, &mut probe)?;
        let pre = bundle.label_head.preactivation(doc.view())?;
        pattern.extend(pre.iter().map(|v| *v > 0.0));
        total += stage1_document(
            bundle,
            input,
            gold,
            Mode::Train,
            &mut rng,
            cfg,
            true,
            grads.as_deref_mut(),
        )?;
    }
    let n = samples.len() as f64;
    if let Some(g) = grads {
        scale(g, 1.0 / n);
    }
    Ok((total / n, pattern))
}

/// Compares analytic stage-1 gradients against central finite differences.
pub fn gradient_check(
    bundle: &ModelBundle,
    samples: &[(EncoderInput, BTreeSet<usize>)],
    tolerance: f64,
) -> Result<GradCheckReport, TrainError> {
    let opts = GradCheckOptions {
        tolerance,
        ..GradCheckOptions::default()
    };
    gradient_check_with(bundle, samples, &opts, |_| {})
}

/// Like [`gradient_check`], but lets the caller tamper with the analytic
/// gradients before comparison (used to confirm the harness catches faults).
pub fn gradient_check_with(
    bundle: &ModelBundle,
    samples: &[(EncoderInput, BTreeSet<usize>)],
    opts: &GradCheckOptions,
    tamper: impl Fn(&mut Stage1Grads),
) -> Result<GradCheckReport, TrainError> {
    let cfg = TrainConfig {
        lsep_on_preactivation: opts.lsep_on_preactivation,
        ..TrainConfig::default()
    };
    let mut grads = Stage1Grads::zeros_like(bundle);
    let (_, base_pattern) = stage1_objective(bundle, samples, &cfg, Some(&mut grads))?;
    tamper(&mut grads);
    let analytic: Vec<(String, Vec<f64>)> = grads
        .tensors("")
        .into_iter()
        .map(|t| (t.name, t.data.to_vec()))
        .collect();

    let mut probe = bundle.clone();
    let mut groups = Vec::with_capacity(analytic.len());
    for (ti, (name, grad)) in analytic.iter().enumerate() {
        let mut group = GroupError {
            name: name.clone(),
            max_rel_error: 0.0,
            checked: 0,
            kinks_skipped: 0,
        };
        for (k, &a) in grad.iter().enumerate() {
            let original = stage1_views(&mut probe)[ti].data[k];
            stage1_views(&mut probe)[ti].data[k] = original + opts.step;
            let (plus, p_plus) = stage1_objective(&probe, samples, &cfg, None)?;
            stage1_views(&mut probe)[ti].data[k] = original - opts.step;
            let (minus, p_minus) = stage1_objective(&probe, samples, &cfg, None)?;
            stage1_views(&mut probe)[ti].data[k] = original;
            if !cfg.lsep_on_preactivation && (p_plus != base_pattern || p_minus != base_pattern) {
                group.kinks_skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * opts.step);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            group.max_rel_error = group.max_rel_error.max(rel);
            group.checked += 1;
        }
        groups.push(group);
    }
    Ok(GradCheckReport {
        groups,
        tolerance: opts.tolerance,
        step: opts.step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::TensorView;

    fn cfg() -> TrainConfig {
        TrainConfig::default()
    }

    fn one_tensor(data: &mut [f64]) -> Vec<TensorViewMut<'_>> {
        vec![TensorViewMut {
            name: "p".into(),
            shape: vec![data.len()],
            data,
        }]
    }

    fn grad_view(data: &[f64]) -> Vec<TensorView<'_>> {
        vec![TensorView {
            name: "p".into(),
            shape: vec![data.len()],
            data,
        }]
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters() {
        let mut p = vec![0.5, -1.0];
        let mut state = OptimizerState::default();
        adam_update(
            one_tensor(&mut p),
            &grad_view(&[0.0, 0.0]),
            &mut state,
            &cfg(),
        )
        .unwrap();
        assert_eq!(p, vec![0.5, -1.0]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate_against_gradient() {
        let mut p = vec![0.0, 0.0, 0.0];
        let g = [0.3, -2.0, 1e-3];
        let mut state = OptimizerState::default();
        adam_update(one_tensor(&mut p), &grad_view(&g), &mut state, &cfg()).unwrap();
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
        for (pi, gi) in p.iter().zip(g) {
            let expected = -0.001 * gi / (gi.abs() + 1e-8);
            assert!((pi - expected).abs() < 1e-15);
            assert!((pi.abs() - 0.001).abs() < 1e-7);
        }
    }

    #[test]
    fn adam_is_deterministic_and_rejects_non_finite() {
        let run = || {
            let mut p = vec![1.0, 2.0];
            let mut state = OptimizerState::default();
            for step in 0..10 {
                let g = [(step as f64).sin(), (step as f64).cos()];
                adam_update(one_tensor(&mut p), &grad_view(&g), &mut state, &cfg()).unwrap();
            }
            p
        };
        assert_eq!(run(), run());

        let mut p = vec![1.0];
        let err = adam_update(
            one_tensor(&mut p),
            &grad_view(&[f64::NAN]),
            &mut OptimizerState::default(),
            &cfg(),
        )
        .unwrap_err();
        assert!(matches!(err, TrainError::NonFiniteGradient(name) if name == "p"));
        assert_eq!(p, vec![1.0]);
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate().is_ok());
        let zero_epochs = TrainConfig {
            stage1_epochs: 0,
            ..cfg()
        };
        assert!(matches!(
            zero_epochs.validate(),
            Err(TrainError::InvalidConfig(_))
        ));
        let zero_patience = TrainConfig {
            early_stop_patience: 0,
            ..cfg()
        };
        assert!(zero_patience.validate().is_err());
        let bad_lr = TrainConfig {
            learning_rate: 0.0,
            ..cfg()
        };
        assert!(bad_lr.validate().is_err());
    }

    #[test]
    fn early_stopping_semantics() {
        let mut s = EarlyStopping::new(1);
        assert_eq!(s.record(1, 1.0), (true, false));
        assert_eq!(s.record(2, 1.5), (false, true));
        assert_eq!(s.best_epoch(), 1);

        let mut s = EarlyStopping::new(2);
        s.record(1, 1.0);
        assert_eq!(s.record(2, 1.0), (false, false));
        assert_eq!(s.record(3, 0.5), (true, false));
        assert_eq!(s.record(4, 0.6), (false, false));
        assert_eq!(s.record(5, 0.7), (false, true));
        assert_eq!(s.best_epoch(), 3);
    }

    #[test]
    fn clipping_rescales_to_max_norm() {
        let mut head = LabelScoreHead::zeros(1, 2);
        head.weight[[0, 0]] = 3.0;
        head.weight[[0, 1]] = 4.0;
        assert!(clip_gradients(&mut head, 1.0));
        assert!((global_norm(&head.tensors("")) - 1.0).abs() < 1e-12);
        assert!(!clip_gradients(&mut head, 5.0));
    }

    #[test]
    fn gradient_check_passes_on_fixture() {
        let (bundle, samples) = crate::synthetic::grad_check_fixture(7);
        let report = gradient_check(&bundle, &samples, 1e-3).unwrap();
        assert!(report.passed(), "{report:?}");
        assert!(report.groups.iter().all(|g| g.checked > 0));

        let opts = GradCheckOptions {
            lsep_on_preactivation: true,
            ..GradCheckOptions::default()
        };
        let report = gradient_check_with(&bundle, &samples, &opts, |_| {}).unwrap();
        assert!(report.passed(), "{report:?}");
        assert!(report.groups.iter().all(|g| g.kinks_skipped == 0));
    }

    #[test]
    fn gradient_check_catches_corrupted_backward() {
        let (bundle, samples) = crate::synthetic::grad_check_fixture(7);
        let report = gradient_check_with(&bundle, &samples, &GradCheckOptions::default(), |g| {
            g.encoder.sent_att.context *= 1.01;
        })
        .unwrap();
        assert!(!report.passed());
        let worst = report
            .groups
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
            .unwrap();
        assert_eq!(worst.name, "encoder.sent_att.context");
    }

    #[test]
    fn gradient_check_on_zero_model() {
        let (mut bundle, samples) = crate::synthetic::grad_check_fixture(7);
        bundle.encoder.fill(0.0);
        bundle.label_head.fill(0.0);
        let mut grads = Stage1Grads::zeros_like(&bundle);
        stage1_objective(&bundle, &samples, &TrainConfig::default(), Some(&mut grads)).unwrap();
        assert!(grads
            .tensors("")
            .iter()
            .all(|t| t.data.iter().all(|&v| v == 0.0)));
        let report = gradient_check(&bundle, &samples, 1e-3).unwrap();
        assert!(report.passed(), "{report:?}");
        // Every label score sits on the ReLU kink, so bias perturbations are skipped.
        let bias = report
            .groups
            .iter()
            .find(|g| g.name == "label_head.bias")
            .unwrap();
        assert_eq!(bias.kinks_skipped, 5);
    }

    #[test]
    fn epoch_log_line_format() {
        let e = EpochLog {
            stage: 1,
            epoch: 3,
            train_loss: 0.5,
            val_loss: None,
        };
        assert_eq!(e.to_line(), "stage1\t3\t0.50000000\tNA");
    }
}
