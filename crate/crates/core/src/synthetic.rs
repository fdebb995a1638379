//! Small generated corpora and fixtures for smoke tests and numeric checks.
//!
//! The keyword corpus has one label per keyword: every relevant label
//! contributes a sentence containing its keyword, and a marker token
//! `count{c}` states how many labels the document carries. A model that
//! learns anything at all separates it cleanly.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Document, LabelVocabulary};
use crate::encoder::EncoderConfig;
use crate::params::Parameters;
use crate::preprocess::{EmbeddingTable, EncoderInput, PreprocessConfig};
use crate::trainer::ModelBundle;

#[derive(Clone, Debug, PartialEq)]
pub struct KeywordCorpusConfig {
    pub num_docs: usize,
    pub num_labels: usize,
    /// Documents carry between 1 and `max_count` labels.
    pub max_count: usize,
    pub filler_words: usize,
    /// Filler tokens added around each keyword or marker. Fillers dilute the
    /// marker in the pooled document vector and make counts harder to learn.
    pub fillers_per_sentence: usize,
    pub embedding_dim: usize,
}

impl Default for KeywordCorpusConfig {
    fn default() -> Self {
        KeywordCorpusConfig {
            num_docs: 500,
            num_labels: 8,
            max_count: 3,
            filler_words: 30,
            fillers_per_sentence: 0,
            embedding_dim: 16,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub docs: Vec<Document>,
    /// Embedding rows covering every generated token.
    pub embeddings: Vec<(String, Vec<f64>)>,
}

impl SyntheticCorpus {
    pub fn table(&self) -> EmbeddingTable {
        let dim = self.embeddings.first().map_or(0, |(_, v)| v.len());
        EmbeddingTable::new(dim, self.embeddings.clone())
    }
}

pub fn label_name(index: usize) -> String {
    format!("topic{index}")
}

pub fn keyword_corpus(cfg: &KeywordCorpusConfig, seed: u64) -> SyntheticCorpus {
    assert!(cfg.max_count >= 1 && cfg.max_count <= cfg.num_labels);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keyword = |j: usize| format!("kw{j}");
    let filler = |j: usize| format!("w{j}");

    let mut tokens: Vec<String> = (0..cfg.num_labels).map(keyword).collect();
    tokens.extend((1..=cfg.max_count).map(|c| format!("count{c}")));
    tokens.extend((0..cfg.filler_words).map(filler));
    tokens.push(".".to_string());
    let embeddings = tokens
        .into_iter()
        .map(|t| {
            let v = (0..cfg.embedding_dim)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            (t, v)
        })
        .collect();

    let sentence = |rng: &mut ChaCha8Rng, key: String| {
        let mut words: Vec<String> = (0..cfg.fillers_per_sentence)
            .map(|_| filler(rng.gen_range(0..cfg.filler_words)))
            .collect();
        let at = rng.gen_range(0..=words.len());
        words.insert(at, key);
        format!("{}.", words.join(" "))
    };
    let docs = (0..cfg.num_docs)
        .map(|i| {
            let count = rng.gen_range(1..=cfg.max_count);
            let labels = rand::seq::index::sample(&mut rng, cfg.num_labels, count).into_vec();
            let mut sentences: Vec<String> = labels
                .iter()
                .map(|&j| sentence(&mut rng, keyword(j)))
                .collect();
            sentences.push(sentence(&mut rng, format!("count{count}")));
            sentences.shuffle(&mut rng);
            Document::new(
                format!("doc{i:04}"),
                sentences.join(" "),
                labels.into_iter().map(label_name),
            )
        })
        .collect();
    SyntheticCorpus { docs, embeddings }
}

/// A tiny model and two padded documents, small enough for an exhaustive
/// finite-difference check. Stage-1 parameters are drawn from `U(-0.5, 0.5)`
/// so that label scores sit well away from the ReLU kink.
pub fn grad_check_fixture(seed: u64) -> (ModelBundle, Vec<(EncoderInput, BTreeSet<usize>)>) {
    let (dim, s_max, t_max, labels) = (4, 3, 4, 5);
    let encoder = EncoderConfig {
        embedding_dim: dim,
        word_hidden: 3,
        word_attention: 3,
        sentence_hidden: 3,
        sentence_attention: 3,
        dropout: 0.5,
    };
    let vocab = LabelVocabulary::from_labels((0..labels).map(label_name));
    let preprocess = PreprocessConfig::new(s_max, t_max, &Default::default());
    let mut bundle = ModelBundle::new(&encoder, &[4], 3, preprocess, vocab, seed);

    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut views = bundle.encoder.tensors_mut("");
    views.extend(bundle.label_head.tensors_mut(""));
    for view in views {
        view.data
            .iter_mut()
            .for_each(|v| *v = rng.gen_range(-0.5..0.5));
    }
    // Sentence lengths per document; zero marks a padded sentence.
    let layouts: [[usize; 3]; 2] = [[4, 2, 0], [1, 3, 2]];
    let golds: [&[usize]; 2] = [&[0, 2], &[1]];
    let samples = layouts
        .iter()
        .zip(golds)
        .map(|(lengths, gold)| {
            let mut tensor = Array3::zeros((s_max, t_max, dim));
            let mut token_mask = Array2::from_elem((s_max, t_max), false);
            let mut sentence_mask = Array1::from_elem(s_max, false);
            for (s, &len) in lengths.iter().enumerate() {
                sentence_mask[s] = len > 0;
                for t in 0..len {
                    token_mask[[s, t]] = true;
                    for k in 0..dim {
                        tensor[[s, t, k]] = rng.gen_range(-1.0..1.0);
                    }
                }
            }
            let input = EncoderInput {
                tensor,
                sentence_mask,
                token_mask,
            };
            (input, gold.iter().copied().collect())
        })
        .collect();
    (bundle, samples)
}
