#![allow(dead_code)]

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::Command;

use mlnet_core::corpus::write_jsonl;
use mlnet_core::preprocess::write_embeddings;
use mlnet_core::synthetic::{keyword_corpus, KeywordCorpusConfig};

pub struct Output {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl Output {
    pub fn ok(self) -> Self {
        assert_eq!(self.code, 0, "mlnet failed:\n{}", self.stderr);
        self
    }
}

pub fn mlnet<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Output {
    mlnet_env(args, &[])
}

pub fn mlnet_env<S: AsRef<std::ffi::OsStr>>(args: &[S], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mlnet"));
    cmd.args(args)
        .env_remove("RUST_LOG")
        .env_remove("MLNET_THREADS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    let out = cmd.output().expect("spawn mlnet");
    Output {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

pub fn p(path: &Path) -> String {
    path.to_str().expect("utf-8 path").to_string()
}

/// Writes a keyword corpus and its embeddings; returns `(corpus, embeddings)`.
pub fn write_keyword_corpus(dir: &Path, num_docs: usize, seed: u64) -> (PathBuf, PathBuf) {
    let cfg = KeywordCorpusConfig {
        num_docs,
        ..KeywordCorpusConfig::default()
    };
    let corpus = keyword_corpus(&cfg, seed);
    let corpus_path = dir.join("corpus.jsonl");
    let emb_path = dir.join("vectors.txt");
    write_jsonl(
        BufWriter::new(File::create(&corpus_path).unwrap()),
        &corpus.docs,
    )
    .unwrap();
    write_embeddings(
        BufWriter::new(File::create(&emb_path).unwrap()),
        &corpus.embeddings,
    )
    .unwrap();
    (corpus_path, emb_path)
}

/// A deliberately tiny model so end-to-end CLI tests stay fast.
pub fn write_small_config(dir: &Path) -> PathBuf {
    let path = dir.join("small.cfg");
    std::fs::write(
        &path,
        "# tiny model for CLI tests\n\
         word_hidden = 8\n\
         word_attention = 8\n\
         sentence_hidden = 8\n\
         sentence_attention = 8\n\
         count_hidden = 8\n\
         max_labels = 3\n\
         s_max = 8\n\
         t_max = 8\n\
         learning_rate = 0.01\n\
         stage1_epochs = 3\n\
         stage2_max_epochs = 4\n\
         batch_size = 8\n\
         seed = 11\n",
    )
    .unwrap();
    path
}

/// The configuration that trains the keyword corpus to near-perfect F1.
pub fn write_keyword_config(dir: &Path) -> PathBuf {
    let path = dir.join("keyword.cfg");
    std::fs::write(
        &path,
        "task = custom\n\
         embedding_dim = 16\n\
         word_hidden = 32\n\
         word_attention = 32\n\
         sentence_hidden = 32\n\
         sentence_attention = 32\n\
         dropout = 0.5\n\
         count_hidden = 32\n\
         max_labels = 3\n\
         s_max = 8\n\
         t_max = 8\n\
         learning_rate = 0.01\n\
         stage1_epochs = 50\n\
         seed = 4\n",
    )
    .unwrap();
    path
}
