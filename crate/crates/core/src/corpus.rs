//! Corpus ingestion, label vocabularies, train/validation/test splits and
//! label hierarchies.
//!
//! Documents are read from JSONL (`{"id", "text", "labels"}` per line, with
//! `labels` optional for unlabeled input). Label
//! hierarchies are forests read from `child<TAB>parent` edge lists; they drive
//! ancestor-closure augmentation of gold label sets and the relaxed matching
//! used by the hierarchical metrics.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: duplicate document id `{id}`")]
    DuplicateId {
        path: PathBuf,
        line: usize,
        id: String,
    },
    #[error("unknown corpus format `{0}` (expected `jsonl`)")]
    UnknownFormat(String),
    #[error("label hierarchy contains a cycle through `{0}`")]
    Cycle(String),
    #[error(
        "{path}:{line}: `{child}` already has parent `{existing}`, cannot also have `{parent}`"
    )]
    ConflictingParent {
        path: PathBuf,
        line: usize,
        child: String,
        existing: String,
        parent: String,
    },
    #[error("split ratios must be non-negative and sum to 1, got {0:?}")]
    InvalidRatios([f64; 3]),
    #[error("cannot split {0} documents into three parts (need at least 3)")]
    TooFewDocuments(usize),
}

/// A raw document with its gold label set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    #[serde(rename = "labels")]
    pub gold_labels: BTreeSet<String>,
}

impl Document {
    pub fn new<I, S>(id: impl Into<String>, text: impl Into<String>, labels: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Document {
            id: id.into(),
            text: text.into(),
            gold_labels: labels.into_iter().map(Into::into).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorpusFormat {
    Jsonl,
}

impl std::str::FromStr for CorpusFormat {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "jsonl" => Ok(CorpusFormat::Jsonl),
            other => Err(CorpusError::UnknownFormat(other.to_string())),
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonlRecord {
    id: String,
    text: String,
    #[serde(default)]
    labels: Vec<String>,
}

pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<Vec<Document>, CorpusError> {
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    match format {
        CorpusFormat::Jsonl => read_jsonl(BufReader::new(file), path),
    }
}

/// Parses JSONL records from `reader`; `origin` is only used in diagnostics.
pub fn read_jsonl<R: BufRead>(reader: R, origin: &Path) -> Result<Vec<Document>, CorpusError> {
    let mut docs = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|source| CorpusError::Io {
            path: origin.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: JsonlRecord = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            path: origin.to_path_buf(),
            line: lineno,
            message: e.to_string(),
        })?;
        if !seen.insert(record.id.clone()) {
            return Err(CorpusError::DuplicateId {
                path: origin.to_path_buf(),
                line: lineno,
                id: record.id,
            });
        }
        docs.push(Document::new(record.id, record.text, record.labels));
    }
    Ok(docs)
}

pub fn write_jsonl<W: Write>(mut writer: W, docs: &[Document]) -> std::io::Result<()> {
    for doc in docs {
        serde_json::to_writer(&mut writer, doc)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// Bijection between label strings and indices `0..L`, sorted lexicographically.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LabelVocabulary {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl LabelVocabulary {
    pub fn from_labels<I, S>(labels: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let sorted: BTreeSet<String> = labels.into_iter().map(Into::into).collect();
        let labels: Vec<String> = sorted.into_iter().collect();
        let index = labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), i))
            .collect();
        LabelVocabulary { labels, index }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn label(&self, index: usize) -> &str {
        &self.labels[index]
    }

    /// Maps a label set onto indices, dropping labels outside the vocabulary.
    pub fn encode<'a, I>(&self, labels: I) -> BTreeSet<usize>
    where
        I: IntoIterator<Item = &'a String>,
    {
        labels
            .into_iter()
            .filter_map(|l| self.index_of(l))
            .collect()
    }

    pub fn decode(&self, indices: &BTreeSet<usize>) -> BTreeSet<String> {
        indices.iter().map(|&i| self.labels[i].clone()).collect()
    }
}

pub fn build_vocabulary(docs: &[Document]) -> LabelVocabulary {
    LabelVocabulary::from_labels(docs.iter().flat_map(|d| d.gold_labels.iter().cloned()))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<Document>,
    pub validation: Vec<Document>,
    pub test: Vec<Document>,
}

pub const DEFAULT_SPLIT_RATIOS: [f64; 3] = [0.7, 0.1, 0.2];

/// Part sizes for `n` documents: `floor(r0 * n)`, `floor(r1 * n)`, remainder.
pub fn split_sizes(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    // The slack absorbs products such as 0.7 * 10 landing just below 7.
    let part = |r: f64| ((r * n as f64) + 1e-9).floor() as usize;
    let train = part(ratios[0]).min(n);
    let validation = part(ratios[1]).min(n - train);
    [train, validation, n - train - validation]
}

pub fn split_corpus(
    docs: &[Document],
    ratios: [f64; 3],
    seed: u64,
) -> Result<DatasetSplit, CorpusError> {
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0)
        || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(CorpusError::InvalidRatios(ratios));
    }
    if docs.len() < 3 {
        return Err(CorpusError::TooFewDocuments(docs.len()));
    }
    let mut order: Vec<usize> = (0..docs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let [n_train, n_val, _] = split_sizes(docs.len(), ratios);
    let take = |range: std::ops::Range<usize>| -> Vec<Document> {
        order[range].iter().map(|&i| docs[i].clone()).collect()
    };
    Ok(DatasetSplit {
        train: take(0..n_train),
        validation: take(n_train..n_train + n_val),
        test: take(n_train + n_val..docs.len()),
    })
}

/// A forest of labels: every label has at most one parent.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LabelHierarchy {
    parent_of: BTreeMap<String, String>,
}

impl LabelHierarchy {
    /// Builds a hierarchy from `(child, parent)` edges. Repeated identical
    /// edges are accepted.
    pub fn from_edges<I, S>(edges: I) -> Result<Self, CorpusError>
    where
        I: IntoIterator<Item = (S, S)>,
        S: Into<String>,
    {
        let mut parent_of = BTreeMap::new();
        for (lineno, (child, parent)) in edges.into_iter().enumerate() {
            insert_edge(
                &mut parent_of,
                child.into(),
                parent.into(),
                Path::new("<edges>"),
                lineno + 1,
            )?;
        }
        let h = LabelHierarchy { parent_of };
        h.check_acyclic()?;
        Ok(h)
    }

    pub fn parent(&self, label: &str) -> Option<&str> {
        self.parent_of.get(label).map(String::as_str)
    }

    pub fn edges(&self) -> impl Iterator<Item = (&str, &str)> {
        self.parent_of.iter().map(|(c, p)| (c.as_str(), p.as_str()))
    }

    pub fn is_empty(&self) -> bool {
        self.parent_of.is_empty()
    }

    /// Proper ancestors of `label`, nearest first.
    pub fn ancestors<'a>(&'a self, label: &'a str) -> Ancestors<'a> {
        Ancestors {
            hierarchy: self,
            current: label,
        }
    }

    pub fn is_ancestor(&self, ancestor: &str, label: &str) -> bool {
        self.ancestors(label).any(|a| a == ancestor)
    }

    /// Identical, ancestor or descendant.
    pub fn related(&self, a: &str, b: &str) -> bool {
        a == b || self.is_ancestor(a, b) || self.is_ancestor(b, a)
    }

    /// SHA-256 over the sorted `child\tparent\n` edge list.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for (child, parent) in self.edges() {
            hasher.update(child.as_bytes());
            hasher.update(b"\t");
            hasher.update(parent.as_bytes());
            hasher.update(b"\n");
        }
        hex::encode(hasher.finalize())
    }

    fn check_acyclic(&self) -> Result<(), CorpusError> {
        // Nodes known to reach a root.
        let mut rooted: HashSet<&str> = HashSet::new();
        for start in self.parent_of.keys() {
            let mut path: Vec<&str> = Vec::new();
            let mut on_path: HashSet<&str> = HashSet::new();
            let mut node = start.as_str();
            loop {
                if rooted.contains(node) {
                    break;
                }
                if !on_path.insert(node) {
                    return Err(CorpusError::Cycle(node.to_string()));
                }
                path.push(node);
                match self.parent_of.get(node) {
                    Some(p) => node = p.as_str(),
                    None => break,
                }
            }
            rooted.extend(path);
        }
        Ok(())
    }
}

pub struct Ancestors<'a> {
    hierarchy: &'a LabelHierarchy,
    current: &'a str,
}

impl<'a> Iterator for Ancestors<'a> {
    type Item = &'a str;

    fn next(&mut self) -> Option<&'a str> {
        let parent = self.hierarchy.parent_of.get(self.current)?;
        self.current = parent.as_str();
        Some(self.current)
    }
}

fn insert_edge(
    parent_of: &mut BTreeMap<String, String>,
    child: String,
    parent: String,
    path: &Path,
    line: usize,
) -> Result<(), CorpusError> {
    if child == parent {
        return Err(CorpusError::Cycle(child));
    }
    match parent_of.get(&child) {
        Some(existing) if *existing == parent => Ok(()),
        Some(existing) => Err(CorpusError::ConflictingParent {
            path: path.to_path_buf(),
            line,
            child,
            existing: existing.clone(),
            parent,
        }),
        None => {
            parent_of.insert(child, parent);
            Ok(())
        }
    }
}

pub fn load_hierarchy(path: &Path) -> Result<LabelHierarchy, CorpusError> {
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_hierarchy(BufReader::new(file), path)
}

/// Parses a `child<TAB>parent` edge list. Blank and `#` lines are skipped.
pub fn read_hierarchy<R: BufRead>(reader: R, origin: &Path) -> Result<LabelHierarchy, CorpusError> {
    let mut parent_of = BTreeMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|source| CorpusError::Io {
            path: origin.to_path_buf(),
            source,
        })?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split('\t');
        let (child, parent) = match (fields.next(), fields.next(), fields.next()) {
            (Some(c), Some(p), None) if !c.is_empty() && !p.is_empty() => (c, p),
            _ => {
                return Err(CorpusError::Parse {
                    path: origin.to_path_buf(),
                    line: lineno,
                    message: "expected `child<TAB>parent`".to_string(),
                })
            }
        };
        insert_edge(
            &mut parent_of,
            child.to_string(),
            parent.to_string(),
            origin,
            lineno,
        )?;
    }
    let h = LabelHierarchy { parent_of };
    h.check_acyclic()?;
    Ok(h)
}

/// Ancestor closure of `labels`. Labels unknown to the hierarchy map to
/// themselves.
pub fn augment_labels(labels: &BTreeSet<String>, h: &LabelHierarchy) -> BTreeSet<String> {
    let mut out = labels.clone();
    for label in labels {
        out.extend(h.ancestors(label).map(str::to_string));
    }
    out
}
