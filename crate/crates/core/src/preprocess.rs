//! Text preprocessing: sentence splitting, tokenization, stop-word removal,
//! embedding lookup and padding into fixed-shape encoder input.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array3, ArrayView1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Document;

/// The bundled English stop-word list, one word per line.
pub const DEFAULT_STOPWORDS: &str = include_str!("stopwords.txt");

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: expected {expected} vector components, found {found}")]
    InconsistentDimension {
        path: PathBuf,
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("{path}:{line}: component `{value}` is not a number")]
    NonNumeric {
        path: PathBuf,
        line: usize,
        value: String,
    },
    #[error("{path}: no embedding vectors found")]
    EmptyEmbeddings { path: PathBuf },
    #[error("document `{0}` has no sentences left after preprocessing")]
    DegenerateDocument(String),
    #[error("sentence and token limits must be at least 1 (got s_max={s_max}, t_max={t_max})")]
    InvalidLimits { s_max: usize, t_max: usize },
}

/// Splits on `.`, `!` or `?` followed by whitespace, and on line breaks.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for line in text.lines() {
        let mut start = 0;
        let mut chars = line.char_indices().peekable();
        while let Some((i, c)) = chars.next() {
            if matches!(c, '.' | '!' | '?') {
                if let Some(&(_, next)) = chars.peek() {
                    if next.is_whitespace() {
                        let end = i + c.len_utf8();
                        push_trimmed(&mut out, &line[start..end]);
                        start = end;
                    }
                }
            }
        }
        push_trimmed(&mut out, &line[start..]);
    }
    out
}

fn push_trimmed(out: &mut Vec<String>, segment: &str) {
    let segment = segment.trim();
    if !segment.is_empty() {
        out.push(segment.to_string());
    }
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation() || matches!(c, '“' | '”' | '‘' | '’' | '…' | '–' | '—')
}

/// Whitespace split, with leading and trailing punctuation peeled off into
/// single-character tokens. Everything is lowercased; internal punctuation
/// (`p53-mediated`) is kept.
pub fn tokenize(sentence: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for chunk in sentence.split_whitespace() {
        let chars: Vec<char> = chunk.chars().collect();
        let lead = chars.iter().take_while(|c| is_punct(**c)).count();
        if lead == chars.len() {
            tokens.extend(chars.iter().map(|c| c.to_string()));
            continue;
        }
        let trail = chars.iter().rev().take_while(|c| is_punct(**c)).count();
        tokens.extend(chars[..lead].iter().map(|c| c.to_string()));
        let core: String = chars[lead..chars.len() - trail].iter().collect();
        tokens.push(core.to_lowercase());
        tokens.extend(chars[chars.len() - trail..].iter().map(|c| c.to_string()));
    }
    tokens
}

pub fn remove_stopwords(tokens: Vec<String>, stoplist: &HashSet<String>) -> Vec<String> {
    if stoplist.is_empty() {
        return tokens;
    }
    tokens
        .into_iter()
        .filter(|t| !stoplist.contains(t))
        .collect()
}

/// Parses a stop-word list: one token per line, blank lines ignored.
pub fn parse_stoplist(text: &str) -> HashSet<String> {
    text.lines()
        .map(|l| l.trim().to_lowercase())
        .filter(|l| !l.is_empty())
        .collect()
}

pub fn load_stoplist(path: &Path) -> Result<HashSet<String>, PreprocessError> {
    std::fs::read_to_string(path)
        .map(|text| parse_stoplist(&text))
        .map_err(|source| PreprocessError::Io {
            path: path.to_path_buf(),
            source,
        })
}

pub fn default_stoplist() -> HashSet<String> {
    parse_stoplist(DEFAULT_STOPWORDS)
}

/// Preprocessing settings that travel with a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub s_max: usize,
    pub t_max: usize,
    /// Sorted for a stable serialized form.
    pub stopwords: Vec<String>,
}

impl PreprocessConfig {
    pub fn new(s_max: usize, t_max: usize, stoplist: &HashSet<String>) -> Self {
        let mut stopwords: Vec<String> = stoplist.iter().cloned().collect();
        stopwords.sort_unstable();
        PreprocessConfig {
            s_max,
            t_max,
            stopwords,
        }
    }

    pub fn stoplist(&self) -> HashSet<String> {
        self.stopwords.iter().cloned().collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedDocument {
    pub doc_id: String,
    /// Non-empty lowercased token lists.
    pub sentences: Vec<Vec<String>>,
}

impl TokenizedDocument {
    pub fn is_degenerate(&self) -> bool {
        self.sentences.is_empty()
    }
}

pub fn tokenize_document(doc: &Document, stoplist: &HashSet<String>) -> TokenizedDocument {
    let sentences = split_sentences(&doc.text)
        .iter()
        .map(|s| remove_stopwords(tokenize(s), stoplist))
        .filter(|tokens| !tokens.is_empty())
        .collect();
    TokenizedDocument {
        doc_id: doc.id.clone(),
        sentences,
    }
}

/// Frozen pretrained token vectors. Unknown tokens map to the zero vector.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    index: HashMap<String, usize>,
    vectors: Array2<f64>,
    unk: Array1<f64>,
}

impl EmbeddingTable {
    pub fn new(dim: usize, entries: Vec<(String, Vec<f64>)>) -> Self {
        let mut index = HashMap::with_capacity(entries.len());
        let mut flat = Vec::with_capacity(entries.len() * dim);
        for (token, vector) in entries {
            assert_eq!(vector.len(), dim, "vector for `{token}` has wrong length");
            if index.contains_key(&token) {
                continue;
            }
            index.insert(token, index.len());
            flat.extend(vector);
        }
        let vectors = Array2::from_shape_vec((index.len(), dim), flat).expect("shape");
        EmbeddingTable {
            index,
            vectors,
            unk: Array1::zeros(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.unk.len()
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn lookup(&self, token: &str) -> ArrayView1<'_, f64> {
        match self.index.get(token) {
            Some(&row) => self.vectors.row(row),
            None => self.unk.view(),
        }
    }
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingTable, PreprocessError> {
    let file = File::open(path).map_err(|source| PreprocessError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_embeddings(BufReader::new(file), path)
}

/// Reads the plain-text word-vector format: an optional `count dim` header,
/// then `token v1 ... vd` rows. Later duplicates of a token are ignored.
pub fn read_embeddings<R: BufRead>(
    reader: R,
    origin: &Path,
) -> Result<EmbeddingTable, PreprocessError> {
    let mut dim: Option<usize> = None;
    let mut entries = Vec::new();
    let mut first = true;
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|source| PreprocessError::Io {
            path: origin.to_path_buf(),
            source,
        })?;
        let fields: Vec<&str> = line.split_ascii_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if std::mem::take(&mut first)
            && fields.len() == 2
            && fields.iter().all(|f| f.parse::<usize>().is_ok())
        {
            continue;
        }
        let (token, components) = (fields[0], &fields[1..]);
        let expected = *dim.get_or_insert(components.len());
        if components.len() != expected || expected == 0 {
            return Err(PreprocessError::InconsistentDimension {
                path: origin.to_path_buf(),
                line: lineno,
                expected,
                found: components.len(),
            });
        }
        let vector = components
            .iter()
            .map(|c| {
                c.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| PreprocessError::NonNumeric {
                        path: origin.to_path_buf(),
                        line: lineno,
                        value: c.to_string(),
                    })
            })
            .collect::<Result<Vec<f64>, _>>()?;
        entries.push((token.to_string(), vector));
    }
    match dim {
        Some(dim) => Ok(EmbeddingTable::new(dim, entries)),
        None => Err(PreprocessError::EmptyEmbeddings {
            path: origin.to_path_buf(),
        }),
    }
}

/// Writes `token v1 ... vd` rows. Values round-trip exactly through
/// [`read_embeddings`].
pub fn write_embeddings<W: Write>(
    mut writer: W,
    entries: &[(String, Vec<f64>)],
) -> std::io::Result<()> {
    for (token, vector) in entries {
        write!(writer, "{token}")?;
        for v in vector {
            write!(writer, " {v}")?;
        }
        writeln!(writer)?;
    }
    writer.flush()
}

/// Padded encoder input of shape `[s_max, t_max, d]`. Masked positions hold
/// zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderInput {
    pub tensor: Array3<f64>,
    pub sentence_mask: Array1<bool>,
    pub token_mask: Array2<bool>,
}

impl EncoderInput {
    pub fn s_max(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn t_max(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.tensor.shape()[2]
    }
}

pub fn embed_document(
    doc: &TokenizedDocument,
    table: &EmbeddingTable,
    s_max: usize,
    t_max: usize,
) -> Result<EncoderInput, PreprocessError> {
    if s_max == 0 || t_max == 0 {
        return Err(PreprocessError::InvalidLimits { s_max, t_max });
    }
    if doc.is_degenerate() {
        return Err(PreprocessError::DegenerateDocument(doc.doc_id.clone()));
    }
    let mut tensor = Array3::zeros((s_max, t_max, table.dim()));
    let mut sentence_mask = Array1::from_elem(s_max, false);
    let mut token_mask = Array2::from_elem((s_max, t_max), false);
    for (s, sentence) in doc.sentences.iter().take(s_max).enumerate() {
        sentence_mask[s] = true;
        for (t, token) in sentence.iter().take(t_max).enumerate() {
            token_mask[[s, t]] = true;
            tensor
                .slice_mut(ndarray::s![s, t, ..])
                .assign(&table.lookup(token));
        }
    }
    Ok(EncoderInput {
        tensor,
        sentence_mask,
        token_mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn strings(items: &[&str]) -> Vec<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn sentence_splitting() {
        assert_eq!(split_sentences("A b. C d."), strings(&["A b.", "C d."]));
        assert_eq!(
            split_sentences("No terminator"),
            strings(&["No terminator"])
        );
        assert_eq!(split_sentences("x.\ny."), strings(&["x.", "y."]));
        assert_eq!(
            split_sentences("Why? Yes! 3.5 mg."),
            strings(&["Why?", "Yes!", "3.5 mg."])
        );
        assert!(split_sentences("").is_empty());
        assert!(split_sentences("\n  \n").is_empty());
    }

    #[test]
    fn tokenization() {
        assert_eq!(
            tokenize("Cancer cells proliferate."),
            strings(&["cancer", "cells", "proliferate", "."])
        );
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("p53-mediated"), strings(&["p53-mediated"]));
        assert_eq!(
            tokenize("(IL-6), ..."),
            strings(&["(", "il-6", ")", ",", ".", ".", "."])
        );
    }

    #[test]
    fn stopword_filter() {
        let stop: HashSet<String> = ["the".to_string()].into();
        assert_eq!(
            remove_stopwords(strings(&["the", "cell"]), &stop),
            strings(&["cell"])
        );
        assert!(remove_stopwords(vec![], &stop).is_empty());
        assert_eq!(
            remove_stopwords(strings(&["the", "cell"]), &HashSet::new()),
            strings(&["the", "cell"])
        );
    }

    #[test]
    fn default_stoplist_is_lowercase_and_nonempty() {
        let stop = default_stoplist();
        assert!(stop.contains("the"));
        assert!(stop.iter().all(|w| *w == w.to_lowercase()));
    }

    fn table(text: &str) -> Result<EmbeddingTable, PreprocessError> {
        read_embeddings(Cursor::new(text), Path::new("vec.txt"))
    }

    #[test]
    fn embeddings_plain_and_with_header() {
        let t = table("a 1 0\nb 0 1").unwrap();
        assert_eq!((t.dim(), t.len()), (2, 2));
        assert_eq!(t.lookup("b").to_vec(), vec![0.0, 1.0]);
        assert_eq!(t.lookup("zzz").to_vec(), vec![0.0, 0.0]);

        let t = table("2 2\na 1 0\nb 0 1\n").unwrap();
        assert_eq!((t.dim(), t.len()), (2, 2));
    }

    #[test]
    fn embeddings_errors() {
        assert!(matches!(
            table("a 1 0\nb 0 1 2\n"),
            Err(PreprocessError::InconsistentDimension {
                line: 2,
                expected: 2,
                found: 3,
                ..
            })
        ));
        assert!(matches!(
            table("a 1 x\n"),
            Err(PreprocessError::NonNumeric { line: 1, .. })
        ));
        assert!(matches!(
            table(""),
            Err(PreprocessError::EmptyEmbeddings { .. })
        ));
    }

    #[test]
    fn embeddings_write_read_round_trip() {
        let entries = vec![
            ("x".to_string(), vec![0.1, -1.0 / 3.0]),
            ("y".to_string(), vec![1e-300, 7.0]),
        ];
        let mut buf = Vec::new();
        write_embeddings(&mut buf, &entries).unwrap();
        let t = table(std::str::from_utf8(&buf).unwrap()).unwrap();
        for (token, vector) in &entries {
            assert_eq!(&t.lookup(token).to_vec(), vector);
        }
    }

    fn tokenized(sentences: &[&[&str]]) -> TokenizedDocument {
        TokenizedDocument {
            doc_id: "d".into(),
            sentences: sentences.iter().map(|s| strings(s)).collect(),
        }
    }

    #[test]
    fn embed_pads_and_masks() {
        let t = table("a 1 2\nb 3 4\n").unwrap();
        let input = embed_document(&tokenized(&[&["a", "b"]]), &t, 2, 4).unwrap();
        assert_eq!(input.tensor.shape(), &[2, 4, 2]);
        assert_eq!(
            input.tensor.slice(ndarray::s![0, 0, ..]).to_vec(),
            vec![1.0, 2.0]
        );
        assert_eq!(
            input.tensor.slice(ndarray::s![0, 1, ..]).to_vec(),
            vec![3.0, 4.0]
        );
        assert!(input
            .tensor
            .slice(ndarray::s![0, 2.., ..])
            .iter()
            .all(|&v| v == 0.0));
        assert!(input
            .tensor
            .slice(ndarray::s![1, .., ..])
            .iter()
            .all(|&v| v == 0.0));
        assert_eq!(
            input.token_mask.row(0).to_vec(),
            vec![true, true, false, false]
        );
        assert_eq!(input.sentence_mask.to_vec(), vec![true, false]);
    }

    #[test]
    fn embed_oov_is_zero_but_unmasked() {
        let t = table("a 1 2\n").unwrap();
        let input = embed_document(&tokenized(&[&["a", "zzz"]]), &t, 1, 2).unwrap();
        assert_eq!(
            input.tensor.slice(ndarray::s![0, 1, ..]).to_vec(),
            vec![0.0, 0.0]
        );
        assert!(input.token_mask[[0, 1]]);
    }

    #[test]
    fn embed_truncates() {
        let t = table("a 1\n").unwrap();
        let doc = tokenized(&[&["a"], &["a", "a", "a"], &["a"]]);
        let input = embed_document(&doc, &t, 2, 2).unwrap();
        assert_eq!(input.sentence_mask.to_vec(), vec![true, true]);
        assert_eq!(input.token_mask.row(1).iter().filter(|m| **m).count(), 2);
    }

    #[test]
    fn embed_rejects_degenerate_and_bad_limits() {
        let t = table("a 1\n").unwrap();
        assert!(matches!(
            embed_document(&tokenized(&[]), &t, 2, 2),
            Err(PreprocessError::DegenerateDocument(_))
        ));
        assert!(matches!(
            embed_document(&tokenized(&[&["a"]]), &t, 0, 2),
            Err(PreprocessError::InvalidLimits { .. })
        ));
    }

    #[test]
    fn document_pipeline_drops_empty_sentences() {
        let doc = Document::new("d", "The the. Cells grow!", Vec::<String>::new());
        let stop: HashSet<String> = ["the".to_string(), ".".to_string()].into();
        let tok = tokenize_document(&doc, &stop);
        assert_eq!(tok.sentences, vec![strings(&["cells", "grow", "!"])]);
        assert!(
            tokenize_document(&Document::new("e", "", Vec::<String>::new()), &stop).is_degenerate()
        );
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn shape_and_mask_counts(
                lens in prop::collection::vec(1usize..9, 1..6),
                s_max in 1usize..5,
                t_max in 1usize..6,
            ) {
                let t = table("w 0.5 -0.5 1\n").unwrap();
                let doc = TokenizedDocument {
                    doc_id: "d".into(),
                    sentences: lens.iter().map(|&n| vec!["w".to_string(); n]).collect(),
                };
                let a = embed_document(&doc, &t, s_max, t_max).unwrap();
                prop_assert_eq!(a.tensor.shape(), &[s_max, t_max, 3]);
                for (s, &n) in lens.iter().take(s_max).enumerate() {
                    let count = a.token_mask.row(s).iter().filter(|m| **m).count();
                    prop_assert_eq!(count, n.min(t_max));
                }
                let b = embed_document(&doc, &t, s_max, t_max).unwrap();
                prop_assert_eq!(a, b);
            }
        }
    }
}
