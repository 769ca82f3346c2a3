//! Corpus loading, vocabulary, pretrained embeddings and minibatching.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use thiserror::Error;

use crate::recurrent::{SentenceBatch, PAD_ID};
use crate::tensor::{Tensor, TensorError};

pub const UNK_ID: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {bad} of {total} rows rejected (allowed fraction {max_fraction}); first: {first}")]
    BadRows {
        path: PathBuf,
        bad: usize,
        total: usize,
        max_fraction: f64,
        first: RowError,
    },
    #[error("{0}: no usable examples")]
    Empty(PathBuf),
    #[error("{path}: none of the {vocab} vocabulary tokens have a vector")]
    NoEmbeddingMatches { path: PathBuf, vocab: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("batch size must be at least 1")]
    ZeroBatch,
    #[error("unknown {what} '{value}'")]
    Parse { what: &'static str, value: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// A rejected corpus row. `line` is 1-based.
#[derive(Clone, Debug, PartialEq, Error)]
#[error("line {line}: {kind}")]
pub struct RowError {
    pub line: usize,
    pub kind: RowErrorKind,
}

#[derive(Clone, Debug, PartialEq)]
pub enum RowErrorKind {
    MissingField(&'static str),
    EmptySentence(&'static str),
    UnknownLabel { label: String, label_set: LabelSet },
    Malformed(String),
}

impl fmt::Display for RowErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::MissingField(k) => write!(f, "missing field '{k}'"),
            Self::EmptySentence(k) => write!(f, "empty sentence in '{k}'"),
            Self::UnknownLabel { label, label_set } => {
                write!(f, "label '{label}' is not in the {label_set} label set ({})", label_set.names().join(", "))
            }
            Self::Malformed(m) => write!(f, "{m}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LabelSet {
    /// entailment, contradiction, neutral
    ThreeWay,
    /// entails, neutral
    TwoWay,
}

impl LabelSet {
    pub fn names(self) -> &'static [&'static str] {
        match self {
            Self::ThreeWay => &["entailment", "contradiction", "neutral"],
            Self::TwoWay => &["entails", "neutral"],
        }
    }

    pub fn len(self) -> usize {
        self.names().len()
    }

    pub fn is_empty(self) -> bool {
        false
    }

    pub fn index(self, label: &str) -> Option<usize> {
        self.names().iter().position(|&n| n == label)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::ThreeWay => "three-way",
            Self::TwoWay => "two-way",
        }
    }
}

impl fmt::Display for LabelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LabelSet {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "three-way" | "3" => Ok(Self::ThreeWay),
            "two-way" | "2" => Ok(Self::TwoWay),
            _ => Err(DataError::Parse {
                what: "label set",
                value: s.to_string(),
            }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorpusFormat {
    Jsonl,
    Tsv,
}

impl CorpusFormat {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Jsonl => "jsonl",
            Self::Tsv => "tsv",
        }
    }
}

impl FromStr for CorpusFormat {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" => Ok(Self::Jsonl),
            "tsv" => Ok(Self::Tsv),
            _ => Err(DataError::Parse {
                what: "corpus format",
                value: s.to_string(),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NliExample {
    pub premise: Vec<String>,
    pub hypothesis: Vec<String>,
    pub label: usize,
    pub annotations: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NliDataset {
    pub label_set: LabelSet,
    pub examples: Vec<NliExample>,
    /// Rows whose gold label was "-".
    pub skipped_no_consensus: usize,
    /// Rejected rows that stayed under the bad-row threshold.
    pub rejected: Vec<RowError>,
}

impl NliDataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoadOptions {
    pub format: CorpusFormat,
    pub label_set: LabelSet,
    /// Largest tolerated fraction of rejected rows before the whole file fails.
    pub max_bad_fraction: f64,
}

/// Lowercases and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase().split_whitespace().map(str::to_string).collect()
}

enum Row {
    Example(NliExample),
    NoConsensus,
}

fn build_example(premise: &str, hypothesis: &str, label: &str, annotations: Vec<String>, label_set: LabelSet) -> std::result::Result<Row, RowErrorKind> {
    if label == "-" {
        return Ok(Row::NoConsensus);
    }
    let label = label_set.index(label).ok_or_else(|| RowErrorKind::UnknownLabel {
        label: label.to_string(),
        label_set,
    })?;
    let premise = tokenize(premise);
    if premise.is_empty() {
        return Err(RowErrorKind::EmptySentence("premise"));
    }
    let hypothesis = tokenize(hypothesis);
    if hypothesis.is_empty() {
        return Err(RowErrorKind::EmptySentence("hypothesis"));
    }
    Ok(Row::Example(NliExample {
        premise,
        hypothesis,
        label,
        annotations,
    }))
}

fn split_tags(s: &str) -> Vec<String> {
    s.split(',').map(str::trim).filter(|t| !t.is_empty()).map(str::to_string).collect()
}

fn parse_jsonl(line: &str, label_set: LabelSet) -> std::result::Result<Row, RowErrorKind> {
    let value: Value = serde_json::from_str(line).map_err(|e| RowErrorKind::Malformed(format!("invalid JSON: {e}")))?;
    let field = |key: &'static str| value.get(key).and_then(Value::as_str).ok_or(RowErrorKind::MissingField(key));
    let annotations = match value.get("annotations") {
        Some(Value::Array(tags)) => tags.iter().filter_map(Value::as_str).map(str::to_string).collect(),
        Some(Value::String(s)) => split_tags(s),
        _ => Vec::new(),
    };
    build_example(field("sentence1")?, field("sentence2")?, field("gold_label")?, annotations, label_set)
}

fn parse_tsv(line: &str, label_set: LabelSet) -> std::result::Result<Row, RowErrorKind> {
    let fields: Vec<&str> = line.split('\t').collect();
    let get = |i: usize, key: &'static str| fields.get(i).copied().ok_or(RowErrorKind::MissingField(key));
    let annotations = fields.get(3).map(|s| split_tags(s)).unwrap_or_default();
    build_example(get(0, "premise")?, get(1, "hypothesis")?, get(2, "label")?.trim(), annotations, label_set)
}

pub fn load_corpus(path: &Path, options: &LoadOptions) -> Result<NliDataset> {
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut dataset = NliDataset {
        label_set: options.label_set,
        examples: Vec::new(),
        skipped_no_consensus: 0,
        rejected: Vec::new(),
    };
    let mut total = 0;
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        total += 1;
        let parsed = match options.format {
            CorpusFormat::Jsonl => parse_jsonl(line, options.label_set),
            CorpusFormat::Tsv => parse_tsv(line, options.label_set),
        };
        match parsed {
            Ok(Row::Example(ex)) => dataset.examples.push(ex),
            Ok(Row::NoConsensus) => dataset.skipped_no_consensus += 1,
            Err(kind) => dataset.rejected.push(RowError { line: i + 1, kind }),
        }
    }
    let bad = dataset.rejected.len();
    if bad > 0 && bad as f64 > options.max_bad_fraction * total as f64 {
        return Err(DataError::BadRows {
            path: path.to_path_buf(),
            bad,
            total,
            max_fraction: options.max_bad_fraction,
            first: dataset.rejected.swap_remove(0),
        });
    }
    for r in &dataset.rejected {
        log::warn!("{}: skipped {r}", path.display());
    }
    if dataset.is_empty() {
        return Err(DataError::Empty(path.to_path_buf()));
    }
    Ok(dataset)
}

/// Token ↔ id map with `<pad>` at 0 and `<unk>` at 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    /// Ids follow first appearance in `tokens`, after the two reserved entries.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut vocab = Self {
            tokens: Vec::new(),
            ids: HashMap::new(),
        };
        for t in [PAD_TOKEN, UNK_TOKEN] {
            vocab.insert(t);
        }
        for t in tokens {
            vocab.insert(t.as_ref());
        }
        vocab
    }

    fn insert(&mut self, token: &str) {
        if !self.ids.contains_key(token) {
            self.ids.insert(token.to_string(), self.tokens.len());
            self.tokens.push(token.to_string());
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Every token in id order, reserved entries included.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }
}

/// Union of every split's tokens, premise before hypothesis, in corpus order.
pub fn build_vocab(datasets: &[&NliDataset]) -> Vocabulary {
    Vocabulary::from_tokens(
        datasets
            .iter()
            .flat_map(|d| &d.examples)
            .flat_map(|ex| ex.premise.iter().chain(&ex.hypothesis)),
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    /// `V×dim`, rows aligned to vocabulary ids; unmatched rows are zero.
    pub table: Tensor,
    pub matched: usize,
    pub malformed: usize,
}

impl EmbeddingTable {
    /// Share of non-reserved vocabulary entries that received a vector.
    pub fn coverage(&self, vocab: &Vocabulary) -> f64 {
        let eligible = vocab.len().saturating_sub(2);
        if eligible == 0 {
            0.0
        } else {
            self.matched as f64 / eligible as f64
        }
    }
}

/// Reads `token v1 … v_dim` lines. The last `dim` fields are the vector and
/// everything before them, space-joined, is the token.
pub fn load_embeddings(path: &Path, vocab: &Vocabulary, dim: usize) -> Result<EmbeddingTable> {
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut data = vec![0.0; vocab.len() * dim];
    let mut seen = vec![false; vocab.len()];
    let (mut matched, mut malformed) = (0, 0);
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let values: Option<Vec<f64>> = if fields.len() > dim {
            fields[fields.len() - dim..].iter().map(|f| f.parse().ok()).collect()
        } else {
            None
        };
        let Some(values) = values else {
            log::warn!("{}:{}: expected a token and {dim} values, skipping", path.display(), i + 1);
            malformed += 1;
            continue;
        };
        let token = fields[..fields.len() - dim].join(" ");
        let Some(id) = vocab.get(&token) else { continue };
        if id == PAD_ID || id == UNK_ID || seen[id] {
            continue;
        }
        seen[id] = true;
        matched += 1;
        data[id * dim..(id + 1) * dim].copy_from_slice(&values);
    }
    if matched == 0 {
        return Err(DataError::NoEmbeddingMatches {
            path: path.to_path_buf(),
            vocab: vocab.len(),
        });
    }
    Ok(EmbeddingTable {
        table: Tensor::new(vec![vocab.len(), dim], data)?,
        matched,
        malformed,
    })
}

/// A dataset mapped to vocabulary ids.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedDataset {
    pub premises: Vec<Vec<usize>>,
    pub hypotheses: Vec<Vec<usize>>,
    pub labels: Vec<usize>,
    pub annotations: Vec<Vec<String>>,
}

impl EncodedDataset {
    pub fn new(dataset: &NliDataset, vocab: &Vocabulary) -> Self {
        let ex = &dataset.examples;
        Self {
            premises: ex.iter().map(|e| vocab.encode(&e.premise)).collect(),
            hypotheses: ex.iter().map(|e| vocab.encode(&e.hypothesis)).collect(),
            labels: ex.iter().map(|e| e.label).collect(),
            annotations: ex.iter().map(|e| e.annotations.clone()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// Positions of the batch rows in the dataset.
    pub indices: Vec<usize>,
    pub premises: SentenceBatch,
    pub hypotheses: SentenceBatch,
    pub labels: Vec<usize>,
}

/// Splits the dataset into minibatches, keeping a final partial batch.
/// `shuffle` carries the seed of the example permutation.
pub fn batch_iter(dataset: &EncodedDataset, batch_size: usize, shuffle: Option<u64>) -> Result<impl Iterator<Item = Batch> + '_> {
    if dataset.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    if batch_size == 0 {
        return Err(DataError::ZeroBatch);
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    if let Some(seed) = shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    Ok(chunks.into_iter().map(move |indices| {
        let pick = |rows: &[Vec<usize>]| {
            let rows: Vec<Vec<usize>> = indices.iter().map(|&i| rows[i].clone()).collect();
            SentenceBatch::new(&rows).expect("loaded sentences are non-empty")
        };
        Batch {
            premises: pick(&dataset.premises),
            hypotheses: pick(&dataset.hypotheses),
            labels: indices.iter().map(|&i| dataset.labels[i]).collect(),
            indices,
        }
    }))
}
