//! Semantic identity of objects: one-hot codes, hand-made feature vectors, and
//! word vectors passed through a trainable extractor.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tensor, TensorError};
use crate::gnn::{dense_forward, DenseParams};

#[derive(Debug, Error)]
pub enum SemanticsError {
    #[error("embedding file is empty")]
    EmptyTable,
    #[error("line {line}: expected {expected} components, found {found}")]
    Ragged { line: usize, expected: usize, found: usize },
    #[error("line {line}: duplicate token {token:?}")]
    Duplicate { line: usize, token: String },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{0:?} is not in the embedding vocabulary")]
    OutOfVocabulary(String),
    #[error("one-hot index {index} out of range for size {size}")]
    OneHotRange { index: usize, size: usize },
    #[error("word vector has width {found}, extractor expects {expected}")]
    Width { expected: usize, found: usize },
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Lower-cases and joins whitespace-separated words with `_`.
pub fn normalize_token(name: &str) -> String {
    name.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join("_")
}

/// Word vectors keyed by normalised token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    source: String,
    dim: usize,
    vocab: BTreeMap<String, usize>,
    vectors: Vec<Vec<f64>>,
}

/// The household/office/dining vocabulary shipped with the crate.
pub const BUNDLED_TABLE: &str = include_str!("../data/household_embeddings.txt");

impl EmbeddingTable {
    pub fn bundled() -> Self {
        Self::parse(BUNDLED_TABLE, "bundled").expect("bundled embedding table is well formed")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SemanticsError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| SemanticsError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Parses `token v1 .. vK` lines, with an optional leading `K` header line.
    pub fn parse(text: &str, source: &str) -> Result<Self, SemanticsError> {
        let mut dim: Option<usize> = None;
        let mut vocab = BTreeMap::new();
        let mut vectors = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let fields: Vec<&str> = raw.split_whitespace().collect();
            if fields.is_empty() || fields[0].starts_with('#') {
                continue;
            }
            if vectors.is_empty() && dim.is_none() && fields.len() == 1 {
                let k = fields[0].parse::<usize>().map_err(|e| SemanticsError::Parse {
                    line,
                    message: format!("bad header: {e}"),
                })?;
                dim = Some(k);
                continue;
            }
            let token = normalize_token(fields[0]);
            let values = fields[1..]
                .iter()
                .map(|f| f.parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| SemanticsError::Parse {
                    line,
                    message: e.to_string(),
                })?;
            let expected = *dim.get_or_insert(values.len());
            if values.len() != expected || expected == 0 {
                return Err(SemanticsError::Ragged {
                    line,
                    expected,
                    found: values.len(),
                });
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(SemanticsError::Parse {
                    line,
                    message: "non-finite component".into(),
                });
            }
            if vocab.contains_key(&token) {
                return Err(SemanticsError::Duplicate { line, token });
            }
            vocab.insert(token, vectors.len());
            vectors.push(values);
        }
        if vectors.is_empty() {
            return Err(SemanticsError::EmptyTable);
        }
        Ok(Self {
            source: source.to_string(),
            dim: dim.unwrap_or(0),
            vocab,
            vectors,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vocab.contains_key(&normalize_token(name))
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.vocab.keys().map(String::as_str)
    }

    pub fn lookup(&self, name: &str) -> Result<&[f64], SemanticsError> {
        let token = normalize_token(name);
        self.vocab
            .get(&token)
            .map(|&i| self.vectors[i].as_slice())
            .ok_or(SemanticsError::OutOfVocabulary(token))
    }

    /// Serialises back to the text format, in vocabulary order.
    pub fn to_text(&self) -> String {
        let mut out = format!("{}\n", self.dim);
        for (token, &i) in &self.vocab {
            out.push_str(token);
            for v in &self.vectors[i] {
                out.push(' ');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    OneHot,
    Features,
    WordEmbedding,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticEmbedding {
    pub vector: Vec<f64>,
    pub provenance: Provenance,
}

pub fn one_hot(index: usize, size: usize) -> Result<SemanticEmbedding, SemanticsError> {
    if index >= size {
        return Err(SemanticsError::OneHotRange { index, size });
    }
    let mut vector = vec![0.0; size];
    vector[index] = 1.0;
    Ok(SemanticEmbedding {
        vector,
        provenance: Provenance::OneHot,
    })
}

/// Shape codes used by the abstract block scenes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Box,
    Cylinder,
}

impl ShapeKind {
    pub fn code(self) -> f64 {
        match self {
            ShapeKind::Box => 0.0,
            ShapeKind::Cylinder => 1.0,
        }
    }
}

/// Descriptive fields of an abstract object: `(size, r, g, b, shape)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectFeatures {
    pub size: f64,
    pub rgb: [f64; 3],
    pub shape: ShapeKind,
}

pub fn feature_vector(fields: &ObjectFeatures) -> SemanticEmbedding {
    SemanticEmbedding {
        vector: vec![
            fields.size,
            fields.rgb[0],
            fields.rgb[1],
            fields.rgb[2],
            fields.shape.code(),
        ],
        provenance: Provenance::Features,
    }
}

/// Maps a word vector through the extractor network.
pub fn extract_semantic(wordvec: &[f64], extractor: &DenseParams) -> Result<SemanticEmbedding, SemanticsError> {
    let expected = extractor.input_dim();
    if wordvec.len() != expected {
        return Err(SemanticsError::Width {
            expected,
            found: wordvec.len(),
        });
    }
    let out = dense_forward(&Tensor::row(wordvec), extractor)?;
    Ok(SemanticEmbedding {
        vector: out.into_data(),
        provenance: Provenance::WordEmbedding,
    })
}

/// How an object is identified, as stored in a dataset template.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Semantics {
    OneHot { index: usize, size: usize },
    Features(Vec<f64>),
    Word(String),
}

impl Semantics {
    pub fn word(name: &str) -> Self {
        Semantics::Word(normalize_token(name))
    }

    /// The vector used for nearest-neighbour searches in the baselines: the
    /// raw word vector, the feature vector, or the one-hot code.
    pub fn raw_vector(&self, table: Option<&EmbeddingTable>) -> Result<Vec<f64>, SemanticsError> {
        match self {
            Semantics::OneHot { index, size } => Ok(one_hot(*index, *size)?.vector),
            Semantics::Features(v) => Ok(v.clone()),
            Semantics::Word(w) => {
                let table = table.ok_or_else(|| SemanticsError::OutOfVocabulary(w.clone()))?;
                Ok(table.lookup(w)?.to_vec())
            }
        }
    }
}
