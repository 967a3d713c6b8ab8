//! Embeddings, embedding providers and the distractor-similarity difficulty
//! score.
//!
//! A question's difficulty is the largest cosine similarity between the
//! correct option's embedding and any distractor's embedding: one highly
//! plausible distractor is enough to make a question hard.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{Dataset, QuestionRecord};
use crate::error::{Error, Result};
use crate::io::{self, Header};

/// Fixed-length real vector with finite components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(components: Vec<f64>) -> Result<Self> {
        if components.is_empty() || components.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidEmbedding);
        }
        Ok(Embedding(components))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for Embedding {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Embedding::new(v)
    }
}

impl From<Embedding> for Vec<f64> {
    fn from(e: Embedding) -> Self {
        e.0
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine of the angle between `a` and `b`, clamped to `[-1, 1]`.
///
/// A zero-norm input is an error rather than a similarity of zero: it means
/// an embedding is degenerate and the caller has to deal with it.
pub fn cosine_similarity(a: &Embedding, b: &Embedding) -> Result<f64> {
    cosine_slices(a.as_slice(), b.as_slice())
}

pub(crate) fn cosine_slices(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Exact-string lookup table, typically exported from an external encoder.
#[derive(Debug, Clone)]
pub struct TableProvider {
    dimension: usize,
    table: HashMap<String, Embedding>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TableEntry {
    text: String,
    vector: Embedding,
}

impl TableProvider {
    pub fn new(dimension: usize, entries: impl IntoIterator<Item = (String, Embedding)>) -> Result<Self> {
        let mut table = HashMap::new();
        for (text, vector) in entries {
            if vector.dim() != dimension {
                return Err(Error::DimensionMismatch {
                    expected: dimension,
                    found: vector.dim(),
                });
            }
            table.insert(text, vector);
        }
        Ok(TableProvider { dimension, table })
    }

    /// Reads a header line `{"dimension": n}` followed by
    /// `{"text": ..., "vector": [...]}` lines.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut lines = io::content_lines(path)?.into_iter();
        let (line_no, first) = lines.next().ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: "missing dimension header".into(),
        })?;
        let header: Header = io::parse_line(path, line_no, &first)?;
        let mut table = HashMap::new();
        for (line_no, line) in lines {
            let entry: TableEntry = io::parse_line(path, line_no, &line)?;
            if entry.vector.dim() != header.dimension {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: line_no,
                    message: format!(
                        "vector for `{}` has dimension {}, header declares {}",
                        entry.text,
                        entry.vector.dim(),
                        header.dimension
                    ),
                });
            }
            table.insert(entry.text, entry.vector);
        }
        Ok(TableProvider {
            dimension: header.dimension,
            table,
        })
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

/// Deterministic pseudo-random unit vectors keyed by (seed, text).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashProvider {
    pub seed: u64,
    pub dimension: usize,
}

impl HashProvider {
    pub fn new(seed: u64, dimension: usize) -> Self {
        HashProvider { seed, dimension }
    }

    fn embed(&self, text: &str) -> Result<Embedding> {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(text.as_bytes());
        let mut rng = ChaCha8Rng::from_seed(hasher.finalize().into());
        loop {
            let v: Vec<f64> = (0..self.dimension)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let n = norm(&v);
            if n > 0.0 {
                return Embedding::new(v.into_iter().map(|x| x / n).collect());
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum EmbeddingProvider {
    Table(TableProvider),
    Hash(HashProvider),
}

impl EmbeddingProvider {
    pub fn embed(&self, text: &str) -> Result<Embedding> {
        match self {
            EmbeddingProvider::Table(t) => t
                .table
                .get(text)
                .cloned()
                .ok_or_else(|| Error::MissingEmbedding(text.to_string())),
            EmbeddingProvider::Hash(h) => h.embed(text),
        }
    }

    pub fn dimension(&self) -> usize {
        match self {
            EmbeddingProvider::Table(t) => t.dimension,
            EmbeddingProvider::Hash(h) => h.dimension,
        }
    }
}

impl From<HashProvider> for EmbeddingProvider {
    fn from(h: HashProvider) -> Self {
        EmbeddingProvider::Hash(h)
    }
}

impl From<TableProvider> for EmbeddingProvider {
    fn from(t: TableProvider) -> Self {
        EmbeddingProvider::Table(t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyScore {
    pub question_id: String,
    pub score: f64,
}

/// Max cosine similarity between the correct option and any distractor.
///
/// With a provider, option texts are embedded; without one, the options'
/// stored feature vectors are used.
pub fn difficulty_score(q: &QuestionRecord, provider: Option<&EmbeddingProvider>) -> Result<DifficultyScore> {
    if q.options.len() < 2 {
        return Err(Error::invalid(format!("question `{}` has fewer than two options", q.id)));
    }
    let vectors: Vec<Embedding> = match provider {
        Some(p) => q
            .options
            .iter()
            .map(|o| p.embed(&o.text))
            .collect::<Result<_>>()?,
        None => q.options.iter().map(|o| o.feature.clone()).collect(),
    };
    let correct = &vectors[q.correct_index];
    let mut score = f64::NEG_INFINITY;
    for (i, v) in vectors.iter().enumerate() {
        if i != q.correct_index {
            score = score.max(cosine_similarity(correct, v)?);
        }
    }
    Ok(DifficultyScore {
        question_id: q.id.clone(),
        score,
    })
}

pub fn score_dataset(d: &Dataset, provider: Option<&EmbeddingProvider>) -> Result<Vec<DifficultyScore>> {
    d.records
        .iter()
        .map(|q| {
            difficulty_score(q, provider).map_err(|e| Error::Record {
                id: q.id.clone(),
                source: Box::new(e),
            })
        })
        .collect()
}
