//! Unigram TF-IDF vectorization and row normalization.
//!
//! Weights are raw term count times smoothed idf,
//! `ln((1 + n_docs) / (1 + df)) + 1`, and every non-zero row is scaled to unit
//! L2 norm so that Euclidean ordering matches cosine ordering.

use std::collections::HashMap;
use std::path::Path;
use std::sync::OnceLock;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{CraftError, Result};
use crate::vectors::{Storage, VectorSet};

pub const DEFAULT_MAX_VOCAB: usize = 200_000;

fn token_pattern() -> &'static Regex {
    static PATTERN: OnceLock<Regex> = OnceLock::new();
    // Letters, combining marks and digits of any script; marks keep
    // Devanagari vowel signs and viramas inside their word.
    PATTERN.get_or_init(|| Regex::new(r"[\p{L}\p{M}\p{N}]+").expect("static regex"))
}

/// Lowercased word tokens; whitespace and punctuation are separators.
pub fn tokenize(text: &str) -> Vec<String> {
    token_pattern()
        .find_iter(text)
        .map(|m| m.as_str().to_lowercase())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    terms: Vec<String>,
    document_frequency: Vec<u64>,
    index: HashMap<String, u32>,
    total_documents: u64,
}

#[derive(Serialize, Deserialize)]
struct VocabularyFile {
    total_documents: u64,
    terms: Vec<TermEntry>,
}

#[derive(Serialize, Deserialize)]
struct TermEntry {
    term: String,
    df: u64,
    col: u32,
}

impl Vocabulary {
    /// Builds a vocabulary from `(term, df)` pairs; columns follow lexicographic term order.
    pub fn from_counts(mut counts: Vec<(String, u64)>, total_documents: u64) -> Result<Self> {
        if total_documents == 0 {
            return Err(CraftError::invalid("vocabulary needs at least one document"));
        }
        if counts.is_empty() {
            return Err(CraftError::invalid("vocabulary retained no terms"));
        }
        counts.sort_unstable_by(|a, b| a.0.cmp(&b.0));
        if counts.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(CraftError::invalid("duplicate vocabulary term"));
        }
        if let Some((t, _)) = counts.iter().find(|(_, df)| *df == 0 || *df > total_documents) {
            return Err(CraftError::invalid(format!(
                "term `{t}` has document frequency outside 1..={total_documents}"
            )));
        }
        let index = counts
            .iter()
            .enumerate()
            .map(|(c, (t, _))| (t.clone(), c as u32))
            .collect();
        let (terms, document_frequency) = counts.into_iter().unzip();
        Ok(Self {
            terms,
            document_frequency,
            index,
            total_documents,
        })
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn total_documents(&self) -> u64 {
        self.total_documents
    }

    pub fn column(&self, term: &str) -> Option<u32> {
        self.index.get(term).copied()
    }

    pub fn term(&self, column: u32) -> &str {
        &self.terms[column as usize]
    }

    pub fn document_frequency(&self, term: &str) -> Option<u64> {
        self.column(term)
            .map(|c| self.document_frequency[c as usize])
    }

    pub fn idf(&self, column: u32) -> f64 {
        let n = self.total_documents as f64;
        let df = self.document_frequency[column as usize] as f64;
        ((1.0 + n) / (1.0 + df)).ln() + 1.0
    }

    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    pub fn to_json(&self) -> Result<String> {
        let file = VocabularyFile {
            total_documents: self.total_documents,
            terms: self
                .terms
                .iter()
                .zip(&self.document_frequency)
                .enumerate()
                .map(|(col, (term, &df))| TermEntry {
                    term: term.clone(),
                    df,
                    col: col as u32,
                })
                .collect(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: VocabularyFile = serde_json::from_str(text)?;
        let n = file.terms.len();
        let mut seen = vec![false; n];
        for e in &file.terms {
            let c = e.col as usize;
            if c >= n || std::mem::replace(&mut seen[c], true) {
                return Err(CraftError::invalid("vocabulary columns must be 0..len without gaps"));
            }
        }
        let vocab = Self::from_counts(
            file.terms.iter().map(|e| (e.term.clone(), e.df)).collect(),
            file.total_documents,
        )?;
        if file
            .terms
            .iter()
            .any(|e| vocab.column(&e.term) != Some(e.col))
        {
            return Err(CraftError::invalid(
                "vocabulary columns must follow lexicographic term order",
            ));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| CraftError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CraftError::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Counts document frequencies over `docs` and keeps at most `max_vocab`
/// terms, preferring higher df and then lexicographically smaller terms.
pub fn fit_tfidf<'a, I>(docs: I, max_vocab: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = &'a str>,
{
    if max_vocab == 0 {
        return Err(CraftError::invalid("max_vocab must be at least 1"));
    }
    let mut df: HashMap<String, u64> = HashMap::new();
    let mut total = 0u64;
    for doc in docs {
        total += 1;
        let mut tokens = tokenize(doc);
        tokens.sort_unstable();
        tokens.dedup();
        for t in tokens {
            match df.get_mut(&t) {
                Some(c) => *c += 1,
                None => {
                    df.insert(t, 1);
                }
            }
        }
    }
    if total == 0 {
        return Err(CraftError::invalid("cannot fit TF-IDF on zero documents"));
    }
    let mut counts: Vec<(String, u64)> = df.into_iter().collect();
    if counts.len() > max_vocab {
        counts.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        counts.truncate(max_vocab);
    }
    Vocabulary::from_counts(counts, total)
}

#[derive(Debug, Clone)]
pub struct TfidfOutput {
    pub vectors: VectorSet,
    /// Documents with no in-vocabulary term; their rows are all zero.
    pub zero_rows: Vec<usize>,
}

fn tfidf_row(vocab: &Vocabulary, doc: &str) -> Vec<(u32, f32)> {
    let mut cols: Vec<u32> = tokenize(doc)
        .iter()
        .filter_map(|t| vocab.column(t))
        .collect();
    cols.sort_unstable();
    let mut weights: Vec<(u32, f64)> = Vec::new();
    for c in cols {
        match weights.last_mut() {
            Some((last, w)) if *last == c => *w += 1.0,
            _ => weights.push((c, 1.0)),
        }
    }
    for (c, w) in weights.iter_mut() {
        *w *= vocab.idf(*c);
    }
    let norm = weights.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
    weights
        .into_iter()
        .map(|(c, w)| (c, (w / norm) as f32))
        .collect()
}

/// Sparse, L2-normalized TF-IDF rows for `docs`; out-of-vocabulary terms are ignored.
pub fn transform_tfidf<S: AsRef<str> + Sync>(vocab: &Vocabulary, docs: &[S]) -> TfidfOutput {
    let rows: Vec<Vec<(u32, f32)>> = docs
        .par_iter()
        .map(|d| tfidf_row(vocab, d.as_ref()))
        .collect();
    let zero_rows: Vec<usize> = rows
        .iter()
        .enumerate()
        .filter(|(_, r)| r.is_empty())
        .map(|(i, _)| i)
        .collect();
    if !zero_rows.is_empty() {
        log::warn!("{} documents have no in-vocabulary terms", zero_rows.len());
    }
    let mut vectors = VectorSet::from_sparse_rows(vocab.len(), rows)
        .expect("tf-idf rows are sorted, in range and finite");
    vectors.set_normalized(true);
    TfidfOutput { vectors, zero_rows }
}

/// Scales every non-zero row to unit L2 norm; zero rows are left as they are.
pub fn l2_normalize(vs: &VectorSet) -> VectorSet {
    let dim = vs.dim();
    let scale_row = |values: &mut [f32]| {
        let norm = values
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt();
        if norm > 0.0 {
            values
                .iter_mut()
                .for_each(|v| *v = (f64::from(*v) / norm) as f32);
        }
    };
    let mut out = match vs.storage() {
        Storage::Dense(values) => {
            let mut values = values.clone();
            if dim > 0 {
                values.par_chunks_mut(dim).for_each(scale_row);
            }
            VectorSet::dense(vs.count(), dim, values).expect("scaling keeps values finite")
        }
        Storage::Sparse {
            offsets,
            columns,
            values,
        } => {
            let mut values = values.clone();
            let mut rest: &mut [f32] = &mut values;
            for r in 0..vs.count() {
                let (row, tail) = rest.split_at_mut(offsets[r + 1] - offsets[r]);
                scale_row(row);
                rest = tail;
            }
            VectorSet::from_sparse_parts(dim, offsets.clone(), columns.clone(), values)
                .expect("scaling keeps structure intact")
        }
    };
    out.set_normalized(true);
    out
}
