//! Corpus loading, vector file formats and selection output.
//!
//! File formats:
//! - TSV corpora: one `source<TAB>target` pair per LF-terminated line, no header.
//! - JSONL corpora: one object per line with string fields `source` and `target`.
//! - Dense vectors: `CVEC1\0`, `u64` count, `u64` dim (little-endian), then
//!   `count * dim` little-endian `f32` values in row-major order. A text
//!   variant (`count dim` on the first line, one row per line) is accepted for
//!   debugging.
//! - Sparse vectors: `CSPV1\0`, `u64` count, `u64` dim, `u64` nnz, `u64` flags,
//!   `count + 1` `u64` row offsets, `nnz` `u32` columns, `nnz` `f32` values.
//! - Selections: ascending pool indices, one per line, with a JSON diagnostics
//!   sidecar at `<path>.diag.json`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{CraftError, Result};
use crate::selector::SelectionResult;
use crate::vectors::{Storage, VectorSet};

pub const DENSE_MAGIC: &[u8; 6] = b"CVEC1\0";
pub const SPARSE_MAGIC: &[u8; 6] = b"CSPV1\0";

const FLAG_NORMALIZED: u64 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentencePair {
    pub id: usize,
    pub source: String,
    pub target: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusRole {
    Validation,
    Pool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParallelCorpus {
    pairs: Vec<SentencePair>,
    role: CorpusRole,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    Tsv,
    Jsonl,
}

impl CorpusFormat {
    /// Guesses the format from a file extension, defaulting to TSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => CorpusFormat::Jsonl,
            _ => CorpusFormat::Tsv,
        }
    }
}

impl ParallelCorpus {
    /// Builds a corpus from `(source, target)` texts, assigning ids in order.
    pub fn from_texts<I, S, T>(role: CorpusRole, texts: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, T)>,
        S: Into<String>,
        T: Into<String>,
    {
        let mut pairs = Vec::new();
        for (id, (s, t)) in texts.into_iter().enumerate() {
            let (source, target) = (s.into(), t.into());
            if source.trim().is_empty() || target.trim().is_empty() {
                return Err(CraftError::invalid(format!("pair {id} has an empty side")));
            }
            pairs.push(SentencePair { id, source, target });
        }
        if pairs.is_empty() {
            return Err(CraftError::invalid("corpus must contain at least one pair"));
        }
        Ok(Self { pairs, role })
    }

    pub fn pairs(&self) -> &[SentencePair] {
        &self.pairs
    }

    pub fn role(&self) -> CorpusRole {
        self.role
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn sources(&self) -> impl Iterator<Item = &str> + '_ {
        self.pairs.iter().map(|p| p.source.as_str())
    }

    pub fn targets(&self) -> impl Iterator<Item = &str> + '_ {
        self.pairs.iter().map(|p| p.target.as_str())
    }
}

#[derive(Deserialize)]
struct JsonPair {
    source: String,
    target: String,
}

pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<ParallelCorpus> {
    let file = File::open(path).map_err(|e| CraftError::io(path, e))?;
    parse_corpus(BufReader::new(file), format, path)
}

/// Parses a corpus from any reader; `origin` is used in error messages.
pub fn parse_corpus<R: BufRead>(reader: R, format: CorpusFormat, origin: &Path) -> Result<ParallelCorpus> {
    let malformed = |row: usize, message: String| CraftError::MalformedRow {
        path: origin.to_path_buf(),
        row,
        message,
    };
    let mut pairs = Vec::new();
    for (i, line) in reader.split(b'\n').enumerate() {
        let row = i + 1;
        let bytes = line.map_err(|e| CraftError::io(origin, e))?;
        let line = String::from_utf8(bytes).map_err(|_| malformed(row, "invalid UTF-8".into()))?;
        let (source, target) = match format {
            CorpusFormat::Tsv => {
                let fields: Vec<&str> = line.split('\t').collect();
                if fields.len() != 2 {
                    return Err(malformed(
                        row,
                        format!("expected 2 tab-separated fields, found {}", fields.len()),
                    ));
                }
                (fields[0].to_owned(), fields[1].to_owned())
            }
            CorpusFormat::Jsonl => {
                let pair: JsonPair =
                    serde_json::from_str(&line).map_err(|e| malformed(row, e.to_string()))?;
                (pair.source, pair.target)
            }
        };
        if source.trim().is_empty() || target.trim().is_empty() {
            return Err(malformed(row, "empty source or target".into()));
        }
        pairs.push(SentencePair {
            id: pairs.len(),
            source,
            target,
        });
    }
    if pairs.is_empty() {
        return Err(CraftError::EmptyFile(origin.to_path_buf()));
    }
    Ok(ParallelCorpus {
        pairs,
        role: CorpusRole::Pool,
    })
}

/// Splits off the first `m` pairs as the validation set; both halves are re-indexed from 0.
pub fn split_head(corpus: &ParallelCorpus, m: usize) -> Result<(ParallelCorpus, ParallelCorpus)> {
    if m == 0 || m >= corpus.len() {
        return Err(CraftError::invalid(format!(
            "validation size must satisfy 0 < m < {}, got {m}",
            corpus.len()
        )));
    }
    let reindex = |pairs: &[SentencePair]| -> Vec<SentencePair> {
        pairs
            .iter()
            .enumerate()
            .map(|(id, p)| SentencePair {
                id,
                source: p.source.clone(),
                target: p.target.clone(),
            })
            .collect()
    };
    let (head, tail) = corpus.pairs.split_at(m);
    Ok((
        ParallelCorpus {
            pairs: reindex(head),
            role: CorpusRole::Validation,
        },
        ParallelCorpus {
            pairs: reindex(tail),
            role: CorpusRole::Pool,
        },
    ))
}

fn format_error(path: &Path, message: impl Into<String>) -> CraftError {
    CraftError::VectorFormat {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn read_u64<R: Read>(r: &mut R, path: &Path) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|_| format_error(path, "truncated header"))?;
    Ok(u64::from_le_bytes(buf))
}

/// Reads exactly `n` little-endian 4-byte words.
fn read_words<R: Read, T>(
    r: &mut R,
    n: usize,
    path: &Path,
    what: &str,
    decode: impl Fn([u8; 4]) -> T,
) -> Result<Vec<T>> {
    let mut out = Vec::with_capacity(n);
    let mut buf = vec![0u8; 1 << 16];
    let mut remaining = n;
    while remaining > 0 {
        let take = remaining.min(buf.len() / 4);
        let chunk = &mut buf[..take * 4];
        r.read_exact(chunk)
            .map_err(|_| format_error(path, format!("truncated {what}: expected {n} values")))?;
        out.extend(chunk.chunks_exact(4).map(|b| decode([b[0], b[1], b[2], b[3]])));
        remaining -= take;
    }
    Ok(out)
}

fn expect_eof<R: Read>(r: &mut R, path: &Path) -> Result<()> {
    let mut probe = [0u8; 1];
    match r.read(&mut probe) {
        Ok(0) => Ok(()),
        Ok(_) => Err(format_error(path, "trailing bytes after payload")),
        Err(e) => Err(CraftError::io(path, e)),
    }
}

/// Loads a dense vector file (binary or text).
pub fn load_dense_vectors(path: &Path) -> Result<VectorSet> {
    let vs = load_vectors(path)?;
    if vs.is_sparse() {
        return Err(format_error(path, "expected dense vectors, found a sparse store"));
    }
    Ok(vs)
}

/// Loads any supported vector file: dense binary, sparse binary or dense text.
pub fn load_vectors(path: &Path) -> Result<VectorSet> {
    let file = File::open(path).map_err(|e| CraftError::io(path, e))?;
    let file_len = file.metadata().map_err(|e| CraftError::io(path, e))?.len();
    let mut reader = BufReader::new(file);
    let mut magic = [0u8; 6];
    let head = reader
        .fill_buf()
        .map_err(|e| CraftError::io(path, e))?;
    let is_binary = head.len() >= 6 && (&head[..6] == DENSE_MAGIC || &head[..6] == SPARSE_MAGIC);
    if !is_binary {
        return load_dense_text(reader, path);
    }
    reader.read_exact(&mut magic).map_err(|e| CraftError::io(path, e))?;
    if &magic == DENSE_MAGIC {
        let count = read_u64(&mut reader, path)? as usize;
        let dim = read_u64(&mut reader, path)? as usize;
        let expected = 22 + 4 * (count as u64) * (dim as u64);
        if file_len != expected {
            return Err(format_error(
                path,
                format!(
                    "header declares {count} x {dim} values ({expected} bytes) but file has {file_len} bytes"
                ),
            ));
        }
        let values = read_words(&mut reader, count * dim, path, "payload", f32::from_le_bytes)?;
        expect_eof(&mut reader, path)?;
        VectorSet::dense(count, dim, values)
    } else {
        let count = read_u64(&mut reader, path)? as usize;
        let dim = read_u64(&mut reader, path)? as usize;
        let nnz = read_u64(&mut reader, path)? as usize;
        let flags = read_u64(&mut reader, path)?;
        let expected = 38 + 8 * (count as u64 + 1) + 8 * nnz as u64;
        if file_len != expected {
            return Err(format_error(
                path,
                format!("sparse header implies {expected} bytes but file has {file_len} bytes"),
            ));
        }
        let mut offsets = Vec::with_capacity(count + 1);
        for _ in 0..=count {
            offsets.push(read_u64(&mut reader, path)? as usize);
        }
        let columns = read_words(&mut reader, nnz, path, "columns", u32::from_le_bytes)?;
        let values = read_words(&mut reader, nnz, path, "values", f32::from_le_bytes)?;
        expect_eof(&mut reader, path)?;
        let mut vs = VectorSet::from_sparse_parts(dim, offsets, columns, values)
            .map_err(|e| format_error(path, e.to_string()))?;
        vs.set_normalized(flags & FLAG_NORMALIZED != 0);
        Ok(vs)
    }
}

fn load_dense_text<R: BufRead>(reader: R, path: &Path) -> Result<VectorSet> {
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| format_error(path, "empty file"))?
        .map_err(|e| CraftError::io(path, e))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| format_error(path, "text header must be `<count> <dim>`"))?;
    let [count, dim] = dims[..] else {
        return Err(format_error(path, "text header must be `<count> <dim>`"));
    };
    let mut values = Vec::with_capacity(count * dim);
    let mut rows = 0;
    for line in lines {
        let line = line.map_err(|e| CraftError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let before = values.len();
        for tok in line.split_whitespace() {
            let v: f32 = tok
                .parse()
                .map_err(|_| format_error(path, format!("row {rows}: cannot parse `{tok}`")))?;
            values.push(v);
        }
        if values.len() - before != dim {
            return Err(format_error(
                path,
                format!("row {rows}: expected {dim} values, found {}", values.len() - before),
            ));
        }
        rows += 1;
    }
    if rows != count {
        return Err(format_error(
            path,
            format!("header declares {count} rows, found {rows}"),
        ));
    }
    VectorSet::dense(count, dim, values)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CraftError::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| CraftError::io(path, e))?;
    Ok(BufWriter::with_capacity(1 << 20, file))
}

/// Writes a vector set in its native binary format (dense or sparse).
pub fn save_vectors(vs: &VectorSet, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| CraftError::io(path, e);
    match vs.storage() {
        Storage::Dense(values) => {
            w.write_all(DENSE_MAGIC).map_err(io)?;
            w.write_all(&(vs.count() as u64).to_le_bytes()).map_err(io)?;
            w.write_all(&(vs.dim() as u64).to_le_bytes()).map_err(io)?;
            for v in values {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        Storage::Sparse {
            offsets,
            columns,
            values,
        } => {
            let flags = if vs.is_normalized() { FLAG_NORMALIZED } else { 0 };
            w.write_all(SPARSE_MAGIC).map_err(io)?;
            for h in [vs.count() as u64, vs.dim() as u64, columns.len() as u64, flags] {
                w.write_all(&h.to_le_bytes()).map_err(io)?;
            }
            for &o in offsets {
                w.write_all(&(o as u64).to_le_bytes()).map_err(io)?;
            }
            for c in columns {
                w.write_all(&c.to_le_bytes()).map_err(io)?;
            }
            for v in values {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)
}

/// Writes the debug text format; sparse sets are densified.
pub fn save_dense_text(vs: &VectorSet, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| CraftError::io(path, e);
    writeln!(w, "{} {}", vs.count(), vs.dim()).map_err(io)?;
    for r in 0..vs.count() {
        let row: Vec<String> = vs.dense_row(r).iter().map(|v| format!("{v:?}")).collect();
        writeln!(w, "{}", row.join(" ")).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn diagnostics_path(selection_path: &Path) -> PathBuf {
    let mut name = selection_path.as_os_str().to_owned();
    name.push(".diag.json");
    PathBuf::from(name)
}

/// Writes ascending indices plus the diagnostics sidecar.
pub fn save_selection(result: &SelectionResult, path: &Path) -> Result<()> {
    let diagnostics = result
        .diagnostics
        .as_ref()
        .ok_or_else(|| CraftError::invalid("selection has no diagnostics attached"))?;
    let mut indices = result.indices.clone();
    indices.sort_unstable();
    let mut w = create(path)?;
    let io = |e| CraftError::io(path, e);
    for i in &indices {
        writeln!(w, "{i}").map_err(io)?;
    }
    w.flush().map_err(io)?;

    let diag_path = diagnostics_path(path);
    let mut w = create(&diag_path)?;
    serde_json::to_writer_pretty(&mut w, diagnostics)?;
    writeln!(w).map_err(|e| CraftError::io(&diag_path, e))?;
    w.flush().map_err(|e| CraftError::io(&diag_path, e))
}

/// Reads a selection file. Indices are returned ascending; duplicates are an error.
pub fn load_selection(path: &Path) -> Result<Vec<usize>> {
    let file = File::open(path).map_err(|e| CraftError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CraftError::io(path, e))?;
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        let idx: usize = text.parse().map_err(|_| CraftError::MalformedRow {
            path: path.to_path_buf(),
            row: i + 1,
            message: format!("`{text}` is not a pool index"),
        })?;
        out.push((idx, i + 1));
    }
    out.sort_unstable();
    for w in out.windows(2) {
        if w[0].0 == w[1].0 {
            return Err(CraftError::MalformedRow {
                path: path.to_path_buf(),
                row: w[1].1.max(w[0].1),
                message: format!("duplicate index {}", w[0].0),
            });
        }
    }
    Ok(out.into_iter().map(|(idx, _)| idx).collect())
}
