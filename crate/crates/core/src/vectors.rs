//! Row-oriented vector collections shared by every stage of the pipeline.
//!
//! A [`VectorSet`] holds one vector per sentence side, either as dense
//! row-major `f32` or as CSR-style sparse rows with strictly increasing
//! column indices.

use crate::error::{CraftError, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Storage {
    Dense(Vec<f32>),
    Sparse {
        /// `offsets[r]..offsets[r + 1]` spans row `r` in `columns`/`values`.
        offsets: Vec<usize>,
        columns: Vec<u32>,
        values: Vec<f32>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorSet {
    count: usize,
    dim: usize,
    storage: Storage,
    normalized: bool,
}

/// Borrowed view of one row.
#[derive(Debug, Clone, Copy)]
pub enum Row<'a> {
    Dense(&'a [f32]),
    Sparse {
        columns: &'a [u32],
        values: &'a [f32],
    },
}

impl VectorSet {
    pub fn dense(count: usize, dim: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != count * dim {
            return Err(CraftError::LengthMismatch(format!(
                "dense payload has {} values, expected {count} x {dim}",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            let (row, column) = if dim == 0 { (0, 0) } else { (pos / dim, pos % dim) };
            return Err(CraftError::NonFinite { row, column });
        }
        Ok(Self {
            count,
            dim,
            storage: Storage::Dense(values),
            normalized: false,
        })
    }

    pub fn from_dense_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * dim);
        for (r, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(CraftError::LengthMismatch(format!(
                    "row {r} has {} values, expected {dim}",
                    row.len()
                )));
            }
            values.extend_from_slice(row);
        }
        Self::dense(rows.len(), dim, values)
    }

    /// Builds a sparse set from per-row `(column, value)` lists. Rows are
    /// sorted by column; duplicate columns are rejected.
    pub fn from_sparse_rows(dim: usize, rows: Vec<Vec<(u32, f32)>>) -> Result<Self> {
        let nnz = rows.iter().map(Vec::len).sum();
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        let mut columns = Vec::with_capacity(nnz);
        let mut values = Vec::with_capacity(nnz);
        offsets.push(0);
        for mut row in rows {
            row.sort_unstable_by_key(|&(c, _)| c);
            for (c, v) in row {
                columns.push(c);
                values.push(v);
            }
            offsets.push(columns.len());
        }
        Self::from_sparse_parts(dim, offsets, columns, values)
    }

    pub fn from_sparse_parts(
        dim: usize,
        offsets: Vec<usize>,
        columns: Vec<u32>,
        values: Vec<f32>,
    ) -> Result<Self> {
        if offsets.is_empty() || offsets[0] != 0 {
            return Err(CraftError::invalid("sparse offsets must start at 0"));
        }
        if columns.len() != values.len() || *offsets.last().unwrap() != columns.len() {
            return Err(CraftError::LengthMismatch(
                "sparse offsets, columns and values disagree".into(),
            ));
        }
        let count = offsets.len() - 1;
        for r in 0..count {
            let (lo, hi) = (offsets[r], offsets[r + 1]);
            if lo > hi {
                return Err(CraftError::invalid(format!("row {r}: decreasing offsets")));
            }
            for i in lo..hi {
                if columns[i] as usize >= dim {
                    return Err(CraftError::invalid(format!(
                        "row {r}: column {} out of range for dim {dim}",
                        columns[i]
                    )));
                }
                if i > lo && columns[i] <= columns[i - 1] {
                    return Err(CraftError::invalid(format!(
                        "row {r}: columns not strictly increasing"
                    )));
                }
                if !values[i].is_finite() {
                    return Err(CraftError::NonFinite {
                        row: r,
                        column: columns[i] as usize,
                    });
                }
            }
        }
        Ok(Self {
            count,
            dim,
            storage: Storage::Sparse {
                offsets,
                columns,
                values,
            },
            normalized: false,
        })
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn is_sparse(&self) -> bool {
        matches!(self.storage, Storage::Sparse { .. })
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn storage(&self) -> &Storage {
        &self.storage
    }

    pub(crate) fn set_normalized(&mut self, flag: bool) {
        self.normalized = flag;
    }

    pub fn row(&self, r: usize) -> Row<'_> {
        match &self.storage {
            Storage::Dense(values) => Row::Dense(&values[r * self.dim..(r + 1) * self.dim]),
            Storage::Sparse {
                offsets,
                columns,
                values,
            } => {
                let (lo, hi) = (offsets[r], offsets[r + 1]);
                Row::Sparse {
                    columns: &columns[lo..hi],
                    values: &values[lo..hi],
                }
            }
        }
    }

    pub fn rows(&self) -> impl Iterator<Item = Row<'_>> + '_ {
        (0..self.count).map(move |r| self.row(r))
    }

    pub fn dense_row(&self, r: usize) -> Vec<f32> {
        let mut out = vec![0.0; self.dim];
        self.row(r).add_to(&mut out);
        out
    }

    /// Indices of rows with no non-zero entry.
    pub fn zero_rows(&self) -> Vec<usize> {
        (0..self.count)
            .filter(|&r| self.row(r).squared_norm() == 0.0)
            .collect()
    }

    /// New set made of the given rows, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> VectorSet {
        let storage = match &self.storage {
            Storage::Dense(values) => {
                let mut out = Vec::with_capacity(indices.len() * self.dim);
                for &r in indices {
                    out.extend_from_slice(&values[r * self.dim..(r + 1) * self.dim]);
                }
                Storage::Dense(out)
            }
            Storage::Sparse {
                offsets,
                columns,
                values,
            } => {
                let mut new_offsets = Vec::with_capacity(indices.len() + 1);
                let mut new_columns = Vec::new();
                let mut new_values = Vec::new();
                new_offsets.push(0);
                for &r in indices {
                    let (lo, hi) = (offsets[r], offsets[r + 1]);
                    new_columns.extend_from_slice(&columns[lo..hi]);
                    new_values.extend_from_slice(&values[lo..hi]);
                    new_offsets.push(new_columns.len());
                }
                Storage::Sparse {
                    offsets: new_offsets,
                    columns: new_columns,
                    values: new_values,
                }
            }
        };
        VectorSet {
            count: indices.len(),
            dim: self.dim,
            storage,
            normalized: self.normalized,
        }
    }

    /// Splits into the first `m` rows and the remainder.
    pub fn split_at(&self, m: usize) -> (VectorSet, VectorSet) {
        let m = m.min(self.count);
        let head: Vec<usize> = (0..m).collect();
        let tail: Vec<usize> = (m..self.count).collect();
        (self.select_rows(&head), self.select_rows(&tail))
    }

    /// Row-wise concatenation `[self | other]`. Dense unless both inputs are sparse.
    pub fn concat_columns(&self, other: &VectorSet) -> Result<VectorSet> {
        if self.count != other.count {
            return Err(CraftError::LengthMismatch(format!(
                "cannot concatenate {} rows with {} rows",
                self.count, other.count
            )));
        }
        let dim = self.dim + other.dim;
        if self.is_sparse() && other.is_sparse() {
            let rows = (0..self.count)
                .map(|r| {
                    let mut row = self.row(r).entries();
                    row.extend(
                        other
                            .row(r)
                            .entries()
                            .into_iter()
                            .map(|(c, v)| (c + self.dim as u32, v)),
                    );
                    row
                })
                .collect();
            return Self::from_sparse_rows(dim, rows);
        }
        let mut values = Vec::with_capacity(self.count * dim);
        for r in 0..self.count {
            values.extend(self.dense_row(r));
            values.extend(other.dense_row(r));
        }
        Self::dense(self.count, dim, values)
    }
}

impl<'a> Row<'a> {
    pub fn squared_norm(&self) -> f64 {
        let values = match self {
            Row::Dense(v) => *v,
            Row::Sparse { values, .. } => *values,
        };
        values.iter().map(|&v| f64::from(v) * f64::from(v)).sum()
    }

    /// Non-zero entries as `(column, value)`.
    pub fn entries(&self) -> Vec<(u32, f32)> {
        match self {
            Row::Dense(v) => v
                .iter()
                .enumerate()
                .filter(|(_, &x)| x != 0.0)
                .map(|(c, &x)| (c as u32, x))
                .collect(),
            Row::Sparse { columns, values } => {
                columns.iter().copied().zip(values.iter().copied()).collect()
            }
        }
    }

    /// Adds this row into a dense accumulator.
    pub fn add_to(&self, acc: &mut [f32]) {
        match self {
            Row::Dense(v) => acc.iter_mut().zip(v.iter()).for_each(|(a, &x)| *a += x),
            Row::Sparse { columns, values } => {
                for (&c, &x) in columns.iter().zip(values.iter()) {
                    acc[c as usize] += x;
                }
            }
        }
    }

    pub(crate) fn add_to_f64(&self, acc: &mut [f64]) {
        match self {
            Row::Dense(v) => acc
                .iter_mut()
                .zip(v.iter())
                .for_each(|(a, &x)| *a += f64::from(x)),
            Row::Sparse { columns, values } => {
                for (&c, &x) in columns.iter().zip(values.iter()) {
                    acc[c as usize] += f64::from(x);
                }
            }
        }
    }

    /// Squared Euclidean distance to a dense point whose squared norm is
    /// `point_sq_norm`. Dense rows use the direct difference; sparse rows the
    /// expansion `|x|^2 - 2 x.c + |c|^2`, clamped at zero.
    pub fn squared_distance(&self, point: &[f32], point_sq_norm: f64) -> f64 {
        match self {
            Row::Dense(v) => f64::from(squared_l2(v, point)),
            Row::Sparse { columns, values } => {
                let mut dot = 0.0f64;
                let mut norm = 0.0f64;
                for (&c, &x) in columns.iter().zip(values.iter()) {
                    let x = f64::from(x);
                    dot += x * f64::from(point[c as usize]);
                    norm += x * x;
                }
                (norm - 2.0 * dot + point_sq_norm).max(0.0)
            }
        }
    }

    /// Squared Euclidean distance between two rows of arbitrary storage.
    pub fn squared_distance_to_row(&self, other: &Row<'_>) -> f64 {
        match (self, other) {
            (Row::Dense(a), Row::Dense(b)) => f64::from(squared_l2(a, b)),
            (Row::Dense(d), s @ Row::Sparse { .. }) | (s @ Row::Sparse { .. }, Row::Dense(d)) => {
                let norm = Row::Dense(d).squared_norm();
                s.squared_distance(d, norm)
            }
            (
                Row::Sparse {
                    columns: ca,
                    values: va,
                },
                Row::Sparse {
                    columns: cb,
                    values: vb,
                },
            ) => {
                let (mut i, mut j) = (0, 0);
                let mut acc = 0.0f64;
                while i < ca.len() || j < cb.len() {
                    let d = if j == cb.len() || (i < ca.len() && ca[i] < cb[j]) {
                        i += 1;
                        f64::from(va[i - 1])
                    } else if i == ca.len() || cb[j] < ca[i] {
                        j += 1;
                        f64::from(vb[j - 1])
                    } else {
                        i += 1;
                        j += 1;
                        f64::from(va[i - 1]) - f64::from(vb[j - 1])
                    };
                    acc += d * d;
                }
                acc
            }
        }
    }
}

/// Squared L2 distance over equal-length slices, accumulated in eight
/// independent lanes in a fixed order.
#[inline]
pub fn squared_l2(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0.0f32; 8];
    let chunks_a = a.chunks_exact(8);
    let chunks_b = b.chunks_exact(8);
    let rem_a = chunks_a.remainder();
    let rem_b = chunks_b.remainder();
    for (x, y) in chunks_a.zip(chunks_b) {
        for l in 0..8 {
            let d = x[l] - y[l];
            lanes[l] += d * d;
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in rem_a.iter().zip(rem_b) {
        let d = x - y;
        tail += d * d;
    }
    ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5]))
        + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7]))
        + tail
}
