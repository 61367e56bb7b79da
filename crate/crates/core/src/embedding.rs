//! Dense vector and matrix primitives, cosine similarity, and the labeled
//! embedding-set container shared by every other module.
//!
//! All arithmetic is `f64`. Matrices are row-major.

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from row vectors. An empty input yields a `0 x 0` matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    actual: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.iter_rows().map(<[f64]>::to_vec).collect()
    }

    /// New matrix holding the given rows, in order.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch {
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a = self.row(i);
            let o = out.row_mut(i);
            for (k, &aik) in a.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                for (oj, &bkj) in o.iter_mut().zip(other.row(k)) {
                    *oj += aik * bkj;
                }
            }
        }
        Ok(out)
    }

    /// `self * other^T`, i.e. every row of `self` dotted with every row of `other`.
    pub fn matmul_transposed(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::ShapeMismatch {
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out[(i, j)] = dot(a, other.row(j));
            }
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// One dense vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    values: Vec<f64>,
}

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::DimensionMismatch {
                expected: 1,
                actual: 0,
            });
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        norm(&self.values)
    }

    pub fn normalize(&self) -> Result<Embedding> {
        let n = self.norm();
        if n == 0.0 {
            return Err(Error::ZeroVector { row: None });
        }
        Ok(Self {
            values: self.values.iter().map(|v| v / n).collect(),
        })
    }
}

impl From<Embedding> for Vec<f64> {
    fn from(e: Embedding) -> Self {
        e.values
    }
}

/// Cosine similarity of two raw slices, clamped to `[-1, 1]`.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector { row: None });
    }
    Ok(cosine_with_norms(a, b, na, nb))
}

#[inline]
fn cosine_with_norms(a: &[f64], b: &[f64], na: f64, nb: f64) -> f64 {
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

pub fn cosine_similarity(a: &Embedding, b: &Embedding) -> Result<f64> {
    cosine(&a.values, &b.values)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Audio,
    Image,
    TeacherText,
    StudentText,
}

impl Modality {
    pub const ALL: [Modality; 4] = [
        Modality::Audio,
        Modality::Image,
        Modality::TeacherText,
        Modality::StudentText,
    ];

    /// On-disk code.
    pub fn code(self) -> u8 {
        match self {
            Modality::Audio => 0,
            Modality::Image => 1,
            Modality::TeacherText => 2,
            Modality::StudentText => 3,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.code() == code)
            .ok_or(Error::UnknownModality(code))
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Audio => "audio",
            Modality::Image => "image",
            Modality::TeacherText => "teacher_text",
            Modality::StudentText => "student_text",
        }
    }
}

/// A labeled matrix of embeddings, one row per item.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    matrix: Matrix,
    labels: Vec<u32>,
    modality: Modality,
    normalized: bool,
}

impl EmbeddingSet {
    pub fn new(matrix: Matrix, labels: Vec<u32>, modality: Modality) -> Result<Self> {
        if labels.len() != matrix.rows() {
            return Err(Error::DimensionMismatch {
                expected: matrix.rows(),
                actual: labels.len(),
            });
        }
        Ok(Self {
            matrix,
            labels,
            modality,
            normalized: false,
        })
    }

    /// Like [`EmbeddingSet::new`], but marks the set normalized after
    /// checking every row has unit norm within `1e-9`.
    pub fn new_normalized(matrix: Matrix, labels: Vec<u32>, modality: Modality) -> Result<Self> {
        let mut set = Self::new(matrix, labels, modality)?;
        for (i, row) in set.matrix.iter_rows().enumerate() {
            let n = norm(row);
            if (n - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidConfig(format!(
                    "row {i} has norm {n}, expected unit norm"
                )));
            }
        }
        set.normalized = true;
        Ok(set)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.matrix.row(i)
    }

    pub fn subset(&self, indices: &[usize]) -> EmbeddingSet {
        EmbeddingSet {
            matrix: self.matrix.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            modality: self.modality,
            normalized: self.normalized,
        }
    }

    pub fn with_modality(mut self, modality: Modality) -> Self {
        self.modality = modality;
        self
    }

    pub fn into_parts(self) -> (Matrix, Vec<u32>, Modality) {
        (self.matrix, self.labels, self.modality)
    }

    /// SHA-256 over modality, labels and the exact bit patterns of every entry.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update([self.modality.code()]);
        h.update((self.matrix.rows() as u64).to_le_bytes());
        h.update((self.matrix.cols() as u64).to_le_bytes());
        for l in &self.labels {
            h.update(l.to_le_bytes());
        }
        for v in self.matrix.as_slice() {
            h.update(v.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Cosine similarity between every query row and every gallery row.
///
/// Entry `(i, j)` is bitwise equal to `cosine(queries.row(i), gallery.row(j))`.
/// Rows are processed in parallel; each entry is computed independently so the
/// result does not depend on the thread count.
pub fn similarity_matrix(queries: &EmbeddingSet, gallery: &EmbeddingSet) -> Result<Matrix> {
    if queries.dim() != gallery.dim() {
        return Err(Error::DimensionMismatch {
            expected: queries.dim(),
            actual: gallery.dim(),
        });
    }
    let q_norms = row_norms(queries.matrix())?;
    let g_norms = row_norms(gallery.matrix())?;
    let n_g = gallery.len();
    let mut out = Matrix::zeros(queries.len(), n_g);
    if n_g == 0 {
        return Ok(out);
    }
    out.as_mut_slice()
        .par_chunks_mut(n_g)
        .enumerate()
        .for_each(|(i, out_row)| {
            let q = queries.row(i);
            for (j, o) in out_row.iter_mut().enumerate() {
                *o = cosine_with_norms(q, gallery.row(j), q_norms[i], g_norms[j]);
            }
        });
    Ok(out)
}

fn row_norms(m: &Matrix) -> Result<Vec<f64>> {
    m.iter_rows()
        .enumerate()
        .map(|(i, r)| {
            let n = norm(r);
            if n == 0.0 {
                Err(Error::ZeroVector { row: Some(i) })
            } else {
                Ok(n)
            }
        })
        .collect()
}

/// Scales every row to unit Euclidean norm. Labels and order are preserved.
pub fn normalize_rows(set: &EmbeddingSet) -> Result<EmbeddingSet> {
    let mut matrix = set.matrix.clone();
    normalize_matrix_rows(&mut matrix)?;
    Ok(EmbeddingSet {
        matrix,
        labels: set.labels.clone(),
        modality: set.modality,
        normalized: true,
    })
}

pub(crate) fn normalize_matrix_rows(m: &mut Matrix) -> Result<()> {
    for i in 0..m.rows() {
        let row = m.row_mut(i);
        let n = norm(row);
        if n == 0.0 {
            return Err(Error::ZeroVector { row: Some(i) });
        }
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok(())
}
