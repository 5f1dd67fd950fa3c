//! Dense row-major matrices and the two fields every instance carries: the
//! additive score field being predicted and the ground-truth class
//! distributions it is scored against.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_dims, Error, Result};

/// Tolerance for the sum-to-one check on class distributions.
pub const DISTRIBUTION_TOLERANCE: f64 = 1e-9;

/// Row-major `rows x cols` matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
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
        ensure_dims("matrix data length", rows * cols, data.len())?;
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            ensure_dims("matrix row length", cols, row.len())?;
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        // chunks_exact(0) panics; a zero-column matrix has no meaningful rows.
        self.data.chunks_exact(self.cols.max(1))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A probability vector over `K` classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDistribution(Vec<f64>);

impl ClassDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        validate_distribution(&probs)?;
        Ok(Self(probs))
    }

    pub fn one_hot(num_classes: usize, class: usize) -> Result<Self> {
        if class >= num_classes {
            return Err(Error::OutOfRange {
                what: "class",
                index: class,
                len: num_classes,
            });
        }
        let mut probs = vec![0.0; num_classes];
        probs[class] = 1.0;
        Ok(Self(probs))
    }

    pub(crate) fn from_raw(probs: Vec<f64>) -> Self {
        Self(probs)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

pub(crate) fn validate_distribution(probs: &[f64]) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::Empty("class distribution"));
    }
    let mut sum = 0.0;
    for &p in probs {
        if !p.is_finite() || !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidInput(format!("probability {p} outside [0, 1]")));
        }
        sum += p;
    }
    if (sum - 1.0).abs() > DISTRIBUTION_TOLERANCE {
        return Err(Error::InvalidInput(format!("probabilities sum to {sum}, not 1")));
    }
    Ok(())
}

/// The structured output: one row of `K` unbounded class scores per element.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreField(Matrix);

impl ScoreField {
    pub fn zeros(num_elements: usize, num_classes: usize) -> Self {
        Self(Matrix::zeros(num_elements, num_classes))
    }

    /// Every element starts from the same score row.
    pub fn constant(num_elements: usize, row: &[f64]) -> Self {
        let mut m = Matrix::zeros(num_elements, row.len());
        for j in 0..num_elements {
            m.row_mut(j).copy_from_slice(row);
        }
        Self(m)
    }

    pub fn from_matrix(m: Matrix) -> Result<Self> {
        if !m.is_finite() {
            return Err(Error::InvalidInput("non-finite score".into()));
        }
        Ok(Self(m))
    }

    pub fn num_elements(&self) -> usize {
        self.0.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.0.cols()
    }

    #[inline]
    pub fn row(&self, j: usize) -> &[f64] {
        self.0.row(j)
    }

    #[inline]
    pub fn row_mut(&mut self, j: usize) -> &mut [f64] {
        self.0.row_mut(j)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    /// Index of the highest score in each row; ties go to the lowest class.
    pub fn argmax(&self) -> Vec<usize> {
        self.0.iter_rows().map(argmax).collect()
    }
}

/// Per-element ground-truth class distributions `p_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelField(Matrix);

impl LabelField {
    pub fn from_matrix(m: Matrix) -> Result<Self> {
        for row in m.iter_rows() {
            validate_distribution(row)?;
        }
        Ok(Self(m))
    }

    pub fn from_classes(num_classes: usize, classes: &[usize]) -> Result<Self> {
        let mut m = Matrix::zeros(classes.len(), num_classes);
        for (j, &c) in classes.iter().enumerate() {
            if c >= num_classes {
                return Err(Error::OutOfRange {
                    what: "class label",
                    index: c,
                    len: num_classes,
                });
            }
            m.set(j, c, 1.0);
        }
        Ok(Self(m))
    }

    pub fn num_elements(&self) -> usize {
        self.0.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.0.cols()
    }

    #[inline]
    pub fn row(&self, j: usize) -> &[f64] {
        self.0.row(j)
    }

    pub fn distribution(&self, j: usize) -> ClassDistribution {
        ClassDistribution::from_raw(self.row(j).to_vec())
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    /// Most likely class per element.
    pub fn argmax(&self) -> Vec<usize> {
        self.0.iter_rows().map(argmax).collect()
    }

    /// `Some(classes)` when every row is exactly one-hot.
    pub fn as_one_hot(&self) -> Option<Vec<usize>> {
        self.0
            .iter_rows()
            .map(|row| {
                let c = argmax(row);
                let exact = row
                    .iter()
                    .enumerate()
                    .all(|(k, &p)| if k == c { p == 1.0 } else { p == 0.0 });
                exact.then_some(c)
            })
            .collect()
    }
}

#[inline]
pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = k;
        }
    }
    best
}
