//! Dense row-major `f64` tensors and named parameter sets.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    /// A `rows x cols` matrix from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// A `1 x n` row vector.
    pub fn row(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![1, n], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Leading extent when viewed as a matrix (all but the last axis flattened).
    pub fn rows(&self) -> usize {
        self.numel() / self.cols()
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor has at least one axis")
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub(crate) fn as_matrix_shape(&self) -> (usize, usize) {
        (self.rows(), self.cols())
    }
}

/// `a (n x k) * b (k x m)`.
pub(crate) fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    // 4x4 register tiles; every element accumulates over `p` in order, so
    // results match the naive triple loop exactly
    let (n4, m4) = (n - n % 4, m - m % 4);
    for i in (0..n4).step_by(4) {
        for j in (0..m4).step_by(4) {
            let mut acc = [[0.0f64; 4]; 4];
            for p in 0..k {
                let bv = &b[p * m + j..p * m + j + 4];
                for (r, row) in acc.iter_mut().enumerate() {
                    let av = a[(i + r) * k + p];
                    for c in 0..4 {
                        row[c] += av * bv[c];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                out[(i + r) * m + j..(i + r) * m + j + 4].copy_from_slice(row);
            }
        }
    }
    let tail = |i: usize, j: usize| (0..k).fold(0.0, |acc, p| acc + a[i * k + p] * b[p * m + j]);
    for i in 0..n4 {
        for j in m4..m {
            out[i * m + j] = tail(i, j);
        }
    }
    for i in n4..n {
        for j in 0..m {
            out[i * m + j] = tail(i, j);
        }
    }
    out
}

/// `a^T (k x n)^T * b (k x m)` where `a` is stored `k x n`.
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], k: usize, n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for p in 0..k {
        let arow = &a[p * n..(p + 1) * n];
        let brow = &b[p * m..(p + 1) * m];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * m..(i + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a (n x k) * b^T` where `b` is stored `m x k`.
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            out[i * m + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub value: Tensor,
    pub trainable: bool,
}

/// Named parameters in a deterministic (sorted) order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    params: BTreeMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        self.params.insert(name, Param { value, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    /// Overwrite a parameter's values; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name:?}")))?;
        if slot.value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter {name:?} has shape {:?}, got {:?}",
                slot.value.shape(),
                value.shape()
            )));
        }
        slot.value = value;
        Ok(())
    }

    pub(crate) fn data_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        self.params.get_mut(name).map(|p| p.value.data_mut())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    /// FNV-1a over names, shapes and the exact bit patterns of every value.
    pub fn content_hash(&self) -> u64 {
        use std::hash::Hasher;
        let mut h = fnv::FnvHasher::default();
        for (name, p) in &self.params {
            h.write(name.as_bytes());
            h.write(&[p.trainable as u8]);
            for &d in p.value.shape() {
                h.write(&(d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.write(&v.to_bits().to_le_bytes());
            }
        }
        h.finish()
    }
}

/// Gradients keyed by parameter name.
pub type Grads = BTreeMap<String, Tensor>;
