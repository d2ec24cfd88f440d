//! Dense row-major `f64` tensors and the forward kernels used by the tape.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Dense row-major array of `f64` with shape metadata.
///
/// Every constructor checks `data.len() == product(shape)` and rejects
/// non-finite entries, so a `Tensor` obtained through the public API is
/// always finite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Shape(format!("zero-sized dimension in {shape:?}")));
        }
        if numel_of(&shape) != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {} elements, got {}",
                numel_of(&shape),
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite entry {} at {i}", data[i])));
        }
        Ok(Self { shape, data })
    }

    /// Internal constructor for kernel outputs; finiteness is checked by the caller.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_parts(shape.to_vec(), vec![0.0; numel_of(shape)])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::from_parts(shape.to_vec(), vec![value; numel_of(shape)])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(vec![r, c], rows.concat())
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Shape(format!("expected a matrix, got shape {:?}", self.shape))),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = *self.shape.last().unwrap();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel_of(shape) != self.numel() {
            return Err(Error::Shape(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        Ok(Self::from_parts(shape.to_vec(), self.data.clone()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub(crate) fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.require_same_shape(other)?;
        Ok(Self::from_parts(self.shape.clone(), self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect()))
    }

    pub(crate) fn require_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!("shape mismatch {:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("{what}: non-finite value at flat index {i}")));
        }
        Ok(())
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `self[m×k] · rhs[k×n]`.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        let (m, k) = self.dims2()?;
        let (k2, n) = rhs.dims2()?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul inner dimensions disagree: {:?} x {:?}", self.shape, rhs.shape)));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &rhs.data[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        let t = Self::from_parts(vec![m, n], out);
        t.check_finite("matmul")?;
        Ok(t)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self::from_parts(vec![c, r], out))
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_row(&self, bias: &Self) -> Result<Self> {
        let (m, n) = self.dims2()?;
        if bias.numel() != n {
            return Err(Error::Shape(format!(
                "bias of {} elements cannot be added to rows of width {n}",
                bias.numel()
            )));
        }
        let mut out = self.data.clone();
        for i in 0..m {
            for (o, &b) in out[i * n..(i + 1) * n].iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        Ok(Self::from_parts(self.shape.clone(), out))
    }

    /// Concatenates two matrices with equal row counts along columns.
    pub fn concat_cols(&self, rhs: &Self) -> Result<Self> {
        let (m, a) = self.dims2()?;
        let (m2, b) = rhs.dims2()?;
        if m != m2 {
            return Err(Error::Shape(format!("row counts differ: {m} vs {m2}")));
        }
        let mut out = Vec::with_capacity(m * (a + b));
        for i in 0..m {
            out.extend_from_slice(self.row(i));
            out.extend_from_slice(rhs.row(i));
        }
        Ok(Self::from_parts(vec![m, a + b], out))
    }

    /// Selects rows by index.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        let (m, n) = self.dims2()?;
        if idx.is_empty() {
            return Err(Error::Shape("empty row selection".into()));
        }
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return Err(Error::Index(format!("row {i} out of range for {m} rows")));
            }
            out.extend_from_slice(self.row(i));
        }
        Ok(Self::from_parts(vec![idx.len(), n], out))
    }
}

/// Numerically stable softmax of a single vector.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Shape("softmax of an empty vector".into()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("softmax input is not finite".into()));
    }
    Ok(softmax_unchecked(v))
}

pub(crate) fn softmax_unchecked(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Softmax restricted to the columns where `mask` is true; masked-out
/// entries get probability zero.
pub(crate) fn masked_softmax(v: &[f64], mask: Option<&[bool]>) -> Vec<f64> {
    let Some(mask) = mask else {
        return softmax_unchecked(v);
    };
    let max = v.iter().zip(mask).filter(|(_, &m)| m).map(|(&x, _)| x).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().zip(mask).map(|(&x, &m)| if m { (x - max).exp() } else { 0.0 }).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Row-wise softmax of a `B×M` matrix.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let (b, m) = logits.dims2()?;
    let mut out = Vec::with_capacity(b * m);
    for i in 0..b {
        out.extend(softmax(logits.row(i))?);
    }
    Ok(Tensor::from_parts(vec![b, m], out))
}
