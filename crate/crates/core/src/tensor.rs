//! Dense row-major `f64` kernels shared by the decoder and the analyzers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default epsilon used by [`rms_norm`] inside the decoder and the lens.
pub const RMS_EPS: f64 = 1e-6;

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

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major data, rejecting wrong lengths and non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("matrix entry {i}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    /// Row vector times matrix: `v (1×rows) · self (rows×cols)`.
    pub fn vec_mul(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.rows {
            return Err(Error::Shape(format!(
                "vector of length {} times {}x{} matrix",
                v.len(),
                self.rows,
                self.cols
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (i, &x) in v.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(self.row(i)) {
                *o += x * w;
            }
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "{}x{} times {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let dst = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let x = a.data[i * a.cols + k];
            for (o, w) in dst.iter_mut().zip(b.row(k)) {
                *o += x * w;
            }
        }
    }
    if !out.is_finite() {
        return Err(Error::NonFinite("matmul overflow".into()));
    }
    Ok(out)
}

/// Numerically stable softmax of a single row.
pub fn softmax(row: &[f64]) -> Result<Vec<f64>> {
    if row.iter().any(|x| x.is_nan()) {
        return Err(Error::NonFinite("NaN in softmax input".into()));
    }
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

pub fn softmax_rows(m: &Matrix) -> Result<Matrix> {
    let mut out = Matrix::zeros(m.rows, m.cols);
    for r in 0..m.rows {
        let s = softmax(m.row(r))?;
        out.data[r * m.cols..(r + 1) * m.cols].copy_from_slice(&s);
    }
    Ok(out)
}

/// `v / sqrt(mean(v²) + eps) * gain`.
pub fn rms_norm(v: &[f64], gain: &[f64], eps: f64) -> Result<Vec<f64>> {
    if v.len() != gain.len() {
        return Err(Error::Shape(format!(
            "rms_norm: vector {} vs gain {}",
            v.len(),
            gain.len()
        )));
    }
    if v.is_empty() {
        return Ok(Vec::new());
    }
    let ms = v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64;
    let denom = (ms + eps).sqrt();
    if denom == 0.0 {
        // eps == 0 on a zero vector; keep it zero rather than NaN
        return Ok(vec![0.0; v.len()]);
    }
    Ok(v.iter().zip(gain).map(|(x, g)| x / denom * g).collect())
}

/// Top-`k` `(index, value)` pairs, value descending, ties to the lower index.
pub fn topk(values: &[f64], k: usize) -> Result<Vec<(usize, f64)>> {
    if k == 0 || k > values.len() {
        return Err(Error::InvalidArgument(format!(
            "k={k} out of range 1..={}",
            values.len()
        )));
    }
    let mut idx: Vec<usize> = (0..values.len()).collect();
    let cmp = |a: &usize, b: &usize| values[*b].total_cmp(&values[*a]).then(a.cmp(b));
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_by(cmp);
    Ok(idx.into_iter().map(|i| (i, values[i])).collect())
}
