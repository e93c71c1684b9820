//! Dense row-major matrix of f64 plus the scalar math used across the crate.
//!
//! Feature blocks are small (a few thousand rows, a few dozen channels), so a
//! flat `Vec<f64>` with hand-written loops is simpler and fast enough; no BLAS.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        let mut data = Vec::with_capacity(r * c);
        for row in &rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Mat { rows: r, cols: c, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Mat::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Mat { rows, cols, data }
    }

    /// 1 x n row vector.
    pub fn row_vec(v: Vec<f64>) -> Self {
        Mat { rows: 1, cols: v.len(), data: v }
    }

    pub fn scalar(v: f64) -> Self {
        Mat { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip(&self, other: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Mat) {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    pub fn scale(&self, c: f64) -> Mat {
        self.map(|x| c * x)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Gathers rows into a new matrix, in the given order.
    pub fn gather_rows(&self, idx: &[usize]) -> Mat {
        let mut out = Mat::zeros(idx.len(), self.cols);
        for (o, &i) in idx.iter().enumerate() {
            out.row_mut(o).copy_from_slice(self.row(i));
        }
        out
    }
}

/// y = x * W^T + b, applied row by row: y[l][o] = sum_i w[o][i] * x[l][i] + b[o].
pub fn affine_rows(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    assert_eq!(x.cols, w.cols, "affine input channels");
    assert_eq!(w.rows, b.len(), "affine output channels");
    let mut y = Mat::zeros(x.rows, w.rows);
    for l in 0..x.rows {
        let xr = x.row(l);
        let yr = y.row_mut(l);
        for o in 0..w.rows {
            let wr = w.row(o);
            let mut acc = b[o];
            for i in 0..w.cols {
                acc += wr[i] * xr[i];
            }
            yr[o] = acc;
        }
    }
    y
}

/// W^T * v for a single vector: out[i] = sum_o w[o][i] * v[o].
pub fn matvec_t(w: &Mat, v: &[f64], out: &mut [f64]) {
    assert_eq!(w.rows, v.len());
    assert_eq!(w.cols, out.len());
    out.fill(0.0);
    for o in 0..w.rows {
        let wr = w.row(o);
        let vo = v[o];
        for i in 0..w.cols {
            out[i] += wr[i] * vo;
        }
    }
}

/// W * v for a single vector: out[o] = sum_i w[o][i] * v[i].
pub fn matvec(w: &Mat, v: &[f64], out: &mut [f64]) {
    assert_eq!(w.cols, v.len());
    assert_eq!(w.rows, out.len());
    for o in 0..w.rows {
        let wr = w.row(o);
        let mut acc = 0.0;
        for i in 0..w.cols {
            acc += wr[i] * v[i];
        }
        out[o] = acc;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_deriv(x: f64) -> f64 {
    let s = sigmoid(x);
    s + x * s * (1.0 - s)
}

/// Exact-erf GELU: 0.5 * x * (1 + erf(x / sqrt(2))).
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn gelu_deriv(x: f64) -> f64 {
    let phi = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    phi + x * pdf
}

/// log(1 + e^x) without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// max |a - b| / max(||b||_inf, tiny): deviation relative to the reference scale.
pub fn max_rel_err(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.rows, b.rows);
    assert_eq!(a.cols, b.cols);
    let scale = b
        .data
        .iter()
        .fold(0.0f64, |m, x| m.max(x.abs()))
        .max(1e-300);
    a.data
        .iter()
        .zip(b.data.iter())
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
        / scale
}
