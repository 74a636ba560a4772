//! Small dense helpers shared by the modules.

use crate::{Mat, Vector};

/// Induced infinity norm (max absolute row sum).
pub fn inf_norm(m: &Mat) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Row-wise absolute sums, i.e. `|M| 1`.
pub fn abs_row_sums(m: &Mat) -> Vec<f64> {
    m.row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum())
        .collect()
}

/// Spectral norm by power iteration on `MᵀM`.
pub fn norm2(m: &Mat) -> f64 {
    norm2_with(m, 1e-10, 10_000)
}

pub fn norm2_with(m: &Mat, tol: f64, max_iter: usize) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 || m.amax() == 0.0 {
        return 0.0;
    }
    let gram = m.transpose() * m;
    // Deterministic start with no symmetry so it is unlikely to be orthogonal
    // to the leading eigenvector.
    let mut v = Vector::from_fn(gram.nrows(), |i, _| 1.0 + 0.1 * i as f64);
    v /= v.norm();
    let mut lambda = 0.0;
    for _ in 0..max_iter {
        let w = &gram * &v;
        let next = v.dot(&w);
        let nw = w.norm();
        if nw == 0.0 {
            return 0.0;
        }
        v = w / nw;
        if (next - lambda).abs() <= tol * next.abs().max(1e-300) {
            lambda = next;
            break;
        }
        lambda = next;
    }
    // One Rayleigh quotient at the final vector is the sharpest estimate.
    let rq = v.dot(&(&gram * &v));
    rq.max(lambda).sqrt()
}

pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

/// Smallest and largest eigenvalue of a symmetric matrix.
pub fn eig_extremes(m: &Mat) -> (f64, f64) {
    if m.nrows() == 0 {
        return (f64::INFINITY, f64::NEG_INFINITY);
    }
    let e = symmetrize(m).symmetric_eigenvalues();
    (e.min(), e.max())
}

pub fn spectral_radius(m: &Mat) -> f64 {
    m.complex_eigenvalues()
        .iter()
        .map(|c| c.norm())
        .fold(0.0, f64::max)
}

pub fn mat_pow(m: &Mat, k: usize) -> Mat {
    let mut out = Mat::identity(m.nrows(), m.ncols());
    for _ in 0..k {
        out = &out * m;
    }
    out
}

/// Row-major copy, the layout used by the hot loops.
pub fn row_major(m: &Mat) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

/// `out = M x` for a row-major `M` with `out.len()` rows.
#[inline]
pub fn gemv(out: &mut [f64], m: &[f64], x: &[f64]) {
    let cols = x.len();
    debug_assert_eq!(m.len(), out.len() * cols);
    for (o, row) in out.iter_mut().zip(m.chunks_exact(cols)) {
        let mut acc = 0.0;
        for (a, b) in row.iter().zip(x) {
            acc += a * b;
        }
        *o = acc;
    }
}

/// Row-compressed matrix for products that skip structural zeros.
#[derive(Debug, Clone, Default)]
pub struct SparseRows {
    start: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseRows {
    pub fn from_dense(m: &Mat) -> Self {
        let mut start = Vec::with_capacity(m.nrows() + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        start.push(0);
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                let v = m[(i, j)];
                if v != 0.0 {
                    cols.push(j);
                    vals.push(v);
                }
            }
            start.push(cols.len());
        }
        Self { start, cols, vals }
    }

    pub fn nrows(&self) -> usize {
        self.start.len().saturating_sub(1)
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// `out = M x`, summing each row's stored entries in column order. For
    /// finite `x` the result equals the dense product bit for bit.
    #[inline]
    pub fn mul_into(&self, out: &mut [f64], x: &[f64]) {
        debug_assert_eq!(out.len(), self.nrows());
        for (i, o) in out.iter_mut().enumerate() {
            let (a, b) = (self.start[i], self.start[i + 1]);
            let mut acc = 0.0;
            for (c, v) in self.cols[a..b].iter().zip(&self.vals[a..b]) {
                acc += v * x[*c];
            }
            *o = acc;
        }
    }
}

/// Block diagonal assembly.
pub fn block_diag(blocks: &[&Mat]) -> Mat {
    let r: usize = blocks.iter().map(|b| b.nrows()).sum();
    let c: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Mat::zeros(r, c);
    let (mut i, mut j) = (0, 0);
    for b in blocks {
        out.view_mut((i, j), (b.nrows(), b.ncols())).copy_from(b);
        i += b.nrows();
        j += b.ncols();
    }
    out
}

pub fn hstack(blocks: &[&Mat]) -> Mat {
    let r = blocks.first().map_or(0, |b| b.nrows());
    let c: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Mat::zeros(r, c);
    let mut j = 0;
    for b in blocks {
        assert_eq!(b.nrows(), r, "hstack row mismatch");
        out.view_mut((0, j), (r, b.ncols())).copy_from(b);
        j += b.ncols();
    }
    out
}

pub fn vstack(blocks: &[&Mat]) -> Mat {
    let c = blocks.first().map_or(0, |b| b.ncols());
    let r: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = Mat::zeros(r, c);
    let mut i = 0;
    for b in blocks {
        assert_eq!(b.ncols(), c, "vstack column mismatch");
        out.view_mut((i, 0), (b.nrows(), c)).copy_from(b);
        i += b.nrows();
    }
    out
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    (a - b).amax()
}
