//! Dense thin SVD and singular-value soft-thresholding.
//!
//! [`svd`] and [`svt`] go through a full thin SVD (faer) and are the
//! reference path. [`svt_gram_in_place`] is the fast path used inside the
//! solver: it eigendecomposes the small Gram matrix `X Xᵀ` of the
//! short-and-wide group matrices it sees and applies the shrinkage as a
//! rank-k product.

use faer::linalg::matmul::matmul;
use faer::{Accum, Mat, MatMut, MatRef, Par, Side};

use crate::error::{Error, Result};

/// Largest `rows * cols` accepted by [`svd`].
pub const SVD_MAX_ENTRIES: usize = 1 << 22;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    /// Row-major constructor.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!("{} values for {rows}x{cols}", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix entries"));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        DenseMatrix { rows, cols, data }
    }

    pub fn diag(rows: usize, cols: usize, values: &[f64]) -> Self {
        Self::from_fn(rows, cols, |i, j| if i == j { values.get(i).copied().unwrap_or(0.0) } else { 0.0 })
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

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                let src = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += a * s);
            }
        }
        Ok(out)
    }

    pub fn sub(&self, other: &DenseMatrix) -> Result<Self> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Shape("matrix shapes differ".into()));
        }
        Ok(DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        })
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Thin SVD `A = H diag(S) Vᵀ`.
#[derive(Debug, Clone)]
pub struct Svd {
    /// `rows x r` left singular vectors, `r = min(rows, cols)`.
    pub h: DenseMatrix,
    /// Descending, non-negative.
    pub s: Vec<f64>,
    /// `cols x r` right singular vectors.
    pub v: DenseMatrix,
}

impl Svd {
    pub fn reconstruct(&self) -> DenseMatrix {
        self.reconstruct_with(&self.s)
    }

    fn reconstruct_with(&self, s: &[f64]) -> DenseMatrix {
        let (m, n, r) = (self.h.rows(), self.v.rows(), s.len());
        DenseMatrix::from_fn(m, n, |i, j| (0..r).map(|l| self.h.get(i, l) * s[l] * self.v.get(j, l)).sum())
    }
}

pub fn svd(a: &DenseMatrix) -> Result<Svd> {
    if a.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("svd input"));
    }
    if a.rows * a.cols > SVD_MAX_ENTRIES {
        return Err(Error::Shape(format!("{}x{} exceeds the svd size bound", a.rows, a.cols)));
    }
    let r = a.rows.min(a.cols);
    if r == 0 {
        return Ok(Svd {
            h: DenseMatrix::zeros(a.rows, 0),
            s: Vec::new(),
            v: DenseMatrix::zeros(a.cols, 0),
        });
    }
    let m = faer::Mat::<f64>::from_fn(a.rows, a.cols, |i, j| a.get(i, j));
    let dec = m.thin_svd().map_err(|_| Error::NonFinite("svd did not converge"))?;
    let (u, s, v) = (dec.U(), dec.S().column_vector(), dec.V());
    Ok(Svd {
        h: DenseMatrix::from_fn(a.rows, r, |i, j| u[(i, j)]),
        s: (0..r).map(|i| s[i]).collect(),
        v: DenseMatrix::from_fn(a.cols, r, |i, j| v[(i, j)]),
    })
}

fn check_theta(theta: f64) -> Result<()> {
    if theta.is_nan() || theta < 0.0 {
        return Err(Error::Config(format!("threshold {theta} must be non-negative")));
    }
    Ok(())
}

/// Soft-threshold the singular values of `a` by `theta`.
pub fn svt(a: &DenseMatrix, theta: f64) -> Result<DenseMatrix> {
    check_theta(theta)?;
    let d = svd(a)?;
    let shrunk: Vec<f64> = d.s.iter().map(|&s| (s - theta).max(0.0)).collect();
    Ok(d.reconstruct_with(&shrunk))
}

pub fn nuclear_norm(a: &DenseMatrix) -> Result<f64> {
    Ok(svd(a)?.s.iter().sum())
}

/// Number of singular values above `tol * max(1, s_max)`.
pub fn numerical_rank(a: &DenseMatrix, tol: f64) -> Result<usize> {
    let s = svd(a)?.s;
    let cut = tol * s.first().copied().unwrap_or(0.0).max(1.0);
    Ok(s.iter().filter(|&&v| v > cut).count())
}

/// Scratch buffers reused across [`svt_gram_in_place`] calls.
#[derive(Debug, Clone)]
pub struct SvtWorkspace {
    basis: Mat<f64>,
    coeffs: Mat<f64>,
}

impl Default for SvtWorkspace {
    fn default() -> Self {
        SvtWorkspace {
            basis: Mat::new(),
            coeffs: Mat::new(),
        }
    }
}

/// Threshold policy for [`svt_gram_in_place`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shrinkage {
    /// One threshold for every singular value.
    Uniform(f64),
    /// Per-component threshold `factor * sqrt(n) * noise_var / sd_i` where
    /// `sd_i = sqrt(max(s_i^2 / n - noise_var, 0))` estimates the signal
    /// spread along component `i` and `n` is the larger matrix dimension.
    /// Components with no estimated signal are removed.
    Adaptive { factor: f64, noise_var: f64 },
}

impl Shrinkage {
    fn validate(&self) -> Result<()> {
        match *self {
            Shrinkage::Uniform(theta) => check_theta(theta),
            Shrinkage::Adaptive { factor, noise_var } => {
                check_theta(factor)?;
                check_theta(noise_var)
            }
        }
    }

    fn is_identity(&self) -> bool {
        match *self {
            Shrinkage::Uniform(theta) => theta == 0.0,
            Shrinkage::Adaptive { factor, noise_var } => factor == 0.0 || noise_var == 0.0,
        }
    }

    /// Threshold applied to singular value `s` of a matrix whose larger
    /// dimension is `n`.
    pub fn threshold(&self, s: f64, n: usize) -> f64 {
        match *self {
            Shrinkage::Uniform(theta) => theta,
            Shrinkage::Adaptive { factor, noise_var } => {
                let n = n as f64;
                let sd = (s * s / n - noise_var).max(0.0).sqrt();
                if sd == 0.0 {
                    f64::INFINITY
                } else {
                    factor * n.sqrt() * noise_var / sd
                }
            }
        }
    }
}

/// In-place SVT of the row-major `rows x cols` matrix `x` via its Gram
/// matrix. Intended for `rows <= cols`. Returns the number of singular
/// values kept.
pub fn svt_gram_in_place(
    x: &mut [f64],
    rows: usize,
    cols: usize,
    shrink: Shrinkage,
    ws: &mut SvtWorkspace,
) -> Result<usize> {
    shrink.validate()?;
    if x.len() != rows * cols {
        return Err(Error::Shape(format!("{} values for {rows}x{cols}", x.len())));
    }
    if shrink.is_identity() || rows == 0 {
        return Ok(rows.min(cols));
    }
    let eig = gram(x, rows, cols)?
        .self_adjoint_eigen(Side::Lower)
        .map_err(|_| Error::NonFinite("group matrix eigendecomposition"))?;
    let (values, vectors) = (eig.S().column_vector(), eig.U());
    let n = rows.max(cols);
    let pairs: Vec<(usize, f64)> = (0..rows)
        .filter_map(|l| {
            let s = values[l].max(0.0).sqrt();
            let theta = shrink.threshold(s, n);
            (s > theta).then(|| (l, (s - theta) / s))
        })
        .collect();

    // coefficients C = diag(f) V^T X, then X <- V C
    let kept = pairs.len();
    if kept == 0 {
        x.fill(0.0);
        return Ok(0);
    }
    ws.basis.resize_with(rows, kept, |_, _| 0.0);
    for (j, &(l, _)) in pairs.iter().enumerate() {
        ws.basis.col_mut(j).copy_from(vectors.col(l));
    }
    ws.coeffs.resize_with(kept, cols, |_, _| 0.0);
    let xr = MatRef::from_row_major_slice(x, rows, cols);
    matmul(ws.coeffs.as_mut(), Accum::Replace, ws.basis.transpose(), xr, 1.0, Par::Seq);
    for (j, &(_, f)) in pairs.iter().enumerate() {
        ws.coeffs.row_mut(j).iter_mut().for_each(|c| *c *= f);
    }
    let xm = MatMut::from_row_major_slice_mut(x, rows, cols);
    matmul(xm, Accum::Replace, ws.basis.as_ref(), ws.coeffs.as_ref(), 1.0, Par::Seq);
    Ok(kept)
}

fn gram(x: &[f64], rows: usize, cols: usize) -> Result<Mat<f64>> {
    let xr = MatRef::from_row_major_slice(x, rows, cols);
    let mut g = Mat::<f64>::zeros(rows, rows);
    matmul(g.as_mut(), Accum::Replace, xr, xr.transpose(), 1.0, Par::Seq);
    if g.col_iter().any(|c| c.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite("group matrix"));
    }
    Ok(g)
}

/// Nuclear norm of the row-major `rows x cols` matrix `x` from the
/// eigenvalues of its Gram matrix.
pub fn nuclear_norm_gram(x: &[f64], rows: usize, cols: usize) -> f64 {
    if rows == 0 {
        return 0.0;
    }
    gram(x, rows, cols)
        .ok()
        .and_then(|g| g.self_adjoint_eigenvalues(Side::Lower).ok())
        .map_or(f64::NAN, |values| values.iter().map(|&l| l.max(0.0).sqrt()).sum())
}
