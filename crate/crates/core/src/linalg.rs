//! Symmetric positive-definite and pseudoinverse solves.

use log::warn;
use nalgebra::DMatrix;

use crate::error::{shape_err, AcnnlError, Result};
use crate::tensor::{gemm, Mat, View};

const BLOCK: usize = 96;

/// Relative pivot floor below which a factorization is declared singular.
const PIVOT_FLOOR: f64 = 1e-14;

/// Lower-triangular Cholesky factor `a = L·Lᵀ`.
#[derive(Clone, Debug)]
pub struct Cholesky {
    l: Mat,
}

impl Cholesky {
    /// Blocked right-looking factorization. Only the lower triangle of `a` is
    /// read.
    pub fn factor(a: &Mat) -> Result<Self> {
        let n = a.rows();
        if a.cols() != n {
            return shape_err(format!("cholesky of non-square {}x{}", n, a.cols()));
        }
        let mut l = a.clone();
        let scale = (0..n)
            .fold(0.0f64, |m, i| m.max(a.get(i, i).abs()))
            .max(f64::MIN_POSITIVE);
        let data = l.as_mut_slice();

        for k0 in (0..n).step_by(BLOCK) {
            let k1 = (k0 + BLOCK).min(n);
            factor_diagonal_block(data, n, k0, k1, scale)?;
            solve_panel(data, n, k0, k1);
            update_trailing(data, n, k0, k1);
        }
        for i in 0..n {
            for j in i + 1..n {
                data[i * n + j] = 0.0;
            }
        }
        Ok(Self { l })
    }

    pub fn factor_matrix(&self) -> &Mat {
        &self.l
    }

    /// Smallest and largest diagonal entries of `L`; their squared ratio is a
    /// cheap lower bound on the condition number.
    pub fn pivot_range(&self) -> (f64, f64) {
        let n = self.l.rows();
        (0..n).fold((f64::INFINITY, 0.0f64), |(lo, hi), i| {
            let d = self.l.get(i, i);
            (lo.min(d), hi.max(d))
        })
    }

    /// Solves `a·x = b` for every column of `b`.
    pub fn solve(&self, b: &Mat) -> Result<Mat> {
        let n = self.l.rows();
        if b.rows() != n {
            return shape_err(format!("cholesky solve with {} rows against {n}", b.rows()));
        }
        let m = b.cols();
        let l = self.l.as_slice();
        let mut x = b.clone();
        let xs = x.as_mut_slice();

        // L·y = b, row by row.
        for i in 0..n {
            let (done, rest) = xs.split_at_mut(i * m);
            let xi = &mut rest[..m];
            for k in 0..i {
                let lik = l[i * n + k];
                if lik != 0.0 {
                    let xk = &done[k * m..(k + 1) * m];
                    for (v, &u) in xi.iter_mut().zip(xk) {
                        *v -= lik * u;
                    }
                }
            }
            let inv = 1.0 / l[i * n + i];
            xi.iter_mut().for_each(|v| *v *= inv);
        }
        // Lᵀ·x = y, bottom up.
        for i in (0..n).rev() {
            let (head, tail) = xs.split_at_mut((i + 1) * m);
            let xi = &mut head[i * m..];
            for k in i + 1..n {
                let lki = l[k * n + i];
                if lki != 0.0 {
                    let xk = &tail[(k - i - 1) * m..(k - i) * m];
                    for (v, &u) in xi.iter_mut().zip(xk) {
                        *v -= lki * u;
                    }
                }
            }
            let inv = 1.0 / l[i * n + i];
            xi.iter_mut().for_each(|v| *v *= inv);
        }
        Ok(x)
    }
}

fn factor_diagonal_block(a: &mut [f64], n: usize, k0: usize, k1: usize, scale: f64) -> Result<()> {
    for j in k0..k1 {
        let mut d = a[j * n + j];
        for k in k0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !d.is_finite() || d <= PIVOT_FLOOR * scale {
            return Err(AcnnlError::Singular { index: j, pivot: d });
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..k1 {
            let mut s = a[i * n + j];
            for k in k0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    Ok(())
}

/// `L21 = A21·L11⁻ᵀ` for the rows below the diagonal block.
fn solve_panel(a: &mut [f64], n: usize, k0: usize, k1: usize) {
    for i in k1..n {
        for j in k0..k1 {
            let mut s = a[i * n + j];
            for k in k0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / a[j * n + j];
        }
    }
}

/// `A22 -= L21·L21ᵀ`, lower block triangle only.
fn update_trailing(a: &mut [f64], n: usize, k0: usize, k1: usize) {
    if k1 >= n {
        return;
    }
    let width = k1 - k0;
    let panel: Vec<f64> = (k1..n)
        .flat_map(|i| a[i * n + k0..i * n + k1].iter().copied())
        .collect();
    let pv = View::row_major(&panel, n - k1, width, width);
    for r0 in (k1..n).step_by(BLOCK) {
        let rn = BLOCK.min(n - r0);
        let lhs = pv.window(r0 - k1, 0, rn, width);
        let rhs = pv.window(0, 0, r0 + rn - k1, width).t();
        gemm(-1.0, lhs, rhs, 1.0, &mut a[r0 * n + k1..], n);
    }
}

fn check_symmetric(a: &Mat) -> Result<()> {
    let n = a.rows();
    let tol = 1e-9 * a.max_abs().max(f64::MIN_POSITIVE);
    for i in 0..n {
        for j in 0..i {
            if (a.get(i, j) - a.get(j, i)).abs() > tol {
                return shape_err(format!("matrix is not symmetric at ({i}, {j})"));
            }
        }
    }
    Ok(())
}

/// Solves `a·x = b` for symmetric positive-definite `a` via Cholesky.
pub fn sym_solve(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.rows() != a.cols() {
        return shape_err(format!(
            "sym_solve needs a square matrix, got {:?}",
            a.shape()
        ));
    }
    if a.rows() != b.rows() {
        return shape_err(format!(
            "sym_solve row mismatch: {} vs {}",
            a.rows(),
            b.rows()
        ));
    }
    check_symmetric(a)?;
    Cholesky::factor(a)?.solve(b)
}

fn to_dmatrix(a: &Mat) -> DMatrix<f64> {
    DMatrix::from_row_slice(a.rows(), a.cols(), a.as_slice())
}

fn from_dmatrix(m: &DMatrix<f64>) -> Mat {
    Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// Moore–Penrose pseudoinverse computed from a thin SVD, plus the effective
/// rank it used.
pub fn pinv_with_rank(a: &Mat) -> (Mat, usize) {
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return (Mat::zeros(n, m), 0);
    }
    let svd = to_dmatrix(a).svd(true, true);
    let smax = svd.singular_values.iter().fold(0.0f64, |x, &s| x.max(s));
    let tol = m.max(n) as f64 * f64::EPSILON * smax;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    let u = svd.u.as_ref().expect("u requested");
    let vt = svd.v_t.as_ref().expect("v_t requested");
    let mut vt_scaled = vt.clone();
    for (k, &s) in svd.singular_values.iter().enumerate() {
        let inv = if s > tol { 1.0 / s } else { 0.0 };
        vt_scaled.row_mut(k).scale_mut(inv);
    }
    let out = vt_scaled.transpose() * u.transpose();
    (from_dmatrix(&out), rank)
}

pub fn pinv(a: &Mat) -> Mat {
    pinv_with_rank(a).0
}

/// Minimum-norm least-squares solution `a†·b`.
pub fn pinv_solve(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.rows() != b.rows() {
        return shape_err(format!(
            "pinv_solve row mismatch: {} vs {}",
            a.rows(),
            b.rows()
        ));
    }
    let (p, rank) = pinv_with_rank(a);
    let full = a.rows().min(a.cols());
    if rank < full {
        warn!("pseudoinverse: effective rank {rank} < {full}");
    }
    crate::tensor::matmul(&p, b)
}
