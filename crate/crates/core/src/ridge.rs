//! Closed-form regularized least squares over streamed samples.
//!
//! A layer solve only needs `Σ XᵀX` and `Σ XᵀZ`, so samples can be folded in
//! one at a time (or a chunk at a time) and partial sums merged. The ridge
//! parameter is applied at solve time, which lets one accumulation serve any
//! number of `gamma` values.

use std::time::Instant;

use log::warn;

use crate::error::{shape_err, validation_err, AcnnlError, Result};
use crate::linalg::{pinv_solve, Cholesky};
use crate::tensor::{gemm, syrk_acc, Mat, View};

#[derive(Clone, Debug, PartialEq)]
pub struct GramAccumulator {
    dim_in: usize,
    dim_out: usize,
    gram: Mat,
    cross: Mat,
    samples_seen: usize,
    rows_seen: usize,
}

/// How a layer solve was carried out.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolveMethod {
    Cholesky,
    Pseudoinverse,
}

#[derive(Clone, Debug)]
pub struct SolveReport {
    pub method: SolveMethod,
    /// Smallest and largest Cholesky pivots; `None` on the pseudoinverse path.
    pub pivot_range: Option<(f64, f64)>,
    pub seconds: f64,
}

impl SolveReport {
    /// `(max pivot / min pivot)²`, a lower bound on the 2-norm condition
    /// number of the regularized Gram matrix.
    pub fn condition_estimate(&self) -> Option<f64> {
        self.pivot_range.map(|(lo, hi)| (hi / lo).powi(2))
    }
}

impl GramAccumulator {
    pub fn new(dim_in: usize, dim_out: usize) -> Self {
        Self {
            dim_in,
            dim_out,
            gram: Mat::zeros(dim_in, dim_in),
            cross: Mat::zeros(dim_in, dim_out),
            samples_seen: 0,
            rows_seen: 0,
        }
    }

    pub fn dim_in(&self) -> usize {
        self.dim_in
    }
    pub fn dim_out(&self) -> usize {
        self.dim_out
    }
    pub fn gram(&self) -> &Mat {
        &self.gram
    }
    pub fn cross(&self) -> &Mat {
        &self.cross
    }
    pub fn samples_seen(&self) -> usize {
        self.samples_seen
    }
    /// Total linear constraints folded in so far.
    pub fn rows_seen(&self) -> usize {
        self.rows_seen
    }

    /// Folds in one sample: `gram += xᵀx`, `cross += xᵀz`.
    pub fn accumulate(&mut self, x: &Mat, z: &Mat) -> Result<()> {
        if x.cols() != self.dim_in || z.cols() != self.dim_out || x.rows() != z.rows() {
            return shape_err(format!(
                "accumulate of x {:?}, z {:?} into a {}->{} accumulator",
                x.shape(),
                z.shape(),
                self.dim_in,
                self.dim_out
            ));
        }
        self.accumulate_rows(x.as_slice(), z.as_slice(), x.rows(), 1);
        Ok(())
    }

    /// Folds in a stacked block of `rows` constraint rows belonging to
    /// `samples` samples. Buffers are row-major `rows×dim_in` and
    /// `rows×dim_out`.
    pub(crate) fn accumulate_rows(&mut self, x: &[f64], z: &[f64], rows: usize, samples: usize) {
        debug_assert_eq!(x.len(), rows * self.dim_in);
        debug_assert_eq!(z.len(), rows * self.dim_out);
        syrk_acc(x, rows, self.dim_in, self.gram.as_mut_slice());
        let xv = View::row_major(x, rows, self.dim_in, self.dim_in).t();
        let zv = View::row_major(z, rows, self.dim_out, self.dim_out);
        gemm(1.0, xv, zv, 1.0, self.cross.as_mut_slice(), self.dim_out);
        self.samples_seen += samples;
        self.rows_seen += rows;
    }

    /// Adds another accumulator's sums into this one.
    pub fn merge_from(&mut self, other: &GramAccumulator) -> Result<()> {
        if (self.dim_in, self.dim_out) != (other.dim_in, other.dim_out) {
            return shape_err(format!(
                "merge of {}->{} with {}->{}",
                self.dim_in, self.dim_out, other.dim_in, other.dim_out
            ));
        }
        for (a, b) in self
            .gram
            .as_mut_slice()
            .iter_mut()
            .zip(other.gram.as_slice())
        {
            *a += b;
        }
        for (a, b) in self
            .cross
            .as_mut_slice()
            .iter_mut()
            .zip(other.cross.as_slice())
        {
            *a += b;
        }
        self.samples_seen += other.samples_seen;
        self.rows_seen += other.rows_seen;
        Ok(())
    }

    pub fn merge(a: &GramAccumulator, b: &GramAccumulator) -> Result<GramAccumulator> {
        let mut out = a.clone();
        out.merge_from(b)?;
        Ok(out)
    }

    /// Regularized least-squares weights `(Σ XᵀX + γI)⁻¹ Σ XᵀZ`.
    pub fn solve_layer(&self, gamma: f64) -> Result<Mat> {
        self.solve_with_report(gamma).map(|(w, _)| w)
    }

    pub fn solve_with_report(&self, gamma: f64) -> Result<(Mat, SolveReport)> {
        if gamma < 0.0 || !gamma.is_finite() {
            return validation_err(format!("gamma must be finite and >= 0, got {gamma}"));
        }
        if self.samples_seen == 0 {
            return validation_err("solve_layer called before any sample was accumulated");
        }
        let start = Instant::now();
        if gamma == 0.0 {
            let w = pinv_solve(&self.gram, &self.cross)?;
            return Ok((
                w,
                SolveReport {
                    method: SolveMethod::Pseudoinverse,
                    pivot_range: None,
                    seconds: start.elapsed().as_secs_f64(),
                },
            ));
        }
        let mut system = self.gram.clone();
        system.add_diagonal(gamma);
        match Cholesky::factor(&system) {
            Ok(chol) => {
                let w = chol.solve(&self.cross)?;
                Ok((
                    w,
                    SolveReport {
                        method: SolveMethod::Cholesky,
                        pivot_range: Some(chol.pivot_range()),
                        seconds: start.elapsed().as_secs_f64(),
                    },
                ))
            }
            Err(AcnnlError::Singular { index, pivot }) => {
                warn!(
                    "cholesky failed at pivot {index} ({pivot:e}) with gamma {gamma}; \
                     falling back to pseudoinverse"
                );
                let w = pinv_solve(&system, &self.cross)?;
                Ok((
                    w,
                    SolveReport {
                        method: SolveMethod::Pseudoinverse,
                        pivot_range: None,
                        seconds: start.elapsed().as_secs_f64(),
                    },
                ))
            }
            Err(e) => Err(e),
        }
    }
}

/// One-shot ridge regression `(xᵀx + γI)⁻¹ xᵀz`.
pub fn ridge_solve(x: &Mat, z: &Mat, gamma: f64) -> Result<Mat> {
    if x.rows() != z.rows() {
        return shape_err(format!(
            "ridge_solve row mismatch: {} vs {}",
            x.rows(),
            z.rows()
        ));
    }
    let mut acc = GramAccumulator::new(x.cols(), z.cols());
    acc.accumulate(x, z)?;
    acc.solve_layer(gamma)
}

/// `Σ‖zₙ − xₙ·w‖²_F + γ‖w‖²_F` over `(x, z)` pairs.
pub fn layer_objective(samples: &[(Mat, Mat)], w: &Mat, gamma: f64) -> Result<f64> {
    let mut total = 0.0;
    for (x, z) in samples {
        let r = crate::tensor::matmul(x, w)?.sub(z)?;
        total += r.frobenius_norm().powi(2);
    }
    Ok(total + gamma * w.frobenius_norm().powi(2))
}

/// Frobenius norm of `(gram + γI)·w − cross`, the stationarity residual.
pub fn normal_equation_residual(acc: &GramAccumulator, w: &Mat, gamma: f64) -> Result<f64> {
    let mut system = acc.gram.clone();
    system.add_diagonal(gamma);
    Ok(crate::tensor::matmul(&system, w)?
        .sub(&acc.cross)?
        .frobenius_norm())
}
