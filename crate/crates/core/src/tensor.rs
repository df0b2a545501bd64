//! Dense row-major matrices and channel-major 3-D tensors.
//!
//! Everything above this module talks in terms of [`Mat`] and [`Tensor3`].
//! Products go through `matrixmultiply`'s sequential kernels, so results are
//! independent of thread count.

use crate::error::{shape_err, Result};

/// Row-major dense matrix of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return shape_err(format!(
                "buffer of length {} cannot hold a {rows}x{cols} matrix",
                data.len()
            ));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from row slices. Panics on ragged input; meant for
    /// literals in tests and small fixtures.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
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
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
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

    pub fn transpose(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn scaled(&self, s: f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn add(&self, other: &Mat) -> Result<Mat> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Mat) -> Result<Mat> {
        self.zip_with(other, |a, b| a - b)
    }

    fn zip_with(&self, other: &Mat, f: impl Fn(f64, f64) -> f64) -> Result<Mat> {
        if self.shape() != other.shape() {
            return shape_err(format!(
                "element-wise op on {:?} and {:?}",
                self.shape(),
                other.shape()
            ));
        }
        Ok(Mat {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Adds `v` to every diagonal entry of a square matrix.
    pub fn add_diagonal(&mut self, v: f64) {
        let n = self.rows.min(self.cols);
        for i in 0..n {
            self.data[i * self.cols + i] += v;
        }
    }

    /// Largest element-wise absolute difference; `inf` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        if self.shape() != other.shape() {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Vertically stacks matrices sharing a column count.
    pub fn vstack(parts: &[Mat]) -> Result<Mat> {
        let cols = parts.first().map_or(0, Mat::cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return shape_err(format!("vstack of {} and {} columns", cols, p.cols));
            }
            rows += p.rows;
            data.extend_from_slice(&p.data);
        }
        Ok(Mat { rows, cols, data })
    }
}

/// A C×W×H feature map. Element `(c, w, h)` lives at `c·W·H + w·H + h`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3 {
    channels: usize,
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn new(channels: usize, width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || width == 0 || height == 0 {
            return shape_err(format!(
                "tensor dims must be positive, got {channels}x{width}x{height}"
            ));
        }
        if data.len() != channels * width * height {
            return shape_err(format!(
                "buffer of length {} cannot hold a {channels}x{width}x{height} tensor",
                data.len()
            ));
        }
        Ok(Self {
            channels,
            width,
            height,
            data,
        })
    }

    pub fn zeros(channels: usize, width: usize, height: usize) -> Self {
        assert!(
            channels > 0 && width > 0 && height > 0,
            "tensor dims must be positive"
        );
        Self {
            channels,
            width,
            height,
            data: vec![0.0; channels * width * height],
        }
    }

    /// Builds a tensor from `[c][w][h]` nested slices. Test convenience.
    pub fn from_nested<C: AsRef<[W]>, W: AsRef<[f64]>>(nested: &[C]) -> Self {
        let channels = nested.len();
        let width = nested[0].as_ref().len();
        let height = nested[0].as_ref()[0].as_ref().len();
        let mut data = Vec::with_capacity(channels * width * height);
        for c in nested {
            assert_eq!(c.as_ref().len(), width, "ragged tensor");
            for w in c.as_ref() {
                assert_eq!(w.as_ref().len(), height, "ragged tensor");
                data.extend_from_slice(w.as_ref());
            }
        }
        Self::new(channels, width, height, data).expect("nested literal")
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.width, self.height)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, c: usize, w: usize, h: usize) -> f64 {
        self.data[(c * self.width + w) * self.height + h]
    }

    #[inline]
    pub fn set(&mut self, c: usize, w: usize, h: usize, v: f64) {
        self.data[(c * self.width + w) * self.height + h] = v;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.width * self.height;
        &self.data[c * plane..(c + 1) * plane]
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
}

/// Borrowed strided matrix view handed to the GEMM kernel.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: isize,
    pub col_stride: isize,
}

impl<'a> View<'a> {
    pub fn of(m: &'a Mat) -> Self {
        Self::row_major(&m.data, m.rows, m.cols, m.cols)
    }

    pub fn transposed(m: &'a Mat) -> Self {
        Self::of(m).t()
    }

    /// Row-major `rows×cols` window with leading dimension `ld`.
    pub fn row_major(data: &'a [f64], rows: usize, cols: usize, ld: usize) -> Self {
        if rows > 0 && cols > 0 {
            assert!((rows - 1) * ld + cols <= data.len(), "view out of bounds");
        }
        Self {
            data,
            rows,
            cols,
            row_stride: ld as isize,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    /// Sub-window starting at `(r0, c0)`.
    pub fn window(self, r0: usize, c0: usize, rows: usize, cols: usize) -> Self {
        assert!(
            r0 + rows <= self.rows && c0 + cols <= self.cols,
            "window out of bounds"
        );
        let offset = r0 as isize * self.row_stride + c0 as isize * self.col_stride;
        Self {
            data: &self.data[offset as usize..],
            rows,
            cols,
            row_stride: self.row_stride,
            col_stride: self.col_stride,
        }
    }
}

/// `c = alpha·a·b + beta·c` where `c` is a row-major window with leading
/// dimension `ldc`.
pub(crate) fn gemm(alpha: f64, a: View<'_>, b: View<'_>, beta: f64, c: &mut [f64], ldc: usize) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    assert!((m - 1) * ldc + n <= c.len(), "gemm output out of bounds");
    if k == 0 {
        for i in 0..m {
            for v in &mut c[i * ldc..i * ldc + n] {
                *v *= beta;
            }
        }
        return;
    }
    // SAFETY: every view was bounds-checked on construction (including the
    // stride walk for the extreme corner), and `c` was checked above for the
    // m×n window with leading dimension `ldc`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

/// Standard matrix product.
pub fn matmul(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.cols != b.rows {
        return shape_err(format!(
            "matmul of {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        ));
    }
    let mut out = Mat::zeros(a.rows, b.cols);
    gemm(1.0, View::of(a), View::of(b), 0.0, &mut out.data, b.cols);
    Ok(out)
}

/// `aᵀ·b`, without materializing the transpose.
pub fn matmul_tn(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.rows != b.rows {
        return shape_err(format!(
            "transposed matmul of {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        ));
    }
    let mut out = Mat::zeros(a.cols, b.cols);
    gemm(
        1.0,
        View::transposed(a),
        View::of(b),
        0.0,
        &mut out.data,
        b.cols,
    );
    Ok(out)
}

const SYRK_BLOCK: usize = 192;

/// `g += xᵀx` for a row-major `rows×d` buffer, touching only the upper block
/// triangle and mirroring afterwards so `g` stays exactly symmetric.
pub(crate) fn syrk_acc(x: &[f64], rows: usize, d: usize, g: &mut [f64]) {
    assert_eq!(g.len(), d * d);
    if rows == 0 || d == 0 {
        return;
    }
    let xv = View::row_major(x, rows, d, d);
    for j0 in (0..d).step_by(SYRK_BLOCK) {
        let jn = SYRK_BLOCK.min(d - j0);
        // Rows 0..j0+jn of g restricted to columns j0..j0+jn: the block column
        // down to and including the diagonal block.
        let lhs = xv.window(0, 0, rows, j0 + jn).t();
        let rhs = xv.window(0, j0, rows, jn);
        gemm(1.0, lhs, rhs, 1.0, &mut g[j0..], d);
    }
    for i in 0..d {
        for j in 0..i {
            g[i * d + j] = g[j * d + i];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Mat, b: &Mat) -> Mat {
        Mat::from_fn(a.rows(), b.cols(), |i, j| {
            (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum()
        })
    }

    fn lcg(seed: u64) -> impl FnMut() -> f64 {
        let mut s = seed;
        move || {
            s = s
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        }
    }

    #[test]
    fn identity_product() {
        let m = Mat::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(matmul(&Mat::identity(2), &m).unwrap(), m);
    }

    #[test]
    fn row_times_column() {
        let a = Mat::from_rows(&[[1.0, 2.0]]);
        let b = Mat::from_rows(&[[3.0], [4.0]]);
        assert_eq!(matmul(&a, &b).unwrap(), Mat::from_rows(&[[11.0]]));
    }

    #[test]
    fn random_product_matches_triple_loop() {
        let mut r = lcg(7);
        let a = Mat::from_fn(5, 7, |_, _| r());
        let b = Mat::from_fn(7, 3, |_, _| r());
        assert!(matmul(&a, &b).unwrap().max_abs_diff(&naive(&a, &b)) <= 1e-12);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        assert!(matmul(&Mat::zeros(2, 3), &Mat::zeros(2, 3)).is_err());
        assert!(matmul_tn(&Mat::zeros(2, 3), &Mat::zeros(3, 3)).is_err());
    }

    #[test]
    fn transposed_product() {
        let mut r = lcg(3);
        let a = Mat::from_fn(9, 4, |_, _| r());
        let b = Mat::from_fn(9, 6, |_, _| r());
        let expect = naive(&a.transpose(), &b);
        assert!(matmul_tn(&a, &b).unwrap().max_abs_diff(&expect) <= 1e-12);
    }

    #[test]
    fn syrk_matches_naive_across_block_edges() {
        let mut r = lcg(11);
        for &(rows, d) in &[(3usize, 1usize), (17, 5), (40, 200), (11, 385)] {
            let x = Mat::from_fn(rows, d, |_, _| r());
            let mut g = vec![0.5; d * d];
            syrk_acc(x.as_slice(), rows, d, &mut g);
            let expect = naive(&x.transpose(), &x);
            for i in 0..d {
                for j in 0..d {
                    assert!((g[i * d + j] - 0.5 - expect.get(i, j)).abs() < 1e-11);
                    assert_eq!(g[i * d + j], g[j * d + i]);
                }
            }
        }
    }

    #[test]
    fn tensor_layout_is_channel_major() {
        let t = Tensor3::from_nested(&[[[1.0, 2.0], [3.0, 4.0]], [[5.0, 6.0], [7.0, 8.0]]]);
        assert_eq!(t.dims(), (2, 2, 2));
        assert_eq!(t.get(1, 0, 1), 6.0);
        assert_eq!(t.as_slice()[4 + 2 + 1], t.get(1, 1, 1));
        assert!(Tensor3::new(1, 2, 2, vec![0.0; 3]).is_err());
        assert!(Tensor3::new(0, 2, 2, vec![]).is_err());
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(Mat::from_vec(2, 2, vec![1.0; 3]).is_err());
        assert_eq!(Mat::from_vec(0, 4, vec![]).unwrap().shape(), (0, 4));
    }
}
