//! Convolution as a matrix product.
//!
//! Stride is fixed at one and there is no padding. Patch rows are ordered
//! with the horizontal patch index `w` varying fastest, then `h`; inside a row
//! the channels are concatenated, each channel's K×K window flattened
//! row-major. Filter columns use the same within-patch order, which is also
//! the [`Tensor3`] memory order of a C×K×K filter.

use crate::error::{shape_err, Result};
use crate::tensor::{Mat, Tensor3};

/// Geometry of one stride-1, unpadded convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    in_channels: usize,
    in_width: usize,
    in_height: usize,
    kernel: usize,
}

impl ConvGeometry {
    pub fn new(
        in_channels: usize,
        in_width: usize,
        in_height: usize,
        kernel: usize,
    ) -> Result<Self> {
        if in_channels == 0 || in_width == 0 || in_height == 0 || kernel == 0 {
            return shape_err("convolution dims must be positive");
        }
        if kernel > in_width.min(in_height) {
            return shape_err(format!(
                "kernel {kernel} larger than input {in_width}x{in_height}"
            ));
        }
        Ok(Self {
            in_channels,
            in_width,
            in_height,
            kernel,
        })
    }

    pub fn for_input(x: &Tensor3, kernel: usize) -> Result<Self> {
        Self::new(x.channels(), x.width(), x.height(), kernel)
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }
    pub fn in_width(&self) -> usize {
        self.in_width
    }
    pub fn in_height(&self) -> usize {
        self.in_height
    }
    pub fn kernel(&self) -> usize {
        self.kernel
    }
    pub fn out_width(&self) -> usize {
        self.in_width - self.kernel + 1
    }
    pub fn out_height(&self) -> usize {
        self.in_height - self.kernel + 1
    }

    /// Output locations per sample, `(W−K+1)(H−K+1)`.
    pub fn positions(&self) -> usize {
        self.out_width() * self.out_height()
    }

    /// Columns of the patch matrix, `C·K²`.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn check_input(&self, x: &Tensor3) -> Result<()> {
        if x.dims() != (self.in_channels, self.in_width, self.in_height) {
            return shape_err(format!(
                "input {:?} does not match geometry {}x{}x{}",
                x.dims(),
                self.in_channels,
                self.in_width,
                self.in_height
            ));
        }
        Ok(())
    }
}

/// Packs J filters (each C×K×K) into the columns of a `(C·K²)×J` matrix.
pub fn flatten_weights(filters: &[Tensor3]) -> Result<Mat> {
    let Some(first) = filters.first() else {
        return shape_err("flatten_weights needs at least one filter");
    };
    let dims = first.dims();
    if dims.1 != dims.2 {
        return shape_err(format!("filters must be square, got {dims:?}"));
    }
    if let Some(bad) = filters.iter().find(|f| f.dims() != dims) {
        return shape_err(format!("filter {:?} differs from {dims:?}", bad.dims()));
    }
    let rows = first.len();
    let j = filters.len();
    Ok(Mat::from_fn(rows, j, |r, c| filters[c].as_slice()[r]))
}

/// Inverse of [`flatten_weights`].
pub fn unflatten_weights(w: &Mat, channels: usize, kernel: usize) -> Result<Vec<Tensor3>> {
    if channels * kernel * kernel == 0 || w.rows() != channels * kernel * kernel {
        return shape_err(format!(
            "{} rows cannot be split as {channels}x{kernel}x{kernel}",
            w.rows()
        ));
    }
    (0..w.cols())
        .map(|j| {
            let col = (0..w.rows()).map(|r| w.get(r, j)).collect();
            Tensor3::new(channels, kernel, kernel, col)
        })
        .collect()
}

/// Writes the patch rows of `x` into `out`, `row_len` values per row. When
/// `row_len` exceeds `C·K²` the trailing slot of every row is set to 1.0
/// (constant feature).
pub(crate) fn im2col_into(x: &Tensor3, geom: &ConvGeometry, row_len: usize, out: &mut [f64]) {
    let (c_n, _, h_n) = x.dims();
    let k = geom.kernel;
    let (ow, oh) = (geom.out_width(), geom.out_height());
    let patch = geom.patch_len();
    debug_assert!(row_len == patch || row_len == patch + 1);
    debug_assert_eq!(out.len(), geom.positions() * row_len);
    let src = x.as_slice();
    for h in 0..oh {
        for w in 0..ow {
            let row = &mut out[(h * ow + w) * row_len..(h * ow + w + 1) * row_len];
            let mut idx = 0;
            for c in 0..c_n {
                for a in 0..k {
                    let start = (c * geom.in_width + w + a) * h_n + h;
                    row[idx..idx + k].copy_from_slice(&src[start..start + k]);
                    idx += k;
                }
            }
            if row_len > patch {
                row[patch] = 1.0;
            }
        }
    }
}

/// Patch matrix of `x`: `positions × C·k²`.
pub fn im2col(x: &Tensor3, k: usize) -> Result<Mat> {
    let geom = ConvGeometry::for_input(x, k)?;
    let mut out = Mat::zeros(geom.positions(), geom.patch_len());
    im2col_into(x, &geom, geom.patch_len(), out.as_mut_slice());
    Ok(out)
}

/// Scatters a `positions × J` output-layout matrix back to a J-channel tensor.
pub fn col2im(m: &Mat, geom: &ConvGeometry) -> Result<Tensor3> {
    if m.rows() != geom.positions() || m.cols() == 0 {
        return shape_err(format!(
            "col2im of {:?} with {} positions",
            m.shape(),
            geom.positions()
        ));
    }
    let mut out = Tensor3::zeros(m.cols(), geom.out_width(), geom.out_height());
    scatter_positions(m.as_slice(), m.cols(), geom, out.as_mut_slice());
    Ok(out)
}

/// `src` is positions×J row-major; `dst` is a J×W'×H' tensor buffer.
pub(crate) fn scatter_positions(src: &[f64], j_n: usize, geom: &ConvGeometry, dst: &mut [f64]) {
    let (ow, oh) = (geom.out_width(), geom.out_height());
    for h in 0..oh {
        for w in 0..ow {
            let row = &src[(h * ow + w) * j_n..(h * ow + w + 1) * j_n];
            for (j, &v) in row.iter().enumerate() {
                dst[(j * ow + w) * oh + h] = v;
            }
        }
    }
}

/// Direct sliding-window convolution. Used to check the GEMM path.
pub fn loop_conv(x: &Tensor3, filters: &[Tensor3]) -> Result<Tensor3> {
    let Some(first) = filters.first() else {
        return shape_err("loop_conv needs at least one filter");
    };
    let (fc, k, k2) = first.dims();
    if k != k2 || fc != x.channels() || filters.iter().any(|f| f.dims() != first.dims()) {
        return shape_err(format!(
            "filters {:?} incompatible with input {:?}",
            first.dims(),
            x.dims()
        ));
    }
    let geom = ConvGeometry::for_input(x, k)?;
    let mut out = Tensor3::zeros(filters.len(), geom.out_width(), geom.out_height());
    for (j, f) in filters.iter().enumerate() {
        for w in 0..geom.out_width() {
            for h in 0..geom.out_height() {
                let mut s = 0.0;
                for c in 0..x.channels() {
                    for a in 0..k {
                        for b in 0..k {
                            s += x.get(c, w + a, h + b) * f.get(c, a, b);
                        }
                    }
                }
                out.set(j, w, h, s);
            }
        }
    }
    Ok(out)
}

/// GEMM convolution: `col2im(im2col(x)·flatten_weights(filters))`.
pub fn conv_gemm(x: &Tensor3, weights: &Mat, kernel: usize) -> Result<Tensor3> {
    let geom = ConvGeometry::for_input(x, kernel)?;
    geom.check_input(x)?;
    let prod = crate::tensor::matmul(&im2col(x, kernel)?, weights)?;
    col2im(&prod, &geom)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_filter() {
        let f = Tensor3::new(1, 1, 1, vec![7.0]).unwrap();
        assert_eq!(flatten_weights(&[f]).unwrap(), Mat::from_rows(&[[7.0]]));
    }

    #[test]
    fn two_filters_flatten_to_columns() {
        let a = Tensor3::from_nested(&[[[1.0, 2.0], [3.0, 4.0]]]);
        let b = Tensor3::from_nested(&[[[5.0, 6.0], [7.0, 8.0]]]);
        let w = flatten_weights(&[a.clone(), b.clone()]).unwrap();
        let expect = Mat::from_rows(&[[1.0, 5.0], [2.0, 6.0], [3.0, 7.0], [4.0, 8.0]]);
        assert_eq!(w, expect);
        assert_eq!(unflatten_weights(&w, 1, 2).unwrap(), vec![a, b]);
    }

    #[test]
    fn heterogeneous_filters_rejected() {
        let a = Tensor3::zeros(1, 2, 2);
        let b = Tensor3::zeros(2, 2, 2);
        assert!(flatten_weights(&[a, b]).is_err());
        assert!(flatten_weights(&[]).is_err());
    }

    #[test]
    fn unflatten_single_column() {
        let w = Mat::from_rows(&[[1.0], [2.0], [3.0], [4.0]]);
        let f = unflatten_weights(&w, 1, 2).unwrap();
        assert_eq!(f, vec![Tensor3::from_nested(&[[[1.0, 2.0], [3.0, 4.0]]])]);
        assert!(unflatten_weights(&w, 1, 3).is_err());
        assert!(unflatten_weights(&w, 2, 2).is_err());
    }

    #[test]
    fn single_patch() {
        let x = Tensor3::from_nested(&[[[1.0, 2.0], [3.0, 4.0]]]);
        assert_eq!(
            im2col(&x, 2).unwrap(),
            Mat::from_rows(&[[1.0, 2.0, 3.0, 4.0]])
        );
    }

    #[test]
    fn three_by_three_with_corner_kernel() {
        let x = Tensor3::from_nested(&[[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [7.0, 8.0, 9.0]]]);
        let cols = im2col(&x, 2).unwrap();
        assert_eq!(cols.shape(), (4, 4));
        assert_eq!(cols.row(1), &[4.0, 5.0, 7.0, 8.0]);
        let kernel = Tensor3::from_nested(&[[[1.0, 0.0], [0.0, 1.0]]]);
        let w = flatten_weights(std::slice::from_ref(&kernel)).unwrap();
        let prod = crate::tensor::matmul(&cols, &w).unwrap();
        assert_eq!(prod.as_slice(), &[6.0, 12.0, 8.0, 14.0]);

        let geom = ConvGeometry::new(1, 3, 3, 2).unwrap();
        let back = col2im(&prod, &geom).unwrap();
        assert_eq!(back, Tensor3::from_nested(&[[[6.0, 8.0], [12.0, 14.0]]]));
        assert_eq!(back, loop_conv(&x, &[kernel]).unwrap());
    }

    #[test]
    fn col2im_scalar() {
        let geom = ConvGeometry::new(3, 2, 2, 2).unwrap();
        let t = col2im(&Mat::from_rows(&[[5.0]]), &geom).unwrap();
        assert_eq!(t.dims(), (1, 1, 1));
        assert_eq!(t.get(0, 0, 0), 5.0);
        assert!(col2im(&Mat::zeros(2, 1), &geom).is_err());
    }

    #[test]
    fn kernel_larger_than_input() {
        let x = Tensor3::zeros(1, 2, 3);
        assert!(im2col(&x, 3).is_err());
    }

    #[test]
    fn loop_conv_counts_ones() {
        let x = Tensor3::new(1, 3, 3, vec![1.0; 9]).unwrap();
        let f = Tensor3::new(1, 2, 2, vec![1.0; 4]).unwrap();
        let out = loop_conv(&x, &[f]).unwrap();
        assert_eq!(out.as_slice(), &[4.0; 4]);
    }

    #[test]
    fn loop_conv_impulse_response() {
        let mut x = Tensor3::zeros(2, 4, 4);
        x.set(0, 0, 0, 1.0);
        let f = Tensor3::new(2, 3, 3, (0..18).map(|v| v as f64 + 0.5).collect()).unwrap();
        let out = loop_conv(&x, std::slice::from_ref(&f)).unwrap();
        assert_eq!(out.get(0, 0, 0), f.get(0, 0, 0));
    }

    #[test]
    fn bias_column_is_appended() {
        let x = Tensor3::from_nested(&[[[1.0, 2.0], [3.0, 4.0]]]);
        let geom = ConvGeometry::for_input(&x, 2).unwrap();
        let mut out = vec![0.0; 5];
        im2col_into(&x, &geom, 5, &mut out);
        assert_eq!(out, vec![1.0, 2.0, 3.0, 4.0, 1.0]);
    }
}
