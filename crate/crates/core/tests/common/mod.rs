#![allow(dead_code)]

use acnnl::{Mat, Tensor3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_mat(r: &mut impl Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_fn(rows, cols, |_, _| r.random_range(-1.0..1.0))
}

pub fn random_tensor(r: &mut impl Rng, c: usize, w: usize, h: usize) -> Tensor3 {
    Tensor3::new(
        c,
        w,
        h,
        (0..c * w * h).map(|_| r.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// `aᵀb` by triple loop.
pub fn naive_tn(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.rows(), b.rows());
    Mat::from_fn(a.cols(), b.cols(), |i, j| {
        (0..a.rows()).map(|n| a.get(n, i) * b.get(n, j)).sum()
    })
}

pub fn naive_mul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols(), b.rows());
    Mat::from_fn(a.rows(), b.cols(), |i, j| {
        (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum()
    })
}

/// Solves `a·x = b` by Gaussian elimination with partial pivoting.
pub fn gauss_solve(a: &Mat, b: &Mat) -> Mat {
    let n = a.rows();
    let m = b.cols();
    let mut aug: Vec<Vec<f64>> = (0..n)
        .map(|i| a.row(i).iter().chain(b.row(i)).copied().collect())
        .collect();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&x, &y| aug[x][col].abs().total_cmp(&aug[y][col].abs()))
            .unwrap();
        aug.swap(col, piv);
        let pivot_row = aug[col].clone();
        let p = pivot_row[col];
        assert!(p.abs() > 1e-300, "singular system in oracle");
        for (r, row) in aug.iter_mut().enumerate() {
            let f = row[col] / p;
            if r != col && f != 0.0 {
                for (v, q) in row[col..].iter_mut().zip(&pivot_row[col..]) {
                    *v -= f * q;
                }
            }
        }
    }
    Mat::from_fn(n, m, |i, j| aug[i][n + j] / aug[i][i])
}

/// `(xᵀx + γI)⁻¹ xᵀz` through the naive routines above.
pub fn oracle_ridge(x: &Mat, z: &Mat, gamma: f64) -> Mat {
    let mut g = naive_tn(x, x);
    g.add_diagonal(gamma);
    gauss_solve(&g, &naive_tn(x, z))
}

pub fn rel_diff(a: &Mat, b: &Mat) -> f64 {
    a.max_abs_diff(b) / (1.0 + b.max_abs())
}
