//! Random Gaussian label encoding.
//!
//! A hidden conv layer has no labels of its own. Each layer gets a K×D matrix
//! `q` with i.i.d. standard-normal entries, and a one-hot label row `y`
//! becomes the pseudo-target `y·q`, i.e. the class's row of `q`, which is
//! then laid out as a positions×J regression target.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{shape_err, validation_err, Result};
use crate::tensor::Mat;

/// Identifies the generator behind every `q`; stored in model files.
pub const PRNG_ID: &str = "chacha8/rand_distr-StandardNormal/v1";

#[derive(Clone, Debug)]
pub struct LabelEncoder {
    classes: usize,
    channels: usize,
    positions: usize,
    seed: u64,
    q: Mat,
}

/// Builds an encoder whose targets have `j·positions` entries.
pub fn make_encoder(classes: usize, j: usize, positions: usize, seed: u64) -> Result<LabelEncoder> {
    make_scaled_encoder(classes, j, positions, seed, 1.0)
}

pub fn make_scaled_encoder(
    classes: usize,
    j: usize,
    positions: usize,
    seed: u64,
    scale: f64,
) -> Result<LabelEncoder> {
    if classes == 0 || j == 0 || positions == 0 {
        return shape_err(format!(
            "encoder dims must be positive (classes {classes}, j {j}, positions {positions})"
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target_dim = j * positions;
    let q = Mat::from_fn(classes, target_dim, |_, _| {
        let v: f64 = StandardNormal.sample(&mut rng);
        v * scale
    });
    Ok(LabelEncoder {
        classes,
        channels: j,
        positions,
        seed,
        q,
    })
}

impl LabelEncoder {
    pub fn classes(&self) -> usize {
        self.classes
    }
    pub fn target_dim(&self) -> usize {
        self.q.cols()
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }
    pub fn q(&self) -> &Mat {
        &self.q
    }

    /// The positions×J regression target for one class.
    pub fn class_target(&self, class: usize) -> Result<Mat> {
        if class >= self.classes {
            return validation_err(format!("class {class} out of range {}", self.classes));
        }
        reshape_target(self.q.row(class), self.channels, self.positions)
    }
}

/// `Z̄ = Y·q` for one-hot `y`, computed by row selection.
pub fn encode(y: &Mat, enc: &LabelEncoder) -> Result<Mat> {
    if y.cols() != enc.classes {
        return shape_err(format!(
            "label matrix has {} columns, encoder expects {}",
            y.cols(),
            enc.classes
        ));
    }
    let d = enc.target_dim();
    let mut out = Mat::zeros(y.rows(), d);
    for n in 0..y.rows() {
        let class = one_hot_index(y.row(n))
            .ok_or_else(|| crate::AcnnlError::Validation(format!("row {n} is not one-hot")))?;
        out.row_mut(n).copy_from_slice(enc.q.row(class));
    }
    Ok(out)
}

fn one_hot_index(row: &[f64]) -> Option<usize> {
    let mut hit = None;
    for (i, &v) in row.iter().enumerate() {
        if v == 1.0 {
            if hit.is_some() {
                return None;
            }
            hit = Some(i);
        } else if v != 0.0 {
            return None;
        }
    }
    hit
}

/// Lays out a length `j·positions` target row as a positions×J matrix. The
/// row is read as J consecutive channel blocks.
pub fn reshape_target(row: &[f64], j: usize, positions: usize) -> Result<Mat> {
    if row.len() != j * positions {
        return shape_err(format!(
            "target row of length {} is not {j}x{positions}",
            row.len()
        ));
    }
    Ok(Mat::from_fn(positions, j, |p, c| row[c * positions + p]))
}

/// Inverse of [`reshape_target`].
pub fn flatten_target(m: &Mat) -> Vec<f64> {
    let (positions, j) = m.shape();
    let mut out = vec![0.0; positions * j];
    for p in 0..positions {
        for c in 0..j {
            out[c * positions + p] = m.get(p, c);
        }
    }
    out
}

/// Per-layer seed from a master seed (SplitMix64 finalizer over
/// `master + (layer+1)·φ`).
pub fn derive_layer_seed(master: u64, layer: usize) -> u64 {
    let mut z = master.wrapping_add((layer as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
