//! Architecture descriptions, inference, and the CNN-5(C) family.

use crate::error::{shape_err, validation_err, Result};
use crate::im2col::{im2col_into, scatter_positions, ConvGeometry};
use crate::tensor::{gemm, Mat, Tensor3, View};

/// Negative-side slope of the hidden activations.
pub const DEFAULT_SLOPE: f64 = 0.1;

/// Operating point for the ridge parameter.
pub const DEFAULT_GAMMA: f64 = 100.0;

#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Conv {
        kernel: usize,
        out_channels: usize,
        slope: f64,
        /// Average-pool window (and stride) applied after the activation.
        pool: Option<usize>,
    },
    Dense {
        out_dim: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    /// `(C, W, H)` of the input.
    pub input: (usize, usize, usize),
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
    pub gamma: f64,
    pub encoder_seed: u64,
    pub encoder_scale: f64,
    /// Append a constant 1 to every patch row and to the dense features.
    pub bias: bool,
}

/// A layer with its geometry resolved against the input size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LayerPlan {
    Conv {
        geom: ConvGeometry,
        out_channels: usize,
        slope: f64,
        pool: Option<usize>,
        /// Output dims after activation and pooling.
        output: (usize, usize, usize),
    },
    Dense {
        in_dim: usize,
        out_dim: usize,
    },
}

impl LayerPlan {
    /// Rows and columns of this layer's weight matrix.
    pub fn weight_shape(&self, bias: bool) -> (usize, usize) {
        let b = usize::from(bias);
        match *self {
            LayerPlan::Conv {
                geom, out_channels, ..
            } => (geom.patch_len() + b, out_channels),
            LayerPlan::Dense { in_dim, out_dim } => (in_dim + b, out_dim),
        }
    }

    /// Linear constraints each sample contributes to this layer's solve.
    pub fn rows_per_sample(&self) -> usize {
        match self {
            LayerPlan::Conv { geom, .. } => geom.positions(),
            LayerPlan::Dense { .. } => 1,
        }
    }
}

impl NetworkSpec {
    /// Resolves every layer's geometry and checks the structural rules: a
    /// single dense layer in last position, positive dims throughout, pool
    /// windows that divide the feature map, and hidden targets at least as
    /// wide as the label space.
    pub fn plan(&self) -> Result<Vec<LayerPlan>> {
        if self.gamma < 0.0 || !self.gamma.is_finite() {
            return validation_err(format!("gamma must be finite and >= 0, got {}", self.gamma));
        }
        if self.classes == 0 {
            return validation_err("classes must be positive");
        }
        let dense_count = self
            .layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::Dense { .. }))
            .count();
        if dense_count != 1 || !matches!(self.layers.last(), Some(LayerSpec::Dense { .. })) {
            return validation_err("network must end in exactly one dense layer");
        }
        let (mut c, mut w, mut h) = self.input;
        if c == 0 || w == 0 || h == 0 {
            return shape_err(format!("input dims must be positive, got {:?}", self.input));
        }
        let mut plans = Vec::with_capacity(self.layers.len());
        for (idx, layer) in self.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Conv {
                    kernel,
                    out_channels,
                    slope,
                    pool,
                } => {
                    if out_channels == 0 {
                        return shape_err(format!("layer {idx}: zero output channels"));
                    }
                    let geom = ConvGeometry::new(c, w, h, kernel)
                        .map_err(|e| crate::AcnnlError::Shape(format!("layer {idx}: {e}")))?;
                    if out_channels * geom.positions() < self.classes {
                        return validation_err(format!(
                            "layer {idx}: target width {} is below the class count {}",
                            out_channels * geom.positions(),
                            self.classes
                        ));
                    }
                    let (mut ow, mut oh) = (geom.out_width(), geom.out_height());
                    if let Some(p) = pool {
                        if p == 0 || ow % p != 0 || oh % p != 0 {
                            return shape_err(format!(
                                "layer {idx}: pool {p} does not divide {ow}x{oh}"
                            ));
                        }
                        ow /= p;
                        oh /= p;
                    }
                    c = out_channels;
                    w = ow;
                    h = oh;
                    plans.push(LayerPlan::Conv {
                        geom,
                        out_channels,
                        slope,
                        pool,
                        output: (c, w, h),
                    });
                }
                LayerSpec::Dense { out_dim } => {
                    if out_dim != self.classes {
                        return validation_err(format!(
                            "dense layer maps to {out_dim} outputs, expected {}",
                            self.classes
                        ));
                    }
                    plans.push(LayerPlan::Dense {
                        in_dim: c * w * h,
                        out_dim,
                    });
                }
            }
        }
        Ok(plans)
    }

    /// Number of conv layers, i.e. `L − 1`.
    pub fn conv_depth(&self) -> usize {
        self.layers.len() - 1
    }
}

/// CNN-5(C): kernels 5,3,3,3 with C, 2C, 4C, 4C channels and 2×2 average
/// pooling after the first two blocks, followed by a dense classifier.
pub fn build_cnn5(c: usize, input: (usize, usize, usize), classes: usize) -> Result<NetworkSpec> {
    build_cnn(5, c, input, classes)
}

/// Depth-truncated members of the CNN-5(C) family (depth counts trainable
/// layers, 2 to 5). A pool follows a conv block only when another conv block
/// comes after it.
pub fn build_cnn(
    depth: usize,
    c: usize,
    input: (usize, usize, usize),
    classes: usize,
) -> Result<NetworkSpec> {
    if !(2..=5).contains(&depth) {
        return validation_err(format!("depth must be between 2 and 5, got {depth}"));
    }
    if c == 0 {
        return validation_err("channel parameter must be positive");
    }
    const KERNELS: [usize; 4] = [5, 3, 3, 3];
    const WIDTHS: [usize; 4] = [1, 2, 4, 4];
    let convs = depth - 1;
    let mut layers: Vec<LayerSpec> = (0..convs)
        .map(|i| LayerSpec::Conv {
            kernel: KERNELS[i],
            out_channels: WIDTHS[i] * c,
            slope: DEFAULT_SLOPE,
            pool: (i < 2 && i + 1 < convs).then_some(2),
        })
        .collect();
    layers.push(LayerSpec::Dense { out_dim: classes });
    let spec = NetworkSpec {
        input,
        classes,
        layers,
        gamma: DEFAULT_GAMMA,
        encoder_seed: 0,
        encoder_scale: 1.0,
        bias: false,
    };
    spec.plan()?;
    Ok(spec)
}

/// A single ridge classifier on the flattened raw input.
pub fn build_linear(input: (usize, usize, usize), classes: usize) -> Result<NetworkSpec> {
    let spec = NetworkSpec {
        input,
        classes,
        layers: vec![LayerSpec::Dense { out_dim: classes }],
        gamma: DEFAULT_GAMMA,
        encoder_seed: 0,
        encoder_scale: 1.0,
        bias: false,
    };
    spec.plan()?;
    Ok(spec)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelMetadata {
    pub prng_id: String,
    /// Order-independent content hash of the training set.
    pub training_fingerprint: u64,
    /// Unix seconds.
    pub trained_at: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedNetwork {
    spec: NetworkSpec,
    plans: Vec<LayerPlan>,
    weights: Vec<Mat>,
    metadata: ModelMetadata,
}

impl TrainedNetwork {
    pub fn new(spec: NetworkSpec, weights: Vec<Mat>, metadata: ModelMetadata) -> Result<Self> {
        let plans = spec.plan()?;
        if weights.len() != plans.len() {
            return shape_err(format!(
                "{} weight matrices for {} layers",
                weights.len(),
                plans.len()
            ));
        }
        for (i, (p, w)) in plans.iter().zip(&weights).enumerate() {
            let expect = p.weight_shape(spec.bias);
            if w.shape() != expect {
                return shape_err(format!(
                    "layer {i}: weight {:?}, expected {expect:?}",
                    w.shape()
                ));
            }
        }
        Ok(Self {
            spec,
            plans,
            weights,
            metadata,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }
    pub fn plans(&self) -> &[LayerPlan] {
        &self.plans
    }
    pub fn weights(&self) -> &[Mat] {
        &self.weights
    }
    pub fn metadata(&self) -> &ModelMetadata {
        &self.metadata
    }
}

#[inline]
pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

/// Non-overlapping `p×p` mean pooling with stride `p`.
pub fn avg_pool(x: &Tensor3, p: usize) -> Result<Tensor3> {
    let (c, w, h) = x.dims();
    if p == 0 || w % p != 0 || h % p != 0 {
        return shape_err(format!("pool {p} does not divide {w}x{h}"));
    }
    let (ow, oh) = (w / p, h / p);
    let inv = 1.0 / (p * p) as f64;
    let mut out = Tensor3::zeros(c, ow, oh);
    for ch in 0..c {
        for i in 0..ow {
            for j in 0..oh {
                let mut s = 0.0;
                for a in 0..p {
                    for b in 0..p {
                        s += x.get(ch, i * p + a, j * p + b);
                    }
                }
                out.set(ch, i, j, s * inv);
            }
        }
    }
    Ok(out)
}

/// Samples per stacked GEMM during batch inference and training.
pub(crate) const CHUNK_TARGET_ROWS: usize = 8192;

pub(crate) fn chunk_len(rows_per_sample: usize) -> usize {
    (CHUNK_TARGET_ROWS / rows_per_sample.max(1)).clamp(1, 256)
}

/// Stacked patch matrix for a run of samples: `n·positions × row_len`.
pub(crate) fn stacked_patches(
    inputs: &[&Tensor3],
    geom: &ConvGeometry,
    row_len: usize,
) -> Vec<f64> {
    let block = geom.positions() * row_len;
    let mut buf = vec![0.0; inputs.len() * block];
    for (x, dst) in inputs.iter().zip(buf.chunks_mut(block)) {
        im2col_into(x, geom, row_len, dst);
    }
    buf
}

/// Runs one conv block (convolution, activation, optional pool) over a run
/// of samples with a single stacked GEMM.
pub(crate) fn conv_block(
    plan: &LayerPlan,
    weights: &Mat,
    inputs: &[&Tensor3],
) -> Result<Vec<Tensor3>> {
    let LayerPlan::Conv {
        geom,
        out_channels,
        slope,
        pool,
        ..
    } = plan
    else {
        return validation_err("conv_block called on a dense layer");
    };
    for x in inputs {
        if x.dims() != (geom.in_channels(), geom.in_width(), geom.in_height()) {
            return shape_err(format!(
                "input {:?} does not match layer input {}x{}x{}",
                x.dims(),
                geom.in_channels(),
                geom.in_width(),
                geom.in_height()
            ));
        }
    }
    let row_len = weights.rows();
    let positions = geom.positions();
    let patches = stacked_patches(inputs, geom, row_len);
    let rows = inputs.len() * positions;
    let mut prod = vec![0.0; rows * out_channels];
    gemm(
        1.0,
        View::row_major(&patches, rows, row_len, row_len),
        View::of(weights),
        0.0,
        &mut prod,
        *out_channels,
    );
    for v in &mut prod {
        *v = leaky_relu(*v, *slope);
    }
    let plane = positions * out_channels;
    prod.chunks(plane)
        .map(|block| {
            let mut t = Tensor3::zeros(*out_channels, geom.out_width(), geom.out_height());
            scatter_positions(block, *out_channels, geom, t.as_mut_slice());
            match pool {
                Some(p) => avg_pool(&t, *p),
                None => Ok(t),
            }
        })
        .collect()
}

/// Dense-layer input row for a feature tensor: the tensor's channel-major
/// buffer, plus a trailing 1 when `bias` is set.
pub(crate) fn dense_features(x: &Tensor3, bias: bool, out: &mut [f64]) {
    let n = x.len();
    out[..n].copy_from_slice(x.as_slice());
    if bias {
        out[n] = 1.0;
    }
}

impl TrainedNetwork {
    fn check_input(&self, x: &Tensor3) -> Result<()> {
        if x.dims() != self.spec.input {
            return shape_err(format!(
                "input {:?} does not match network input {:?}",
                x.dims(),
                self.spec.input
            ));
        }
        Ok(())
    }

    /// Logits for one sample.
    pub fn forward(&self, x: &Tensor3) -> Result<Vec<f64>> {
        Ok(self.forward_batch(std::slice::from_ref(x))?.remove(0))
    }

    /// Logits for many samples, processed in stacked chunks.
    pub fn forward_batch(&self, xs: &[Tensor3]) -> Result<Vec<Vec<f64>>> {
        for x in xs {
            self.check_input(x)?;
        }
        let mut out = Vec::with_capacity(xs.len());
        let rows_first = self.plans[0].rows_per_sample();
        for chunk in xs.chunks(chunk_len(rows_first)) {
            let refs: Vec<&Tensor3> = chunk.iter().collect();
            out.extend(self.forward_refs(&refs)?);
        }
        Ok(out)
    }

    fn forward_refs(&self, xs: &[&Tensor3]) -> Result<Vec<Vec<f64>>> {
        let convs = self.plans.len() - 1;
        let mut owned: Option<Vec<Tensor3>> = None;
        for (plan, w) in self.plans[..convs].iter().zip(&self.weights) {
            let next = match &owned {
                Some(v) => conv_block(plan, w, &v.iter().collect::<Vec<_>>())?,
                None => conv_block(plan, w, xs)?,
            };
            owned = Some(next);
        }
        let feats: Vec<&Tensor3> = match &owned {
            Some(v) => v.iter().collect(),
            None => xs.to_vec(),
        };
        Ok(self.dense_logits(&feats))
    }

    /// Applies the final dense layer to feature tensors.
    pub(crate) fn dense_logits(&self, feats: &[&Tensor3]) -> Vec<Vec<f64>> {
        let w = self.weights.last().expect("at least one layer");
        let (rows, k) = w.shape();
        let mut buf = vec![0.0; feats.len() * rows];
        for (f, dst) in feats.iter().zip(buf.chunks_mut(rows)) {
            dense_features(f, self.spec.bias, dst);
        }
        let mut logits = vec![0.0; feats.len() * k];
        gemm(
            1.0,
            View::row_major(&buf, feats.len(), rows, rows),
            View::of(w),
            0.0,
            &mut logits,
            k,
        );
        logits.chunks(k).map(<[f64]>::to_vec).collect()
    }

    /// Index of the largest logit, lowest index on ties.
    pub fn predict(&self, x: &Tensor3) -> Result<usize> {
        Ok(argmax(&self.forward(x)?))
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}
