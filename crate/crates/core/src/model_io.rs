//! Binary model files.
//!
//! Layout, integers little-endian u32 unless noted:
//!
//! ```text
//! "ACNL"  version:u16
//! prng_id:(len, utf8)  encoder_seed:u64  gamma:f64  input:3×u32  classes
//! encoder_scale:f64  bias  fingerprint:u64  trained_at:u64
//! layer_count
//! per layer: kind (0 conv, 1 dense)
//!            conv:  in_c in_w in_h kernel out_channels
//!            dense: in_dim out_dim
//!            slope:f64  pool (0 = none)  rows  cols  rows·cols × f64
//! ```

use std::io::{self, Read, Write};

use crate::error::{AcnnlError, Result};
use crate::network::{LayerPlan, LayerSpec, ModelMetadata, NetworkSpec, TrainedNetwork};
use crate::tensor::Mat;

pub const MAGIC: &[u8; 4] = b"ACNL";
pub const FORMAT_VERSION: u16 = 1;

const KIND_CONV: u32 = 0;
const KIND_DENSE: u32 = 1;

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| AcnnlError::Validation(format!("{what} {v} exceeds u32")))
}

pub fn save_model<W: Write>(net: &TrainedNetwork, sink: &mut W) -> Result<()> {
    let spec = net.spec();
    let meta = net.metadata();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let id = meta.prng_id.as_bytes();
    buf.extend_from_slice(&to_u32(id.len(), "prng id length")?.to_le_bytes());
    buf.extend_from_slice(id);
    buf.extend_from_slice(&spec.encoder_seed.to_le_bytes());
    buf.extend_from_slice(&spec.gamma.to_le_bytes());
    for d in [spec.input.0, spec.input.1, spec.input.2, spec.classes] {
        buf.extend_from_slice(&to_u32(d, "dimension")?.to_le_bytes());
    }
    buf.extend_from_slice(&spec.encoder_scale.to_le_bytes());
    buf.extend_from_slice(&u32::from(spec.bias).to_le_bytes());
    buf.extend_from_slice(&meta.training_fingerprint.to_le_bytes());
    buf.extend_from_slice(&meta.trained_at.to_le_bytes());
    buf.extend_from_slice(&to_u32(net.plans().len(), "layer count")?.to_le_bytes());
    for (plan, w) in net.plans().iter().zip(net.weights()) {
        let (ints, slope, pool): (Vec<usize>, f64, usize) = match *plan {
            LayerPlan::Conv {
                geom,
                out_channels,
                slope,
                pool,
                ..
            } => (
                vec![
                    geom.in_channels(),
                    geom.in_width(),
                    geom.in_height(),
                    geom.kernel(),
                    out_channels,
                ],
                slope,
                pool.unwrap_or(0),
            ),
            LayerPlan::Dense { in_dim, out_dim } => (vec![in_dim, out_dim], 1.0, 0),
        };
        let kind = if ints.len() == 5 {
            KIND_CONV
        } else {
            KIND_DENSE
        };
        buf.extend_from_slice(&kind.to_le_bytes());
        for v in ints {
            buf.extend_from_slice(&to_u32(v, "geometry")?.to_le_bytes());
        }
        buf.extend_from_slice(&slope.to_le_bytes());
        buf.extend_from_slice(&to_u32(pool, "pool")?.to_le_bytes());
        buf.extend_from_slice(&to_u32(w.rows(), "rows")?.to_le_bytes());
        buf.extend_from_slice(&to_u32(w.cols(), "cols")?.to_le_bytes());
        for v in w.as_slice() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    sink.write_all(&buf)?;
    Ok(())
}

struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn bytes<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.fill(&mut b, what)?;
        Ok(b)
    }

    fn fill(&mut self, b: &mut [u8], what: &str) -> Result<()> {
        match self.inner.read_exact(b) {
            Ok(()) => {
                self.offset += b.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => {
                Err(self.fail(format!("truncated stream while reading {what}")))
            }
            Err(e) => Err(e.into()),
        }
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.bytes(what)?) as usize)
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(what)?))
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(what)?))
    }

    fn fail(&self, message: String) -> AcnnlError {
        AcnnlError::Format {
            offset: self.offset,
            message,
        }
    }
}

pub fn load_model<R: Read>(source: &mut R) -> Result<TrainedNetwork> {
    let mut c = Cursor {
        inner: source,
        offset: 0,
    };
    let magic: [u8; 4] = c.bytes("magic")?;
    if &magic != MAGIC {
        return Err(AcnnlError::Format {
            offset: 0,
            message: format!("bad magic {magic:?}"),
        });
    }
    let at = c.offset;
    let version = u16::from_le_bytes(c.bytes("version")?);
    if version != FORMAT_VERSION {
        return Err(AcnnlError::Format {
            offset: at,
            message: format!("unsupported format version {version}"),
        });
    }
    let id_len = c.u32("prng id length")?;
    if id_len > 4096 {
        return Err(c.fail(format!("prng id length {id_len} is implausible")));
    }
    let mut id = vec![0u8; id_len];
    c.fill(&mut id, "prng id")?;
    let prng_id = String::from_utf8(id).map_err(|_| c.fail("prng id is not utf-8".into()))?;
    let encoder_seed = c.u64("encoder seed")?;
    let gamma = c.f64("gamma")?;
    let input = (c.u32("input")?, c.u32("input")?, c.u32("input")?);
    let classes = c.u32("class count")?;
    let encoder_scale = c.f64("encoder scale")?;
    let bias = match c.u32("bias flag")? {
        0 => false,
        1 => true,
        v => return Err(c.fail(format!("bias flag {v}"))),
    };
    let training_fingerprint = c.u64("fingerprint")?;
    let trained_at = c.u64("timestamp")?;
    let n_layers = c.u32("layer count")?;

    let mut layers = Vec::new();
    let mut geometry = Vec::new();
    let mut weights = Vec::new();
    for i in 0..n_layers {
        let kind_at = c.offset;
        let kind = c.u32("layer kind")? as u32;
        let ints = match kind {
            KIND_CONV => (0..5)
                .map(|_| c.u32("conv geometry"))
                .collect::<Result<Vec<_>>>()?,
            KIND_DENSE => (0..2)
                .map(|_| c.u32("dense geometry"))
                .collect::<Result<Vec<_>>>()?,
            k => {
                return Err(AcnnlError::Format {
                    offset: kind_at,
                    message: format!("layer {i}: unknown kind {k}"),
                })
            }
        };
        let slope = c.f64("slope")?;
        let pool = c.u32("pool")?;
        let rows = c.u32("weight rows")?;
        let cols = c.u32("weight cols")?;
        let n = rows
            .checked_mul(cols)
            .filter(|&n| n <= (1 << 31))
            .ok_or_else(|| c.fail(format!("layer {i}: weight shape {rows}x{cols} too large")))?;
        let mut raw = vec![0u8; n * 8];
        c.fill(&mut raw, "weights")?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        weights.push(Mat::from_vec(rows, cols, data)?);
        layers.push(if kind == KIND_CONV {
            LayerSpec::Conv {
                kernel: ints[3],
                out_channels: ints[4],
                slope,
                pool: (pool != 0).then_some(pool),
            }
        } else {
            LayerSpec::Dense { out_dim: ints[1] }
        });
        geometry.push(ints);
    }
    let spec = NetworkSpec {
        input,
        classes,
        layers,
        gamma,
        encoder_seed,
        encoder_scale,
        bias,
    };
    let meta = ModelMetadata {
        prng_id,
        training_fingerprint,
        trained_at,
    };
    let end = c.offset;
    let bad = |m: String| AcnnlError::Format {
        offset: end,
        message: m,
    };
    let net = TrainedNetwork::new(spec, weights, meta).map_err(|e| bad(e.to_string()))?;
    for (i, (plan, ints)) in net.plans().iter().zip(&geometry).enumerate() {
        let derived = match *plan {
            LayerPlan::Conv { geom, .. } => {
                vec![geom.in_channels(), geom.in_width(), geom.in_height()]
            }
            LayerPlan::Dense { in_dim, .. } => vec![in_dim],
        };
        if derived[..] != ints[..derived.len()] {
            return Err(bad(format!(
                "layer {i}: stored input geometry {:?} disagrees with derived {derived:?}",
                &ints[..derived.len()]
            )));
        }
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::build_cnn;
    use crate::tensor::Tensor3;

    fn sample_net(bias: bool) -> TrainedNetwork {
        let mut spec = build_cnn(3, 2, (1, 10, 10), 3).unwrap();
        spec.bias = bias;
        spec.gamma = 0.25;
        spec.encoder_seed = 77;
        let mut s = 1u64;
        let weights = spec
            .plan()
            .unwrap()
            .iter()
            .map(|p| {
                let (r, c) = p.weight_shape(bias);
                Mat::from_fn(r, c, |_, _| {
                    s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
                    (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
                })
            })
            .collect();
        let meta = ModelMetadata {
            prng_id: "test-prng".into(),
            training_fingerprint: 0xDEAD_BEEF,
            trained_at: 1_700_000_000,
        };
        TrainedNetwork::new(spec, weights, meta).unwrap()
    }

    fn bytes_of(net: &TrainedNetwork) -> Vec<u8> {
        let mut v = Vec::new();
        save_model(net, &mut v).unwrap();
        v
    }

    #[test]
    fn round_trip_is_exact() {
        for bias in [false, true] {
            let net = sample_net(bias);
            let a = bytes_of(&net);
            let back = load_model(&mut a.as_slice()).unwrap();
            assert_eq!(back, net);
            assert_eq!(bytes_of(&back), a);
        }
    }

    #[test]
    fn header_layout() {
        let a = bytes_of(&sample_net(false));
        assert_eq!(&a[..4], b"ACNL");
        assert_eq!(u16::from_le_bytes([a[4], a[5]]), 1);
        assert_eq!(u32::from_le_bytes(a[6..10].try_into().unwrap()), 9);
        assert_eq!(&a[10..19], b"test-prng");
        assert_eq!(u64::from_le_bytes(a[19..27].try_into().unwrap()), 77);
        assert_eq!(f64::from_le_bytes(a[27..35].try_into().unwrap()), 0.25);
    }

    #[test]
    fn bad_magic() {
        let mut a = bytes_of(&sample_net(false));
        a[0] = b'X';
        match load_model(&mut a.as_slice()) {
            Err(AcnnlError::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_version() {
        let mut a = bytes_of(&sample_net(false));
        a[4] = 9;
        match load_model(&mut a.as_slice()) {
            Err(AcnnlError::Format { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncation_reports_offset() {
        let a = bytes_of(&sample_net(false));
        for cut in [3, 5, 20, 60, a.len() - 1] {
            match load_model(&mut &a[..cut]) {
                Err(AcnnlError::Format { offset, message }) => {
                    assert!(offset <= cut as u64, "{offset} > {cut}");
                    assert!(message.contains("truncated"), "{message}");
                }
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn loaded_forward_is_identical() {
        let net = sample_net(true);
        let back = load_model(&mut bytes_of(&net).as_slice()).unwrap();
        let mut s = 5u64;
        for _ in 0..100 {
            let x = Tensor3::new(
                1,
                10,
                10,
                (0..100)
                    .map(|_| {
                        s = s.wrapping_mul(6364136223846793005).wrapping_add(3);
                        (s >> 11) as f64 / (1u64 << 53) as f64
                    })
                    .collect(),
            )
            .unwrap();
            let a = net.forward(&x).unwrap();
            let b = back.forward(&x).unwrap();
            assert!(a.iter().zip(&b).all(|(u, v)| u.to_bits() == v.to_bits()));
        }
    }
}
