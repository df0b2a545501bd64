//! Dataset loading and generation.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{validation_err, AcnnlError, Result};
use crate::tensor::{Mat, Tensor3};

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;
const CIFAR_PIXELS: usize = 3 * 32 * 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Vec<Tensor3>,
    labels: Vec<usize>,
    classes: usize,
    name: String,
    fingerprint: u64,
}

impl Dataset {
    pub fn new(
        images: Vec<Tensor3>,
        labels: Vec<usize>,
        classes: usize,
        name: impl Into<String>,
    ) -> Result<Self> {
        if images.len() != labels.len() {
            return validation_err(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            ));
        }
        if let Some(first) = images.first() {
            if let Some(i) = images.iter().position(|x| x.dims() != first.dims()) {
                return validation_err(format!(
                    "image {i} has dims {:?}, expected {:?}",
                    images[i].dims(),
                    first.dims()
                ));
            }
        }
        if let Some(i) = labels.iter().position(|&l| l >= classes) {
            return validation_err(format!("label {} at {i} is not below {classes}", labels[i]));
        }
        let fingerprint = fingerprint(&images, &labels);
        Ok(Self {
            images,
            labels,
            classes,
            name: name.into(),
            fingerprint,
        })
    }

    pub fn images(&self) -> &[Tensor3] {
        &self.images
    }
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
    pub fn classes(&self) -> usize {
        self.classes
    }
    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }
    pub fn len(&self) -> usize {
        self.labels.len()
    }
    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, W, H)` of every image; `None` when empty.
    pub fn dims(&self) -> Option<(usize, usize, usize)> {
        self.images.first().map(Tensor3::dims)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Samples at `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        if let Some(&i) = indices.iter().find(|&&i| i >= self.len()) {
            return validation_err(format!("index {i} out of range {}", self.len()));
        }
        Dataset::new(
            indices.iter().map(|&i| self.images[i].clone()).collect(),
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.classes,
            self.name.clone(),
        )
    }

    /// The first `n` samples.
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        self.select(&(0..n).collect::<Vec<_>>())
            .expect("indices in range")
    }
}

/// Order-independent content hash: FNV-1a per sample, summed.
pub fn fingerprint(images: &[Tensor3], labels: &[usize]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut total = 0u64;
    for (x, &l) in images.iter().zip(labels) {
        let mut h = OFFSET;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= u64::from(b);
                h = h.wrapping_mul(PRIME);
            }
        };
        eat(&(l as u64).to_le_bytes());
        for d in [x.channels(), x.width(), x.height()] {
            eat(&(d as u64).to_le_bytes());
        }
        for v in x.as_slice() {
            eat(&v.to_bits().to_le_bytes());
        }
        total = total.wrapping_add(h);
    }
    total
}

fn format_err<T>(offset: usize, message: impl Into<String>) -> Result<T> {
    Err(AcnnlError::Format {
        offset: offset as u64,
        message: message.into(),
    })
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    match bytes.get(offset..offset + 4) {
        Some(b) => Ok(u32::from_be_bytes(b.try_into().expect("4 bytes"))),
        None => format_err(bytes.len(), format!("truncated while reading {what}")),
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| {
        AcnnlError::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

/// Parses an IDX image file (magic 0x803) into single-channel tensors.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Vec<Tensor3>> {
    let magic = be_u32(bytes, 0, "magic")?;
    if magic != IDX_IMAGES {
        return format_err(0, format!("expected image magic 0x803, found {magic:#x}"));
    }
    let n = be_u32(bytes, 4, "count")? as usize;
    let rows = be_u32(bytes, 8, "rows")? as usize;
    let cols = be_u32(bytes, 12, "cols")? as usize;
    let plane = rows * cols;
    if plane == 0 {
        return format_err(8, "zero image size");
    }
    let need = 16 + n * plane;
    if bytes.len() < need {
        return format_err(
            bytes.len(),
            format!("truncated: {n} images need {need} bytes"),
        );
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let px = &bytes[16 + i * plane..16 + (i + 1) * plane];
        // IDX stores row-major (row, col); our width axis is the column
        let mut data = vec![0.0; plane];
        for r in 0..rows {
            for c in 0..cols {
                data[c * rows + r] = f64::from(px[r * cols + c]) / 255.0;
            }
        }
        out.push(Tensor3::new(1, cols, rows, data)?);
    }
    Ok(out)
}

/// Parses an IDX label file (magic 0x801).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, "magic")?;
    if magic != IDX_LABELS {
        return format_err(0, format!("expected label magic 0x801, found {magic:#x}"));
    }
    let n = be_u32(bytes, 4, "count")? as usize;
    if bytes.len() < 8 + n {
        return format_err(
            bytes.len(),
            format!("truncated: {n} labels need {} bytes", 8 + n),
        );
    }
    Ok(bytes[8..8 + n].iter().map(|&b| usize::from(b)).collect())
}

/// Loads an IDX image/label pair (MNIST, Fashion-MNIST). The class count is
/// one more than the largest label, at least 10.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = parse_idx_images(&read_file(images_path)?)?;
    let labels = parse_idx_labels(&read_file(labels_path)?)?;
    if images.len() != labels.len() {
        return format_err(
            4,
            format!("{} images but {} labels", images.len(), labels.len()),
        );
    }
    let classes = labels.iter().max().map_or(10, |&m| (m + 1).max(10));
    let name = images_path
        .file_name()
        .map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    Dataset::new(images, labels, classes, name)
}

fn cifar_records(
    bytes: &[u8],
    label_bytes: usize,
    label_at: usize,
) -> Result<(Vec<Tensor3>, Vec<usize>)> {
    let record = label_bytes + CIFAR_PIXELS;
    if !bytes.len().is_multiple_of(record) {
        return format_err(
            bytes.len() - bytes.len() % record,
            format!(
                "length {} is not a multiple of record size {record}",
                bytes.len()
            ),
        );
    }
    let mut images = Vec::with_capacity(bytes.len() / record);
    let mut labels = Vec::with_capacity(bytes.len() / record);
    for rec in bytes.chunks_exact(record) {
        labels.push(usize::from(rec[label_at]));
        // each channel plane is row-major (row, col); width runs along columns
        let px = &rec[label_bytes..];
        let mut data = vec![0.0; CIFAR_PIXELS];
        for ch in 0..3 {
            for r in 0..32 {
                for c in 0..32 {
                    data[ch * 1024 + c * 32 + r] = f64::from(px[ch * 1024 + r * 32 + c]) / 255.0;
                }
            }
        }
        images.push(Tensor3::new(3, 32, 32, data)?);
    }
    Ok((images, labels))
}

/// Loads and concatenates CIFAR-10 binary batches.
pub fn load_cifar10<P: AsRef<Path>>(batch_paths: &[P]) -> Result<Dataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for p in batch_paths {
        let (i, l) = cifar_records(&read_file(p.as_ref())?, 1, 0)?;
        images.extend(i);
        labels.extend(l);
    }
    Dataset::new(images, labels, 10, "cifar10")
}

/// Loads a CIFAR-100 binary file with coarse (20) or fine (100) labels.
pub fn load_cifar100(path: &Path, fine_labels: bool) -> Result<Dataset> {
    let (images, labels) = cifar_records(&read_file(path)?, 2, usize::from(fine_labels))?;
    let classes = if fine_labels { 100 } else { 20 };
    Dataset::new(images, labels, classes, "cifar100")
}

pub fn to_onehot(labels: &[usize], k: usize) -> Result<Mat> {
    let mut y = Mat::zeros(labels.len(), k);
    for (n, &l) in labels.iter().enumerate() {
        if l >= k {
            return validation_err(format!("label {l} at {n} is not below {k}"));
        }
        y.set(n, l, 1.0);
    }
    Ok(y)
}

/// Exactly `n_c` samples per class, picked by a seeded shuffle of each
/// class's indices; the result keeps the original sample order.
pub fn subsample_per_class(d: &Dataset, n_c: usize, seed: u64) -> Result<Dataset> {
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); d.classes()];
    for (i, &l) in d.labels().iter().enumerate() {
        per_class[l].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::with_capacity(n_c * d.classes());
    for (class, idx) in per_class.iter_mut().enumerate() {
        if idx.len() < n_c {
            return validation_err(format!(
                "class {class} has {} samples, {n_c} requested",
                idx.len()
            ));
        }
        idx.shuffle(&mut rng);
        keep.extend_from_slice(&idx[..n_c]);
    }
    keep.sort_unstable();
    d.select(&keep)
}

/// Gaussian class clusters rendered as images. Each class has a center drawn
/// uniformly in `[0,1]^D`; a sample is `0.5 + separation·(center − 0.5)` plus
/// N(0, 0.1²) noise per pixel, clamped to `[0,1]`. Samples are interleaved by
/// class.
pub fn synthetic_blobs(
    k: usize,
    n_per_class: usize,
    dims: (usize, usize, usize),
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    let (c, w, h) = dims;
    let d = c * w * h;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..d).map(|_| rng.random::<f64>()).collect())
        .collect();
    let mut images = Vec::with_capacity(k * n_per_class);
    let mut labels = Vec::with_capacity(k * n_per_class);
    for _ in 0..n_per_class {
        for (class, center) in centers.iter().enumerate() {
            let data = center
                .iter()
                .map(|&m| {
                    let noise: f64 = rng.sample(StandardNormal);
                    (0.5 + separation * (m - 0.5) + 0.1 * noise).clamp(0.0, 1.0)
                })
                .collect();
            images.push(Tensor3::new(c, w, h, data)?);
            labels.push(class);
        }
    }
    Dataset::new(images, labels, k.max(1), "blobs")
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a single-channel dataset as an IDX image/label pair.
pub fn write_idx(d: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let (c, w, h) = d.dims().unwrap_or((1, 0, 0));
    if c != 1 {
        return validation_err(format!("IDX needs single-channel images, found {c}"));
    }
    let mut img = Vec::with_capacity(16 + d.len() * w * h);
    for v in [IDX_IMAGES, d.len() as u32, h as u32, w as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    for x in d.images() {
        for r in 0..h {
            for col in 0..w {
                img.push(to_byte(x.get(0, col, r)));
            }
        }
    }
    let mut lab = Vec::with_capacity(8 + d.len());
    lab.extend_from_slice(&IDX_LABELS.to_be_bytes());
    lab.extend_from_slice(&(d.len() as u32).to_be_bytes());
    for &l in d.labels() {
        lab.push(
            u8::try_from(l)
                .map_err(|_| AcnnlError::Validation(format!("label {l} exceeds a byte")))?,
        );
    }
    fs::write(images_path, img)?;
    fs::write(labels_path, lab)?;
    Ok(())
}

/// Writes a 3×32×32 dataset as one CIFAR-10 binary batch.
pub fn write_cifar10(d: &Dataset, path: &Path) -> Result<()> {
    if d.dims().is_some_and(|dims| dims != (3, 32, 32)) {
        return validation_err(format!("CIFAR records need 3x32x32, found {:?}", d.dims()));
    }
    let mut out = Vec::with_capacity(d.len() * (1 + CIFAR_PIXELS));
    for (x, &l) in d.images().iter().zip(d.labels()) {
        out.push(
            u8::try_from(l)
                .map_err(|_| AcnnlError::Validation(format!("label {l} exceeds a byte")))?,
        );
        for ch in 0..3 {
            for r in 0..32 {
                for c in 0..32 {
                    out.push(to_byte(x.get(ch, c, r)));
                }
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_fixture() -> (Vec<u8>, Vec<u8>) {
        let mut img = Vec::new();
        for v in [0x803u32, 2, 2, 3] {
            img.extend_from_slice(&v.to_be_bytes());
        }
        img.extend_from_slice(&[0, 51, 102, 153, 204, 255]);
        img.extend_from_slice(&[255, 0, 0, 0, 0, 1]);
        let mut lab = Vec::new();
        for v in [0x801u32, 2] {
            lab.extend_from_slice(&v.to_be_bytes());
        }
        lab.extend_from_slice(&[7, 3]);
        (img, lab)
    }

    #[test]
    fn idx_pixels_recovered() {
        let (img, lab) = idx_fixture();
        let x = parse_idx_images(&img).unwrap();
        assert_eq!(x.len(), 2);
        // 2 rows × 3 cols: width 3, height 2
        assert_eq!(x[0].dims(), (1, 3, 2));
        assert_eq!(x[0].get(0, 0, 0), 0.0);
        assert_eq!(x[0].get(0, 1, 0), 0.2);
        assert_eq!(x[0].get(0, 2, 0), 0.4);
        assert_eq!(x[0].get(0, 0, 1), 0.6);
        assert_eq!(x[0].get(0, 2, 1), 1.0);
        assert_eq!(x[1].get(0, 2, 1), 1.0 / 255.0);
        assert_eq!(parse_idx_labels(&lab).unwrap(), vec![7, 3]);
    }

    #[test]
    fn idx_wrong_magic() {
        let (img, _) = idx_fixture();
        assert!(matches!(
            parse_idx_labels(&img),
            Err(AcnnlError::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn idx_truncated() {
        let (img, lab) = idx_fixture();
        match parse_idx_images(&img[..20]) {
            Err(AcnnlError::Format { offset, .. }) => assert_eq!(offset, 20),
            other => panic!("{other:?}"),
        }
        assert!(parse_idx_labels(&lab[..9]).is_err());
        assert!(parse_idx_labels(&lab[..2]).is_err());
    }

    #[test]
    fn idx_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (img, mut lab) = idx_fixture();
        lab[7] = 1;
        lab.pop();
        fs::write(dir.path().join("i"), img).unwrap();
        fs::write(dir.path().join("l"), lab).unwrap();
        assert!(matches!(
            load_idx(&dir.path().join("i"), &dir.path().join("l")),
            Err(AcnnlError::Format { .. })
        ));
    }

    #[test]
    fn cifar_one_record() {
        let mut rec = vec![4u8];
        rec.extend((0..CIFAR_PIXELS).map(|i| (i % 251) as u8));
        let (x, l) = cifar_records(&rec, 1, 0).unwrap();
        assert_eq!(l, vec![4]);
        // channel 1, row 2, col 5 sits at byte 1024 + 2·32 + 5
        assert_eq!(x[0].get(1, 5, 2), ((1024 + 69) % 251) as f64 / 255.0);
        assert!(cifar_records(&rec[..100], 1, 0).is_err());
    }

    #[test]
    fn cifar100_label_choice() {
        let mut rec = vec![3u8, 77];
        rec.extend(vec![0u8; CIFAR_PIXELS]);
        assert_eq!(cifar_records(&rec, 2, 0).unwrap().1, vec![3]);
        assert_eq!(cifar_records(&rec, 2, 1).unwrap().1, vec![77]);
    }

    #[test]
    fn onehot() {
        assert_eq!(
            to_onehot(&[2], 4).unwrap(),
            Mat::from_rows(&[[0.0, 0.0, 1.0, 0.0]])
        );
        let y = to_onehot(&[0, 3, 1, 1], 4).unwrap();
        for n in 0..4 {
            assert_eq!(y.row(n).iter().sum::<f64>(), 1.0);
        }
        assert_eq!(to_onehot(&[], 3).unwrap().shape(), (0, 3));
        assert!(to_onehot(&[3], 3).is_err());
    }

    #[test]
    fn dataset_invariants() {
        let x = vec![Tensor3::zeros(1, 2, 2), Tensor3::zeros(1, 2, 3)];
        assert!(Dataset::new(x, vec![0, 0], 1, "").is_err());
        assert!(Dataset::new(vec![Tensor3::zeros(1, 2, 2)], vec![2], 2, "").is_err());
        assert!(Dataset::new(vec![], vec![0], 1, "").is_err());
    }

    #[test]
    fn subsampling() {
        let d = synthetic_blobs(3, 5, (1, 2, 2), 1.0, 1).unwrap();
        let one = subsample_per_class(&d, 1, 9).unwrap();
        assert_eq!(one.class_counts(), vec![1, 1, 1]);
        assert_eq!(
            subsample_per_class(&d, 2, 4).unwrap(),
            subsample_per_class(&d, 2, 4).unwrap()
        );
        let full = subsample_per_class(&d, 5, 4).unwrap();
        assert_eq!(full, d);
        assert!(subsample_per_class(&d, 6, 4).is_err());
    }

    #[test]
    fn blobs_are_deterministic() {
        let a = synthetic_blobs(4, 3, (2, 3, 3), 3.0, 11).unwrap();
        assert_eq!(a, synthetic_blobs(4, 3, (2, 3, 3), 3.0, 11).unwrap());
        assert_ne!(a, synthetic_blobs(4, 3, (2, 3, 3), 3.0, 12).unwrap());
        assert_eq!(a.len(), 12);
        assert!(a
            .images()
            .iter()
            .all(|x| x.as_slice().iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn fingerprint_ignores_order() {
        let d = synthetic_blobs(3, 4, (1, 3, 3), 1.0, 2).unwrap();
        let rev: Vec<usize> = (0..d.len()).rev().collect();
        assert_eq!(d.select(&rev).unwrap().fingerprint(), d.fingerprint());
        assert_ne!(d.head(5).fingerprint(), d.fingerprint());
    }
}
