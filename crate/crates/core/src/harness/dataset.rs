//! Datasets: IDX files and synthetic class blobs.

use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::ring::{FixedConfig, FixedTensor};
use crate::sharing::seeded_rng;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Images as fixed-point tensors `[m, C, H, W]` with class labels.
/// Labels stay with the client; no server-bound message is built from them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub images: FixedTensor,
    pub labels: Vec<u8>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: FixedTensor, labels: Vec<u8>, classes: usize) -> Result<Self> {
        if images.shape().len() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::ShapeMismatch(format!("{:?} images for {} labels", images.shape(), labels.len())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::ShapeMismatch(format!("label {} with {} classes", l, classes)));
        }
        Ok(Self { images, labels, classes })
    }

    pub fn empty(cfg: FixedConfig, sample_shape: &[usize], classes: usize) -> Self {
        let mut shape = vec![0];
        shape.extend_from_slice(sample_shape);
        Self { images: FixedTensor::zeros(cfg, shape), labels: Vec::new(), classes }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn cfg(&self) -> FixedConfig {
        self.images.cfg()
    }

    /// Per-sample shape `[C, H, W]`.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// The first `n` samples.
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let per: usize = self.sample_shape().iter().product();
        let mut shape = self.images.shape().to_vec();
        shape[0] = n;
        let images = FixedTensor::new(self.cfg(), shape, self.images.data()[..n * per].to_vec()).expect("prefix");
        Dataset { images, labels: self.labels[..n].to_vec(), classes: self.classes }
    }

    /// Gathers samples by index into a batch.
    pub fn batch(&self, idx: &[usize]) -> (FixedTensor, Vec<u8>) {
        let per: usize = self.sample_shape().iter().product();
        let src = self.images.data();
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&src[i * per..(i + 1) * per]);
        }
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(self.sample_shape());
        let images = FixedTensor::new(self.cfg(), shape, data).expect("gathered rows");
        (images, idx.iter().map(|&i| self.labels[i]).collect())
    }

    /// The same samples under another ring configuration.
    pub fn with_config(&self, cfg: FixedConfig) -> Result<Dataset> {
        if cfg == self.cfg() {
            return Ok(self.clone());
        }
        let values = self.images.to_f64();
        let images = FixedTensor::from_f64(cfg, self.images.shape().to_vec(), &values)?;
        Ok(Dataset { images, labels: self.labels.clone(), classes: self.classes })
    }
}

/// One-hot rows `[B, classes]` encoded at `cfg`.
pub fn one_hot(labels: &[u8], classes: usize, cfg: FixedConfig) -> FixedTensor {
    let one = cfg.encode_raw(1.0).expect("1.0 is representable");
    let mut data = vec![0u64; labels.len() * classes];
    for (row, &l) in labels.iter().enumerate() {
        data[row * classes + l as usize] = one;
    }
    FixedTensor::new(cfg, vec![labels.len(), classes], data).expect("one-hot shape")
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::TruncatedFile(format!("{} header", what)))
}

/// Parses an IDX image file into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0, "image")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic { found: magic, expected: IDX_IMAGES_MAGIC });
    }
    let n = be_u32(bytes, 4, "image")? as usize;
    let rows = be_u32(bytes, 8, "image")? as usize;
    let cols = be_u32(bytes, 12, "image")? as usize;
    let body = &bytes[16..];
    if body.len() < n * rows * cols {
        return Err(Error::TruncatedFile(format!("{} images of {}x{} need {} bytes, found {}", n, rows, cols, n * rows * cols, body.len())));
    }
    Ok((n, rows, cols, &body[..n * rows * cols]))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0, "label")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic { found: magic, expected: IDX_LABELS_MAGIC });
    }
    let n = be_u32(bytes, 4, "label")? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::TruncatedFile(format!("{} labels, found {} bytes", n, body.len())));
    }
    Ok(&body[..n])
}

/// Builds a dataset from IDX bytes; pixels are scaled to `[0, 1]` and
/// encoded. `limit` keeps the first samples.
pub fn dataset_from_idx(images: &[u8], labels: &[u8], limit: Option<usize>, cfg: FixedConfig) -> Result<Dataset> {
    let (n, rows, cols, pixels) = parse_idx_images(images)?;
    let labels = parse_idx_labels(labels)?;
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!("{} images but {} labels", n, labels.len())));
    }
    let m = limit.map_or(n, |l| l.min(n));
    let per = rows * cols;
    let lut: Vec<u64> = (0..256).map(|p| cfg.encode_raw(p as f64 / 255.0)).collect::<Result<_>>()?;
    let data = pixels[..m * per].iter().map(|&p| lut[p as usize]).collect();
    let images = FixedTensor::new(cfg, vec![m, 1, rows, cols], data)?;
    Dataset::new(images, labels[..m].to_vec(), 10)
}

pub fn load_idx(images: &Path, labels: &Path, limit: Option<usize>, cfg: FixedConfig) -> Result<Dataset> {
    dataset_from_idx(&std::fs::read(images)?, &std::fs::read(labels)?, limit, cfg)
}

/// Class-separable blobs: each class has a random prototype image in
/// `[0, 1]`, and samples add uniform noise of ±0.3, clamped to `[0, 1]`.
pub fn gen_synthetic(n: usize, shape: &[usize], classes: usize, seed: u64, cfg: FixedConfig) -> Result<Dataset> {
    let classes = classes.max(1);
    let per: usize = shape.iter().product();
    let mut rng = seeded_rng(seed, 0);
    let protos: Vec<Vec<f64>> = (0..classes).map(|_| (0..per).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
    let mut values = Vec::with_capacity(n * per);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let c = rng.gen_range(0..classes);
        labels.push(c as u8);
        values.extend(protos[c].iter().map(|&p| (p + rng.gen_range(-0.3..0.3)).clamp(0.0, 1.0)));
    }
    let mut full = vec![n];
    full.extend_from_slice(shape);
    Dataset::new(FixedTensor::from_f64(cfg, full, &values)?, labels, classes)
}
