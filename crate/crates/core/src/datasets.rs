//! Image datasets: MNIST IDX files, CIFAR-10 binary batches, and a synthetic
//! multi-mode source for desk-scale runs.
//!
//! Loaders keep pixels in `[0, 1]` (`byte / 255`); the GAN boundary converts
//! to `[-1, 1]` with [`LabeledDataset::to_signed`].

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub const MNIST_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const MNIST_LABEL_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD_LEN: usize = 1 + 3 * 32 * 32;
const BATCH_STREAM: u64 = 0xba7c_0000;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad IDX magic: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("IDX dimensions {dims:?} do not describe {what}")]
    Dimensions { what: &'static str, dims: Vec<u32> },
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("CIFAR-10 file length {len} is not a multiple of {CIFAR_RECORD_LEN}")]
    CifarLength { len: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("empty dataset")]
    Empty,
    #[error("dataset shape {shape:?} cannot be written as {format}")]
    Unwritable {
        format: &'static str,
        shape: Vec<usize>,
    },
    #[error("synthetic templates too close: min distance {min_distance} must exceed 4 x noise std {noise_std}")]
    Separation { min_distance: f64, noise_std: f64 },
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
    #[error("batch size {batch_size} outside 1..={n}")]
    BatchSize { batch_size: usize, n: usize },
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Real,
    Generated,
}

/// Declared pixel range of a dataset's image tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueRange {
    /// `[0, 1]`
    Raw01,
    /// `[-1, 1]`
    Signed11,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    /// `[N, C, H, W]`
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub provenance: Provenance,
    pub range: ValueRange,
}

impl LabeledDataset {
    pub fn new(
        images: Tensor,
        labels: Vec<usize>,
        classes: usize,
        provenance: Provenance,
        range: ValueRange,
    ) -> Result<Self> {
        if images.ndim() != 4 || labels.is_empty() {
            return Err(DataError::Empty);
        }
        if images.shape()[0] != labels.len() {
            return Err(DataError::CountMismatch {
                images: images.shape()[0],
                labels: labels.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(DataError::LabelOutOfRange { label, classes });
        }
        Ok(LabeledDataset {
            images,
            labels,
            classes,
            provenance,
            range,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)`
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let images = self
            .images
            .select_rows(indices)
            .map_err(|_| DataError::Empty)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok(LabeledDataset {
            images,
            labels,
            classes: self.classes,
            provenance: self.provenance,
            range: self.range,
        })
    }

    /// Images rescaled to `[-1, 1]`.
    pub fn to_signed(&self) -> Tensor {
        match self.range {
            ValueRange::Signed11 => self.images.clone(),
            ValueRange::Raw01 => self.images.map(|v| 2.0 * v - 1.0),
        }
    }

    /// Images rescaled to `[0, 1]`.
    pub fn to_raw(&self) -> Tensor {
        match self.range {
            ValueRange::Raw01 => self.images.clone(),
            ValueRange::Signed11 => self.images.map(|v| (v + 1.0) / 2.0),
        }
    }

    /// Count of samples per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        self.labels.iter().for_each(|&l| counts[l] += 1);
        counts
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(bytes).map_err(io)
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or(DataError::Truncated {
            expected: at + 4,
            found: bytes.len(),
        })
}

/// Parses an IDX file with the given magic; returns `(dims, payload)`.
fn parse_idx(bytes: &[u8], magic: u32) -> Result<(Vec<u32>, &[u8])> {
    let found = be_u32(bytes, 0)?;
    if found != magic {
        return Err(DataError::BadMagic {
            expected: magic,
            found,
        });
    }
    let ndim = (magic & 0xff) as usize;
    let dims = (0..ndim)
        .map(|d| be_u32(bytes, 4 + 4 * d))
        .collect::<Result<Vec<_>>>()?;
    let header = 4 + 4 * ndim;
    let expected = header + dims.iter().map(|&d| d as usize).product::<usize>();
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    Ok((dims, &bytes[header..expected]))
}

fn scale_bytes(bytes: &[u8]) -> Vec<f64> {
    bytes.iter().map(|&b| f64::from(b) / 255.0).collect()
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Decodes in-memory IDX image and label files.
pub fn parse_mnist(image_bytes: &[u8], label_bytes: &[u8]) -> Result<LabeledDataset> {
    let (dims, pixels) = parse_idx(image_bytes, MNIST_IMAGE_MAGIC)?;
    let &[n, h, w] = dims.as_slice() else {
        return Err(DataError::Dimensions {
            what: "images [N, H, W]",
            dims,
        });
    };
    let (ldims, labels) = parse_idx(label_bytes, MNIST_LABEL_MAGIC)?;
    if ldims.len() != 1 {
        return Err(DataError::Dimensions {
            what: "labels [N]",
            dims: ldims,
        });
    }
    if ldims[0] != n {
        return Err(DataError::CountMismatch {
            images: n as usize,
            labels: ldims[0] as usize,
        });
    }
    if n == 0 || h == 0 || w == 0 {
        return Err(DataError::Empty);
    }
    let shape = vec![n as usize, 1, h as usize, w as usize];
    let images = Tensor::new(shape, scale_bytes(pixels)).expect("IDX payload sized by header");
    let labels = labels.iter().map(|&l| usize::from(l)).collect();
    LabeledDataset::new(images, labels, 10, Provenance::Real, ValueRange::Raw01)
}

/// Reads an MNIST image/label IDX pair (uncompressed).
pub fn load_mnist_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<LabeledDataset> {
    parse_mnist(&read(images_path.as_ref())?, &read(labels_path.as_ref())?)
}

/// Encodes a single-channel dataset as an IDX image/label pair.
pub fn encode_mnist(ds: &LabeledDataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let [c, h, w] = ds.image_shape();
    if c != 1 || ds.labels.iter().any(|&l| l > 255) {
        return Err(DataError::Unwritable {
            format: "IDX",
            shape: ds.images.shape().to_vec(),
        });
    }
    let n = ds.len() as u32;
    let mut img = Vec::with_capacity(16 + ds.images.len());
    for v in [MNIST_IMAGE_MAGIC, n, h as u32, w as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(ds.to_raw().data().iter().map(|&v| to_byte(v)));
    let mut lab = Vec::with_capacity(8 + ds.len());
    lab.extend_from_slice(&MNIST_LABEL_MAGIC.to_be_bytes());
    lab.extend_from_slice(&n.to_be_bytes());
    lab.extend(ds.labels.iter().map(|&l| l as u8));
    Ok((img, lab))
}

pub fn write_mnist_idx(
    ds: &LabeledDataset,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    let (img, lab) = encode_mnist(ds)?;
    write(images_path.as_ref(), &img)?;
    write(labels_path.as_ref(), &lab)
}

/// Decodes CIFAR-10 binary records: one label byte then 3072 pixel bytes
/// (R plane, G plane, B plane; each 32×32 row-major).
pub fn parse_cifar10(bytes: &[u8]) -> Result<(Vec<f64>, Vec<usize>)> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD_LEN) {
        return Err(DataError::CifarLength { len: bytes.len() });
    }
    let n = bytes.len() / CIFAR_RECORD_LEN;
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD_LEN - 1));
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(CIFAR_RECORD_LEN) {
        let label = usize::from(rec[0]);
        if label > 9 {
            return Err(DataError::LabelOutOfRange { label, classes: 10 });
        }
        labels.push(label);
        pixels.extend(scale_bytes(&rec[1..]));
    }
    Ok((pixels, labels))
}

/// Reads and concatenates CIFAR-10 binary batch files.
pub fn load_cifar10_binary<P: AsRef<Path>>(batch_paths: &[P]) -> Result<LabeledDataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for p in batch_paths {
        let (px, lb) = parse_cifar10(&read(p.as_ref())?)?;
        pixels.extend(px);
        labels.extend(lb);
    }
    if labels.is_empty() {
        return Err(DataError::Empty);
    }
    let images = Tensor::new(vec![labels.len(), 3, 32, 32], pixels).expect("record-sized payload");
    LabeledDataset::new(images, labels, 10, Provenance::Real, ValueRange::Raw01)
}

pub fn encode_cifar10(ds: &LabeledDataset) -> Result<Vec<u8>> {
    if ds.image_shape() != [3, 32, 32] || ds.labels.iter().any(|&l| l > 9) {
        return Err(DataError::Unwritable {
            format: "CIFAR-10",
            shape: ds.images.shape().to_vec(),
        });
    }
    let raw = ds.to_raw();
    let mut out = Vec::with_capacity(ds.len() * CIFAR_RECORD_LEN);
    for (i, &label) in ds.labels.iter().enumerate() {
        out.push(label as u8);
        out.extend(raw.data()[i * 3072..][..3072].iter().map(|&v| to_byte(v)));
    }
    Ok(out)
}

pub fn write_cifar10_binary(ds: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), &encode_cifar10(ds)?)
}

/// A small multi-mode image distribution: each mode is a fixed binary
/// template plus clamped Gaussian pixel noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub height: usize,
    pub width: usize,
    pub modes: usize,
    pub noise_std: f64,
    pub samples_per_mode: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            height: 8,
            width: 8,
            modes: 2,
            noise_std: 0.1,
            samples_per_mode: 500,
        }
    }
}

impl SyntheticSpec {
    /// One `[H·W]` template per mode, pixel values in `{0, 1}`.
    ///
    /// Modes 0–3 are a vertical bar, a horizontal bar, the main diagonal band
    /// and the anti-diagonal band; later modes are fixed pseudo-random masks.
    pub fn templates(&self) -> Vec<Vec<f64>> {
        let (h, w) = (self.height, self.width);
        let bar_w = (w / 4).max(1);
        let bar_h = (h / 4).max(1);
        (0..self.modes)
            .map(|m| {
                let mut mask_rng = SeededRng::with_stream(0x5eed_7e3a, m as u64);
                (0..h * w)
                    .map(|p| {
                        let (r, c) = (p / w, p % w);
                        // scale positions so diagonals work for non-square images
                        let (rf, cf) = (r as f64 / h as f64, c as f64 / w as f64);
                        let on = match m {
                            0 => c >= (w - bar_w) / 2 && c < (w - bar_w) / 2 + bar_w,
                            1 => r >= (h - bar_h) / 2 && r < (h - bar_h) / 2 + bar_h,
                            2 => (rf - cf).abs() < 0.2,
                            3 => (rf + cf - 1.0 + 1.0 / w as f64).abs() < 0.2,
                            _ => mask_rng.uniform() < 0.5,
                        };
                        f64::from(u8::from(on))
                    })
                    .collect()
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.modes < 2 {
            return Err(DataError::Spec(format!(
                "need at least 2 modes, got {}",
                self.modes
            )));
        }
        if self.height == 0 || self.width == 0 || self.samples_per_mode == 0 {
            return Err(DataError::Spec(
                "image size and samples per mode must be positive".into(),
            ));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(DataError::Spec(format!(
                "noise std {} must be finite and non-negative",
                self.noise_std
            )));
        }
        let t = self.templates();
        let mut min_distance = f64::INFINITY;
        for a in 0..t.len() {
            for b in a + 1..t.len() {
                let d = t[a]
                    .iter()
                    .zip(&t[b])
                    .map(|(x, y)| (x - y).powi(2))
                    .sum::<f64>()
                    .sqrt();
                min_distance = min_distance.min(d);
            }
        }
        if min_distance <= 4.0 * self.noise_std || min_distance == 0.0 {
            return Err(DataError::Separation {
                min_distance,
                noise_std: self.noise_std,
            });
        }
        Ok(())
    }
}

/// Samples `modes × samples_per_mode` images, grouped by mode, in `[0, 1]`.
pub fn make_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<LabeledDataset> {
    spec.validate()?;
    let templates = spec.templates();
    let mut rng = SeededRng::new(seed);
    let px = spec.height * spec.width;
    let n = spec.modes * spec.samples_per_mode;
    let mut data = Vec::with_capacity(n * px);
    let mut labels = Vec::with_capacity(n);
    for (m, t) in templates.iter().enumerate() {
        for _ in 0..spec.samples_per_mode {
            data.extend(
                t.iter()
                    .map(|&v| (v + spec.noise_std * rng.normal()).clamp(0.0, 1.0)),
            );
            labels.push(m);
        }
    }
    let images = Tensor::new(vec![n, 1, spec.height, spec.width], data).expect("sized by spec");
    LabeledDataset::new(
        images,
        labels,
        spec.modes,
        Provenance::Real,
        ValueRange::Raw01,
    )
}

/// Index of the template nearest (in L2) to a flattened `[0, 1]` image.
pub fn nearest_template(image: &[f64], templates: &[Vec<f64>]) -> usize {
    let dist = |t: &Vec<f64>| {
        t.iter()
            .zip(image)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
    };
    templates
        .iter()
        .enumerate()
        .min_by(|a, b| dist(a.1).total_cmp(&dist(b.1)))
        .map(|(i, _)| i)
        .expect("at least one template")
}

/// Mini-batches of indices for one epoch. The permutation depends only on
/// `(seed, epoch)`; the trailing partial batch is dropped.
pub fn batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 || batch_size > n {
        return Err(DataError::BatchSize { batch_size, n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    SeededRng::with_stream(seed ^ BATCH_STREAM, epoch).shuffle(&mut order);
    Ok(order
        .chunks_exact(batch_size)
        .map(<[usize]>::to_vec)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_fixture() -> (Vec<u8>, Vec<u8>) {
        let mut img = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 3];
        img.extend_from_slice(&[0, 255, 51, 102, 204, 1, 10, 20, 30, 40, 50, 60]);
        let lab = vec![0, 0, 8, 1, 0, 0, 0, 2, 7, 3];
        (img, lab)
    }

    #[test]
    fn parses_hand_built_idx() {
        let (img, lab) = idx_fixture();
        let ds = parse_mnist(&img, &lab).unwrap();
        assert_eq!(ds.images.shape(), &[2, 1, 2, 3]);
        assert_eq!(ds.labels, vec![7, 3]);
        let want = [
            0.0,
            1.0,
            0.2,
            0.4,
            0.8,
            1.0 / 255.0,
            10.0 / 255.0,
            20.0 / 255.0,
            30.0 / 255.0,
            40.0 / 255.0,
            50.0 / 255.0,
            60.0 / 255.0,
        ];
        for (a, b) in ds.images.data().iter().zip(want) {
            assert_eq!(*a, b);
        }
    }

    #[test]
    fn idx_errors_are_distinct() {
        let (img, lab) = idx_fixture();
        let mut bad = img.clone();
        bad[3] = 4;
        assert!(matches!(
            parse_mnist(&bad, &lab),
            Err(DataError::BadMagic { found: 0x804, .. })
        ));
        let short = &img[..img.len() - 1];
        assert!(matches!(
            parse_mnist(short, &lab),
            Err(DataError::Truncated { .. })
        ));
        let mut lab3 = lab.clone();
        lab3[7] = 3;
        lab3.push(1);
        let err = parse_mnist(&img, &lab3).unwrap_err();
        assert!(matches!(
            err,
            DataError::CountMismatch {
                images: 2,
                labels: 3
            }
        ));
        assert!(err.to_string().contains('2') && err.to_string().contains('3'));
        // a 2-d "image" file carries the wrong magic
        let two_d = [0u8, 0, 8, 2, 0, 0, 0, 1, 0, 0, 0, 1, 9];
        assert!(matches!(
            parse_mnist(&two_d, &lab),
            Err(DataError::BadMagic { .. })
        ));
    }

    #[test]
    fn cifar_framing() {
        let mut rec = vec![0u8; CIFAR_RECORD_LEN];
        rec[0] = 9;
        rec[1] = 255; // R(0,0)
        rec[1 + 1024] = 51; // G(0,0)
        rec[1 + 2048 + 33] = 102; // B(1,1)
        let (px, labels) = parse_cifar10(&rec).unwrap();
        assert_eq!(labels, vec![9]);
        assert_eq!(px[0], 1.0);
        assert_eq!(px[1024], 0.2);
        assert_eq!(px[2048 + 32 + 1], 0.4);
        assert_eq!(px.iter().filter(|&&v| v != 0.0).count(), 3);

        let five: Vec<u8> = rec
            .iter()
            .cycle()
            .take(5 * CIFAR_RECORD_LEN)
            .copied()
            .collect();
        assert_eq!(parse_cifar10(&five).unwrap().1.len(), 5);

        let mut long = rec.clone();
        long.push(0);
        assert!(matches!(
            parse_cifar10(&long),
            Err(DataError::CifarLength { len: 3074 })
        ));
        rec[0] = 10;
        assert!(matches!(
            parse_cifar10(&rec),
            Err(DataError::LabelOutOfRange { label: 10, .. })
        ));
    }

    #[test]
    fn synthetic_noiseless_equals_templates() {
        let spec = SyntheticSpec {
            noise_std: 0.0,
            samples_per_mode: 3,
            ..Default::default()
        };
        let ds = make_synthetic(&spec, 1).unwrap();
        let t = spec.templates();
        for (i, &l) in ds.labels.iter().enumerate() {
            assert_eq!(&ds.images.data()[i * 64..(i + 1) * 64], t[l].as_slice());
        }
    }

    #[test]
    fn synthetic_modes_recoverable_and_deterministic() {
        let spec = SyntheticSpec::default();
        let ds = make_synthetic(&spec, 42).unwrap();
        assert_eq!(ds.len(), 1000);
        let t = spec.templates();
        for (i, &l) in ds.labels.iter().enumerate() {
            assert_eq!(
                nearest_template(&ds.images.data()[i * 64..(i + 1) * 64], &t),
                l
            );
        }
        assert_eq!(ds, make_synthetic(&spec, 42).unwrap());
        assert!(ds.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn synthetic_rejects_overlapping_templates() {
        let spec = SyntheticSpec {
            noise_std: 2.0,
            ..Default::default()
        };
        assert!(matches!(
            make_synthetic(&spec, 0),
            Err(DataError::Separation { .. })
        ));
        let spec = SyntheticSpec {
            modes: 1,
            ..Default::default()
        };
        assert!(make_synthetic(&spec, 0).is_err());
        for modes in 2..=6 {
            SyntheticSpec {
                modes,
                noise_std: 0.05,
                ..Default::default()
            }
            .validate()
            .unwrap();
        }
    }

    #[test]
    fn batching_rules() {
        let full = batches(10, 10, 3, 0).unwrap();
        assert_eq!(full.len(), 1);
        let mut all = full[0].clone();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());

        let b = batches(10, 3, 3, 0).unwrap();
        assert_eq!(b.len(), 3);
        let mut seen: Vec<usize> = b.concat();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 9);

        assert_eq!(batches(10, 3, 3, 0).unwrap(), b);
        assert_ne!(batches(10, 10, 3, 1).unwrap(), full);
        assert!(batches(10, 0, 3, 0).is_err());
        assert!(batches(10, 11, 3, 0).is_err());
    }

    #[test]
    fn range_conversion_is_linear() {
        let (img, lab) = idx_fixture();
        let ds = parse_mnist(&img, &lab).unwrap();
        let s = ds.to_signed();
        assert_eq!(s.data()[0], -1.0);
        assert_eq!(s.data()[1], 1.0);
    }
}
