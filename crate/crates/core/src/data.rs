//! Labeled image datasets: the CIFAR binary format, CIFAR augmentation,
//! channel normalization and seeded synthetic data.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Shape, Tensor};

pub const DATA_DIR_ENV: &str = "FINEGRAIN_DATA_DIR";
pub const CIFAR_SIDE: usize = 32;
const PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Images `(n, c, h, w)` with one class index per image.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if images.shape().n != labels.len() {
            return Err(Error::shape(format!("{} images but {} labels", images.shape().n, labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::config(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Dataset { images, labels, classes, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Shape of one image as `(c, h, w)`.
    pub fn image_dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s.c, s.h, s.w)
    }

    /// Gathers the listed samples into a batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let (c, h, w) = self.image_dims();
        let mut data = Vec::with_capacity(indices.len() * c * h * w);
        for &i in indices {
            data.extend_from_slice(self.images.sample(i));
        }
        let images = Tensor::from_vec((indices.len(), c, h, w), data).expect("batch shape is consistent");
        (images, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// The first `n` samples (all of them when `n ≥ len`).
    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let (images, labels) = self.batch(&idx);
        Dataset { images, labels, classes: self.classes, split: self.split }
    }

    /// Consecutive index batches, shuffled when an rng is given.
    pub fn batches(&self, batch_size: usize, rng: Option<&mut Rng>) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        if let Some(rng) = rng {
            rng.shuffle(&mut order);
        }
        order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
    }
}

/// Resolves the data directory: explicit flag, then `FINEGRAIN_DATA_DIR`.
pub fn data_dir(flag: Option<&Path>) -> Option<PathBuf> {
    flag.map(Path::to_path_buf).or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
}

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), msg: msg.into() }
}

/// Parses one CIFAR binary file. Each record is `label_bytes` label bytes (the
/// last one is used) followed by 3072 pixel bytes, planes R, G, B, row-major.
/// Pixels are scaled to `[0, 1]`.
pub fn parse_cifar_file(path: &Path, label_bytes: usize, classes: usize) -> Result<(Vec<f32>, Vec<usize>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let record = label_bytes + PIXELS;
    if bytes.len() % record != 0 {
        return Err(format_err(
            path,
            format!("record {} truncated: file has {} bytes, not a multiple of {record}", bytes.len() / record, bytes.len()),
        ));
    }
    let n = bytes.len() / record;
    let mut pixels = Vec::with_capacity(n * PIXELS);
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(record).enumerate() {
        let label = rec[label_bytes - 1] as usize;
        if label >= classes {
            return Err(format_err(path, format!("record {i}: label {label} exceeds {}", classes - 1)));
        }
        labels.push(label);
        pixels.extend(rec[label_bytes..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok((pixels, labels))
}

fn resolve(dir: &Path, nested: &str, file: &str) -> PathBuf {
    let inner = dir.join(nested).join(file);
    if inner.exists() {
        inner
    } else {
        dir.join(file)
    }
}

fn load_files(files: Vec<PathBuf>, label_bytes: usize, classes: usize, split: Split) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for f in &files {
        let (p, l) = parse_cifar_file(f, label_bytes, classes)?;
        pixels.extend(p);
        labels.extend(l);
    }
    let images = Tensor::from_vec((labels.len(), 3, CIFAR_SIDE, CIFAR_SIDE), pixels)?;
    Dataset::new(images, labels, classes, split)
}

/// CIFAR-10 from `data_batch_{1..5}.bin` / `test_batch.bin`, either directly in
/// `dir` or under `dir/cifar-10-batches-bin`.
pub fn load_cifar10(dir: &Path, split: Split) -> Result<Dataset> {
    let names: Vec<String> = match split {
        Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        Split::Test => vec!["test_batch.bin".into()],
    };
    let files = names.iter().map(|n| resolve(dir, "cifar-10-batches-bin", n)).collect();
    load_files(files, 1, 10, split)
}

/// CIFAR-100 (fine labels) from `train.bin` / `test.bin`, either directly in
/// `dir` or under `dir/cifar-100-binary`.
pub fn load_cifar100(dir: &Path, split: Split) -> Result<Dataset> {
    let name = match split {
        Split::Train => "train.bin",
        Split::Test => "test.bin",
    };
    load_files(vec![resolve(dir, "cifar-100-binary", name)], 2, 100, split)
}

/// True when `dir` holds a complete CIFAR-10 binary distribution.
pub fn has_cifar10(dir: &Path) -> bool {
    let mut names: Vec<String> = (1..=5).map(|i| format!("data_batch_{i}.bin")).collect();
    names.push("test_batch.bin".into());
    names.iter().all(|n| resolve(dir, "cifar-10-batches-bin", n).is_file())
}

/// Writes `ds` (3×32×32 images with values in `[0, 1]`) in the CIFAR-10 record
/// format.
pub fn write_cifar10(ds: &Dataset, path: &Path) -> Result<()> {
    if ds.image_dims() != (3, CIFAR_SIDE, CIFAR_SIDE) {
        return Err(Error::shape(format!("CIFAR records hold 3x32x32 images, got {:?}", ds.image_dims())));
    }
    let mut out = Vec::with_capacity(ds.len() * (PIXELS + 1));
    for (i, &label) in ds.labels.iter().enumerate() {
        if label > 255 {
            return Err(Error::config(format!("label {label} does not fit in a byte")));
        }
        out.push(label as u8);
        out.extend(ds.images.sample(i).iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Pads one image by 2 zeros on each side and crops the window at
/// `(dy, dx)` ∈ `[0, 4]²`, optionally mirrored horizontally.
pub fn crop_flip(img: &[f32], dims: (usize, usize, usize), dy: usize, dx: usize, flip: bool) -> Vec<f32> {
    let (c, h, w) = dims;
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + dy) as isize - 2;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let ox = if flip { w - 1 - x } else { x };
                let sx = (ox + dx) as isize - 2;
                if sx >= 0 && sx < w as isize {
                    out[(ch * h + y) * w + x] = img[(ch * h + sy as usize) * w + sx as usize];
                }
            }
        }
    }
    out
}

/// Random 2-pixel-padded crop and horizontal flip with probability ½ applied
/// independently to each image of a batch.
pub fn augment_cifar(images: &Tensor<f32>, rng: &mut Rng) -> Tensor<f32> {
    let s = images.shape();
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        let dy = rng.below(5) as usize;
        let dx = rng.below(5) as usize;
        let flip = rng.bernoulli(0.5);
        out.sample_mut(n).copy_from_slice(&crop_flip(images.sample(n), (s.c, s.h, s.w), dy, dx, flip));
    }
    out
}

/// Per-channel mean and population standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn from_dataset(ds: &Dataset) -> Result<Self> {
        let s = ds.images.shape();
        if s.n == 0 {
            return Err(Error::Numeric("cannot compute channel statistics of an empty dataset".into()));
        }
        let count = (s.n * s.plane()) as f64;
        let mut mean = vec![0.0; s.c];
        let mut std = vec![0.0; s.c];
        for c in 0..s.c {
            let m = (0..s.n).flat_map(|n| ds.images.plane(n, c)).map(|&v| v as f64).sum::<f64>() / count;
            let var = (0..s.n).flat_map(|n| ds.images.plane(n, c)).map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / count;
            if var <= 0.0 {
                return Err(Error::Numeric(format!("channel {c} has zero standard deviation")));
            }
            mean[c] = m;
            std[c] = var.sqrt();
        }
        Ok(ChannelStats { mean, std })
    }

    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        let s = ds.images.shape();
        if s.c != self.mean.len() {
            return Err(Error::shape(format!("statistics for {} channels applied to {s}", self.mean.len())));
        }
        let mut images = ds.images.clone();
        for n in 0..s.n {
            for c in 0..s.c {
                let (m, sd) = (self.mean[c], self.std[c]);
                images.plane_mut(n, c).iter_mut().for_each(|v| *v = ((*v as f64 - m) / sd) as f32);
            }
        }
        Ok(Dataset { images, ..ds.clone() })
    }
}

/// Normalizes a training split with its own statistics, returned for reuse on
/// other splits.
pub fn normalize_channels(train: &Dataset) -> Result<(Dataset, ChannelStats)> {
    let stats = ChannelStats::from_dataset(train)?;
    Ok((stats.apply(train)?, stats))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    /// One Gaussian cluster per class; centers are N(0, 1) per element and the
    /// within-class noise has σ = 0.1.
    GaussianBlobs,
    /// Labels are `argmax_k w_k·x` for random `w_k`, keeping only points whose
    /// top two scores differ by at least 0.1·‖x‖.
    LinearlySeparable,
}

impl std::str::FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" | "gaussian_blobs" => Ok(SyntheticKind::GaussianBlobs),
            "separable" | "linearly_separable" => Ok(SyntheticKind::LinearlySeparable),
            _ => Err(Error::config(format!("unknown synthetic dataset {s:?}"))),
        }
    }
}

/// Seeded synthetic 3×32×32 dataset.
pub fn synthetic_dataset(kind: SyntheticKind, n: usize, classes: usize, seed: u64) -> Result<Dataset> {
    synthetic_dataset_with_dims(kind, n, classes, (3, CIFAR_SIDE, CIFAR_SIDE), seed)
}

pub fn synthetic_dataset_with_dims(
    kind: SyntheticKind,
    n: usize,
    classes: usize,
    dims: (usize, usize, usize),
    seed: u64,
) -> Result<Dataset> {
    if classes == 0 {
        return Err(Error::config("synthetic dataset needs at least one class"));
    }
    let (c, h, w) = dims;
    let d = c * h * w;
    let mut rng = Rng::new(seed);
    let mut proto_rng = rng.fork(1);
    let protos: Vec<Vec<f64>> = (0..classes).map(|_| (0..d).map(|_| proto_rng.gaussian(0.0, 1.0)).collect()).collect();
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    while labels.len() < n {
        match kind {
            SyntheticKind::GaussianBlobs => {
                let label = rng.below(classes as u64) as usize;
                data.extend(protos[label].iter().map(|&m| (m + rng.gaussian(0.0, 0.1)) as f32));
                labels.push(label);
            }
            SyntheticKind::LinearlySeparable => {
                let x: Vec<f64> = (0..d).map(|_| rng.gaussian(0.0, 1.0)).collect();
                let mut scores: Vec<(f64, usize)> =
                    protos.iter().enumerate().map(|(k, p)| (p.iter().zip(&x).map(|(a, b)| a * b).sum(), k)).collect();
                scores.sort_by(|a, b| b.0.total_cmp(&a.0));
                let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                if classes > 1 && scores[0].0 - scores[1].0 < 0.1 * norm {
                    continue;
                }
                data.extend(x.iter().map(|&v| v as f32));
                labels.push(scores[0].1);
            }
        }
    }
    Dataset::new(Tensor::from_vec(Shape::new(n, c, h, w), data)?, labels, classes, Split::Train)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_record_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let one = dir.path().join("one.bin");
        fs::write(&one, vec![0u8; 3073]).unwrap();
        let (px, labels) = parse_cifar_file(&one, 1, 10).unwrap();
        assert_eq!(labels, vec![0]);
        assert!(px.iter().all(|&v| v == 0.0));

        let short = dir.path().join("short.bin");
        fs::write(&short, vec![0u8; 3072]).unwrap();
        match parse_cifar_file(&short, 1, 10) {
            Err(Error::Format { path, msg }) => {
                assert_eq!(path, short);
                assert!(msg.contains("record 0"));
            }
            other => panic!("{other:?}"),
        }

        let mut bad = vec![0u8; 2 * 3073];
        bad[3073] = 10;
        fs::write(&one, bad).unwrap();
        match parse_cifar_file(&one, 1, 10) {
            Err(Error::Format { msg, .. }) => assert!(msg.contains("record 1")),
            other => panic!("{other:?}"),
        }
        assert!(matches!(load_cifar10(dir.path(), Split::Test), Err(Error::Missing(_))));
    }

    #[test]
    fn crop_identity_and_flip_involution() {
        let mut rng = Rng::new(1);
        let img = Tensor::<f32>::uniform((1, 3, 32, 32), 0.0, 1.0, &mut rng);
        let dims = (3, 32, 32);
        assert_eq!(crop_flip(img.sample(0), dims, 2, 2, false), img.sample(0));
        let once = crop_flip(img.sample(0), dims, 2, 2, true);
        assert_ne!(once, img.sample(0));
        assert_eq!(crop_flip(&once, dims, 2, 2, true), img.sample(0));
        let aug = augment_cifar(&Tensor::<f32>::zeros((5, 3, 32, 32)), &mut rng);
        assert_eq!(aug.shape(), Shape::new(5, 3, 32, 32));
    }

    #[test]
    fn normalization_uses_train_statistics() {
        let train = synthetic_dataset(SyntheticKind::GaussianBlobs, 50, 3, 4).unwrap();
        let (norm, stats) = normalize_channels(&train).unwrap();
        let again = ChannelStats::from_dataset(&norm).unwrap();
        for c in 0..3 {
            assert!(again.mean[c].abs() <= 1e-4);
            assert!((again.std[c] - 1.0).abs() <= 1e-3);
        }
        let mut shifted = train.clone();
        shifted.images = shifted.images.map(|v| v + 5.0);
        let applied = stats.apply(&shifted).unwrap();
        let m = ChannelStats::from_dataset(&applied).unwrap();
        assert!((m.mean[0] - 5.0 / stats.std[0]).abs() < 1e-3);

        let flat = Dataset::new(Tensor::full((4, 3, 2, 2), 0.5), vec![0; 4], 1, Split::Train).unwrap();
        assert!(matches!(normalize_channels(&flat), Err(Error::Numeric(_))));
    }

    #[test]
    fn synthetic_determinism_and_empty() {
        let a = synthetic_dataset(SyntheticKind::LinearlySeparable, 20, 4, 9).unwrap();
        let b = synthetic_dataset(SyntheticKind::LinearlySeparable, 20, 4, 9).unwrap();
        assert_eq!(a, b);
        let empty = synthetic_dataset(SyntheticKind::GaussianBlobs, 0, 4, 9).unwrap();
        assert!(empty.is_empty());
        assert!(empty.batches(8, None).is_empty());
    }

    #[test]
    fn blobs_are_nearest_neighbor_separable() {
        let ds = synthetic_dataset_with_dims(SyntheticKind::GaussianBlobs, 200, 5, (3, 4, 4), 3).unwrap();
        let (train, test) = (ds.take(100), {
            let idx: Vec<usize> = (100..200).collect();
            let (images, labels) = ds.batch(&idx);
            Dataset::new(images, labels, 5, Split::Test).unwrap()
        });
        let mut correct = 0;
        for i in 0..test.len() {
            let q = test.images.sample(i);
            let best = (0..train.len())
                .min_by(|&a, &b| {
                    let d = |j: usize| train.images.sample(j).iter().zip(q).map(|(x, y)| (x - y).powi(2)).sum::<f32>();
                    d(a).total_cmp(&d(b))
                })
                .unwrap();
            correct += usize::from(train.labels[best] == test.labels[i]);
        }
        assert!(correct >= 99, "1-NN accuracy {correct}/100");
    }
}
