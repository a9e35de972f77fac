//! Image-classification datasets in the CIFAR-10 binary layout.
//!
//! A file is a sequence of records, each one label byte followed by
//! `3*R*R` pixel bytes in channel-major (CHW) order. `R` is configurable.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::io::{read_json, write_atomic, write_json_atomic};
use crate::nn::Tensor;
use crate::scalar::Scalar;

pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    images: Vec<u8>,
    labels: Vec<u8>,
    classes: usize,
    resolution: usize,
}

impl Dataset {
    pub fn new(images: Vec<u8>, labels: Vec<u8>, classes: usize, resolution: usize) -> Result<Self> {
        if classes == 0 || classes > 256 {
            return Err(config_err!("class count must be in 1..=256, got {classes}"));
        }
        let rec = CHANNELS * resolution * resolution;
        if images.len() != labels.len() * rec {
            return Err(config_err!(
                "{} pixel bytes for {} records of {rec} bytes",
                images.len(),
                labels.len()
            ));
        }
        if let Some(i) = labels.iter().position(|&l| l as usize >= classes) {
            return Err(Error::Input(format!(
                "record {i} has label {} but there are {classes} classes",
                labels[i]
            )));
        }
        Ok(Self {
            images,
            labels,
            classes,
            resolution,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    /// Bytes per record in the binary file, label included.
    pub fn record_size(&self) -> usize {
        record_size(self.resolution)
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = CHANNELS * self.resolution * self.resolution;
        &self.images[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels.iter().map(|&l| l as usize)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut images = Vec::with_capacity(indices.len() * CHANNELS * self.resolution * self.resolution);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            images,
            labels,
            classes: self.classes,
            resolution: self.resolution,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len() * self.record_size());
        for i in 0..self.len() {
            out.push(self.labels[i]);
            out.extend_from_slice(self.image(i));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], classes: usize, resolution: usize, origin: &Path) -> Result<Self> {
        let rec = record_size(resolution);
        if bytes.len() % rec != 0 {
            return Err(Error::Parse {
                path: origin.to_path_buf(),
                offset: bytes.len() as u64,
                reason: format!("truncated record: file length is not a multiple of {rec}"),
            });
        }
        let n = bytes.len() / rec;
        let mut images = Vec::with_capacity(n * (rec - 1));
        let mut labels = Vec::with_capacity(n);
        for (i, r) in bytes.chunks_exact(rec).enumerate() {
            if r[0] as usize >= classes {
                return Err(Error::Parse {
                    path: origin.to_path_buf(),
                    offset: (i * rec) as u64,
                    reason: format!("record {i} has label {} but there are {classes} classes", r[0]),
                });
            }
            labels.push(r[0]);
            images.extend_from_slice(&r[1..]);
        }
        Dataset::new(images, labels, classes, resolution)
    }
}

pub fn record_size(resolution: usize) -> usize {
    1 + CHANNELS * resolution * resolution
}

pub fn load_binary(path: impl AsRef<Path>, classes: usize, resolution: usize) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Dataset::from_bytes(&bytes, classes, resolution, path)
}

pub fn write_binary(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &dataset.to_bytes())
}

/// Per-channel standardization applied after scaling pixels to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: [0.5; 3],
            std: [0.25; 3],
        }
    }
}

impl Normalization {
    /// Mean and standard deviation of each channel over the dataset.
    pub fn compute(ds: &Dataset) -> Self {
        if ds.is_empty() {
            return Self::default();
        }
        let hw = ds.resolution * ds.resolution;
        let mut sum = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        for i in 0..ds.len() {
            for (c, plane) in ds.image(i).chunks_exact(hw).enumerate() {
                for &p in plane {
                    let v = p as f64 / 255.0;
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
        }
        let n = (ds.len() * hw) as f64;
        let mut mean = [0.0; 3];
        let mut std = [0.0; 3];
        for c in 0..3 {
            mean[c] = sum[c] / n;
            std[c] = (sq[c] / n - mean[c] * mean[c]).max(0.0).sqrt().max(1e-3);
        }
        Self { mean, std }
    }

    pub fn sidecar_path(data_path: &Path) -> PathBuf {
        let mut s = data_path.as_os_str().to_owned();
        s.push(".norm.json");
        PathBuf::from(s)
    }

    /// Reads the sidecar next to `data_path`, or computes and writes it.
    pub fn load_or_compute(data_path: &Path, ds: &Dataset) -> Result<Self> {
        let side = Self::sidecar_path(data_path);
        if side.exists() {
            return read_json(&side);
        }
        let n = Self::compute(ds);
        write_json_atomic(&side, &n)?;
        Ok(n)
    }
}

/// Stratified split fraction and seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { fraction: 0.8, seed: 0 }
    }
}

/// Index sets of a stratified split: within each class, a seeded shuffle
/// puts `round(fraction * count)` items in the first part. Both parts are
/// returned in ascending order.
pub fn split_indices(ds: &Dataset, spec: SplitSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..=1.0).contains(&spec.fraction) {
        return Err(config_err!("split fraction must be in [0, 1], got {}", spec.fraction));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut a = Vec::new();
    let mut b = Vec::new();
    for class in 0..ds.classes {
        let mut idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.label(i) == class).collect();
        idx.shuffle(&mut rng);
        let k = (spec.fraction * idx.len() as f64).round() as usize;
        a.extend_from_slice(&idx[..k]);
        b.extend_from_slice(&idx[k..]);
    }
    a.sort_unstable();
    b.sort_unstable();
    Ok((a, b))
}

pub fn split(ds: &Dataset, spec: SplitSpec) -> Result<(Dataset, Dataset)> {
    let (a, b) = split_indices(ds, spec)?;
    Ok((ds.subset(&a), ds.subset(&b)))
}

/// Procedural class-distinct images: each class is a sinusoidal grating
/// with its own orientation, spatial frequency and color tint. Samples add
/// a small phase jitter, contrast variation and Gaussian pixel noise.
pub fn synth_dataset(classes: usize, per_class: usize, resolution: usize, seed: u64) -> Result<Dataset> {
    if classes < 2 || classes > 256 {
        return Err(config_err!("synthetic dataset needs 2..=256 classes, got {classes}"));
    }
    if resolution == 0 {
        return Err(config_err!("resolution must be > 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.08).expect("valid normal");
    let r = resolution as f64;
    let hw = resolution * resolution;
    let mut images = Vec::with_capacity(classes * per_class * 3 * hw);
    let mut labels = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        let angle = PI * c as f64 / classes as f64;
        let freq = 1.5 + (c % 3) as f64;
        let hue = 2.0 * PI * ((c * 7) % classes) as f64 / classes as f64;
        let tint = [
            0.6 + 0.4 * hue.cos(),
            0.6 + 0.4 * (hue - 2.0 * PI / 3.0).cos(),
            0.6 + 0.4 * (hue + 2.0 * PI / 3.0).cos(),
        ];
        let (ca, sa) = (angle.cos(), angle.sin());
        for _ in 0..per_class {
            let phase = rng.random_range(-0.5..0.5);
            let contrast = rng.random_range(0.3..0.45);
            for t in tint {
                for y in 0..resolution {
                    for x in 0..resolution {
                        let u = (x as f64 * ca + y as f64 * sa) / r;
                        let v = 0.5 + contrast * t * (2.0 * PI * freq * u + phase).sin() + noise.sample(&mut rng);
                        images.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                    }
                }
            }
            labels.push(c as u8);
        }
    }
    Dataset::new(images, labels, classes, resolution)
}

/// Training-time augmentation: horizontal flip with probability `flip_p`
/// and a random crop after zero-padding by `pad` pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augment {
    pub flip_p: f64,
    pub pad: usize,
}

impl Augment {
    pub fn train() -> Self {
        Self { flip_p: 0.5, pad: 4 }
    }

    /// Identity.
    pub fn eval() -> Self {
        Self { flip_p: 0.0, pad: 0 }
    }

    /// Augments every image of an `[N, C, H, W]` batch in place.
    pub fn apply<S: Scalar, R: Rng + ?Sized>(&self, batch: &mut Tensor<S>, rng: &mut R) {
        if self.flip_p <= 0.0 && self.pad == 0 {
            return;
        }
        let (n, c, h, w) = batch.dims4();
        let per = c * h * w;
        let data = batch.data_mut();
        let mut scratch = vec![S::zero(); per];
        for img in data.chunks_exact_mut(per).take(n) {
            if self.flip_p > 0.0 && rng.random::<f64>() < self.flip_p {
                flip_horizontal(img, c, h, w);
            }
            if self.pad > 0 {
                let p = self.pad as i64;
                let dy = rng.random_range(-p..=p) as isize;
                let dx = rng.random_range(-p..=p) as isize;
                shift_with_zeros(img, &mut scratch, c, h, w, dy, dx);
            }
        }
    }
}

pub fn flip_horizontal<S: Copy>(img: &mut [S], c: usize, h: usize, w: usize) {
    for row in img.chunks_exact_mut(w).take(c * h) {
        row.reverse();
    }
}

/// Equivalent to zero-padding and cropping at offset `(pad+dy, pad+dx)`:
/// output pixel `(y, x)` reads input `(y+dy, x+dx)` or zero outside.
pub fn shift_with_zeros<S: Scalar>(img: &mut [S], scratch: &mut [S], c: usize, h: usize, w: usize, dy: isize, dx: isize) {
    scratch.copy_from_slice(img);
    for ch in 0..c {
        for y in 0..h {
            let sy = y as isize + dy;
            for x in 0..w {
                let sx = x as isize + dx;
                let v = if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                    scratch[(ch * h + sy as usize) * w + sx as usize]
                } else {
                    S::zero()
                };
                img[(ch * h + y) * w + x] = v;
            }
        }
    }
}

/// Normalized `[N, 3, R, R]` tensor and labels for the given records.
pub fn make_batch<S: Scalar>(ds: &Dataset, indices: &[usize], norm: &Normalization) -> (Tensor<S>, Vec<usize>) {
    let r = ds.resolution;
    let hw = r * r;
    let mut data = Vec::with_capacity(indices.len() * 3 * hw);
    let scale: [S; 3] = std::array::from_fn(|c| S::lit(1.0 / (255.0 * norm.std[c])));
    let shift: [S; 3] = std::array::from_fn(|c| S::lit(norm.mean[c] / norm.std[c]));
    for &i in indices {
        for (c, plane) in ds.image(i).chunks_exact(hw).enumerate() {
            data.extend(plane.iter().map(|&p| S::lit(p as f64) * scale[c] - shift[c]));
        }
    }
    let labels = indices.iter().map(|&i| ds.label(i)).collect();
    let t = Tensor::new(&[indices.len(), 3, r, r], data).expect("batch shape matches data");
    (t, labels)
}

/// Seeded permutation of `0..n` split into batches of at most
/// `batch_size`. A trailing batch of one record is merged into the
/// previous batch so batch statistics are always defined.
pub fn epoch_batches<R: Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(last);
    }
    batches
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_layout() {
        assert_eq!(record_size(32), 3073);
        let ds = synth_dataset(2, 1, 32, 0).unwrap().subset(&[0]);
        assert_eq!(ds.to_bytes().len(), 3073);
    }

    #[test]
    fn empty_and_truncated_files() {
        let ds = Dataset::from_bytes(&[], 10, 32, Path::new("e")).unwrap();
        assert!(ds.is_empty());
        match Dataset::from_bytes(&[0u8; 3072], 10, 32, Path::new("t")) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 3072),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_label_names_record() {
        let mut bytes = vec![0u8; 2 * 13];
        bytes[13] = 5;
        let err = Dataset::from_bytes(&bytes, 3, 2, Path::new("x")).unwrap_err().to_string();
        assert!(err.contains("record 1"), "{err}");
    }

    #[test]
    fn synth_is_deterministic_and_sized() {
        let a = synth_dataset(2, 10, 8, 42).unwrap();
        assert_eq!(a.len(), 20);
        assert_eq!(a, synth_dataset(2, 10, 8, 42).unwrap());
        assert_ne!(a, synth_dataset(2, 10, 8, 43).unwrap());
        assert!(synth_dataset(1, 10, 8, 0).is_err());
    }

    #[test]
    fn split_examples() {
        let ds = synth_dataset(3, 100, 4, 1).unwrap();
        let (a, b) = split_indices(&ds, SplitSpec { fraction: 0.8, seed: 9 }).unwrap();
        for c in 0..3 {
            assert_eq!(a.iter().filter(|&&i| ds.label(i) == c).count(), 80);
            assert_eq!(b.iter().filter(|&&i| ds.label(i) == c).count(), 20);
        }
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..300).collect::<Vec<_>>());
        assert_eq!((a.clone(), b.clone()), split_indices(&ds, SplitSpec { fraction: 0.8, seed: 9 }).unwrap());
        let (_, empty) = split_indices(&ds, SplitSpec { fraction: 1.0, seed: 9 }).unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn augment_contracts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let orig = Tensor::<f32>::randn(&[2, 3, 8, 8], 1.0, &mut rng);
        let mut t = orig.clone();
        Augment::eval().apply(&mut t, &mut rng);
        assert_eq!(t, orig);
        let flip = Augment { flip_p: 1.0, pad: 0 };
        flip.apply(&mut t, &mut rng);
        assert_ne!(t, orig);
        flip.apply(&mut t, &mut rng);
        assert_eq!(t, orig);
        Augment::train().apply(&mut t, &mut rng);
        assert_eq!(t.shape(), orig.shape());
    }

    #[test]
    fn shift_moves_content() {
        let mut img: Vec<f32> = (1..=9).map(|v| v as f32).collect();
        let mut scratch = vec![0.0; 9];
        shift_with_zeros(&mut img, &mut scratch, 1, 3, 3, 1, 0);
        assert_eq!(img, vec![4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn batches_cover_everything_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = epoch_batches(65, 32, &mut rng);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![32, 33]);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..65).collect::<Vec<_>>());
    }

    #[test]
    fn normalized_batch_statistics() {
        let ds = synth_dataset(4, 20, 8, 3).unwrap();
        let norm = Normalization::compute(&ds);
        let idx: Vec<usize> = (0..ds.len()).collect();
        let (t, labels) = make_batch::<f64>(&ds, &idx, &norm);
        assert_eq!(labels.len(), 80);
        let hw = 64;
        for c in 0..3 {
            let vals: Vec<f64> = t
                .data()
                .chunks_exact(hw)
                .enumerate()
                .filter(|(k, _)| k % 3 == c)
                .flat_map(|(_, p)| p.iter().copied())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-6, "{mean} {var}");
        }
    }
}
