//! Datasets: CIFAR-10 binary batches and a synthetic stand-in.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor4;

/// Images with 0-based class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor4,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor4, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.batch() != labels.len() {
            return Err(Error::shape("Dataset::new", &images.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Self { images, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(channels, height, width)` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let [_, c, h, w] = self.images.shape();
        [c, h, w]
    }

    pub fn batch(&self, indices: &[usize]) -> (Tensor4, Vec<usize>) {
        (self.images.gather_batch(indices), indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// First `n` samples.
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len());
        let idx: Vec<usize> = (0..n).collect();
        let (images, labels) = self.batch(&idx);
        Self { images, labels, classes: self.classes }
    }
}

pub const CIFAR_RECORD: usize = 3073;
const CIFAR_SIDE: usize = 32;

/// Parses CIFAR-10 binary records: one label byte followed by 1024 red,
/// 1024 green and 1024 blue bytes, each plane row-major 32x32. Pixels are
/// scaled to `[0, 1]`.
pub fn parse_cifar10_records(bytes: &[u8], source: &str) -> Result<Dataset> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        let offset = bytes.len() - bytes.len() % CIFAR_RECORD;
        return Err(Error::Format(format!(
            "{source}: length {} is not a multiple of {CIFAR_RECORD}; truncated record at byte offset {offset}",
            bytes.len()
        )));
    }
    let count = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(count);
    let mut pixels = Vec::with_capacity(count * (CIFAR_RECORD - 1));
    for (r, record) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = record[0] as usize;
        if label > 9 {
            return Err(Error::Data(format!(
                "{source}: record {r} (byte offset {}) has label {label} > 9",
                r * CIFAR_RECORD
            )));
        }
        labels.push(label);
        pixels.extend(record[1..].iter().map(|&b| b as f64 / 255.0));
    }
    let images = Tensor4::from_vec([count, 3, CIFAR_SIDE, CIFAR_SIDE], pixels)?;
    Dataset::new(images, labels, 10)
}

fn read_batches(dir: &Path, names: &[&str]) -> Result<Dataset> {
    let mut bytes = Vec::new();
    for name in names {
        let path = dir.join(name);
        let chunk = std::fs::read(&path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if chunk.len() % CIFAR_RECORD != 0 {
            // parse alone for an offset relative to the offending file
            parse_cifar10_records(&chunk, &path.display().to_string())?;
        }
        bytes.extend_from_slice(&chunk);
    }
    parse_cifar10_records(&bytes, &dir.display().to_string())
}

pub const CIFAR10_TRAIN_FILES: [&str; 5] =
    ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"];
pub const CIFAR10_TEST_FILES: [&str; 1] = ["test_batch.bin"];

/// Loads the CIFAR-10 binary batches from `dir`.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = read_batches(dir, &CIFAR10_TRAIN_FILES)?;
    let test = read_batches(dir, &CIFAR10_TEST_FILES)?;
    Ok((train, test))
}

/// Per-channel standardization with statistics taken from `train`.
pub fn standardize(train: &mut Dataset, test: &mut Dataset) {
    let [_, c, h, w] = train.images.shape();
    let plane = h * w;
    for ch in 0..c {
        let (mut sum, mut sq, mut n) = (0.0, 0.0, 0.0);
        for b in 0..train.len() {
            for &v in &train.images.sample(b)[ch * plane..(ch + 1) * plane] {
                sum += v;
                sq += v * v;
                n += 1.0;
            }
        }
        let mean = sum / n;
        let std = (sq / n - mean * mean).max(1e-12).sqrt();
        for ds in [&mut *train, &mut *test] {
            for b in 0..ds.len() {
                for v in &mut ds.images.sample_mut(b)[ch * plane..(ch + 1) * plane] {
                    *v = (*v - mean) / std;
                }
            }
        }
    }
}

/// Class templates made of smooth Gaussian bumps plus per-sample noise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    #[serde(default = "default_test_per_class")]
    pub test_per_class: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub noise: f64,
    /// Each sample is the class template cyclically shifted by up to this
    /// many pixels in each direction.
    #[serde(default)]
    pub max_shift: usize,
    pub seed: u64,
}

fn default_test_per_class() -> usize {
    50
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 3,
            per_class: 200,
            test_per_class: default_test_per_class(),
            channels: 3,
            height: 16,
            width: 16,
            noise: 3.0,
            max_shift: 2,
            seed: 17,
        }
    }
}

const BUMPS_PER_CHANNEL: usize = 2;

fn class_templates(spec: &SyntheticSpec) -> Vec<Vec<f64>> {
    let mut rng = RngStream::new(spec.seed, 0);
    let (h, w) = (spec.height as f64, spec.width as f64);
    let sigma = 0.25 * h.min(w);
    (0..spec.classes)
        .map(|_| {
            let mut t = vec![0.0; spec.channels * spec.height * spec.width];
            for c in 0..spec.channels {
                for _ in 0..BUMPS_PER_CHANNEL {
                    let (cy, cx) = (rng.uniform() * h, rng.uniform() * w);
                    let amp = if rng.bernoulli(0.5) { 1.0 } else { -1.0 } * (0.5 + 0.5 * rng.uniform());
                    for i in 0..spec.height {
                        for j in 0..spec.width {
                            let d2 = (i as f64 - cy).powi(2) + (j as f64 - cx).powi(2);
                            t[(c * spec.height + i) * spec.width + j] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
                        }
                    }
                }
            }
            t
        })
        .collect()
}

fn render(spec: &SyntheticSpec, templates: &[Vec<f64>], per_class: usize, stream: u64) -> Result<Dataset> {
    if spec.classes == 0 || per_class == 0 {
        return Err(Error::invalid("synthetic dataset needs at least one class and one sample per class"));
    }
    let mut rng = RngStream::new(spec.seed, stream);
    let len = spec.channels * spec.height * spec.width;
    let mut data = Vec::with_capacity(spec.classes * per_class * len);
    let mut labels = Vec::with_capacity(spec.classes * per_class);
    let (h, w) = (spec.height, spec.width);
    let span = 2 * spec.max_shift + 1;
    for _ in 0..per_class {
        for (class, t) in templates.iter().enumerate() {
            let (dy, dx) = if spec.max_shift == 0 {
                (0, 0)
            } else {
                (rng.below(span), rng.below(span))
            };
            for c in 0..spec.channels {
                for i in 0..h {
                    let si = (i + h * span - spec.max_shift + dy) % h;
                    for j in 0..w {
                        let sj = (j + w * span - spec.max_shift + dx) % w;
                        let v = t[(c * h + si) * w + sj];
                        data.push(if spec.noise == 0.0 { v } else { v + spec.noise * rng.normal() });
                    }
                }
            }
            labels.push(class);
        }
    }
    let images = Tensor4::from_vec([labels.len(), spec.channels, spec.height, spec.width], data)?;
    Dataset::new(images, labels, spec.classes)
}

/// Training split of the synthetic dataset; classes are interleaved.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    render(spec, &class_templates(spec), spec.per_class, 1)
}

/// Training and held-out splits sharing the class templates.
pub fn make_synthetic_split(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    let templates = class_templates(spec);
    Ok((
        render(spec, &templates, spec.per_class, 1)?,
        render(spec, &templates, spec.test_per_class, 2)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: impl Fn(usize) -> u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend((0..3072).map(fill));
        r
    }

    #[test]
    fn parses_crafted_records() {
        let mut bytes = record(3, |i| (i % 256) as u8);
        bytes.extend(record(9, |i| if i < 1024 { 255 } else { 0 }));
        let ds = parse_cifar10_records(&bytes, "fixture").unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels, vec![3, 9]);
        // byte 1 + (c*1024 + i*32 + j) of record 0
        assert_eq!(ds.images.get(0, 1, 2, 5), ((1024 + 2 * 32 + 5) % 256) as f64 / 255.0);
        assert_eq!(ds.images.get(1, 0, 31, 31), 1.0);
        assert_eq!(ds.images.get(1, 2, 0, 0), 0.0);
    }

    #[test]
    fn truncated_file_reports_offset() {
        let mut bytes = record(1, |_| 0);
        bytes.extend(vec![0u8; 100]);
        let err = parse_cifar10_records(&bytes, "fixture").unwrap_err();
        assert!(matches!(err, Error::Format(_)));
        assert!(err.to_string().contains("offset 3073"), "{err}");
    }

    #[test]
    fn bad_label_is_a_data_error() {
        let bytes = record(10, |_| 0);
        assert!(matches!(parse_cifar10_records(&bytes, "fixture"), Err(Error::Data(_))));
    }

    #[test]
    fn loads_directory_of_batches() {
        let dir = tempfile::tempdir().unwrap();
        for (i, name) in ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin", "test_batch.bin"]
            .iter()
            .enumerate()
        {
            std::fs::write(dir.path().join(name), record(i as u8, |_| 7)).unwrap();
        }
        let (train, test) = load_cifar10(dir.path()).unwrap();
        assert_eq!(train.labels, vec![0, 1, 2, 3, 4]);
        assert_eq!(test.labels, vec![5]);
        let (mut a, mut b) = (train.clone(), test.clone());
        standardize(&mut a, &mut b);
        assert!(a.images.all_finite());
    }

    #[test]
    fn synthetic_is_deterministic() {
        let spec = SyntheticSpec::default();
        assert_eq!(make_synthetic(&spec).unwrap(), make_synthetic(&spec).unwrap());
        let ds = make_synthetic(&spec).unwrap();
        assert_eq!(ds.len(), 600);
        assert_eq!(ds.class_counts(), vec![200, 200, 200]);
    }

    #[test]
    fn noiseless_synthetic_repeats_templates() {
        let spec = SyntheticSpec { noise: 0.0, max_shift: 0, per_class: 3, ..SyntheticSpec::default() };
        let ds = make_synthetic(&spec).unwrap();
        for i in 0..ds.len() {
            let first = ds.labels.iter().position(|&l| l == ds.labels[i]).unwrap();
            assert_eq!(ds.images.sample(i), ds.images.sample(first));
        }
        assert_ne!(ds.images.sample(0), ds.images.sample(1));
    }

    #[test]
    fn shifted_samples_are_cyclic_shifts_of_the_template() {
        let base = SyntheticSpec { noise: 0.0, max_shift: 0, per_class: 1, ..SyntheticSpec::default() };
        let templates = make_synthetic(&base).unwrap();
        let spec = SyntheticSpec { max_shift: 2, per_class: 20, ..base };
        let ds = make_synthetic(&spec).unwrap();
        let (c, h, w) = (spec.channels, spec.height, spec.width);
        let shifted = |t: &[f64], dy: usize, dx: usize| -> Vec<f64> {
            let mut out = vec![0.0; c * h * w];
            for k in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        out[(k * h + i) * w + j] = t[(k * h + (i + dy) % h) * w + (j + dx) % w];
                    }
                }
            }
            out
        };
        let mut unshifted = 0;
        for i in 0..ds.len() {
            let t = templates.images.sample(templates.labels.iter().position(|&l| l == ds.labels[i]).unwrap());
            let x = ds.images.sample(i);
            let matches: Vec<(usize, usize)> = [h - 2, h - 1, 0, 1, 2]
                .iter()
                .flat_map(|&dy| [w - 2, w - 1, 0, 1, 2].map(|dx| (dy, dx)))
                .filter(|&(dy, dx)| shifted(t, dy, dx) == x)
                .collect();
            assert!(!matches.is_empty(), "sample {i} is not a shift of its template");
            unshifted += usize::from(x == t);
        }
        assert!(unshifted < ds.len(), "no sample was shifted");
    }

    #[test]
    fn split_shares_templates_but_not_noise() {
        let spec = SyntheticSpec::default();
        let (train, test) = make_synthetic_split(&spec).unwrap();
        assert_eq!(test.len(), 150);
        assert_ne!(train.images.sample(0), test.images.sample(0));
    }
}
