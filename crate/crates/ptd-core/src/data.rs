//! Dataset ingestion: IDX and CIFAR binary files, synthetic class blobs,
//! normalization, and deterministic splits.

use crate::error::{Error, Result};
use crate::rng::{stream, STREAM_BLOB_NOISE, STREAM_BLOB_TEMPLATE, STREAM_SPLIT};
use crate::tensor::{Scalar, Tensor};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use std::io::Read;
use std::path::Path;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelMode {
    Fine,
    Coarse,
}

/// Per-channel normalization statistics, kept for inversion.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

/// Images as `N x C x H x W` reals in storage precision (f32), integer class
/// labels, and disjoint train/val/test index sets.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub train_idx: Vec<u32>,
    pub val_idx: Vec<u32>,
    pub test_idx: Vec<u32>,
    pub norm: Option<NormStats>,
    /// Pad-4 random crop plus horizontal flip on training batches when set.
    pub augment: bool,
}

impl LabeledDataset {
    fn new(
        images: Vec<f32>,
        labels: Vec<usize>,
        channels: usize,
        height: usize,
        width: usize,
        num_classes: usize,
    ) -> Result<Self> {
        let n = labels.len();
        if images.len() != n * channels * height * width {
            return Err(Error::Data(format!(
                "{} pixel values for {} samples of {}x{}x{}",
                images.len(),
                n,
                channels,
                height,
                width
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Data(format!(
                "label {} out of range for {} classes",
                bad, num_classes
            )));
        }
        if images.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "dataset images".into(),
            });
        }
        Ok(LabeledDataset {
            images,
            labels,
            channels,
            height,
            width,
            num_classes,
            train_idx: (0..n as u32).collect(),
            val_idx: Vec::new(),
            test_idx: Vec::new(),
            norm: None,
            augment: false,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_elements(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn split_indices(&self, split: Split) -> &[u32] {
        match split {
            Split::Train => &self.train_idx,
            Split::Val => &self.val_idx,
            Split::Test => &self.test_idx,
        }
    }

    /// Assemble a batch tensor and label list for the given sample indices.
    pub fn gather<T: Scalar>(&self, indices: &[u32]) -> Result<(Tensor<T>, Vec<usize>)> {
        let se = self.sample_elements();
        let mut data = Vec::with_capacity(indices.len() * se);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let i = i as usize;
            if i >= self.len() {
                return Err(Error::Data(format!("sample index {} out of range", i)));
            }
            data.extend(self.images[i * se..(i + 1) * se].iter().map(|&v| T::of_f32(v)));
            labels.push(self.labels[i]);
        }
        Ok((
            Tensor::from_vec(
                &[indices.len(), self.channels, self.height, self.width],
                data,
            )?,
            labels,
        ))
    }

    /// Merge test samples from another dataset with identical geometry.
    pub fn with_test_from(mut self, test: LabeledDataset) -> Result<Self> {
        if (test.channels, test.height, test.width, test.num_classes)
            != (self.channels, self.height, self.width, self.num_classes)
        {
            return Err(Error::Data(
                "test set geometry does not match training set".into(),
            ));
        }
        let base = self.len() as u32;
        self.images.extend_from_slice(&test.images);
        self.labels.extend_from_slice(&test.labels);
        self.test_idx = (base..base + test.len() as u32).collect();
        Ok(self)
    }

    /// Move a seed-determined fraction of the current training pool into the
    /// test split. Used by synthetic datasets that have no separate test file.
    pub fn split_off_test(mut self, fraction: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::Config(format!(
                "test fraction must be in [0,1), got {}",
                fraction
            )));
        }
        let mut pool = std::mem::take(&mut self.train_idx);
        let mut rng = stream(seed, &[STREAM_SPLIT, 2]);
        pool.shuffle(&mut rng);
        let n_test = (pool.len() as f64 * fraction).round() as usize;
        let keep = pool.len() - n_test;
        self.test_idx = pool.split_off(keep);
        self.train_idx = pool;
        Ok(self)
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(Error::Truncated {
            expected: at + 4,
            got: bytes.len(),
        })
}

/// Load an IDX image/label file pair (big-endian dimensions, pixels scaled
/// to [0,1]). All samples land in the train split.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let img = read_all(images_path)?;
    let magic = be_u32(&img, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            expected: IDX_IMAGES_MAGIC.to_be_bytes(),
            got: be_u32(&img, 0)?.to_be_bytes(),
        });
    }
    let n = be_u32(&img, 4)? as usize;
    let h = be_u32(&img, 8)? as usize;
    let w = be_u32(&img, 12)? as usize;
    let expected = 16 + n * h * w;
    if img.len() != expected {
        return Err(Error::Truncated {
            expected,
            got: img.len(),
        });
    }

    let lab = read_all(labels_path)?;
    let magic = be_u32(&lab, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            expected: IDX_LABELS_MAGIC.to_be_bytes(),
            got: magic.to_be_bytes(),
        });
    }
    let n_lab = be_u32(&lab, 4)? as usize;
    if lab.len() != 8 + n_lab {
        return Err(Error::Truncated {
            expected: 8 + n_lab,
            got: lab.len(),
        });
    }
    if n != n_lab {
        return Err(Error::Data(format!(
            "image count {} does not match label count {}",
            n, n_lab
        )));
    }

    let images: Vec<f32> = img[16..].iter().map(|&b| b as f32 / 255.0).collect();
    let labels: Vec<usize> = lab[8..].iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().copied().max().map_or(1, |m| m + 1);
    LabeledDataset::new(images, labels, 1, h, w, num_classes)
}

const CIFAR_PIXELS: usize = 3 * 32 * 32;

/// Load CIFAR binary batches. The variant is inferred from the record size:
/// CIFAR-10 records are `1 + 3072` bytes, CIFAR-100 records `2 + 3072`.
/// Channels are ordered R,G,B and scaled to [0,1].
pub fn load_cifar_binary(paths: &[std::path::PathBuf], mode: LabelMode) -> Result<LabeledDataset> {
    if paths.is_empty() {
        return Err(Error::Data("no CIFAR files given".into()));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut variant_100: Option<bool> = None;
    for path in paths {
        let bytes = read_all(path)?;
        let is_100 = if bytes.len() % (CIFAR_PIXELS + 2) == 0 && bytes.len() % (CIFAR_PIXELS + 1) != 0
        {
            true
        } else if bytes.len() % (CIFAR_PIXELS + 1) == 0 && bytes.len() % (CIFAR_PIXELS + 2) != 0 {
            false
        } else {
            return Err(Error::Data(format!(
                "{}: size {} is not a whole number of CIFAR records",
                path.display(),
                bytes.len()
            )));
        };
        if let Some(prev) = variant_100 {
            if prev != is_100 {
                return Err(Error::Data("mixed CIFAR-10 and CIFAR-100 files".into()));
            }
        }
        variant_100 = Some(is_100);
        let rec = CIFAR_PIXELS + if is_100 { 2 } else { 1 };
        for r in bytes.chunks_exact(rec) {
            let label = match (is_100, mode) {
                (true, LabelMode::Coarse) => r[0] as usize,
                (true, LabelMode::Fine) => r[1] as usize,
                (false, _) => r[0] as usize,
            };
            labels.push(label);
            images.extend(r[rec - CIFAR_PIXELS..].iter().map(|&b| b as f32 / 255.0));
        }
    }
    let is_100 = variant_100.expect("at least one file");
    let num_classes = match (is_100, mode) {
        (true, LabelMode::Fine) => 100,
        (true, LabelMode::Coarse) => 20,
        (false, _) => 10,
    };
    LabeledDataset::new(images, labels, 3, 32, 32, num_classes)
}

/// Synthetic dataset: each class has a fixed seed-determined smooth template;
/// samples are `template + Normal(0, noise_std)`. Classes are linearly
/// separable by construction (templates are well separated in pixel space).
pub fn synthetic_blobs(
    classes: usize,
    channels: usize,
    height: usize,
    width: usize,
    per_class: usize,
    noise_std: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if classes == 0 || channels == 0 || height == 0 || width == 0 || per_class == 0 {
        return Err(Error::Config("blob counts must be positive".into()));
    }
    let se = channels * height * width;
    let mut templates = Vec::with_capacity(classes);
    for k in 0..classes {
        let mut rng = stream(seed, &[STREAM_BLOB_TEMPLATE, k as u64]);
        let uni = rand::distributions::Uniform::new(0.0f64, std::f64::consts::TAU);
        let amp = rand::distributions::Uniform::new(0.5f64, 1.0);
        let freq = rand::distributions::Uniform::new(0.5f64, 2.0);
        let mut t = vec![0.0f32; se];
        for c in 0..channels {
            // sum of three low-frequency plane waves per channel
            let waves: Vec<(f64, f64, f64, f64)> = (0..3)
                .map(|_| {
                    (
                        amp.sample(&mut rng),
                        freq.sample(&mut rng),
                        freq.sample(&mut rng),
                        uni.sample(&mut rng),
                    )
                })
                .collect();
            for y in 0..height {
                for x in 0..width {
                    let mut v = 0.0f64;
                    for &(a, fy, fx, ph) in &waves {
                        v += a
                            * (std::f64::consts::TAU
                                * (fy * y as f64 / height as f64 + fx * x as f64 / width as f64)
                                + ph)
                                .cos();
                    }
                    t[(c * height + y) * width + x] = (0.5 + v / 6.0) as f32;
                }
            }
        }
        templates.push(t);
    }
    let mut images = Vec::with_capacity(classes * per_class * se);
    let mut labels = Vec::with_capacity(classes * per_class);
    for (k, t) in templates.iter().enumerate() {
        let mut rng = stream(seed, &[STREAM_BLOB_NOISE, k as u64]);
        let noise = Normal::new(0.0f64, noise_std.max(0.0))
            .map_err(|_| Error::Config(format!("invalid noise_std {noise_std}")))?;
        for _ in 0..per_class {
            if noise_std > 0.0 {
                images.extend(t.iter().map(|&v| v + noise.sample(&mut rng) as f32));
            } else {
                images.extend_from_slice(t);
            }
            labels.push(k);
        }
    }
    LabeledDataset::new(images, labels, channels, height, width, classes)
}

/// Carve a seed-determined validation split out of the training pool.
pub fn split_train_val(mut ds: LabeledDataset, val_fraction: f64, seed: u64) -> Result<LabeledDataset> {
    if !(0.0 < val_fraction && val_fraction < 1.0) {
        return Err(Error::Config(format!(
            "val fraction must be in (0,1), got {}",
            val_fraction
        )));
    }
    let mut pool: Vec<u32> = ds.train_idx.drain(..).chain(ds.val_idx.drain(..)).collect();
    let mut rng = stream(seed, &[STREAM_SPLIT, 1]);
    pool.shuffle(&mut rng);
    let n_train = ((1.0 - val_fraction) * pool.len() as f64).floor() as usize;
    ds.val_idx = pool.split_off(n_train);
    ds.train_idx = pool;
    Ok(ds)
}

/// Normalize per channel: `x' = (x - mean) / std`. Stats are recorded so the
/// transform can be inverted.
pub fn normalize(mut ds: LabeledDataset, mean: &[f32], std: &[f32]) -> Result<LabeledDataset> {
    if mean.len() != ds.channels || std.len() != ds.channels {
        return Err(Error::Config(format!(
            "normalization stats must cover {} channels",
            ds.channels
        )));
    }
    if std.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Config("normalization std must be positive".into()));
    }
    let hw = ds.height * ds.width;
    let c = ds.channels;
    for sample in ds.images.chunks_mut(c * hw) {
        for (ch, plane) in sample.chunks_mut(hw).enumerate() {
            for v in plane {
                *v = (*v - mean[ch]) / std[ch];
            }
        }
    }
    ds.norm = Some(NormStats {
        mean: mean.to_vec(),
        std: std.to_vec(),
    });
    Ok(ds)
}

/// Invert [`normalize`] using the recorded stats.
pub fn denormalize(mut ds: LabeledDataset) -> Result<LabeledDataset> {
    let stats = ds
        .norm
        .take()
        .ok_or_else(|| Error::Config("dataset has no normalization stats".into()))?;
    let hw = ds.height * ds.width;
    let c = ds.channels;
    for sample in ds.images.chunks_mut(c * hw) {
        for (ch, plane) in sample.chunks_mut(hw).enumerate() {
            for v in plane {
                *v = *v * stats.std[ch] + stats.mean[ch];
            }
        }
    }
    Ok(ds)
}
