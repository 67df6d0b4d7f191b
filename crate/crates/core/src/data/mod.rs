//! Manifests, image/mask loading, augmentation and batching.

mod augment;

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use augment::{augment, AugmentConfig, AugmentParams};

use crate::error::{Error, Result};
use crate::ops::pointwise::derive_seed;
use crate::ops::{bilinear_resize_forward, nearest_resize};
use crate::tensor::{Shape, Tensor};

const MASK_THRESHOLD: u8 = 128;

/// What a manifest is used for; labelled splits require a mask on every line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
    Inference,
}

impl Split {
    pub fn requires_mask(self) -> bool {
        self != Split::Inference
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Record {
    pub image: PathBuf,
    pub mask: Option<PathBuf>,
    /// 1-based manifest line.
    pub line: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub split: Split,
    pub records: Vec<Record>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    image: String,
    #[serde(default)]
    mask: Option<String>,
}

/// Reads a JSON Lines manifest of `{"image": ..., "mask": ...}` objects. Relative paths
/// resolve against the manifest's directory; blank lines are skipped.
pub fn load_manifest(path: &Path, split: Split) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let bad = |line: usize, msg: String| Error::Manifest { path: path.to_path_buf(), line, msg };
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let parsed: Line = serde_json::from_str(raw).map_err(|e| bad(line, e.to_string()))?;
        if parsed.image.is_empty() {
            return Err(bad(line, "empty image path".into()));
        }
        let mask = match parsed.mask {
            Some(m) if m.is_empty() => return Err(bad(line, "empty mask path".into())),
            Some(m) => Some(base.join(m)),
            None if split.requires_mask() => {
                return Err(bad(line, format!("missing mask path (required in the {split:?} split)")))
            }
            None => None,
        };
        let image = base.join(&parsed.image);
        if !seen.insert(image.clone()) {
            return Err(bad(line, format!("duplicate image path {}", parsed.image)));
        }
        records.push(Record { image, mask, line });
    }
    Ok(Manifest { split, records })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Provenance {
    pub image: Option<PathBuf>,
    pub mask: Option<PathBuf>,
    /// `(height, width)` before resizing.
    pub source_size: (usize, usize),
    pub augment: Option<AugmentParams>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `(1, 3, H, W)` in `[0, 1]`.
    pub image: Tensor<f32>,
    /// `(1, 1, H, W)`, values 0 or 1.
    pub mask: Tensor<f32>,
    pub provenance: Provenance,
}

impl Sample {
    pub fn new(image: Tensor<f32>, mask: Tensor<f32>) -> Result<Self> {
        let (is, ms) = (image.shape(), mask.shape());
        if is.n != 1 || is.c != 3 || ms != Shape::new(1, 1, is.h, is.w) {
            return Err(Error::ShapeMismatch { op: "sample", lhs: is, rhs: ms });
        }
        Ok(Sample { image, mask, provenance: Provenance { image: None, mask: None, source_size: (is.h, is.w), augment: None } })
    }
}

/// Decodes an 8-bit image as RGB (grayscale is promoted) into `(1, 3, H, W)` in `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| Error::Image { path: path.into(), source: e })?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Ok(Tensor::from_fn([1, 3, h, w], |[_, c, y, x]| raw[(y * w + x) * 3 + c] as f32 / 255.0))
}

/// Decodes a single-channel mask and thresholds it at 128 into `(1, 1, H, W)` of 0/1.
pub fn read_mask(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| Error::Image { path: path.into(), source: e })?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.as_raw().iter().map(|&v| if v >= MASK_THRESHOLD { 1.0 } else { 0.0 }).collect();
    Tensor::new([1, 1, h, w], data)
}

/// Loads and resizes one labelled record: bilinear for the image, nearest for the mask.
pub fn load_sample(record: &Record, target: (usize, usize)) -> Result<Sample> {
    let mask_path = record.mask.as_ref().ok_or_else(|| {
        Error::invalid("load_sample", format!("{} has no mask", record.image.display()))
    })?;
    let image = read_image(&record.image)?;
    let mask = read_mask(mask_path)?;
    let source = image.shape();
    Ok(Sample {
        image: bilinear_resize_forward(&image, target.0, target.1)?,
        mask: nearest_resize(&mask, target.0, target.1)?,
        provenance: Provenance {
            image: Some(record.image.clone()),
            mask: Some(mask_path.clone()),
            source_size: (source.h, source.w),
            augment: None,
        },
    })
}

/// Random access to resized samples.
pub trait SampleSource: Sync {
    fn len(&self) -> usize;
    fn load(&self, index: usize) -> Result<Sample>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub struct ManifestSource {
    pub manifest: Manifest,
    pub target: (usize, usize),
}

impl SampleSource for ManifestSource {
    fn len(&self) -> usize {
        self.manifest.records.len()
    }

    fn load(&self, index: usize) -> Result<Sample> {
        load_sample(&self.manifest.records[index], self.target)
    }
}

/// Samples already at the network input size.
pub struct InMemorySource {
    pub samples: Vec<Sample>,
}

impl SampleSource for InMemorySource {
    fn len(&self) -> usize {
        self.samples.len()
    }

    fn load(&self, index: usize) -> Result<Sample> {
        Ok(self.samples[index].clone())
    }
}

#[derive(Clone, Debug)]
pub struct Batch {
    /// `(N, 3, H, W)`.
    pub images: Tensor<f32>,
    /// `(N, 1, H, W)`.
    pub masks: Tensor<f32>,
    pub indices: Vec<usize>,
    pub provenance: Vec<Provenance>,
}

pub fn batches_per_epoch(len: usize, batch_size: usize) -> usize {
    len.div_ceil(batch_size)
}

/// Sample order for `epoch`: seeded shuffle, or manifest order when `shuffle_seed` is
/// `None`.
pub fn epoch_order(len: usize, shuffle_seed: Option<u64>, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    if let Some(seed) = shuffle_seed {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x5348_5546, epoch]));
        order.shuffle(&mut rng);
    }
    order
}

/// Loads, augments and stacks the given samples. Loading runs in parallel; the result is
/// independent of the worker count.
pub fn load_batch(source: &dyn SampleSource, indices: &[usize], augment_cfg: &AugmentConfig, epoch: u64) -> Result<Batch> {
    let samples = indices
        .par_iter()
        .map(|&i| {
            let s = source.load(i)?;
            Ok(if augment_cfg.enabled { augment(&s, augment_cfg.draw(epoch, i as u64)) } else { s })
        })
        .collect::<Result<Vec<Sample>>>()?;
    let images: Vec<_> = samples.iter().map(|s| s.image.clone()).collect();
    let masks: Vec<_> = samples.iter().map(|s| s.mask.clone()).collect();
    Ok(Batch {
        images: Tensor::stack_batch(&images)?,
        masks: Tensor::stack_batch(&masks)?,
        indices: indices.to_vec(),
        provenance: samples.into_iter().map(|s| s.provenance).collect(),
    })
}

/// One epoch of batches; the last batch may be short.
pub struct Batches<'a> {
    source: &'a dyn SampleSource,
    order: Vec<usize>,
    batch_size: usize,
    next: usize,
    augment: AugmentConfig,
    epoch: u64,
}

pub fn batches<'a>(
    source: &'a dyn SampleSource,
    batch_size: usize,
    shuffle_seed: Option<u64>,
    augment: &AugmentConfig,
    epoch: u64,
) -> Result<Batches<'a>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    Ok(Batches {
        source,
        order: epoch_order(source.len(), shuffle_seed, epoch),
        batch_size,
        next: 0,
        augment: augment.clone(),
        epoch,
    })
}

impl Iterator for Batches<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.order.len() {
            return None;
        }
        let end = (self.next + self.batch_size).min(self.order.len());
        let idx = &self.order[self.next..end];
        self.next = end;
        Some(load_batch(self.source, idx, &self.augment, self.epoch))
    }
}
