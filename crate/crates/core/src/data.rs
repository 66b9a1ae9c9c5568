//! Synthetic segmentation data and mini-batching.
//!
//! Each image is a noisy piecewise-constant scene of axis-aligned rectangles
//! and discs painted over a background. Class `c` has mean intensity
//! `0.5 + (c − (K−1)/2) · separation / (K−1)` and its shapes shrink in area by
//! a factor of `class_size_skew` per class index, which makes higher classes
//! progressively rarer. Later shapes occlude earlier ones.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensorfile::{self, EntryData, TensorEntry};
use crate::zoo::SPATIAL_DIVISOR;
use crate::{Error, LabelMap, Result, Tensor};

const MAX_ATTEMPTS: u64 = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub num_train: usize,
    pub num_val: usize,
    pub num_test: usize,
    /// Height and width; must be divisible by 16.
    pub size: usize,
    /// Including background.
    pub num_classes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Spread of the class intensity levels across `[0, 1]`, in `(0, 1]`.
    pub intensity_separation: f64,
    pub noise_std: f64,
    /// `>= 1`; larger means stronger class imbalance.
    pub class_size_skew: f64,
    /// Fraction of training-label pixels flipped to a random other class.
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_train: 200,
            num_val: 25,
            num_test: 25,
            size: 32,
            num_classes: 4,
            min_shapes: 3,
            max_shapes: 5,
            intensity_separation: 0.8,
            noise_std: 0.1,
            class_size_skew: 1.5,
            label_noise: 0.0,
            seed: 42,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.num_classes < 2 {
            return fail("data.num_classes must be at least 2".into());
        }
        if self.size == 0 || !self.size.is_multiple_of(SPATIAL_DIVISOR) {
            return fail(format!(
                "data.size must be a positive multiple of {SPATIAL_DIVISOR}, got {}",
                self.size
            ));
        }
        if self.num_train == 0 {
            return fail("data.num_train must be positive".into());
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return fail(format!(
                "data shape counts need 1 <= min_shapes <= max_shapes, got {}..={}",
                self.min_shapes, self.max_shapes
            ));
        }
        if !(self.intensity_separation > 0.0 && self.intensity_separation <= 1.0) {
            return fail("data.intensity_separation must lie in (0, 1]".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return fail("data.noise_std must be a non-negative number".into());
        }
        if !(self.class_size_skew >= 1.0 && self.class_size_skew.is_finite()) {
            return fail("data.class_size_skew must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return fail("data.label_noise must lie in [0, 1]".into());
        }
        Ok(())
    }

    /// Noise-free intensity of class `c`.
    pub fn class_level(&self, c: usize) -> f64 {
        let k = self.num_classes as f64;
        0.5 + (c as f64 - (k - 1.0) / 2.0) * self.intensity_separation / (k - 1.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationSample {
    /// `[1, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    /// `[H, W]`.
    pub label: LabelMap,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::config(format!(
                "unknown split '{other}' (expected train, val or test)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub train: Vec<SegmentationSample>,
    pub val: Vec<SegmentationSample>,
    pub test: Vec<SegmentationSample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[SegmentationSample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Pixel count per class over a split.
    pub fn class_counts(&self, split: Split) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for s in self.split(split) {
            for &l in s.label.data() {
                counts[l as usize] += 1;
            }
        }
        counts
    }
}

enum Shape {
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Disc { cy: f64, cx: f64, r: f64 },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
            Shape::Disc { cy, cx, r } => (y - cy).powi(2) + (x - cx).powi(2) <= r * r,
        }
    }
}

fn random_shape(spec: &DatasetSpec, class: usize, rng: &mut impl Rng) -> Shape {
    let size = spec.size as f64;
    // linear extent shrinks by sqrt(skew) per class so the area shrinks by skew
    let scale = spec.class_size_skew.powf(-((class - 1) as f64) / 2.0);
    let base = size * 0.22 * scale * rng.random_range(0.8..1.2);
    let cy = rng.random_range(0.0..size);
    let cx = rng.random_range(0.0..size);
    if rng.random_bool(0.5) {
        let aspect: f64 = rng.random_range(0.6..1.6);
        let (hy, hx) = (base * aspect.sqrt(), base / aspect.sqrt());
        Shape::Rect {
            y0: (cy - hy).round(),
            x0: (cx - hx).round(),
            y1: (cy + hy).round(),
            x1: (cx + hx).round(),
        }
    } else {
        Shape::Disc {
            cy,
            cx,
            r: base * 1.1,
        }
    }
}

fn generate_sample(
    spec: &DatasetSpec,
    min_shapes: usize,
    rng: &mut ChaCha8Rng,
) -> SegmentationSample {
    let n = spec.size;
    let k = spec.num_classes;
    let count = rng.random_range(min_shapes..=spec.max_shapes.max(min_shapes));
    // cycle through the foreground classes from a random start so every class
    // is drawn once before any repeats
    let start = rng.random_range(0..k - 1);
    let mut label = vec![0u32; n * n];
    for j in 0..count {
        let class = 1 + (start + j) % (k - 1);
        let shape = random_shape(spec, class, rng);
        for y in 0..n {
            for x in 0..n {
                if shape.contains(y as f64 + 0.5, x as f64 + 0.5) {
                    label[y * n + x] = class as u32;
                }
            }
        }
    }
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    let image = label
        .iter()
        .map(|&c| {
            let level = spec.class_level(c as usize);
            let v = if spec.noise_std > 0.0 {
                level + noise.sample(rng)
            } else {
                level
            };
            v.clamp(0.0, 1.0)
        })
        .collect();
    SegmentationSample {
        image: Tensor::new(vec![1, n, n], image).expect("size checked"),
        label: LabelMap::new(vec![n, n], label).expect("size checked"),
    }
}

fn corrupt_labels(spec: &DatasetSpec, samples: &mut [SegmentationSample], rng: &mut ChaCha8Rng) {
    if spec.label_noise <= 0.0 {
        return;
    }
    let k = spec.num_classes as u32;
    for s in samples {
        for l in s.label.data_mut() {
            if rng.random_bool(spec.label_noise) {
                let shift = rng.random_range(1..k);
                *l = (*l + shift) % k;
            }
        }
    }
}

/// Generates train/val/test splits, fully determined by `spec`.
///
/// If some class never occurs in the training split the split is regenerated
/// with one more shape per image, up to a bounded number of attempts.
pub fn generate_synthetic_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    for attempt in 0..MAX_ATTEMPTS {
        let min_shapes = spec.min_shapes + attempt as usize;
        let split_rng = |split: u64| {
            ChaCha8Rng::seed_from_u64(
                spec.seed
                    .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                    .wrapping_add(split + 3 * attempt),
            )
        };
        let make = |count: usize, split: u64| {
            let mut rng = split_rng(split);
            let mut out: Vec<_> = (0..count)
                .map(|_| generate_sample(spec, min_shapes, &mut rng))
                .collect();
            if split == 0 {
                corrupt_labels(spec, &mut out, &mut rng);
            }
            out
        };
        let train = make(spec.num_train, 0);
        let dataset = Dataset {
            num_classes: spec.num_classes,
            val: make(spec.num_val, 1),
            test: make(spec.num_test, 2),
            train,
        };
        if dataset.class_counts(Split::Train).iter().all(|&c| c > 0) {
            return Ok(dataset);
        }
    }
    Err(Error::Data(format!(
        "some class stayed absent from the training split after {MAX_ATTEMPTS} attempts \
         (num_train = {}, shapes {}..={}, classes {})",
        spec.num_train, spec.min_shapes, spec.max_shapes, spec.num_classes
    )))
}

/// Shuffled sample indices for one epoch, chunked into mini-batches. The final
/// batch may be short. The order depends only on `seed ^ epoch`.
pub fn batch_iterator(
    len: usize,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> impl Iterator<Item = Vec<usize>> {
    assert!(batch_size > 0, "batch size must be positive");
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ epoch as u64));
    let batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    batches.into_iter()
}

/// Stacks the selected samples into an `(N, 1, H, W)` batch and `[N, H, W]` labels.
pub fn stack_batch(
    samples: &[SegmentationSample],
    indices: &[usize],
) -> Result<(Tensor, LabelMap)> {
    let first = samples
        .get(
            *indices
                .first()
                .ok_or_else(|| Error::Data("empty batch".into()))?,
        )
        .ok_or_else(|| Error::Data("batch index out of range".into()))?;
    let mut shape = vec![indices.len()];
    shape.extend_from_slice(first.image.shape());
    let mut data = Vec::with_capacity(first.image.len() * indices.len());
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        let s = samples
            .get(i)
            .ok_or_else(|| Error::Data(format!("batch index {i} out of range")))?;
        data.extend_from_slice(s.image.data());
        labels.push(&s.label);
    }
    Ok((Tensor::new(shape, data)?, LabelMap::stack(&labels)?))
}

/// Saves one split as `image/<i>` and `label/<i>` entries.
pub fn save_split(path: &Path, samples: &[SegmentationSample]) -> Result<()> {
    let mut entries = Vec::with_capacity(2 * samples.len());
    for (i, s) in samples.iter().enumerate() {
        entries.push(TensorEntry::new(
            format!("image/{i}"),
            EntryData::F64(s.image.clone()),
        ));
        entries.push(TensorEntry::new(
            format!("label/{i}"),
            EntryData::U32(s.label.clone()),
        ));
    }
    tensorfile::write_tensor_file(path, &entries)
}

pub fn load_split(path: &Path) -> Result<Vec<SegmentationSample>> {
    let entries = tensorfile::read_tensor_file(path)?;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for e in entries {
        let (kind, idx) = e
            .name
            .split_once('/')
            .and_then(|(k, i)| i.parse::<usize>().ok().map(|i| (k.to_string(), i)))
            .ok_or_else(|| Error::Data(format!("unexpected dataset entry '{}'", e.name)))?;
        match (kind.as_str(), e.data) {
            ("image", EntryData::F64(t)) => images.push((idx, t)),
            ("label", EntryData::U32(m)) => labels.push((idx, m)),
            _ => {
                return Err(Error::Data(format!(
                    "dataset entry '{}' has the wrong type",
                    e.name
                )))
            }
        }
    }
    images.sort_by_key(|(i, _)| *i);
    labels.sort_by_key(|(i, _)| *i);
    if images.len() != labels.len() || images.iter().zip(&labels).any(|(a, b)| a.0 != b.0) {
        return Err(Error::Data(format!(
            "{} has unmatched image and label entries",
            path.display()
        )));
    }
    images
        .into_iter()
        .zip(labels)
        .map(|((_, image), (_, label))| {
            if image.shape()[1..] != *label.shape() {
                return Err(Error::Data("image and label shapes disagree".into()));
            }
            Ok(SegmentationSample { image, label })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_sizes_include_short_tail() {
        let sizes: Vec<usize> = batch_iterator(10, 4, 1, 0).map(|b| b.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn batches_are_reproducible_and_epoch_dependent() {
        let a: Vec<_> = batch_iterator(20, 4, 9, 3).collect();
        let b: Vec<_> = batch_iterator(20, 4, 9, 3).collect();
        let c: Vec<_> = batch_iterator(20, 4, 9, 4).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn class_levels_span_separation() {
        let spec = DatasetSpec {
            intensity_separation: 0.6,
            ..DatasetSpec::default()
        };
        assert!((spec.class_level(0) - 0.2).abs() < 1e-12);
        assert!((spec.class_level(3) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn invalid_specs_rejected() {
        let bad = [
            DatasetSpec {
                size: 24,
                ..Default::default()
            },
            DatasetSpec {
                num_classes: 1,
                ..Default::default()
            },
            DatasetSpec {
                class_size_skew: 0.5,
                ..Default::default()
            },
            DatasetSpec {
                intensity_separation: 0.0,
                ..Default::default()
            },
            DatasetSpec {
                min_shapes: 4,
                max_shapes: 2,
                ..Default::default()
            },
        ];
        for spec in bad {
            assert!(generate_synthetic_dataset(&spec).is_err(), "{spec:?}");
        }
    }

    #[test]
    fn label_noise_flips_roughly_the_requested_fraction() {
        let base = DatasetSpec {
            num_train: 20,
            num_val: 1,
            num_test: 1,
            ..Default::default()
        };
        let clean = generate_synthetic_dataset(&base).unwrap();
        let noisy = generate_synthetic_dataset(&DatasetSpec {
            label_noise: 0.1,
            ..base
        })
        .unwrap();
        let (mut diff, mut total) = (0, 0);
        for (a, b) in clean.train.iter().zip(&noisy.train) {
            assert_eq!(a.image, b.image);
            for (x, y) in a.label.data().iter().zip(b.label.data()) {
                diff += usize::from(x != y);
                total += 1;
            }
        }
        let frac = diff as f64 / total as f64;
        assert!((0.08..0.12).contains(&frac), "{frac}");
        assert_eq!(clean.test, noisy.test);
    }
}
