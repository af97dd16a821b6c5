//! Image datasets: directory loading, synthetic texture generators,
//! augmentation, class balancing and stratified splits.

mod augment;
mod loader;
mod pnm;
mod synth;

pub use augment::{augment, random_augment, AugmentOp};
pub use loader::{load_image_dir, resize_bilinear, save_image_dir, to_colorspace, LoadedDir};
pub use pnm::{decode_pnm, encode_pnm, read_pnm, write_pnm, PnmImage};
pub use synth::{synth_dataset, synth_with, SynthOptions, TextureClass};

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Gray (one channel) or color (three channel) imagery.
pub use crate::graph::Variant as Colorspace;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `H×W×C`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub label: usize,
    pub source_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    class_names: Vec<String>,
    colorspace: Colorspace,
}

impl Dataset {
    /// Checks that labels are in range and every image has the same shape
    /// with the colorspace's channel count.
    pub fn new(samples: Vec<Sample>, class_names: Vec<String>, colorspace: Colorspace) -> Result<Self> {
        if class_names.is_empty() {
            return Err(Error::Dataset("dataset has no classes".into()));
        }
        if let Some(first) = samples.first() {
            let shape = first.image.shape().to_vec();
            if shape.len() != 3 || shape[2] != colorspace.channels() {
                return Err(Error::Dataset(format!("image shape {shape:?} does not match {colorspace} colorspace")));
            }
            for s in &samples {
                if s.image.shape() != shape.as_slice() {
                    return Err(Error::Dataset(format!(
                        "sample {} has shape {:?}, expected {shape:?}",
                        s.source_id,
                        s.image.shape()
                    )));
                }
                if s.label >= class_names.len() {
                    return Err(Error::LabelOutOfRange { label: s.label, classes: class_names.len() });
                }
            }
        }
        Ok(Dataset { samples, class_names, colorspace })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn colorspace(&self) -> Colorspace {
        self.colorspace
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// `[H, W, C]` of every image, if non-empty.
    pub fn image_shape(&self) -> Option<[usize; 3]> {
        self.samples.first().map(|s| {
            let d = s.image.shape();
            [d[0], d[1], d[2]]
        })
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// Stacks the selected samples into an `N×H×W×C` batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let [h, w, c] = self.image_shape().ok_or_else(|| Error::Dataset("cannot batch an empty dataset".into()))?;
        let mut data = Vec::with_capacity(indices.len() * h * w * c);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = self
                .samples
                .get(i)
                .ok_or_else(|| Error::Dataset(format!("sample index {i} out of range")))?;
            data.extend_from_slice(s.image.data());
            labels.push(s.label);
        }
        Ok((Tensor::new(&[indices.len(), h, w, c], data)?, labels))
    }

    /// A dataset over the same classes holding `samples`.
    pub fn with_samples(&self, samples: Vec<Sample>) -> Result<Self> {
        Dataset::new(samples, self.class_names.clone(), self.colorspace)
    }

    /// Indices of each class's samples, in dataset order.
    fn by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes()];
        for (i, s) in self.samples.iter().enumerate() {
            out[s.label].push(i);
        }
        out
    }
}

/// Duplicates minority-class samples (drawn with replacement) until every
/// class has as many samples as the largest one. All originals are kept.
pub fn oversample_balance(dataset: &Dataset, rng: &mut Rng) -> Result<Dataset> {
    let groups = dataset.by_class();
    if let Some(k) = groups.iter().position(Vec::is_empty) {
        return Err(Error::Dataset(format!("class {} has no samples", dataset.class_names[k])));
    }
    let target = groups.iter().map(Vec::len).max().unwrap_or(0);
    let mut samples = dataset.samples.clone();
    for group in &groups {
        for _ in group.len()..target {
            samples.push(dataset.samples[group[rng.below(group.len())]].clone());
        }
    }
    dataset.with_samples(samples)
}

/// Stratified split. Each class is shuffled with its own seeded stream and
/// divided by largest-remainder rounding of `fractions`, so every part gets
/// at least one sample of every class.
pub fn split(dataset: &Dataset, fractions: &[f64], seed: u64) -> Result<Vec<Dataset>> {
    if fractions.is_empty() || fractions.iter().any(|&f| !(f > 0.0)) {
        return Err(Error::Dataset(format!("split fractions must be positive, got {fractions:?}")));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Dataset(format!("split fractions sum to {total}, expected 1")));
    }
    let base = Rng::new(seed);
    let mut parts: Vec<Vec<Sample>> = vec![Vec::new(); fractions.len()];
    for (k, mut idx) in dataset.by_class().into_iter().enumerate() {
        if idx.len() < fractions.len() {
            return Err(Error::Dataset(format!(
                "class {} has {} samples, fewer than {} partitions",
                dataset.class_names[k],
                idx.len(),
                fractions.len()
            )));
        }
        base.fork(k as u64).shuffle(&mut idx);
        let sizes = allocate(idx.len(), fractions);
        let mut start = 0;
        for (part, n) in parts.iter_mut().zip(sizes) {
            part.extend(idx[start..start + n].iter().map(|&i| dataset.samples[i].clone()));
            start += n;
        }
    }
    parts.into_iter().map(|s| dataset.with_samples(s)).collect()
}

/// Largest-remainder allocation of `n` items, at least one per part.
fn allocate(n: usize, fractions: &[f64]) -> Vec<usize> {
    let ideal: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut sizes: Vec<usize> = ideal.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| (ideal[b] - ideal[b].floor()).total_cmp(&(ideal[a] - ideal[a].floor())).then(a.cmp(&b)));
    let mut left = n - sizes.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    // Borrow from the largest part for any empty one.
    for i in 0..sizes.len() {
        if sizes[i] == 0 {
            let j = (0..sizes.len()).max_by_key(|&j| (sizes[j], usize::MAX - j)).unwrap();
            sizes[j] -= 1;
            sizes[i] = 1;
        }
    }
    sizes
}

/// Counts per label, keyed by class name.
pub fn count_by_name(dataset: &Dataset) -> BTreeMap<String, usize> {
    dataset.class_names.iter().cloned().zip(dataset.class_counts()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::rng::Rng;

    fn toy(counts: &[usize]) -> Dataset {
        let mut samples = Vec::new();
        for (label, &n) in counts.iter().enumerate() {
            for i in 0..n {
                samples.push(Sample {
                    image: Tensor::full(&[2, 2, 1], (label * 100 + i) as f32 / 1000.0),
                    label,
                    source_id: format!("c{label}/{i}"),
                });
            }
        }
        let names = (0..counts.len()).map(|k| format!("class{k}")).collect();
        Dataset::new(samples, names, Colorspace::Gray).unwrap()
    }

    fn ids(d: &Dataset) -> Vec<String> {
        let mut v: Vec<String> = d.samples().iter().map(|s| s.source_id.clone()).collect();
        v.sort();
        v
    }

    #[test]
    fn invariants_are_checked() {
        let s = Sample { image: Tensor::zeros(&[2, 2, 1]), label: 3, source_id: "x".into() };
        assert!(Dataset::new(vec![s.clone()], vec!["a".into()], Colorspace::Gray).is_err());
        let s = Sample { label: 0, ..s };
        assert!(Dataset::new(vec![s.clone()], vec!["a".into()], Colorspace::Color).is_err());
        let t = Sample { image: Tensor::zeros(&[3, 2, 1]), ..s.clone() };
        assert!(Dataset::new(vec![s, t], vec!["a".into()], Colorspace::Gray).is_err());
        assert!(Dataset::new(vec![], vec![], Colorspace::Gray).is_err());
    }

    #[test]
    fn balance_examples() {
        let d = toy(&[10, 4]);
        let b = oversample_balance(&d, &mut Rng::new(0)).unwrap();
        assert_eq!(b.class_counts(), vec![10, 10]);
        // Originals retained.
        assert_eq!(&b.samples()[..d.len()], d.samples());

        let even = toy(&[3, 3, 3]);
        let b = oversample_balance(&even, &mut Rng::new(1)).unwrap();
        assert_eq!(ids(&b), ids(&even));

        assert!(oversample_balance(&toy(&[3, 0]), &mut Rng::new(0)).is_err());
    }

    #[test]
    fn split_examples() {
        let d = toy(&[50, 50]);
        let parts = split(&d, &[0.8, 0.2], 3).unwrap();
        assert_eq!(parts[0].len(), 80);
        assert_eq!(parts[1].len(), 20);
        assert_eq!(parts[0].class_counts(), vec![40, 40]);
        assert_eq!(parts[1].class_counts(), vec![10, 10]);
        assert_eq!(split(&d, &[0.8, 0.2], 3).unwrap(), parts);
        assert_ne!(split(&d, &[0.8, 0.2], 4).unwrap(), parts);

        assert!(split(&d, &[0.5, 0.6], 0).is_err());
        assert!(split(&d, &[1.0, 0.0], 0).is_err());
        assert!(split(&toy(&[5, 1]), &[0.5, 0.5], 0).is_err());
    }

    #[test]
    fn batch_stacks_images() {
        let d = toy(&[2, 1]);
        let (x, y) = d.batch(&[2, 0]).unwrap();
        assert_eq!(x.shape(), &[2, 2, 2, 1]);
        assert_eq!(y, vec![1, 0]);
        assert_eq!(x.data()[0], 0.1);
        assert!(d.batch(&[3]).is_err());
    }

    proptest! {
        #[test]
        fn balance_equalises_every_class(counts in prop::collection::vec(1usize..12, 1..5), seed in any::<u64>()) {
            let d = toy(&counts);
            let b = oversample_balance(&d, &mut Rng::new(seed)).unwrap();
            let max = *counts.iter().max().unwrap();
            prop_assert!(b.class_counts().iter().all(|&c| c == max));
            for (orig, new) in d.samples().iter().zip(b.samples()) {
                prop_assert_eq!(orig, new);
            }
        }

        #[test]
        fn split_partitions_the_dataset(
            counts in prop::collection::vec(3usize..30, 1..4),
            a in 1u32..10, b in 1u32..10, c in 1u32..10,
            seed in any::<u64>(),
        ) {
            let d = toy(&counts);
            let t = (a + b + c) as f64;
            let fr = [a as f64 / t, b as f64 / t, 1.0 - a as f64 / t - b as f64 / t];
            let parts = split(&d, &fr, seed).unwrap();
            let mut all: Vec<String> = parts.iter().flat_map(ids).collect();
            all.sort();
            prop_assert_eq!(all, ids(&d));
            for p in &parts {
                prop_assert!(p.class_counts().iter().all(|&n| n >= 1));
            }
        }
    }
}
