use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::rng;

/// Parameters of the Gaussian-mixture stand-in dataset.
///
/// Class `k` is centred at `separation * e_k`, so every class mean lies
/// `separation` standard deviations from the origin along its own axis.
/// Dimensions past `num_classes` carry pure noise. All classes share an
/// isotropic unit covariance, and `num_classes` may not exceed `dim`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub per_class: usize,
    #[serde(default = "default_separation")]
    pub separation: f64,
    pub seed: u64,
}

fn default_separation() -> f64 {
    4.0
}

impl SyntheticSpec {
    pub fn new(num_classes: usize, dim: usize, per_class: usize, seed: u64) -> Self {
        Self {
            num_classes,
            dim,
            per_class,
            separation: default_separation(),
            seed,
        }
    }
}

fn class_means(spec: &SyntheticSpec) -> Vec<Vec<f64>> {
    (0..spec.num_classes)
        .map(|c| {
            let mut mean = vec![0.0; spec.dim];
            mean[c] = spec.separation;
            mean
        })
        .collect()
}

/// Generates a shuffled, min-max normalized Gaussian-mixture dataset.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.num_classes < 2 || spec.dim < spec.num_classes || spec.per_class < 1 {
        return Err(Error::param(format!(
            "synthetic data needs 2 <= num_classes <= dim and per_class >= 1 (got {}, {}, {})",
            spec.num_classes, spec.dim, spec.per_class
        )));
    }
    if !(spec.separation.is_finite() && spec.separation > 0.0) {
        return Err(Error::param("separation must be positive"));
    }

    let mut rng = rng::seeded(spec.seed);
    let means = class_means(spec);
    let mut samples = Vec::with_capacity(spec.num_classes * spec.per_class);
    for (label, mean) in means.iter().enumerate() {
        for _ in 0..spec.per_class {
            let features = mean
                .iter()
                .map(|m| m + Distribution::<f64>::sample(&StandardNormal, &mut rng))
                .collect();
            samples.push(Sample { features, label });
        }
    }
    samples.shuffle(&mut rng);

    // min-max per feature
    for j in 0..spec.dim {
        let (lo, hi) = samples.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| {
            (lo.min(s.features[j]), hi.max(s.features[j]))
        });
        let span = hi - lo;
        for s in &mut samples {
            s.features[j] = if span > 0.0 { (s.features[j] - lo) / span } else { 0.0 };
        }
    }

    Ok(Dataset {
        samples,
        dim: spec.dim,
        num_classes: spec.num_classes,
    })
}

/// Splits off a test set of `round(test_fraction * n)` samples after a seeded shuffle.
pub fn train_test_split(data: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::param("test_fraction must be in [0, 1)"));
    }
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut rng::seeded(seed));
    let n_test = (test_fraction * data.len() as f64).round() as usize;
    let (test, train) = idx.split_at(n_test);
    Ok((data.subset(train), data.subset(test)))
}
