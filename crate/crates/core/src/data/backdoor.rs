use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{ClientPartition, TriggeredSample};
use crate::error::{Error, Result};
use crate::rng;

/// Pixel-block style trigger: a fixed set of features forced to `trigger_value`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriggerSpec {
    pub feature_indices: Vec<usize>,
    #[serde(default = "default_trigger_value")]
    pub trigger_value: f64,
    pub target_label: usize,
    pub poison_fraction: f64,
}

fn default_trigger_value() -> f64 {
    1.0
}

impl TriggerSpec {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if let Some(&i) = self.feature_indices.iter().find(|&&i| i >= dim) {
            return Err(Error::param(format!(
                "trigger feature index {i} out of range for dimension {dim}"
            )));
        }
        if !(self.poison_fraction > 0.0 && self.poison_fraction <= 1.0) {
            return Err(Error::param(format!(
                "poison_fraction {} outside (0, 1]",
                self.poison_fraction
            )));
        }
        if !self.trigger_value.is_finite() {
            return Err(Error::param("trigger_value must be finite"));
        }
        Ok(())
    }

    /// Writes the trigger pattern into `features`.
    pub fn stamp(&self, features: &mut [f64]) {
        for &i in &self.feature_indices {
            features[i] = self.trigger_value;
        }
    }
}

/// Dirty-label backdoor: a seeded choice of `poison_fraction` of the samples
/// gets the trigger stamped and its label replaced by the target label.
pub fn apply_backdoor(partition: &ClientPartition, spec: &TriggerSpec, seed: u64) -> Result<ClientPartition> {
    if partition.poisoned {
        return Err(Error::State(format!(
            "client {} is already poisoned",
            partition.client_id
        )));
    }
    let dim = partition.samples.first().map_or(0, |s| s.features.len());
    spec.validate(dim)?;

    let n = partition.len();
    let k = ((spec.poison_fraction * n as f64).round() as usize).clamp(1, n);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::seeded(seed));
    let mut chosen = idx[..k].to_vec();
    chosen.sort_unstable();

    let mut out = partition.clone();
    out.triggered = chosen
        .iter()
        .map(|&i| {
            let sample = &mut out.samples[i];
            let clean_label = sample.label;
            spec.stamp(&mut sample.features);
            sample.label = spec.target_label;
            TriggeredSample { index: i, clean_label }
        })
        .collect();
    out.poisoned = true;
    out.poison_spec = Some(spec.clone());
    Ok(out)
}
