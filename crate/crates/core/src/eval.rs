//! Test accuracy, membership inference via a shadow classifier, and
//! backdoor attack success rate.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{ClientPartition, Sample, TriggerSpec};
use crate::error::{Error, Result};
use crate::model::{forward_logits, predict, ModelState};
use crate::rng;

pub fn test_accuracy(model: &ModelState, test_set: &[Sample]) -> Result<f64> {
    if test_set.is_empty() {
        return Err(Error::param("empty test set"));
    }
    let mut correct = 0usize;
    for s in test_set {
        if predict(model, &s.features)? == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / test_set.len() as f64)
}

/// Binary logistic classifier over a model's logit vector; class 1 means "member".
///
/// Inputs are standardized with the training-set mean and spread before
/// the linear layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShadowModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

const SHADOW_ITERS: usize = 2000;
const SHADOW_LR: f64 = 0.5;

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl ShadowModel {
    /// Full-batch gradient descent on the logistic loss.
    pub fn fit(features: &[Vec<f64>], labels: &[bool]) -> Result<Self> {
        if features.is_empty() || features.len() != labels.len() {
            return Err(Error::param("shadow training needs equally many non-empty features and labels"));
        }
        let dim = features[0].len();
        if features.iter().any(|f| f.len() != dim) {
            return Err(Error::param("shadow features have inconsistent lengths"));
        }
        let n = features.len() as f64;
        let shift: Vec<f64> = (0..dim).map(|j| features.iter().map(|f| f[j]).sum::<f64>() / n).collect();
        let scale: Vec<f64> = (0..dim)
            .map(|j| {
                let var = features.iter().map(|f| (f[j] - shift[j]).powi(2)).sum::<f64>() / n;
                if var > 0.0 { var.sqrt() } else { 1.0 }
            })
            .collect();
        let xs: Vec<Vec<f64>> = features
            .iter()
            .map(|f| f.iter().zip(&shift).zip(&scale).map(|((x, m), s)| (x - m) / s).collect())
            .collect();

        let mut w = vec![0.0; dim];
        let mut b = 0.0;
        for _ in 0..SHADOW_ITERS {
            let mut gw = vec![0.0; dim];
            let mut gb = 0.0;
            for (x, &y) in xs.iter().zip(labels) {
                let z = b + w.iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
                let r = sigmoid(z) - if y { 1.0 } else { 0.0 };
                gw.iter_mut().zip(x).for_each(|(g, c)| *g += r * c);
                gb += r;
            }
            w.iter_mut().zip(&gw).for_each(|(a, g)| *a -= SHADOW_LR * g / n);
            b -= SHADOW_LR * gb / n;
        }
        Ok(Self { weights: w, bias: b, shift, scale })
    }

    pub fn member_probability(&self, logits: &[f64]) -> Result<f64> {
        if logits.len() != self.weights.len() {
            return Err(Error::Dimension {
                expected: self.weights.len(),
                found: logits.len(),
            });
        }
        let z = self.bias
            + logits
                .iter()
                .zip(&self.shift)
                .zip(&self.scale)
                .zip(&self.weights)
                .map(|(((x, m), s), w)| w * (x - m) / s)
                .sum::<f64>();
        Ok(sigmoid(z))
    }

    pub fn is_member(&self, logits: &[f64]) -> Result<bool> {
        Ok(self.member_probability(logits)? > 0.5)
    }
}

fn logits_of(model: &ModelState, samples: &[&Sample]) -> Result<Vec<Vec<f64>>> {
    samples.iter().map(|s| forward_logits(model, &s.features)).collect()
}

/// Trains the shadow on `fl_model` logits: members labelled 1, non-members 0.
///
/// The larger set is cut down to the size of the smaller one after a
/// seeded shuffle.
pub fn train_shadow(fl_model: &ModelState, members: &[Sample], nonmembers: &[Sample], seed: u64) -> Result<ShadowModel> {
    if members.is_empty() || nonmembers.is_empty() {
        return Err(Error::param("shadow training needs members and non-members"));
    }
    let n = members.len().min(nonmembers.len());
    let mut rng = rng::seeded(seed);
    let mut pick = |set: &[Sample]| {
        let mut idx: Vec<usize> = (0..set.len()).collect();
        if set.len() > n {
            idx.shuffle(&mut rng);
            idx.truncate(n);
        }
        idx
    };
    let mi = pick(members);
    let ni = pick(nonmembers);
    let chosen: Vec<&Sample> = mi.iter().map(|&i| &members[i]).chain(ni.iter().map(|&i| &nonmembers[i])).collect();
    let labels: Vec<bool> = (0..chosen.len()).map(|i| i < mi.len()).collect();
    ShadowModel::fit(&logits_of(fl_model, &chosen)?, &labels)
}

/// Membership rates on the evaluation set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MisrBreakdown {
    /// Fraction of the whole evaluation set classified as member.
    pub misr: f64,
    pub member_rate: f64,
    pub nonmember_rate: f64,
}

/// Evaluates the shadow on `target_train` plus an equally sized prefix of `test_sample`.
pub fn misr_breakdown(
    shadow: &ShadowModel,
    eval_model: &ModelState,
    target_train: &[Sample],
    test_sample: &[Sample],
) -> Result<MisrBreakdown> {
    if target_train.is_empty() {
        return Err(Error::param("no target training data for membership evaluation"));
    }
    let n = target_train.len();
    if test_sample.len() < n {
        return Err(Error::param(format!(
            "membership evaluation needs {n} held-out samples, {} available",
            test_sample.len()
        )));
    }
    let count = |set: &[Sample]| -> Result<usize> {
        let mut hits = 0;
        for s in set {
            if shadow.is_member(&forward_logits(eval_model, &s.features)?)? {
                hits += 1;
            }
        }
        Ok(hits)
    };
    let m = count(target_train)?;
    let t = count(&test_sample[..n])?;
    Ok(MisrBreakdown {
        misr: (m + t) as f64 / (2 * n) as f64,
        member_rate: m as f64 / n as f64,
        nonmember_rate: t as f64 / n as f64,
    })
}

pub fn misr(shadow: &ShadowModel, eval_model: &ModelState, target_train: &[Sample], test_sample: &[Sample]) -> Result<f64> {
    Ok(misr_breakdown(shadow, eval_model, target_train, test_sample)?.misr)
}

/// Fraction of triggered holdout samples predicted as the target label.
/// Samples whose clean label already is the target are left out.
pub fn asr(model: &ModelState, clean_holdout: &[Sample], trigger: &TriggerSpec) -> Result<f64> {
    let mut total = 0usize;
    let mut hits = 0usize;
    for s in clean_holdout.iter().filter(|s| s.label != trigger.target_label) {
        let mut features = s.features.clone();
        trigger.stamp(&mut features);
        total += 1;
        if predict(model, &features)? == trigger.target_label {
            hits += 1;
        }
    }
    if total == 0 {
        return Err(Error::param("no holdout sample outside the target class"));
    }
    Ok(hits as f64 / total as f64)
}

/// ASR over the triggered samples held by poisoned clients, excluding
/// those whose clean label equals the target.
pub fn asr_on_client_data(model: &ModelState, partitions: &[&ClientPartition]) -> Result<f64> {
    let mut total = 0usize;
    let mut hits = 0usize;
    for p in partitions {
        let Some(spec) = &p.poison_spec else { continue };
        for t in p.triggered.iter().filter(|t| t.clean_label != spec.target_label) {
            total += 1;
            if predict(model, &p.samples[t.index].features)? == spec.target_label {
                hits += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::param("no triggered client samples outside the target class"));
    }
    Ok(hits as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalPhase {
    PostFl,
    PostUnlearn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub phase: EvalPhase,
    pub test_accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub misr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub asr: Option<f64>,
}

impl std::fmt::Display for EvalReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let phase = match self.phase {
            EvalPhase::PostFl => "post_fl",
            EvalPhase::PostUnlearn => "post_unlearn",
        };
        write!(f, "phase={phase} TA={:.4}", self.test_accuracy)?;
        if let Some(m) = self.misr {
            write!(f, " MISR={m:.4}")?;
        }
        if let Some(a) = self.asr {
            write!(f, " ASR={a:.4}")?;
        }
        Ok(())
    }
}
