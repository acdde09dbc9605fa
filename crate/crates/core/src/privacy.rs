//! Adaptive privacy budget and the clipped Gaussian mechanism.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vector::ParamVector;

/// Budget bounds and mechanism constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrivacyParams {
    pub epsilon_min: f64,
    pub epsilon_max: f64,
    pub delta: f64,
    pub clip_s: f64,
    /// Starting budget; `epsilon_max` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon_init: Option<f64>,
}

impl Default for PrivacyParams {
    fn default() -> Self {
        Self {
            epsilon_min: 0.1,
            epsilon_max: 3.0,
            delta: 1e-5,
            clip_s: 1.0,
            epsilon_init: None,
        }
    }
}

impl PrivacyParams {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if !(pos(self.epsilon_min) && pos(self.epsilon_max) && self.epsilon_min <= self.epsilon_max) {
            return Err(Error::param(format!(
                "need 0 < epsilon_min <= epsilon_max (got {}, {})",
                self.epsilon_min, self.epsilon_max
            )));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::param(format!("delta {} outside (0, 1)", self.delta)));
        }
        if !pos(self.clip_s) {
            return Err(Error::param(format!("clip threshold {} must be positive", self.clip_s)));
        }
        if let Some(e) = self.epsilon_init {
            if !(e >= self.epsilon_min && e <= self.epsilon_max) {
                return Err(Error::param(format!(
                    "epsilon_init {e} outside [{}, {}]",
                    self.epsilon_min, self.epsilon_max
                )));
            }
        }
        Ok(())
    }
}

/// Running budget state: current `epsilon_t` and the last observed training loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyState {
    pub epsilon_t: f64,
    pub epsilon_min: f64,
    pub epsilon_max: f64,
    pub delta: f64,
    pub clip_s: f64,
    pub prev_loss: f64,
}

impl PrivacyState {
    pub fn new(params: &PrivacyParams, initial_loss: f64) -> Result<Self> {
        params.validate()?;
        if !initial_loss.is_finite() {
            return Err(Error::Numeric(format!("initial loss {initial_loss} is not finite")));
        }
        Ok(Self {
            epsilon_t: params.epsilon_init.unwrap_or(params.epsilon_max),
            epsilon_min: params.epsilon_min,
            epsilon_max: params.epsilon_max,
            delta: params.delta,
            clip_s: params.clip_s,
            prev_loss: initial_loss,
        })
    }

    /// `min(max(eps_t * e^{|prev - current|}, eps_min), eps_max)`.
    ///
    /// Advances the state: the result becomes `epsilon_t` and `current_loss`
    /// becomes `prev_loss`.
    pub fn next_budget(&mut self, current_loss: f64) -> Result<f64> {
        if !current_loss.is_finite() {
            return Err(Error::Numeric(format!("training loss {current_loss} is not finite")));
        }
        let delta_loss = (self.prev_loss - current_loss).abs();
        let next = (self.epsilon_t * delta_loss.exp()).max(self.epsilon_min).min(self.epsilon_max);
        self.epsilon_t = next;
        self.prev_loss = current_loss;
        Ok(next)
    }

    pub fn sigma(&self) -> Result<f64> {
        noise_sigma(self.epsilon_t, self.delta, self.clip_s)
    }
}

/// `S * sqrt(2 ln(1.25 / delta)) / epsilon`.
pub fn noise_sigma(epsilon: f64, delta: f64, clip_s: f64) -> Result<f64> {
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(Error::param(format!("epsilon {epsilon} must be positive")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::param(format!("delta {delta} outside (0, 1)")));
    }
    if !(clip_s.is_finite() && clip_s > 0.0) {
        return Err(Error::param(format!("clip threshold {clip_s} must be positive")));
    }
    Ok(clip_s * (2.0 * (1.25 / delta).ln()).sqrt() / epsilon)
}

/// `g / max(1, ||g|| / S)`; returns `g` untouched when already inside the ball.
pub fn clip_update(g: &ParamVector, clip_s: f64) -> Result<ParamVector> {
    if !(clip_s.is_finite() && clip_s > 0.0) {
        return Err(Error::param(format!("clip threshold {clip_s} must be positive")));
    }
    let norm = g.norm();
    if norm <= clip_s {
        return Ok(g.clone());
    }
    g.scaled(clip_s / norm)
}

/// Adds i.i.d. `N(0, (sigma * S)^2)` noise to every coordinate.
pub fn gaussian_noise_update<R: Rng>(
    g_clipped: &ParamVector,
    sigma: f64,
    clip_s: f64,
    rng: &mut R,
) -> Result<ParamVector> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::param(format!("sigma {sigma} must be finite and >= 0")));
    }
    if sigma == 0.0 {
        return Ok(g_clipped.clone());
    }
    let std = sigma * clip_s;
    ParamVector::new(
        g_clipped
            .iter()
            .map(|v| {
                let z: f64 = StandardNormal.sample(rng);
                v + std * z
            })
            .collect(),
    )
}
