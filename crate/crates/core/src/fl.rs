//! Federated training with adaptive DP noising and stage-buffered selection.
//!
//! Each round every client trains locally from the current global model,
//! clips and noises its update (when DP is on), and the server aggregates,
//! steps the global model, buffers the round, flushes the stage into the
//! archive when the loss has dropped by `beta`, and adapts the budget.

use std::io::Write;

use log::debug;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{AggregationRule, WeightedUpdate};
use crate::data::ClientPartition;
use crate::error::{Error, Result};
use crate::model::{self, sgd_local_train, LocalTraining, ModelState};
use crate::privacy::{clip_update, gaussian_noise_update, noise_sigma, PrivacyParams, PrivacyState};
use crate::rng::{self, Phase};
use crate::selection::{flush_stage, stage_should_flush, Archive, ArchiveMeta, ClientUpdate, RoundEntry, StageBuffer};
use crate::vector::ParamVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlConfig {
    pub num_clients: usize,
    pub global_rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub privacy: PrivacyParams,
    pub aggregation: AggregationRule,
    pub dp_enabled: bool,
    /// Forces the noise multiplier (e.g. 0 to keep clipping but drop noise).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_override: Option<f64>,
    pub master_seed: u64,
}

impl Default for FlConfig {
    fn default() -> Self {
        Self {
            num_clients: 20,
            global_rounds: 40,
            local_epochs: 5,
            batch_size: 64,
            lr: 0.005,
            beta: 0.10,
            lambda: 0.6,
            gamma: 0.7,
            privacy: PrivacyParams::default(),
            aggregation: AggregationRule::Fedavg,
            dp_enabled: true,
            sigma_override: None,
            master_seed: 0,
        }
    }
}

impl FlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 || self.global_rounds == 0 || self.local_epochs == 0 || self.batch_size == 0 {
            return Err(Error::param("num_clients, global_rounds, local_epochs and batch_size must be >= 1"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::param(format!("learning rate {} must be positive", self.lr)));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::param(format!("beta {} outside (0, 1)", self.beta)));
        }
        for (name, v) in [("lambda", self.lambda), ("gamma", self.gamma)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::param(format!("{name} {v} outside (0, 1]")));
            }
        }
        if let AggregationRule::TrimmedMean { trim_fraction } = self.aggregation {
            if !(0.0..0.5).contains(&trim_fraction) {
                return Err(Error::param(format!("trim fraction {trim_fraction} outside [0, 0.5)")));
            }
        }
        if let Some(s) = self.sigma_override {
            if !(s.is_finite() && s >= 0.0) {
                return Err(Error::param(format!("sigma override {s} must be >= 0")));
            }
        }
        self.privacy.validate()
    }

    pub fn local_training(&self) -> LocalTraining {
        LocalTraining {
            epochs: self.local_epochs,
            batch_size: self.batch_size,
            lr: self.lr,
        }
    }
}

/// Per-round metrics, emitted as one JSON line per round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub phase: String,
    pub round: u64,
    pub global_loss: f64,
    pub epsilon_used: f64,
    pub sigma_used: f64,
    pub participants: usize,
    pub flushed: bool,
    pub archived_models_total: usize,
    pub archived_updates_total: usize,
}

#[derive(Debug, Clone)]
pub struct FlOutcome {
    pub final_model: ModelState,
    pub archive: Archive,
    pub records: Vec<RoundRecord>,
}

/// `sum(w_i * loss_i) / sum(w_i)`.
pub fn weighted_global_loss(local_losses: &[(f64, f64)]) -> Result<f64> {
    if local_losses.is_empty() {
        return Err(Error::param("no client losses to average"));
    }
    if let Some((_, w)) = local_losses.iter().find(|(_, w)| !(w.is_finite() && *w > 0.0)) {
        return Err(Error::param(format!("loss weight {w} must be positive")));
    }
    let total: f64 = local_losses.iter().map(|(_, w)| w).sum();
    Ok(local_losses.iter().map(|(l, w)| l * w).sum::<f64>() / total)
}

pub(crate) fn check_partitions(partitions: &[ClientPartition], expected: usize) -> Result<()> {
    if partitions.len() != expected {
        return Err(Error::param(format!(
            "{} partitions for {expected} clients",
            partitions.len()
        )));
    }
    for (i, p) in partitions.iter().enumerate() {
        if p.client_id != i {
            return Err(Error::param(format!("partition {i} carries client id {}", p.client_id)));
        }
        if p.is_empty() {
            return Err(Error::param(format!("client {i} has no data")));
        }
    }
    Ok(())
}

pub(crate) fn emit<T: Serialize>(sink: &mut Option<&mut dyn Write>, record: &T) -> Result<()> {
    if let Some(w) = sink.as_mut() {
        let line = serde_json::to_string(record).map_err(|e| Error::State(format!("metrics encoding: {e}")))?;
        writeln!(w, "{line}").map_err(|e| Error::io("<metrics>", e))?;
    }
    Ok(())
}

fn tag_round(e: Error, round: u64) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("round {round}: {m}")),
        other => other,
    }
}

struct ClientResult {
    update: ParamVector,
    loss: f64,
    weight: f64,
}

fn train_client(
    config: &FlConfig,
    model: &ModelState,
    partition: &ClientPartition,
    round: u64,
    sigma: f64,
) -> Result<ClientResult> {
    let client = partition.client_id as u64;
    let mut train_rng = rng::stream(config.master_seed, Phase::Train, round, client);
    let local = sgd_local_train(model, partition, config.local_training(), &mut train_rng)?;
    let update = if config.dp_enabled {
        let clipped = clip_update(&local.update, config.privacy.clip_s)?;
        let mut noise_rng = rng::stream(config.master_seed, Phase::Noise, round, client);
        gaussian_noise_update(&clipped, sigma, config.privacy.clip_s, &mut noise_rng)?
    } else {
        local.update
    };
    Ok(ClientResult {
        update,
        loss: local.final_loss,
        weight: partition.weight(),
    })
}

/// Runs all global rounds and returns the final model, the archive and per-round records.
pub fn run_federated_learning(
    config: &FlConfig,
    partitions: &[ClientPartition],
    initial_model: &ModelState,
    mut metrics: Option<&mut dyn Write>,
) -> Result<FlOutcome> {
    config.validate()?;
    check_partitions(partitions, config.num_clients)?;

    let initial_losses = partitions
        .iter()
        .map(|p| Ok((model::loss(initial_model, &p.samples)?, p.weight())))
        .collect::<Result<Vec<_>>>()?;
    let initial_loss = weighted_global_loss(&initial_losses)?;
    let mut privacy = PrivacyState::new(&config.privacy, initial_loss)?;
    let mut stage_loss = initial_loss;

    let mut buffer = StageBuffer::new(initial_model.params.clone());
    let mut archive = Archive::new(ArchiveMeta {
        lambda: config.lambda,
        gamma: config.gamma,
        num_clients: config.num_clients,
        model_dim: initial_model.params.len(),
    });
    let mut current = initial_model.clone();
    let mut records = Vec::with_capacity(config.global_rounds);

    for t in 1..=config.global_rounds as u64 {
        let epsilon = privacy.epsilon_t;
        let sigma = match (config.dp_enabled, config.sigma_override) {
            (false, _) => 0.0,
            (true, Some(s)) => s,
            (true, None) => noise_sigma(epsilon, config.privacy.delta, config.privacy.clip_s)?,
        };

        let results = partitions
            .par_iter()
            .map(|p| train_client(config, &current, p, t, sigma).map_err(|e| tag_round(e, t)))
            .collect::<Result<Vec<_>>>()?;

        let weighted: Vec<WeightedUpdate> = results
            .iter()
            .map(|r| WeightedUpdate::new(r.update.clone(), r.weight))
            .collect();
        let aggregate = config.aggregation.aggregate(&weighted).map_err(|e| tag_round(e, t))?;
        let next = current
            .params
            .add_scaled(-config.lr, &aggregate)
            .map_err(|e| Error::Numeric(format!("global model diverged in round {t}: {e}")))?;
        current = current.with_params(next)?;

        let losses: Vec<(f64, f64)> = results.iter().map(|r| (r.loss, r.weight)).collect();
        let global_loss = weighted_global_loss(&losses)?;
        if !global_loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite training loss in round {t}")));
        }

        buffer.push(RoundEntry {
            round: t,
            model: current.params.clone(),
            updates: partitions
                .iter()
                .zip(results)
                .map(|(p, r)| (p.client_id, ClientUpdate { weight: r.weight, update: r.update }))
                .collect(),
            aggregate,
        })?;

        let flushed = stage_should_flush(global_loss, stage_loss, config.beta);
        if flushed {
            let s = flush_stage(&mut buffer, &mut archive, config.lambda, config.gamma).map_err(|e| tag_round(e, t))?;
            debug!("round {t}: stage flushed, +{} models, +{} updates", s.models_added, s.updates_added);
            stage_loss = global_loss;
        }
        privacy.next_budget(global_loss)?;

        let record = RoundRecord {
            phase: "fl".into(),
            round: t,
            global_loss,
            epsilon_used: epsilon,
            sigma_used: sigma,
            participants: partitions.len(),
            flushed,
            archived_models_total: archive.len(),
            archived_updates_total: archive.total_updates(),
        };
        records.push(record);
    }

    if !buffer.is_empty() {
        flush_stage(&mut buffer, &mut archive, config.lambda, config.gamma)?;
        if let Some(last) = records.last_mut() {
            last.flushed = true;
            last.archived_models_total = archive.len();
            last.archived_updates_total = archive.total_updates();
        }
    }
    for r in &records {
        emit(&mut metrics, r)?;
    }

    Ok(FlOutcome {
        final_model: current,
        archive,
        records,
    })
}
