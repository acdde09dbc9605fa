//! Unlearning by replaying archived rounds with the remaining clients.
//!
//! Starting from the earliest archived global model, every archived round
//! is replayed: each remaining client trains a fresh update from the
//! current unlearned model, the fresh update is used only for its
//! direction, and the archived update supplies the magnitude.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClientId, ClientPartition};
use crate::error::{Error, Result};
use crate::fl::{emit, FlConfig};
use crate::model::{sgd_local_train, LocalTraining, ModelSpec, ModelState};
use crate::privacy::{clip_update, gaussian_noise_update};
use crate::rng::{self, Phase};
use crate::selection::Archive;
use crate::vector::ParamVector;

/// Clients whose data must be forgotten.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnlearnRequest {
    pub target_clients: BTreeSet<ClientId>,
}

impl UnlearnRequest {
    pub fn new(targets: impl IntoIterator<Item = ClientId>, num_clients: usize) -> Result<Self> {
        let request = Self {
            target_clients: targets.into_iter().collect(),
        };
        request.validate(num_clients)?;
        Ok(request)
    }

    pub fn validate(&self, num_clients: usize) -> Result<()> {
        if self.target_clients.is_empty() {
            return Err(Error::param("unlearning request names no clients"));
        }
        if let Some(&bad) = self.target_clients.iter().find(|&&c| c >= num_clients) {
            return Err(Error::param(format!("unknown client {bad} (federation has {num_clients})")));
        }
        if self.target_clients.len() == num_clients {
            return Err(Error::UnlearningImpossible("every client is a target".into()));
        }
        Ok(())
    }

    pub fn is_target(&self, client: ClientId) -> bool {
        self.target_clients.contains(&client)
    }
}

/// How calibrated updates are averaged in each replayed round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Divide by the data size of every remaining client in the federation,
    /// even those absent from the round's archived client set.
    #[default]
    Strict,
    /// Divide by the data size of the clients present in the round.
    Renormalized,
}

/// Optional clipped Gaussian noise on fresh updates (off by default).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnlearnNoise {
    pub sigma: f64,
    pub clip_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnlearnConfig {
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub normalization: Normalization,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<UnlearnNoise>,
    pub master_seed: u64,
}

impl UnlearnConfig {
    /// Same local training settings and learning rate as the FL run.
    pub fn from_fl(fl: &FlConfig) -> Self {
        Self {
            local_epochs: fl.local_epochs,
            batch_size: fl.batch_size,
            lr: fl.lr,
            normalization: Normalization::Strict,
            noise: None,
            master_seed: fl.master_seed,
        }
    }

    fn local_training(&self) -> LocalTraining {
        LocalTraining {
            epochs: self.local_epochs,
            batch_size: self.batch_size,
            lr: self.lr,
        }
    }
}

/// Read access to client partitions during unlearning.
///
/// The engine only ever asks for remaining clients, which lets tests audit
/// that no target partition is touched.
pub trait PartitionSource: Sync {
    fn num_clients(&self) -> usize;
    fn partition(&self, client: ClientId) -> &ClientPartition;
}

impl PartitionSource for [ClientPartition] {
    fn num_clients(&self) -> usize {
        self.len()
    }

    fn partition(&self, client: ClientId) -> &ClientPartition {
        &self[client]
    }
}

impl PartitionSource for Vec<ClientPartition> {
    fn num_clients(&self) -> usize {
        self.len()
    }

    fn partition(&self, client: ClientId) -> &ClientPartition {
        &self[client]
    }
}

/// One archived round with target clients removed.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlearnRoundPlan {
    pub round: u64,
    pub remaining_clients: BTreeSet<ClientId>,
    pub historical_updates: BTreeMap<ClientId, ParamVector>,
}

pub fn plan_rounds(archive: &Archive, request: &UnlearnRequest) -> Vec<UnlearnRoundPlan> {
    archive
        .rounds
        .iter()
        .map(|r| {
            let historical_updates: BTreeMap<ClientId, ParamVector> = r
                .updates
                .iter()
                .filter(|(c, _)| !request.is_target(**c))
                .map(|(c, u)| (*c, u.update.clone()))
                .collect();
            UnlearnRoundPlan {
                round: r.round,
                remaining_clients: historical_updates.keys().copied().collect(),
                historical_updates,
            }
        })
        .collect()
}

/// `cos(h, f) * (|h| / |f|) * f`, i.e. the projection of `h` onto the line of `f`.
///
/// A zero `h` or zero `f` yields the zero vector.
pub fn calibrate_update(historical: &ParamVector, fresh: &ParamVector) -> Result<ParamVector> {
    let hf = historical.dot(fresh)?;
    let ff = fresh.dot(fresh)?;
    if ff == 0.0 || historical.norm() == 0.0 {
        return Ok(ParamVector::zeros(fresh.len()));
    }
    fresh.scaled(hf / ff)
}

/// `sum(w_i * u_i) / denominator`.
pub fn aggregate_calibrated(updates: &[(ParamVector, f64)], denominator: f64) -> Result<ParamVector> {
    let first = updates.first().ok_or_else(|| Error::param("no calibrated updates to aggregate"))?;
    if !(denominator.is_finite() && denominator > 0.0) {
        return Err(Error::param(format!("denominator {denominator} must be positive")));
    }
    let mut acc = vec![0.0; first.0.len()];
    for (u, w) in updates {
        if u.len() != acc.len() {
            return Err(Error::Dimension {
                expected: acc.len(),
                found: u.len(),
            });
        }
        if !(w.is_finite() && *w > 0.0) {
            return Err(Error::param(format!("weight {w} must be positive")));
        }
        acc.iter_mut().zip(u.iter()).for_each(|(a, x)| *a += w * x);
    }
    ParamVector::new(acc.into_iter().map(|a| a / denominator).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlearnRecord {
    pub phase: String,
    pub round: u64,
    pub remaining_clients: usize,
    pub skipped: bool,
    pub update_norm: f64,
}

#[derive(Debug, Clone)]
pub struct UnlearnOutcome {
    pub model: ModelState,
    pub records: Vec<UnlearnRecord>,
    /// Number of (client, round) local trainings performed.
    pub client_training_rounds: usize,
}

fn fresh_update<P: PartitionSource + ?Sized>(
    config: &UnlearnConfig,
    model: &ModelState,
    partitions: &P,
    round: u64,
    client: ClientId,
) -> Result<ParamVector> {
    let mut train_rng = rng::stream(config.master_seed, Phase::Unlearn, round, client as u64);
    let local = sgd_local_train(model, partitions.partition(client), config.local_training(), &mut train_rng)?;
    match config.noise {
        None => Ok(local.update),
        Some(noise) => {
            let clipped = clip_update(&local.update, noise.clip_s)?;
            let mut noise_rng = rng::stream(config.master_seed, Phase::UnlearnNoise, round, client as u64);
            gaussian_noise_update(&clipped, noise.sigma, noise.clip_s, &mut noise_rng)
        }
    }
}

/// Replays the archive without the target clients and returns the unlearned model.
pub fn run_unlearning<P: PartitionSource + ?Sized>(
    archive: &Archive,
    spec: &ModelSpec,
    partitions: &P,
    request: &UnlearnRequest,
    config: &UnlearnConfig,
    mut metrics: Option<&mut dyn Write>,
) -> Result<UnlearnOutcome> {
    let first = archive
        .rounds
        .first()
        .ok_or_else(|| Error::UnlearningImpossible("archive is empty".into()))?;
    let num_clients = partitions.num_clients();
    request.validate(num_clients)?;
    if archive.meta.num_clients != num_clients {
        return Err(Error::param(format!(
            "archive covers {} clients, {} partitions given",
            archive.meta.num_clients, num_clients
        )));
    }
    if !(config.lr.is_finite() && config.lr > 0.0) {
        return Err(Error::param(format!("learning rate {} must be positive", config.lr)));
    }

    let plans = plan_rounds(archive, request);
    if plans.iter().all(|p| p.remaining_clients.is_empty()) {
        return Err(Error::UnlearningImpossible(
            "no archived round keeps a remaining client".into(),
        ));
    }

    let weight_of = |c: ClientId| partitions.partition(c).weight();
    let strict_total: f64 = (0..num_clients).filter(|&c| !request.is_target(c)).map(weight_of).sum();

    let mut model = ModelState::new(spec.clone(), first.model.clone())?;
    let mut records = Vec::with_capacity(plans.len());
    let mut trainings = 0;

    for plan in &plans {
        if plan.remaining_clients.is_empty() {
            warn!("round {}: no remaining clients, skipped", plan.round);
            records.push(UnlearnRecord {
                phase: "unlearn".into(),
                round: plan.round,
                remaining_clients: 0,
                skipped: true,
                update_norm: 0.0,
            });
            continue;
        }

        let clients: Vec<ClientId> = plan.remaining_clients.iter().copied().collect();
        let calibrated = clients
            .par_iter()
            .map(|&c| {
                let fresh = fresh_update(config, &model, partitions, plan.round, c)?;
                let u = calibrate_update(&plan.historical_updates[&c], &fresh)?;
                Ok((u, weight_of(c)))
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e: Error| match e {
                Error::Numeric(m) => Error::Numeric(format!("unlearning round {}: {m}", plan.round)),
                other => other,
            })?;
        trainings += clients.len();

        let denominator = match config.normalization {
            Normalization::Strict => strict_total,
            Normalization::Renormalized => calibrated.iter().map(|(_, w)| w).sum(),
        };
        let step = aggregate_calibrated(&calibrated, denominator)?;
        let next = model
            .params
            .add_scaled(-config.lr, &step)
            .map_err(|e| Error::Numeric(format!("unlearned model diverged in round {}: {e}", plan.round)))?;
        model = model.with_params(next)?;
        records.push(UnlearnRecord {
            phase: "unlearn".into(),
            round: plan.round,
            remaining_clients: clients.len(),
            skipped: false,
            update_norm: step.norm(),
        });
    }

    for r in &records {
        emit(&mut metrics, r)?;
    }
    Ok(UnlearnOutcome {
        model,
        records,
        client_training_rounds: trainings,
    })
}
