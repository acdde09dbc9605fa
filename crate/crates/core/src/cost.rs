//! Storage and client-computation accounting for a run.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::data::ClientId;
use crate::fl::RoundRecord;
use crate::selection::Archive;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    /// Floats held by the archive: one model plus the selected updates per stored round.
    pub stored_floats: usize,
    pub stored_models: usize,
    pub stored_updates: usize,
    /// Local trainings performed during FL, summed over rounds.
    pub client_training_rounds_fl: usize,
    /// Local trainings needed to unlearn `targets`: remaining archived clients per stored round.
    pub client_training_rounds_unlearn: usize,
    /// Replayed rounds during unlearning.
    pub unlearn_rounds: usize,
}

pub fn cost_report(archive: &Archive, records: &[RoundRecord], targets: &BTreeSet<ClientId>) -> CostReport {
    let client_training_rounds_unlearn = archive
        .rounds
        .iter()
        .map(|r| r.updates.keys().filter(|c| !targets.contains(c)).count())
        .sum();
    CostReport {
        stored_floats: archive.stored_floats(),
        stored_models: archive.len(),
        stored_updates: archive.total_updates(),
        client_training_rounds_fl: records.iter().map(|r| r.participants).sum(),
        client_training_rounds_unlearn,
        unlearn_rounds: archive.len(),
    }
}
