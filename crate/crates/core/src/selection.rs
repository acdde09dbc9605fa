//! Dual-layered selection of historical information.
//!
//! Rounds accumulate in a [`StageBuffer`] until the global loss drops far
//! enough; the stage is then flushed: the global models that changed the
//! most relative to their predecessor are kept, and for each kept round only
//! the client updates best aligned with that round's aggregate are stored
//! in the [`Archive`].

use std::collections::{BTreeMap, BTreeSet};

use crate::data::ClientId;
use crate::error::{Error, Result};
use crate::vector::{cosine_similarity, l2_norm, relu, ParamVector};

/// `relu(cos(curr, prev))`.
pub fn model_alignment(m_curr: &ParamVector, m_prev: &ParamVector) -> Result<f64> {
    Ok(relu(cosine_similarity(m_curr, m_prev)?))
}

/// Zero-norm inputs count as alignment 0 instead of failing.
fn alignment_or_zero(a: &ParamVector, b: &ParamVector) -> Result<f64> {
    if l2_norm(a) == 0.0 || l2_norm(b) == 0.0 {
        if a.len() != b.len() {
            return Err(Error::Dimension { expected: a.len(), found: b.len() });
        }
        return Ok(0.0);
    }
    cosine_similarity(a, b)
}

/// True when `current_loss <= (1 - beta) * prev_stage_loss`.
pub fn stage_should_flush(current_loss: f64, prev_stage_loss: f64, beta: f64) -> bool {
    current_loss <= (1.0 - beta) * prev_stage_loss
}

/// `max(1, round_half_up(ratio * n))`.
pub fn selection_count(ratio: f64, n: usize) -> usize {
    // the epsilon keeps products like 0.35 * 10 from landing just under .5
    let k = (ratio * n as f64 + 0.5 + 1e-9).floor() as usize;
    k.clamp(1, n.max(1))
}

fn check_ratio(name: &str, ratio: f64) -> Result<()> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::param(format!("{name} = {ratio} outside (0, 1]")));
    }
    Ok(())
}

/// A client's noised update and its aggregation weight `|D_c|`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub weight: f64,
    pub update: ParamVector,
}

/// One buffered training round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundEntry {
    pub round: u64,
    /// Global model produced by this round.
    pub model: ParamVector,
    pub updates: BTreeMap<ClientId, ClientUpdate>,
    /// Aggregated update applied this round.
    pub aggregate: ParamVector,
}

/// Temporary storage for the rounds of the current stage.
#[derive(Debug, Clone)]
pub struct StageBuffer {
    /// Model preceding the first buffered round.
    anchor: ParamVector,
    rounds: Vec<RoundEntry>,
}

impl StageBuffer {
    /// Starts empty; `initial_model` is the predecessor of the first round.
    pub fn new(initial_model: ParamVector) -> Self {
        Self { anchor: initial_model, rounds: Vec::new() }
    }

    pub fn push(&mut self, entry: RoundEntry) -> Result<()> {
        if let Some(last) = self.rounds.last() {
            if entry.round <= last.round {
                return Err(Error::State(format!(
                    "round {} buffered after round {}",
                    entry.round, last.round
                )));
            }
        }
        if entry.model.len() != self.anchor.len() {
            return Err(Error::Dimension { expected: self.anchor.len(), found: entry.model.len() });
        }
        self.rounds.push(entry);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rounds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rounds.is_empty()
    }

    pub fn rounds(&self) -> &[RoundEntry] {
        &self.rounds
    }

    /// `d(M_t, M_{t-1})` for every buffered round, in buffer order.
    pub fn alignments(&self) -> Result<Vec<f64>> {
        let mut prev = &self.anchor;
        let mut out = Vec::with_capacity(self.rounds.len());
        for entry in &self.rounds {
            out.push(relu(alignment_or_zero(&entry.model, prev)?));
            prev = &entry.model;
        }
        Ok(out)
    }

    fn clear(&mut self) {
        if let Some(last) = self.rounds.pop() {
            self.anchor = last.model;
        }
        self.rounds.clear();
    }
}

/// Rounds whose models changed most, `max(1, round(lambda * n))` of them, in round order.
pub fn select_models(buffer: &StageBuffer, lambda: f64) -> Result<Vec<u64>> {
    if buffer.is_empty() {
        return Err(Error::State("model selection on an empty stage buffer".into()));
    }
    check_ratio("lambda", lambda)?;
    let align = buffer.alignments()?;
    let mut order: Vec<usize> = (0..align.len()).collect();
    order.sort_by(|&a, &b| align[a].total_cmp(&align[b]).then(a.cmp(&b)));
    let k = selection_count(lambda, align.len());
    let mut picked: Vec<u64> = order[..k].iter().map(|&i| buffer.rounds[i].round).collect();
    picked.sort_unstable();
    Ok(picked)
}

fn rank_updates(entry: &RoundEntry, gamma: f64, strict: bool) -> Result<Vec<ClientId>> {
    if entry.updates.is_empty() {
        return Err(Error::State(format!("round {} has no client updates", entry.round)));
    }
    check_ratio("gamma", gamma)?;
    if strict && l2_norm(&entry.aggregate) == 0.0 {
        return Err(Error::DegenerateVector("zero-norm aggregated update"));
    }
    let mut scored: Vec<(ClientId, f64)> = entry
        .updates
        .iter()
        .map(|(&c, u)| Ok((c, alignment_or_zero(&u.update, &entry.aggregate)?)))
        .collect::<Result<_>>()?;
    // highest alignment first, smaller client id on ties
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let k = selection_count(gamma, scored.len());
    let mut picked: Vec<ClientId> = scored[..k].iter().map(|(c, _)| *c).collect();
    picked.sort_unstable();
    Ok(picked)
}

/// Clients whose updates align best with the round aggregate,
/// `max(1, round(gamma * C))` of them, in id order.
pub fn select_updates(entry: &RoundEntry, gamma: f64) -> Result<Vec<ClientId>> {
    rank_updates(entry, gamma, true)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchivedRound {
    pub round: u64,
    pub model: ParamVector,
    pub updates: BTreeMap<ClientId, ClientUpdate>,
}

impl ArchivedRound {
    /// Clients that provided the stored updates (`C_t`).
    pub fn client_set(&self) -> BTreeSet<ClientId> {
        self.updates.keys().copied().collect()
    }
}

/// Selection parameters recorded alongside the archive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArchiveMeta {
    pub lambda: f64,
    pub gamma: f64,
    pub num_clients: usize,
    pub model_dim: usize,
}

/// Persistent history: selected global models, their selected client
/// updates and the contributing client sets.
#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub meta: ArchiveMeta,
    pub rounds: Vec<ArchivedRound>,
}

impl Archive {
    pub fn new(meta: ArchiveMeta) -> Self {
        Self { meta, rounds: Vec::new() }
    }

    pub fn is_empty(&self) -> bool {
        self.rounds.is_empty()
    }

    pub fn len(&self) -> usize {
        self.rounds.len()
    }

    pub fn stored_models(&self) -> impl Iterator<Item = (u64, &ParamVector)> {
        self.rounds.iter().map(|r| (r.round, &r.model))
    }

    pub fn get(&self, round: u64) -> Option<&ArchivedRound> {
        self.rounds.iter().find(|r| r.round == round)
    }

    pub fn client_sets(&self) -> BTreeMap<u64, BTreeSet<ClientId>> {
        self.rounds.iter().map(|r| (r.round, r.client_set())).collect()
    }

    pub fn total_updates(&self) -> usize {
        self.rounds.iter().map(|r| r.updates.len()).sum()
    }

    /// Floats held: one model plus every stored update per archived round.
    pub fn stored_floats(&self) -> usize {
        self.rounds
            .iter()
            .map(|r| r.model.len() + r.updates.values().map(|u| u.update.len()).sum::<usize>())
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FlushSummary {
    pub models_added: usize,
    pub updates_added: usize,
}

/// Moves the selected part of the stage into `archive` and empties the buffer.
pub fn flush_stage(buffer: &mut StageBuffer, archive: &mut Archive, lambda: f64, gamma: f64) -> Result<FlushSummary> {
    let rounds = select_models(buffer, lambda)?;
    let mut summary = FlushSummary::default();
    let mut added = Vec::with_capacity(rounds.len());
    for entry in buffer.rounds.iter().filter(|e| rounds.contains(&e.round)) {
        let clients = rank_updates(entry, gamma, false)?;
        let updates: BTreeMap<ClientId, ClientUpdate> =
            clients.iter().map(|c| (*c, entry.updates[c].clone())).collect();
        summary.models_added += 1;
        summary.updates_added += updates.len();
        added.push(ArchivedRound { round: entry.round, model: entry.model.clone(), updates });
    }
    if let (Some(last), Some(first)) = (archive.rounds.last(), added.first()) {
        if first.round <= last.round {
            return Err(Error::State(format!(
                "archiving round {} after round {}",
                first.round, last.round
            )));
        }
    }
    archive.rounds.extend(added);
    buffer.clear();
    Ok(summary)
}
