//! Training data: synthetic generation, client partitioning, backdoor
//! poisoning and the MNIST IDX reader.

mod backdoor;
mod idx;
mod partition;
mod synthetic;

use serde::{Deserialize, Serialize};

pub use backdoor::{apply_backdoor, TriggerSpec};
pub use idx::load_mnist_idx;
pub use partition::{partition, PartitionScheme};
pub use synthetic::{generate_synthetic, train_test_split, SyntheticSpec};

pub type ClientId = usize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: usize,
}

/// A labelled dataset with a fixed feature dimension and class count.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub dim: usize,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Copies the samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            dim: self.dim,
            num_classes: self.num_classes,
        }
    }
}

/// A sample that received the trigger, with the label it had before poisoning.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TriggeredSample {
    pub index: usize,
    pub clean_label: usize,
}

/// One client's local dataset `D_c`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientPartition {
    pub client_id: ClientId,
    pub samples: Vec<Sample>,
    pub poisoned: bool,
    pub poison_spec: Option<TriggerSpec>,
    /// Indices into `samples` carrying the trigger; empty unless poisoned.
    pub triggered: Vec<TriggeredSample>,
}

impl ClientPartition {
    pub fn new(client_id: ClientId, samples: Vec<Sample>) -> Self {
        Self {
            client_id,
            samples,
            poisoned: false,
            poison_spec: None,
            triggered: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `|D_c|` as an aggregation weight.
    pub fn weight(&self) -> f64 {
        self.samples.len() as f64
    }
}
