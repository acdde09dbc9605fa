//! Experiment description shared by the command-line pipeline and the
//! end-to-end tests: data source, model, FL settings, optional backdoor,
//! unlearning request, evaluation options and output paths.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    apply_backdoor, generate_synthetic, load_mnist_idx, partition, train_test_split, ClientId, ClientPartition,
    Dataset, PartitionScheme, Sample, SyntheticSpec, TriggerSpec,
};
use crate::error::{Error, Result};
use crate::eval::{asr, asr_on_client_data, misr, test_accuracy, train_shadow, EvalPhase, EvalReport};
use crate::fl::FlConfig;
use crate::model::{init_params, ModelKind, ModelSpec, ModelState};
use crate::theory::{DivergenceGrid, MonteCarloConfig};
use crate::unlearn::{Normalization, UnlearnConfig, UnlearnNoise, UnlearnRequest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        num_classes: usize,
        dim: usize,
        per_class: usize,
        #[serde(default = "default_separation")]
        separation: f64,
        seed: u64,
        /// Share of generated samples held out for testing.
        test_fraction: f64,
    },
    Mnist {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        limit: Option<usize>,
    },
}

fn default_separation() -> f64 {
    4.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub partition: PartitionScheme,
    pub partition_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic {
                num_classes: 3,
                dim: 10,
                per_class: 2000,
                separation: default_separation(),
                seed: 7,
                test_fraction: 0.4,
            },
            partition: PartitionScheme::Iid,
            partition_seed: 9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    #[default]
    Zeros,
    Glorot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub hidden_dims: Vec<usize>,
    pub init: InitScheme,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Logistic,
            hidden_dims: Vec::new(),
            init: InitScheme::Zeros,
            init_seed: 11,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackdoorConfig {
    pub clients: BTreeSet<ClientId>,
    pub trigger: TriggerSpec,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnlearnSection {
    pub targets: BTreeSet<ClientId>,
    pub normalization: Normalization,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise: Option<UnlearnNoise>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AsrMode {
    /// Triggered clean holdout samples.
    #[default]
    Holdout,
    /// Triggered samples in the poisoned clients' training data.
    ClientData,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub shadow_seed: u64,
    pub asr_mode: AsrMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            shadow_seed: 5,
            asr_mode: AsrMode::Holdout,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundConfig {
    pub num_clients: usize,
    pub dim: usize,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub spread: f64,
    pub init_scale: f64,
    pub seed: u64,
    pub grid: DivergenceGrid,
    pub montecarlo: MonteCarloConfig,
}

impl Default for BoundConfig {
    fn default() -> Self {
        Self {
            num_clients: 4,
            dim: 5,
            lambda_min: 0.5,
            lambda_max: 2.0,
            spread: 1.0,
            init_scale: 3.0,
            seed: 13,
            grid: DivergenceGrid::default(),
            montecarlo: MonteCarloConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

impl OutputConfig {
    pub fn archive_dir(&self) -> PathBuf {
        self.dir.join("archive")
    }

    pub fn fl_model(&self) -> PathBuf {
        self.dir.join("model-fl.bin")
    }

    pub fn unlearned_model(&self) -> PathBuf {
        self.dir.join("model-unlearned.bin")
    }

    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.jsonl")
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub fl: FlConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backdoor: Option<BackdoorConfig>,
    pub unlearn: UnlearnSection,
    pub eval: EvalConfig,
    pub bound: BoundConfig,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parameter(format!("config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str::<Self>(&text)
            .map_err(|e| {
                let offset = e.span().map_or(0, |s| s.start as u64);
                Error::format(path, offset, e.message().to_string())
            })
            .and_then(|cfg| cfg.validate().map(|_| cfg))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::State(format!("config encoding: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.fl.validate()?;
        if let DataSource::Synthetic { test_fraction, .. } = self.data.source {
            if !(test_fraction > 0.0 && test_fraction < 1.0) {
                return Err(Error::param(format!("test_fraction {test_fraction} outside (0, 1)")));
            }
        }
        if let Some(b) = &self.backdoor {
            if b.clients.is_empty() {
                return Err(Error::param("backdoor section lists no clients"));
            }
            if let Some(&c) = b.clients.iter().find(|&&c| c >= self.fl.num_clients) {
                return Err(Error::param(format!("backdoor client {c} out of range")));
            }
            if b.trigger.target_label >= self.num_classes() {
                return Err(Error::param(format!("target label {} out of range", b.trigger.target_label)));
            }
        }
        if !self.unlearn.targets.is_empty() {
            self.unlearn_request()?;
        }
        if self.model.kind == ModelKind::Logistic && !self.model.hidden_dims.is_empty() {
            return Err(Error::param("logistic model takes no hidden layers"));
        }
        Ok(())
    }

    fn num_classes(&self) -> usize {
        match self.data.source {
            DataSource::Synthetic { num_classes, .. } => num_classes,
            DataSource::Mnist { .. } => 10,
        }
    }

    pub fn unlearn_request(&self) -> Result<UnlearnRequest> {
        UnlearnRequest::new(self.unlearn.targets.iter().copied(), self.fl.num_clients)
    }

    pub fn unlearn_config(&self) -> UnlearnConfig {
        UnlearnConfig {
            normalization: self.unlearn.normalization,
            noise: self.unlearn.noise,
            ..UnlearnConfig::from_fl(&self.fl)
        }
    }

    pub fn model_spec(&self, input_dim: usize) -> ModelSpec {
        match self.model.kind {
            ModelKind::Logistic => ModelSpec::logistic(input_dim, self.num_classes()),
            ModelKind::Mlp => ModelSpec::mlp(input_dim, self.model.hidden_dims.clone(), self.num_classes()),
        }
    }
}

/// Materialized data for one experiment.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub spec: ModelSpec,
    pub partitions: Vec<ClientPartition>,
    pub test: Vec<Sample>,
    /// Held-out samples used as shadow-training non-members.
    pub shadow_nonmembers: Vec<Sample>,
    /// Held-out samples paired with target data when measuring membership.
    pub eval_nonmembers: Vec<Sample>,
}

impl Prepared {
    pub fn initial_model(&self, cfg: &ExperimentConfig) -> Result<ModelState> {
        match cfg.model.init {
            InitScheme::Zeros => ModelState::zeros(self.spec.clone()),
            InitScheme::Glorot => init_params(&self.spec, cfg.model.init_seed),
        }
    }

    pub fn target_training_data(&self, targets: &BTreeSet<ClientId>) -> Vec<Sample> {
        targets.iter().flat_map(|&c| self.partitions[c].samples.iter().cloned()).collect()
    }
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let (train, test): (Dataset, Dataset) = match &cfg.data.source {
        DataSource::Synthetic { num_classes, dim, per_class, separation, seed, test_fraction } => {
            let data = generate_synthetic(&SyntheticSpec {
                num_classes: *num_classes,
                dim: *dim,
                per_class: *per_class,
                separation: *separation,
                seed: *seed,
            })?;
            train_test_split(&data, *test_fraction, seed.wrapping_add(1))?
        }
        DataSource::Mnist { train_images, train_labels, test_images, test_labels, limit } => (
            load_mnist_idx(train_images, train_labels, *limit)?,
            load_mnist_idx(test_images, test_labels, *limit)?,
        ),
    };
    let mut partitions = partition(&train, cfg.fl.num_clients, cfg.data.partition, cfg.data.partition_seed)?;
    if let Some(b) = &cfg.backdoor {
        for &c in &b.clients {
            partitions[c] = apply_backdoor(&partitions[c], &b.trigger, b.seed.wrapping_add(c as u64))?;
        }
    }
    let half = test.len() / 2;
    Ok(Prepared {
        spec: cfg.model_spec(train.dim),
        partitions,
        shadow_nonmembers: test.samples[..half].to_vec(),
        eval_nonmembers: test.samples[half..].to_vec(),
        test: test.samples,
    })
}

/// TA on the test set, plus ASR when a backdoor is configured and MISR when
/// unlearning targets are set. The shadow is always trained on `fl_model`.
pub fn evaluate(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    fl_model: &ModelState,
    eval_model: &ModelState,
    phase: EvalPhase,
) -> Result<EvalReport> {
    let test_accuracy = test_accuracy(eval_model, &prepared.test)?;
    let asr = match &cfg.backdoor {
        None => None,
        Some(b) => Some(match cfg.eval.asr_mode {
            AsrMode::Holdout => asr(eval_model, &prepared.test, &b.trigger)?,
            AsrMode::ClientData => {
                let parts: Vec<&ClientPartition> = b.clients.iter().map(|&c| &prepared.partitions[c]).collect();
                asr_on_client_data(eval_model, &parts)?
            }
        }),
    };
    let misr = if cfg.unlearn.targets.is_empty() {
        None
    } else {
        let members = prepared.target_training_data(&cfg.unlearn.targets);
        let shadow = train_shadow(fl_model, &members, &prepared.shadow_nonmembers, cfg.eval.shadow_seed)?;
        Some(misr(&shadow, eval_model, &members, &prepared.eval_nonmembers)?)
    };
    Ok(EvalReport {
        phase,
        test_accuracy,
        misr,
        asr,
    })
}
