use std::collections::BTreeSet;
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::warn;

use fedunlearn::archive_io::{load_archive, persist_archive, read_model, write_model};
use fedunlearn::cost::cost_report;
use fedunlearn::eval::EvalPhase;
use fedunlearn::experiment::{evaluate, prepare, ExperimentConfig};
use fedunlearn::fl::{run_federated_learning, RoundRecord};
use fedunlearn::model::ModelState;
use fedunlearn::theory::{estimate_constants, random_quadratic, verify_bound_montecarlo};
use fedunlearn::unlearn::{run_unlearning, UnlearnRequest};

#[derive(Parser)]
#[command(name = "fedunlearn", version, about = "Federated learning and unlearning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the master seed from the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// JSON-lines metrics file (defaults to `<output.dir>/metrics.jsonl`).
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run federated training and persist the archive, final model and metrics.
    Train {
        #[command(flatten)]
        common: Common,
        /// Disable clipping and noise.
        #[arg(long)]
        no_dp: bool,
    },
    /// Remove target clients from a trained model using the archive.
    Unlearn {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        archive: Option<PathBuf>,
        /// Comma-separated client ids (defaults to `unlearn.targets`).
        #[arg(long)]
        targets: Option<String>,
    },
    /// Report test accuracy, MISR and ASR for a stored model.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Model the membership shadow is trained on (defaults to the FL model).
        #[arg(long)]
        fl_model: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = PhaseArg::PostFl)]
        phase: PhaseArg,
        #[arg(long)]
        targets: Option<String>,
    },
    /// Check the convergence bound on a seeded quadratic instance.
    Bound {
        #[command(flatten)]
        common: Common,
    },
    /// Storage and client-computation totals for an archive.
    Cost {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        archive: Option<PathBuf>,
        #[arg(long)]
        targets: Option<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PhaseArg {
    PostFl,
    PostUnlearn,
}

/// Bad command-line input detected after argument parsing.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn parse_targets(raw: Option<&str>, fallback: &BTreeSet<usize>) -> Result<BTreeSet<usize>> {
    let targets = match raw {
        None => fallback.clone(),
        Some(s) => s
            .split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(|t| t.parse::<usize>().map_err(|_| UsageError(format!("invalid client id {t:?}"))))
            .collect::<std::result::Result<_, _>>()?,
    };
    if targets.is_empty() {
        return Err(UsageError("no target clients given".into()).into());
    }
    Ok(targets)
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.fl.master_seed = seed;
        cfg.bound.montecarlo.seed = seed;
    }
    Ok(cfg)
}

fn metrics_path(common: &Common, cfg: &ExperimentConfig) -> PathBuf {
    common.metrics.clone().unwrap_or_else(|| cfg.output.metrics())
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(())
}

fn append_metrics(path: &Path, bytes: &[u8]) -> Result<()> {
    create_parent(path)?;
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    f.write_all(bytes).with_context(|| format!("writing {}", path.display()))
}

fn load_model(path: &Path, template: &ModelState) -> Result<ModelState> {
    let params = read_model(path, template.params.len())?;
    Ok(template.with_params(params)?)
}

fn cmd_train(common: &Common, no_dp: bool) -> Result<()> {
    let mut cfg = load_config(common)?;
    if no_dp {
        cfg.fl.dp_enabled = false;
    }
    let prepared = prepare(&cfg)?;
    let init = prepared.initial_model(&cfg)?;
    let mut metrics = Vec::new();
    let out = run_federated_learning(&cfg.fl, &prepared.partitions, &init, Some(&mut metrics))?;

    persist_archive(&out.archive, &cfg.output.archive_dir())?;
    write_model(&out.final_model.params, &cfg.output.fl_model())?;
    let path = metrics_path(common, &cfg);
    create_parent(&path)?;
    fs::write(&path, &metrics).with_context(|| format!("writing {}", path.display()))?;

    let last = out.records.last().expect("at least one round");
    println!(
        "trained {} rounds: final loss {:.6}, {} archived models, {} archived updates",
        out.records.len(),
        last.global_loss,
        last.archived_models_total,
        last.archived_updates_total
    );
    Ok(())
}

fn cmd_unlearn(common: &Common, archive: Option<&Path>, targets: Option<&str>) -> Result<()> {
    let mut cfg = load_config(common)?;
    cfg.unlearn.targets = parse_targets(targets, &cfg.unlearn.targets)?;
    if let Some(&bad) = cfg.unlearn.targets.iter().find(|&&c| c >= cfg.fl.num_clients) {
        return Err(UsageError(format!("unknown client id {bad} (federation has {})", cfg.fl.num_clients)).into());
    }
    let request = UnlearnRequest::new(cfg.unlearn.targets.iter().copied(), cfg.fl.num_clients)?;
    let archive_dir = archive.map(Path::to_path_buf).unwrap_or_else(|| cfg.output.archive_dir());
    let archive = load_archive(&archive_dir)?;
    let prepared = prepare(&cfg)?;

    let mut metrics = Vec::new();
    let out = run_unlearning(&archive, &prepared.spec, &prepared.partitions, &request, &cfg.unlearn_config(), Some(&mut metrics))?;
    write_model(&out.model.params, &cfg.output.unlearned_model())?;
    append_metrics(&metrics_path(common, &cfg), &metrics)?;
    println!(
        "unlearned clients {:?}: replayed {} rounds with {} client trainings",
        request.target_clients,
        out.records.iter().filter(|r| !r.skipped).count(),
        out.client_training_rounds
    );
    Ok(())
}

fn cmd_evaluate(common: &Common, model: Option<&Path>, fl_model: Option<&Path>, phase: PhaseArg, targets: Option<&str>) -> Result<()> {
    let mut cfg = load_config(common)?;
    if targets.is_some() {
        cfg.unlearn.targets = parse_targets(targets, &BTreeSet::new())?;
    }
    cfg.validate()?;
    let phase = match phase {
        PhaseArg::PostFl => EvalPhase::PostFl,
        PhaseArg::PostUnlearn => EvalPhase::PostUnlearn,
    };
    let model_path = model.map(Path::to_path_buf).unwrap_or_else(|| match phase {
        EvalPhase::PostFl => cfg.output.fl_model(),
        EvalPhase::PostUnlearn => cfg.output.unlearned_model(),
    });
    let fl_path = fl_model.map(Path::to_path_buf).unwrap_or_else(|| cfg.output.fl_model());

    let prepared = prepare(&cfg)?;
    let template = prepared.initial_model(&cfg)?;
    let eval_model = load_model(&model_path, &template)?;
    let fl_model = load_model(&fl_path, &template)?;
    let report = evaluate(&cfg, &prepared, &fl_model, &eval_model, phase)?;
    println!("{report}");
    let mut line = serde_json::to_vec(&report)?;
    line.push(b'\n');
    append_metrics(&metrics_path(common, &cfg), &line)
}

fn cmd_bound(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let b = &cfg.bound;
    let problem = random_quadratic(b.num_clients, b.dim, b.lambda_min, b.lambda_max, b.spread, b.init_scale, b.seed)?;
    let constants = estimate_constants(&problem, &b.grid)?;
    let report = verify_bound_montecarlo(&problem, &constants, &b.montecarlo)?;
    if !report.bound.contractive {
        warn!("contraction factor A = {} is outside (0, 1)", report.bound.contraction);
        eprintln!("warning: contraction factor A = {} is outside (0, 1)", report.bound.contraction);
    }
    println!("{report}");
    Ok(())
}

fn read_fl_records(path: &Path) -> Result<Vec<RoundRecord>> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let value: serde_json::Value = serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?;
        if value.get("phase").and_then(|p| p.as_str()) == Some("fl") {
            records.push(serde_json::from_value(value).with_context(|| format!("{}:{}", path.display(), i + 1))?);
        }
    }
    Ok(records)
}

fn cmd_cost(common: &Common, archive: Option<&Path>, targets: Option<&str>) -> Result<()> {
    let cfg = load_config(common)?;
    let targets = match targets {
        Some(_) => parse_targets(targets, &BTreeSet::new())?,
        None => cfg.unlearn.targets.clone(),
    };
    let archive_dir = archive.map(Path::to_path_buf).unwrap_or_else(|| cfg.output.archive_dir());
    let archive = load_archive(&archive_dir)?;
    let records = read_fl_records(&metrics_path(common, &cfg))?;
    let report = cost_report(&archive, &records, &targets);
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Train { common, no_dp } => cmd_train(common, *no_dp),
        Command::Unlearn { common, archive, targets } => cmd_unlearn(common, archive.as_deref(), targets.as_deref()),
        Command::Evaluate { common, model, fl_model, phase, targets } => {
            cmd_evaluate(common, model.as_deref(), fl_model.as_deref(), *phase, targets.as_deref())
        }
        Command::Bound { common } => cmd_bound(common),
        Command::Cost { common, archive, targets } => cmd_cost(common, archive.as_deref(), targets.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
