//! Command-line pipeline: simulate -> train -> generate -> evaluate ->
//! uq -> counterfactual. Every command is a pure function of its config
//! file and seed; a resolved copy of the config is written next to the
//! outputs of each run.
//!
//! Exit codes: 0 success, 2 config error, 3 numeric divergence, 4 I/O
//! error. The log level comes from the `QUEUESEQ_LOG` environment
//! variable.

use crate::events::{hourly_average, EventSchema, Metric, Trajectory};
use crate::eval::{model_losses, uq_compare, valid_fraction};
use crate::io::{
    load_config, read_jsonl, write_csv, write_jsonl, write_resolved_config, IoError,
};
use crate::oracle::{
    bayesian_bootstrap, bayesian_bootstrap_block, empirical_optimal_losses, is_mmn_schema,
    mm1_optimal_losses, posterior_update, BootstrapMetric, GridPosterior,
};
use crate::queuesim::{
    counterfactual_base, sample_dataset, MtMnConfig, PolicyParams, PriorConfig, SystemConfig,
};
use crate::rng::SplitMix64;
use crate::seqmodel::{
    encode_trajectory, generate, load_checkpoint, save_checkpoint, state_dim, train,
    GenerateOptions, ModelConfig, ModelParams, OptConfig, PositionalKind, TimeHeadKind,
    TokenSequence, TrainError,
};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "queueseq", version, about = "Event-table simulators and sequence models")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config file for the command.
    #[arg(long)]
    config: PathBuf,
    /// Master seed; overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Worker threads; results do not depend on this.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate trajectories into a JSONL event-table file.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Train the sequence model on a JSONL dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training dataset (JSONL event tables).
        #[arg(long)]
        data: PathBuf,
        /// Optional checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Sample trajectories from a trained model.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Optional JSONL file whose first trajectory seeds the history.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Teacher-forced evaluation against oracle losses.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Test dataset (JSONL event tables).
        #[arg(long)]
        data: PathBuf,
    },
    /// Bayesian-bootstrap uncertainty quantification.
    Uq {
        #[command(flatten)]
        common: Common,
        /// Optional trained model for a model-vs-oracle comparison.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Staffing counterfactuals over a server-count sweep.
    Counterfactual {
        #[command(flatten)]
        common: Common,
        /// Optional policy-conditioned model to compare with.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Debug, Error)]
pub enum AppError {
    #[error("{0}")]
    Config(String),
    #[error("training diverged")]
    Divergence,
    #[error("{0}")]
    Io(String),
}

use thiserror::Error;

impl From<IoError> for AppError {
    fn from(e: IoError) -> Self {
        match e {
            IoError::Config(msg) => AppError::Config(msg),
            IoError::Io(e) => AppError::Io(e.to_string()),
            IoError::Parse { .. } => AppError::Config(e.to_string()),
        }
    }
}

impl From<crate::queuesim::SimError> for AppError {
    fn from(e: crate::queuesim::SimError) -> Self {
        AppError::Config(e.to_string())
    }
}

impl AppError {
    fn exit_code(&self) -> i32 {
        match self {
            AppError::Config(_) => 2,
            AppError::Divergence => 3,
            AppError::Io(_) => 4,
        }
    }
}

/// Parse arguments, run, and return the process exit code.
pub fn run() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::new().filter("QUEUESEQ_LOG")).init();
    let cli = Cli::parse();
    let common = match &cli.command {
        Command::Simulate { common }
        | Command::Train { common, .. }
        | Command::Generate { common, .. }
        | Command::Evaluate { common, .. }
        | Command::Uq { common, .. }
        | Command::Counterfactual { common, .. } => common,
    };
    if let Some(jobs) = common.jobs {
        // Ignore failure: the global pool may already exist in tests.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global();
    }
    if let Err(e) = std::fs::create_dir_all(&common.out) {
        eprintln!("error: cannot create output directory: {e}");
        return 4;
    }
    let result = match &cli.command {
        Command::Simulate { common } => cmd_simulate(common),
        Command::Train {
            common,
            data,
            resume,
        } => cmd_train(common, data, resume.as_deref()),
        Command::Generate {
            common,
            checkpoint,
            history,
        } => cmd_generate(common, checkpoint, history.as_deref()),
        Command::Evaluate {
            common,
            checkpoint,
            data,
        } => cmd_evaluate(common, checkpoint, data),
        Command::Uq { common, checkpoint } => cmd_uq(common, checkpoint.as_deref()),
        Command::Counterfactual { common, checkpoint } => {
            cmd_counterfactual(common, checkpoint.as_deref())
        }
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn resolve_seed(cli_seed: Option<u64>, config_seed: Option<u64>) -> u64 {
    cli_seed.or(config_seed).unwrap_or(0)
}

// ---------------------------------------------------------------- simulate

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub version: u32,
    pub system: SystemConfig,
    pub n_trajectories: usize,
    pub n_events: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior: Option<PriorConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn cmd_simulate(common: &Common) -> Result<(), AppError> {
    let mut cfg: SimulateConfig = load_config(&common.config)?;
    cfg.seed = Some(resolve_seed(common.seed, cfg.seed));
    let trajs = sample_dataset(
        &cfg.system,
        cfg.prior.as_ref(),
        cfg.n_trajectories,
        cfg.n_events,
        cfg.seed.unwrap(),
    )?;
    let schema = cfg.system.schema();
    write_jsonl(&common.out.join("dataset.jsonl"), &schema, &trajs)?;
    write_resolved_config(&common.out, "resolved_config.json", &cfg)?;
    log::info!(
        "wrote {} trajectories x {} events",
        cfg.n_trajectories,
        cfg.n_events
    );
    Ok(())
}

// ------------------------------------------------------------------- train

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TimeHeadSpec {
    Exponential,
    /// Bin width fitted from the training data when absent.
    Riemann {
        bins: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        width: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        tail_scale: Option<f64>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub d_model: usize,
    pub d_hidden: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub time_head: TimeHeadSpec,
    pub use_state_token: bool,
    pub use_policy_token: bool,
    /// Sequence capacity in events; defaults to the longest trajectory.
    pub max_events: Option<usize>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            d_model: 32,
            d_hidden: 128,
            n_heads: 2,
            n_layers: 2,
            time_head: TimeHeadSpec::Exponential,
            use_state_token: true,
            use_policy_token: false,
            max_events: None,
        }
    }
}

impl ModelSpec {
    /// Resolve against a dataset: vocabulary sizes from the schema, the
    /// Riemann grid from the observed inter-event times.
    pub fn build(&self, schema: &EventSchema, trajs: &[Trajectory]) -> ModelConfig {
        let max_events = self
            .max_events
            .unwrap_or_else(|| trajs.iter().map(Trajectory::len).max().unwrap_or(1));
        let time_head = match &self.time_head {
            TimeHeadSpec::Exponential => TimeHeadKind::Exponential,
            TimeHeadSpec::Riemann {
                bins,
                width,
                tail_scale,
            } => {
                let width = width.unwrap_or_else(|| {
                    let dts: Vec<f64> = trajs
                        .iter()
                        .flat_map(|t| t.records.iter().map(|r| r.dt))
                        .collect();
                    crate::timedist::RiemannDist::fit_width(&dts, *bins)
                });
                TimeHeadKind::Riemann {
                    width,
                    bins: *bins,
                    tail_scale: *tail_scale,
                }
            }
        };
        let mut cfg = ModelConfig {
            d_model: self.d_model,
            d_hidden: self.d_hidden,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            n_event_types: schema.num_events(),
            n_classes: schema.num_classes,
            time_head,
            max_seq_len: 0,
            use_state_token: self.use_state_token,
            use_policy_token: self.use_policy_token,
            state_dim: state_dim(schema),
            policy_n_max: 20,
            positional: PositionalKind::Sinusoidal,
        };
        cfg.max_seq_len = cfg.prefix_len() + cfg.period() * max_events;
        cfg
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub version: u32,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub optimizer: OptConfig,
    /// Fraction of trajectories held out for validation (from the end).
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn default_val_fraction() -> f64 {
    0.1
}

/// Encode a dataset for the model, failing on the first bad trajectory.
pub fn encode_dataset(
    trajs: &[Trajectory],
    schema: &EventSchema,
    cfg: &ModelConfig,
) -> Result<Vec<TokenSequence>, AppError> {
    trajs
        .iter()
        .map(|t| {
            encode_trajectory(t, schema, cfg).map_err(|e| AppError::Config(e.to_string()))
        })
        .collect()
}

fn cmd_train(common: &Common, data: &Path, resume: Option<&Path>) -> Result<(), AppError> {
    let mut cfg: TrainConfig = load_config(&common.config)?;
    let seed = resolve_seed(common.seed, cfg.seed);
    cfg.seed = Some(seed);
    cfg.optimizer.seed = seed;
    let (schema, trajs) = read_jsonl(data)?;
    if trajs.is_empty() {
        return Err(AppError::Config("empty dataset".into()));
    }
    let model_cfg = cfg.model.build(&schema, &trajs);
    let n_val = ((trajs.len() as f64 * cfg.val_fraction) as usize).min(trajs.len() - 1);
    let split = trajs.len() - n_val;
    let train_seqs = encode_dataset(&trajs[..split], &schema, &model_cfg)?;
    let val_seqs = encode_dataset(&trajs[split..], &schema, &model_cfg)?;

    let init = match resume {
        Some(path) => {
            let params =
                load_checkpoint(path).map_err(|e| AppError::Config(e.to_string()))?;
            if params.config != model_cfg {
                return Err(AppError::Config(
                    "resume checkpoint config differs from the requested model".into(),
                ));
            }
            params
        }
        None => ModelParams::init(model_cfg, seed).map_err(AppError::Config)?,
    };

    let report = match train(init, &train_seqs, &val_seqs, &cfg.optimizer) {
        Ok(r) => r,
        Err(TrainError::Divergence { epoch, last_good }) => {
            // Keep the last finite parameters for post-mortems.
            let _ = save_checkpoint(&common.out.join("model_last_good.ckpt"), &last_good);
            log::error!("diverged at epoch {epoch}");
            return Err(AppError::Divergence);
        }
        Err(TrainError::EmptyDataset) => {
            return Err(AppError::Config("empty dataset".into()))
        }
    };
    save_checkpoint(&common.out.join("model.ckpt"), &report.params)
        .map_err(|e| AppError::Io(e.to_string()))?;
    write_csv(
        &common.out.join("loss_history.csv"),
        &["epoch", "train_loss", "val_loss"],
        report
            .train_loss
            .iter()
            .zip(&report.val_loss)
            .enumerate()
            .map(|(e, (t, v))| vec![e as f64, *t, *v]),
    )?;
    write_resolved_config(&common.out, "resolved_config.json", &cfg)?;
    Ok(())
}

// ---------------------------------------------------------------- generate

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateConfig {
    pub version: u32,
    /// System description; supplies the schema and empty initial state
    /// when no history file is given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<SystemConfig>,
    pub n_trajectories: usize,
    pub n_events: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Number of history events to condition on (prefix of each history
    /// trajectory).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub history_events: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<PolicyParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn default_temperature() -> f64 {
    1.0
}

fn cmd_generate(
    common: &Common,
    checkpoint: &Path,
    history: Option<&Path>,
) -> Result<(), AppError> {
    let mut cfg: GenerateConfig = load_config(&common.config)?;
    let seed = resolve_seed(common.seed, cfg.seed);
    cfg.seed = Some(seed);
    let params = load_checkpoint(checkpoint).map_err(|e| AppError::Config(e.to_string()))?;

    let (schema, histories) = match history {
        Some(path) => {
            let (schema, trajs) = read_jsonl(path)?;
            (schema, trajs)
        }
        None => {
            let system = cfg.system.as_ref().ok_or_else(|| {
                AppError::Config("generate needs a history file or a system config".into())
            })?;
            (system.schema(), Vec::new())
        }
    };
    if schema.num_events() != params.config.n_event_types {
        return Err(AppError::Config(
            "checkpoint event vocabulary does not match the schema".into(),
        ));
    }

    let trajs: Vec<Trajectory> = (0..cfg.n_trajectories)
        .into_par_iter()
        .map(|j| {
            let child = SplitMix64::stream(seed, j as u64).next_u64();
            let (init, hist_records) = match histories.get(j % histories.len().max(1)) {
                Some(h) if !histories.is_empty() => {
                    let take = cfg.history_events.unwrap_or(h.len()).min(h.len());
                    (h.initial_state.clone(), h.records[..take].to_vec())
                }
                _ => (schema.empty_state(), Vec::new()),
            };
            generate(
                &params,
                &schema,
                &init,
                &hist_records,
                cfg.policy,
                &GenerateOptions {
                    n_events: cfg.n_events,
                    seed: child,
                    temperature: cfg.temperature,
                },
            )
            .map_err(|e| AppError::Config(e.to_string()))
        })
        .collect::<Result<_, _>>()?;

    write_jsonl(&common.out.join("generated.jsonl"), &schema, &trajs)?;
    let frac = valid_fraction(&trajs, &schema);
    let summary = serde_json::json!({
        "n_trajectories": cfg.n_trajectories,
        "n_events": cfg.n_events,
        "valid_fraction": frac,
    });
    std::fs::write(
        common.out.join("generate_report.json"),
        serde_json::to_string_pretty(&summary).expect("serializes") + "\n",
    )
    .map_err(|e| AppError::Io(e.to_string()))?;
    write_resolved_config(&common.out, "resolved_config.json", &cfg)?;
    Ok(())
}

// ---------------------------------------------------------------- evaluate

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateConfig {
    pub version: u32,
    /// When the data comes from an M/M/n system, its rates enable the
    /// optimal-loss columns.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<SystemConfig>,
}

fn cmd_evaluate(common: &Common, checkpoint: &Path, data: &Path) -> Result<(), AppError> {
    let cfg: EvaluateConfig = load_config(&common.config)?;
    let params = load_checkpoint(checkpoint).map_err(|e| AppError::Config(e.to_string()))?;
    let (schema, trajs) = read_jsonl(data)?;
    let seqs = encode_dataset(&trajs, &schema, &params.config)?;
    let report = model_losses(&params, &seqs);

    let mut out = serde_json::json!({
        "model": {
            "event_loss": report.event_loss,
            "time_loss": report.time_loss,
            "class_loss": report.class_loss,
            "time_nll": report.time_nll,
            "event_se": report.event_se,
            "time_se": report.time_se,
            "n_steps": report.n_steps,
        }
    });
    if let Some(SystemConfig::Mmn(mmn)) = &cfg.system {
        if is_mmn_schema(&schema) {
            let opt = empirical_optimal_losses(&trajs, &schema, &mmn.lambdas, &mmn.nus)
                .map_err(|e| AppError::Config(e.to_string()))?;
            out["optimal"] = serde_json::json!({
                "event_loss": opt.event,
                "time_loss": opt.time,
                "class_loss": opt.class,
            });
            if mmn.num_classes() == 1 && mmn.n_servers == 1 {
                let (ev, tm) = mm1_optimal_losses(mmn.lambdas[0], mmn.nus[0])
                    .map_err(|e| AppError::Config(e.to_string()))?;
                out["closed_form"] = serde_json::json!({
                    "event_loss": ev,
                    "time_loss": tm,
                });
            }
        }
    }
    std::fs::write(
        common.out.join("evaluate_report.json"),
        serde_json::to_string_pretty(&out).expect("serializes") + "\n",
    )
    .map_err(|e| AppError::Io(e.to_string()))?;
    write_csv(
        &common.out.join("evaluate_report.csv"),
        &["event_loss", "time_loss", "class_loss", "time_nll"],
        [vec![
            report.event_loss,
            report.time_loss,
            report.class_loss,
            report.time_nll,
        ]],
    )?;
    write_resolved_config(&common.out, "resolved_config.json", &cfg)?;
    Ok(())
}

// ---------------------------------------------------------------------- uq

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UqConfig {
    pub version: u32,
    /// Single-class M/M/1 system generating the observed history.
    pub system: SystemConfig,
    pub prior: PriorConfig,
    /// Observed history length (events).
    pub history_events: usize,
    /// Continuation length (events).
    pub prediction_events: usize,
    pub replicas: usize,
    #[serde(default = "default_metric")]
    pub metric: UqMetric,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UqMetric {
    Interarrival,
    Service,
    Wait,
}

fn default_metric() -> UqMetric {
    UqMetric::Interarrival
}

impl From<UqMetric> for BootstrapMetric {
    fn from(m: UqMetric) -> Self {
        match m {
            UqMetric::Interarrival => BootstrapMetric::MeanInterarrival,
            UqMetric::Service => BootstrapMetric::MeanService,
            UqMetric::Wait => BootstrapMetric::MeanWait,
        }
    }
}

fn cmd_uq(common: &Common, checkpoint: Option<&Path>) -> Result<(), AppError> {
    let mut cfg: UqConfig = load_config(&common.config)?;
    let seed = resolve_seed(common.seed, cfg.seed);
    cfg.seed = Some(seed);
    let SystemConfig::Mmn(mmn) = &cfg.system else {
        return Err(AppError::Config("uq requires an M/M/1 system".into()));
    };
    if mmn.num_classes() != 1 || mmn.n_servers != 1 {
        return Err(AppError::Config("uq requires an M/M/1 system".into()));
    }
    let schema = cfg.system.schema();
    let history = sample_dataset(&cfg.system, None, 1, cfg.history_events, seed)?
        .pop()
        .expect("one trajectory");
    let total = cfg.history_events + cfg.prediction_events;
    let metric: BootstrapMetric = cfg.metric.into();

    let per_step = bayesian_bootstrap(
        &history,
        &schema,
        &cfg.prior,
        cfg.replicas,
        total,
        metric,
        SplitMix64::stream(seed, 1).next_u64(),
    )
    .map_err(|e| AppError::Config(e.to_string()))?;
    let block = bayesian_bootstrap_block(
        &history,
        &schema,
        &cfg.prior,
        cfg.replicas,
        total,
        metric,
        SplitMix64::stream(seed, 2).next_u64(),
    )
    .map_err(|e| AppError::Config(e.to_string()))?;

    write_csv(
        &common.out.join("bootstrap_f.csv"),
        &["f"],
        per_step.iter().map(|&x| vec![x]),
    )?;
    write_csv(
        &common.out.join("bootstrap_block_f.csv"),
        &["f"],
        block.iter().map(|&x| vec![x]),
    )?;

    // Posterior dump over the grid.
    let mut posterior = GridPosterior::uniform(&cfg.prior, crate::oracle::DEFAULT_GRID);
    posterior_update(&mut posterior, &history, &schema)
        .map_err(|e| AppError::Config(e.to_string()))?;
    let weights = posterior
        .weights()
        .map_err(|e| AppError::Config(e.to_string()))?;
    let nl = posterior.nu_grid.len();
    write_csv(
        &common.out.join("posterior.csv"),
        &["lambda", "nu", "weight"],
        weights.iter().enumerate().map(|(i, &w)| {
            vec![posterior.lambda_grid[i / nl], posterior.nu_grid[i % nl], w]
        }),
    )?;

    let d = crate::stats::ks_statistic_two_sample(&per_step, &block);
    let crit = crate::stats::ks_critical_two_sample(per_step.len(), block.len(), 0.01);
    let mut out = serde_json::json!({
        "ks_per_step_vs_block": d,
        "ks_critical_1pct": crit,
        "equivalent": d < crit,
        "replicas": cfg.replicas,
    });

    if let Some(ckpt) = checkpoint {
        let params = load_checkpoint(ckpt).map_err(|e| AppError::Config(e.to_string()))?;
        let model_f = model_metric_samples(
            &params,
            &schema,
            &history,
            cfg.prediction_events,
            cfg.replicas,
            metric,
            SplitMix64::stream(seed, 3).next_u64(),
        )?;
        write_csv(
            &common.out.join("model_f.csv"),
            &["f"],
            model_f.iter().map(|&x| vec![x]),
        )?;
        let cmp = uq_compare(&model_f, &per_step).map_err(|e| AppError::Config(e.to_string()))?;
        out["model_vs_bootstrap"] = serde_json::json!({"kl": cmp.kl, "w1": cmp.w1});
    }

    std::fs::write(
        common.out.join("uq_report.json"),
        serde_json::to_string_pretty(&out).expect("serializes") + "\n",
    )
    .map_err(|e| AppError::Io(e.to_string()))?;
    write_resolved_config(&common.out, "resolved_config.json", &cfg)?;
    Ok(())
}

/// Metric samples from model continuations of a shared history.
pub fn model_metric_samples(
    params: &ModelParams,
    schema: &EventSchema,
    history: &Trajectory,
    prediction_events: usize,
    replicas: usize,
    metric: BootstrapMetric,
    seed: u64,
) -> Result<Vec<f64>, AppError> {
    let t_split =
        history.initial_state.clock + history.records.iter().map(|r| r.dt).sum::<f64>();
    (0..replicas)
        .into_par_iter()
        .map(|j| {
            let child = SplitMix64::stream(seed, j as u64).next_u64();
            let traj = generate(
                params,
                schema,
                &history.initial_state,
                &history.records,
                None,
                &GenerateOptions {
                    n_events: prediction_events,
                    seed: child,
                    temperature: 1.0,
                },
            )
            .map_err(|e| AppError::Config(e.to_string()))?;
            metric
                .evaluate(&traj, schema, t_split)
                .map_err(|e| AppError::Config(e.to_string()))
        })
        .collect()
}

// ---------------------------------------------------------- counterfactual

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CounterfactualConfig {
    pub version: u32,
    #[serde(default = "counterfactual_base")]
    pub base: MtMnConfig,
    /// Day-level arrival shift.
    pub c: f64,
    /// Server counts to sweep.
    pub n_servers: Vec<usize>,
    pub n_trajectories: usize,
    pub n_events: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn cmd_counterfactual(common: &Common, checkpoint: Option<&Path>) -> Result<(), AppError> {
    let mut cfg: CounterfactualConfig = load_config(&common.config)?;
    let seed = resolve_seed(common.seed, cfg.seed);
    cfg.seed = Some(seed);
    let model = match checkpoint {
        Some(p) => Some(load_checkpoint(p).map_err(|e| AppError::Config(e.to_string()))?),
        None => None,
    };

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut mean_waits = Vec::new();
    for (pi, &n) in cfg.n_servers.iter().enumerate() {
        let policy = PolicyParams {
            c: cfg.c,
            n_servers: n,
        };
        let system = SystemConfig::Counterfactual {
            base: cfg.base.clone(),
            policy: Some(policy),
            policy_prior: None,
        };
        let trajs = sample_dataset(
            &system,
            None,
            cfg.n_trajectories,
            cfg.n_events,
            SplitMix64::stream(seed, pi as u64).next_u64(),
        )?;
        let schema = system.schema();
        let prof = hourly_average(&trajs, &schema, Metric::Waiting, cfg.base.hour_len)
            .map_err(|e| AppError::Config(e.to_string()))?;
        let model_prof = match &model {
            Some(params) => {
                let gen: Vec<Trajectory> = (0..cfg.n_trajectories)
                    .into_par_iter()
                    .map(|j| {
                        let child =
                            SplitMix64::stream(seed, (1000 + pi * cfg.n_trajectories + j) as u64)
                                .next_u64();
                        generate(
                            params,
                            &schema,
                            &schema.empty_state(),
                            &[],
                            Some(policy),
                            &GenerateOptions {
                                n_events: cfg.n_events,
                                seed: child,
                                temperature: 1.0,
                            },
                        )
                        .map_err(|e| AppError::Config(e.to_string()))
                    })
                    .collect::<Result<_, _>>()?;
                Some(
                    hourly_average(&gen, &schema, Metric::Waiting, cfg.base.hour_len)
                        .map_err(|e| AppError::Config(e.to_string()))?,
                )
            }
            None => None,
        };
        let mut wait_sum = 0.0;
        let mut wait_n = 0usize;
        for &(hour, mean) in &prof {
            let model_mean = model_prof
                .as_ref()
                .and_then(|mp| mp.iter().find(|&&(h, _)| h == hour))
                .map_or(f64::NAN, |&(_, m)| m);
            rows.push(vec![n as f64, hour as f64, mean, model_mean]);
            wait_sum += mean;
            wait_n += 1;
        }
        mean_waits.push((n, wait_sum / wait_n.max(1) as f64));
    }
    write_csv(
        &common.out.join("hourly_waits.csv"),
        &["n_servers", "hour", "mean_wait", "model_mean_wait"],
        rows,
    )?;
    let out = serde_json::json!({
        "c": cfg.c,
        "mean_wait_by_n": mean_waits
            .iter()
            .map(|&(n, w)| serde_json::json!({"n_servers": n, "mean_wait": w}))
            .collect::<Vec<_>>(),
    });
    std::fs::write(
        common.out.join("counterfactual_report.json"),
        serde_json::to_string_pretty(&out).expect("serializes") + "\n",
    )
    .map_err(|e| AppError::Io(e.to_string()))?;
    write_resolved_config(&common.out, "resolved_config.json", &cfg)?;
    Ok(())
}
