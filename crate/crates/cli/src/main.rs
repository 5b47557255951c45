use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use swarmnet::checkpoint::{load_checkpoint, save_checkpoint};
use swarmnet::dataset::{generate_dataset, load_dataset, save_dataset};
use swarmnet::eval::{evaluate_policy, ExpertPolicy, ModelPolicy};
use swarmnet::export::{
    read_trajectory, report_table, write_episode_csv, write_report_csv, write_svg, write_trajectory,
};
use swarmnet::train::{fit, write_training_log, TrainSchedule};
use swarmnet::{
    aggregate_metrics, rollout_closed_loop, EpisodeMetrics, ModelSpec, Policy, StgnnModel,
    SwarmConfig, Variant,
};

#[derive(Parser)]
#[command(
    name = "swarmnet",
    version,
    about = "Swarm flocking simulation and spatiotemporal GNN imitation learning"
)]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Base random seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Scenario TOML file, or one of the built-in names `default` and `desk`.
    #[arg(long, env = "SWARMNET_CONFIG", default_value = "default")]
    config: PathBuf,
    /// Config override `key=value`, e.g. `weights.c_beta=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn scenario(&self) -> Result<SwarmConfig> {
        SwarmConfig::load(Some(&self.config), &self.overrides)
            .with_context(|| format!("loading config {}", self.config.display()))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the centralized expert in closed loop and report metrics.
    SimulateExpert {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        /// Output directory for metric CSVs.
        #[arg(long, default_value = "expert-eval")]
        out: PathBuf,
    },
    /// Generate an expert-labelled dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Training episodes.
        #[arg(long, default_value_t = 40)]
        episodes: usize,
        /// Validation episodes.
        #[arg(long, default_value_t = 10)]
        val_episodes: usize,
        #[arg(long, default_value = "dataset.swd")]
        out: PathBuf,
    },
    /// Train a model on a dataset and save the best checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint in closed loop.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        /// Output directory for metric CSVs.
        #[arg(long, default_value = "eval")]
        out: PathBuf,
    },
    /// Roll out one episode and export its trajectory and plot.
    Rollout {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to drive the swarm; the expert is used when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output directory for `trajectory.jsonl` and `trajectory.svg`.
        #[arg(long, default_value = "rollout")]
        out: PathBuf,
    },
    /// Recompute metrics from an exported trajectory.
    Metrics {
        #[arg(long)]
        trajectory: PathBuf,
    },
    /// Check every network layer against finite differences.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 1e-6)]
        tolerance: f64,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    data: PathBuf,
    /// STGNN, DGNN or TGNN.
    #[arg(long, default_value = "STGNN")]
    model: Variant,
    /// Number of delayed frames L.
    #[arg(long, default_value_t = 2)]
    horizon: usize,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.98)]
    decay: f64,
    #[arg(long, default_value_t = 10)]
    patience: usize,
    #[arg(long, default_value_t = 32)]
    batch_steps: usize,
    /// Train on every k-th step, rotating the offset each epoch.
    #[arg(long, default_value_t = 1)]
    sample_stride: usize,
    /// Validate on every k-th step.
    #[arg(long, default_value_t = 1)]
    val_stride: usize,
    /// Checkpoint path; the training log goes next to it as `<stem>.log.csv`.
    #[arg(long, default_value = "model.ckpt")]
    out: PathBuf,
}

fn summary(value: serde_json::Value) {
    println!("SUMMARY {value}");
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn report_outputs(
    label: &str,
    episodes: &[EpisodeMetrics],
    out: &Path,
) -> Result<serde_json::Value> {
    let report = aggregate_metrics(episodes)?;
    ensure_dir(out)?;
    write_report_csv(&report, &out.join("metrics.csv"))?;
    write_episode_csv(episodes, &out.join("episodes.csv"))?;
    print!("{}", report_table(label, &report));
    Ok(json!({
        "policy": label,
        "n_trials": report.n_trials,
        "n_completed": report.n_completed,
        "completion_rate": report.completion_rate,
        "mae": report.mae,
        "velocity_variance": report.velocity_variance,
        "tau": report.tau,
        "metrics_csv": out.join("metrics.csv"),
    }))
}

fn load_policy(path: &Path, config: &SwarmConfig) -> Result<ModelPolicy<f32>> {
    let ckpt = load_checkpoint(path)?;
    if let Some(h) = &ckpt.manifest.config_hash {
        if *h != config.hash() {
            eprintln!(
                "warning: {} was trained under a different scenario config",
                path.display()
            );
        }
    }
    let model = ckpt.into_model()?;
    if model.spec().dim != config.dim {
        bail!(
            "checkpoint dimension {} does not match config dimension {}",
            model.spec().dim,
            config.dim
        );
    }
    Ok(ModelPolicy { model })
}

fn train(args: &TrainArgs) -> Result<()> {
    let ds = load_dataset(&args.data)?;
    let config = &ds.header.config;
    let spec = ModelSpec::new(args.model, args.horizon, config.dim);
    let model = StgnnModel::<f32>::new(spec, args.seed)?;
    let schedule = TrainSchedule {
        epochs: args.epochs,
        initial_lr: args.lr,
        decay: args.decay,
        patience: args.patience,
        batch_steps: args.batch_steps,
        seed: args.seed,
        sample_stride: args.sample_stride,
        val_stride: args.val_stride,
    };
    let out = fit(model, &ds, &schedule, |e| {
        eprintln!(
            "epoch {:>3}  lr {:.3e}  train mse {:.5}  val mae {:.5}  best {:.5}",
            e.epoch, e.lr, e.train_loss, e.val_mae, e.best_val_mae
        )
    })?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    save_checkpoint(&out.best, Some(&ds.header.config_hash), &args.out)?;
    let log_path = args.out.with_extension("log.csv");
    write_training_log(&out.log, &log_path)?;
    summary(json!({
        "command": "train",
        "model": out.best.spec().label(),
        "epochs_run": out.log.len(),
        "best_epoch": out.best_epoch,
        "best_val_mae": out.best_val_mae,
        "stopped_early": out.stopped_early,
        "checkpoint": args.out,
        "log": log_path,
    }));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SimulateExpert {
            common,
            trials,
            out,
        } => {
            let config = common.scenario()?;
            let episodes = evaluate_policy(&mut ExpertPolicy, &config, common.seed, trials)?;
            let mut s = report_outputs("expert", &episodes, &out)?;
            s["command"] = json!("simulate-expert");
            summary(s);
        }
        Command::GenData {
            common,
            episodes,
            val_episodes,
            out,
        } => {
            let config = common.scenario()?;
            let ds = generate_dataset(&config, episodes, val_episodes, common.seed)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                ensure_dir(dir)?;
            }
            save_dataset(&ds, &out)?;
            summary(json!({
                "command": "gen-data",
                "episodes": ds.episodes.len(),
                "samples": ds.num_samples(),
                "rejected": ds.header.episodes.iter().map(|m| m.rejected).sum::<usize>(),
                "payload_sha256": ds.header.payload_sha256,
                "out": out,
            }));
        }
        Command::Train(args) => train(&args)?,
        Command::Evaluate {
            common,
            checkpoint,
            trials,
            out,
        } => {
            let config = common.scenario()?;
            let mut policy = load_policy(&checkpoint, &config)?;
            let episodes = evaluate_policy(&mut policy, &config, common.seed, trials)?;
            let mut s = report_outputs(&policy.name(), &episodes, &out)?;
            s["command"] = json!("evaluate");
            summary(s);
        }
        Command::Rollout {
            common,
            checkpoint,
            out,
        } => {
            let config = common.scenario()?;
            let record = match &checkpoint {
                Some(p) => {
                    rollout_closed_loop(&mut load_policy(p, &config)?, &config, common.seed)?
                }
                None => rollout_closed_loop(&mut ExpertPolicy, &config, common.seed)?,
            };
            ensure_dir(&out)?;
            let (traj, svg) = (out.join("trajectory.jsonl"), out.join("trajectory.svg"));
            write_trajectory(&record, &traj)?;
            write_svg(&record, &svg)?;
            let m = EpisodeMetrics::from_record(&record);
            summary(json!({
                "command": "rollout",
                "policy": record.policy,
                "status": record.status.as_str(),
                "steps": m.steps,
                "mae": m.mae,
                "velocity_variance": m.velocity_variance,
                "tau": m.tau,
                "trajectory": traj,
                "plot": svg,
            }));
        }
        Command::Metrics { trajectory } => {
            let t = read_trajectory(&trajectory)?;
            summary(json!({
                "command": "metrics",
                "policy": t.header.policy,
                "status": t.header.status.as_str(),
                "steps": t.lines.len(),
                "velocity_variance": t.velocity_variance(),
                "tau": t.tau(),
            }));
        }
        Command::GradCheck {
            seed,
            instances,
            tolerance,
        } => {
            let results = swarmnet_nn::gradcheck::layer_suite(instances, seed, 1e-5)?;
            let mut worst = 0f64;
            for r in &results {
                println!(
                    "{:<24} {:>4} instances  worst rel error {:.3e}",
                    r.layer, r.instances, r.worst_rel_error
                );
                worst = worst.max(r.worst_rel_error);
            }
            let pass = worst < tolerance;
            summary(json!({
                "command": "grad-check",
                "layers": results.len(),
                "instances": instances,
                "worst_rel_error": worst,
                "tolerance": tolerance,
                "pass": pass,
            }));
            if !pass {
                bail!("gradient check exceeded tolerance {tolerance:e}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}
