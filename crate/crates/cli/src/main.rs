use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use flowtune::env::{enumerate, presets, SyntheticTask};
use flowtune::experiment::{
    diagnose_checkpoint, evaluate_checkpoint, parse_grid, run_ablation, train_all, write_new_file, ExperimentConfig,
    CHECKPOINT_DIR, FINAL_CHECKPOINT,
};

#[derive(Parser)]
#[command(name = "flowtune", version, about = "Train and inspect reward-proportional sequence samplers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the config's seed list.
    #[arg(long)]
    seed: Option<u64>,
    /// `dotted.key=value`, applied in order.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (train/ablate) or output file (eval/enumerate/diagnose).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace existing outputs.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TaskArg {
    /// Preset name or task JSON file; defaults to the config's task.
    #[arg(long)]
    task: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured seed.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Sample from a checkpoint and report TVD, rewards, diversity and mode coverage.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        task: TaskArg,
        /// Checkpoint directory; defaults to the final checkpoint of the selected seed.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Samples per condition (defaults to the config's eval setting).
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Exact partition function, target distribution and prefix flows for one condition.
    Enumerate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        task: TaskArg,
        #[arg(long, default_value_t = 0)]
        condition: usize,
    },
    /// Dormant-neuron report for a checkpoint.
    Diagnose {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        task: TaskArg,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dormancy threshold (defaults to the config's trainer.dormancy_tau).
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Run an ablation grid across seeds and write summary.csv.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated variants.
        #[arg(long, value_delimiter = ',', default_value = "full,no_reset,no_prt,no_fl")]
        grid: Vec<String>,
    },
}

fn load_config(common: &Common) -> Result<Option<ExperimentConfig>> {
    let Some(path) = &common.config else {
        if !common.overrides.is_empty() {
            bail!("--override requires --config");
        }
        return Ok(None);
    };
    let mut cfg = ExperimentConfig::load(path)?;
    for o in &common.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    Ok(Some(cfg))
}

fn require_config(common: &Common) -> Result<ExperimentConfig> {
    load_config(common)?.context("--config is required for this command")
}

fn resolve_task(arg: &TaskArg, cfg: Option<&ExperimentConfig>) -> Result<SyntheticTask> {
    match (&arg.task, cfg) {
        (Some(t), _) if presets::PRESET_NAMES.contains(&t.as_str()) => Ok(SyntheticTask::from_spec(presets::by_name(t)?)?),
        (Some(t), _) => Ok(SyntheticTask::load(t)?),
        (None, Some(c)) => Ok(c.task.load()?),
        (None, None) => bail!("pass --task or --config"),
    }
}

fn default_checkpoint(explicit: &Option<PathBuf>, cfg: Option<&ExperimentConfig>) -> Result<PathBuf> {
    if let Some(p) = explicit {
        return Ok(p.clone());
    }
    let cfg = cfg.context("pass --checkpoint or --config")?;
    Ok(cfg.run_dir(cfg.seeds[0]).join(CHECKPOINT_DIR).join(FINAL_CHECKPOINT))
}

fn emit(out: &Option<PathBuf>, force: bool, value: serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_vec_pretty(&value)?;
    text.push(b'\n');
    match out {
        Some(path) => write_new_file(path, &text, force)?,
        None => print!("{}", String::from_utf8(text)?),
    }
    Ok(())
}

fn with_out_dir(mut cfg: ExperimentConfig, out: &Option<PathBuf>) -> ExperimentConfig {
    if let Some(dir) = out {
        cfg.output_dir = dir.clone();
    }
    cfg
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common } => {
            let cfg = with_out_dir(require_config(&common)?, &common.out);
            for s in train_all(&cfg, common.force)? {
                eprintln!(
                    "seed {}: {} rounds, {} resets, mean TVD {}, modes {}",
                    s.seed,
                    s.rounds,
                    s.resets,
                    s.eval.mean_tvd.map_or("n/a".into(), |v| format!("{v:.4}")),
                    s.eval.modes_covered.map_or("n/a".into(), |c| c.to_string()),
                );
            }
            eprintln!("outputs in {}", cfg.experiment_dir().display());
        }
        Command::Eval { common, task, checkpoint, samples } => {
            let cfg = load_config(&common)?;
            let task = resolve_task(&task, cfg.as_ref())?;
            let ckpt = default_checkpoint(&checkpoint, cfg.as_ref())?;
            let n = samples.or(cfg.as_ref().map(|c| c.eval.samples_per_condition)).unwrap_or(16);
            let seed = common.seed.or(cfg.as_ref().map(|c| c.eval.seed)).unwrap_or(0);
            let report = evaluate_checkpoint(&ckpt, &task, n, seed).with_context(|| format!("evaluating {}", ckpt.display()))?;
            emit(&common.out, common.force, serde_json::to_value(report)?)?;
        }
        Command::Enumerate { common, task, condition } => {
            let cfg = load_config(&common)?;
            let task = resolve_task(&task, cfg.as_ref())?;
            let x = task.condition(condition)?;
            emit(&common.out, common.force, serde_json::to_value(enumerate(&task, x)?.export(&task))?)?;
        }
        Command::Diagnose { common, task, checkpoint, tau } => {
            let cfg = load_config(&common)?;
            let task = resolve_task(&task, cfg.as_ref())?;
            let ckpt = default_checkpoint(&checkpoint, cfg.as_ref())?;
            let tau = tau.or(cfg.as_ref().map(|c| c.trainer.dormancy_tau)).unwrap_or(0.0);
            emit(&common.out, common.force, serde_json::to_value(diagnose_checkpoint(&ckpt, &task, tau)?)?)?;
        }
        Command::Ablate { common, grid } => {
            let grid = parse_grid(&grid)?;
            let cfg = with_out_dir(require_config(&common)?, &common.out);
            let rows = run_ablation(&cfg, &grid, common.force)?;
            for r in rows {
                eprintln!(
                    "{:>9}: max reward {:.4}, diversity {:.4}, modes {}, dormant {:.4}",
                    r.variant, r.median_max_reward, r.median_diversity, r.median_modes_covered, r.median_dormant_fraction
                );
            }
            eprintln!("summary in {}", cfg.experiment_dir().join("summary.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
