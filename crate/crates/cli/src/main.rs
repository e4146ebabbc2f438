use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use eraser_core::evaluation::accuracy;
use eraser_core::runner::{self, ExperimentConfig, RunCheckpoint, SeedPlan};
use eraser_core::taskstream::{Dataset, TaskManifest};
use eraser_core::Error;

#[derive(Parser)]
#[command(name = "eraser", version, about = "Noisy-label continual learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the task sequence for every configured seed.
    Run {
        config: PathBuf,
        /// Dotted config override, e.g. `--set noise.rate=0.3`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Continue from the latest checkpoint of each seed.
        #[arg(long)]
        resume: bool,
    },
    /// Print the task manifest, including injected noise, without training.
    PreviewNoise {
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Run seed; defaults to the first configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Test accuracy of one task head from a run checkpoint.
    Eval { checkpoint: PathBuf, task_id: usize },
    /// Metric tables, density histograms and 2-D projections for a result directory.
    Report { dir: PathBuf },
    /// Paired per-seed delta table, `B − A`.
    Compare { dir_a: PathBuf, dir_b: PathBuf },
    /// Print a default configuration.
    DefaultConfig {
        #[arg(value_enum, default_value_t = Preset::Mnist)]
        preset: Preset,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Mnist,
    Synthetic2d,
}

const EXIT_CONFIG: u8 = 2;
const EXIT_TRAINING: u8 = 3;

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(
            Error::Config(_)
            | Error::UnknownDataset(_)
            | Error::Partition(_)
            | Error::Noise(_)
            | Error::ArchitectureMismatch(_)
            | Error::Json(_),
        ) => EXIT_CONFIG,
        Some(Error::Training { .. } | Error::ErasureDiverged { .. } | Error::NonFinite(_) | Error::NonFiniteScore { .. }) => {
            EXIT_TRAINING
        }
        _ => 1,
    }
}

fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let cfg = ExperimentConfig::load(path)?;
    Ok(cfg.with_overrides(overrides)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            config,
            overrides,
            resume,
        } => {
            let cfg = load_config(&config, &overrides)?;
            let dir = runner::config_dir(&cfg);
            log::info!("writing results to {}", dir.display());
            let (_, aggregate) = runner::run_experiment(&cfg, resume)?;
            if let Some(a) = aggregate {
                println!(
                    "{}: S {:.2}±{:.2} (A1 {:.2}, A2 {:.2}, F {:.2}) over {} seed(s)",
                    dir.display(),
                    a.s.mean,
                    a.s.std,
                    a.a1.mean,
                    a.a2.mean,
                    a.f.mean,
                    a.seeds.len()
                );
            }
        }
        Command::PreviewNoise {
            config,
            overrides,
            seed,
        } => {
            let cfg = load_config(&config, &overrides)?;
            let seed = seed.unwrap_or(cfg.seeds[0]);
            let dataset = Dataset::load(cfg.dataset, &cfg.data_dir)?;
            let plan = SeedPlan::new(seed, cfg.class_order_seed);
            let tasks = runner::prepare_tasks(&cfg, &dataset, &plan)?;
            let manifest = TaskManifest::new(dataset.id, plan.data, cfg.split, &tasks);
            println!("{}", serde_json::to_string_pretty(&manifest)?);
        }
        Command::Eval { checkpoint, task_id } => {
            let ckpt = RunCheckpoint::load(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            if task_id == 0 || task_id > ckpt.completed {
                return Err(Error::Config(format!(
                    "task {task_id} is not trained in this checkpoint ({} tasks completed)",
                    ckpt.completed
                ))
                .into());
            }
            let dataset = Dataset::load(ckpt.config.dataset, &ckpt.config.data_dir)?;
            let state = ckpt.into_state(&dataset)?;
            let task = &state.tasks[task_id - 1];
            let labels = task.local_labels(&task.test.true_labels);
            let acc = accuracy(&state.model, task_id, task.test.all_inputs().view(), &labels)?;
            println!("task {task_id} {:?}: {acc:.2}%", task.class_set);
        }
        Command::Report { dir } => print!("{}", runner::report(&dir)?),
        Command::Compare { dir_a, dir_b } => print!("{}", runner::compare(&dir_a, &dir_b)?.1),
        Command::DefaultConfig { preset } => {
            let cfg = match preset {
                Preset::Mnist => ExperimentConfig::mnist_default(),
                Preset::Synthetic2d => ExperimentConfig::synthetic_default(),
            };
            println!("{}", serde_json::to_string_pretty(&cfg)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
