use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dwmr_core::config::Config;
use dwmr_core::datasets::{build_splits, load_dataset, save_dataset, SplitSet};
use dwmr_core::experiments::{
    collect_reports, family_table, run_ablations, run_info, run_sweep, write_reports, Component, Metric, RunReports,
};
use dwmr_core::probes::evaluate;
use dwmr_core::trainer::{latest_checkpoint, load_checkpoint, write_atomic};
use dwmr_core::{CoreError, Result};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const DATASET_FILE: &str = "dataset.bin";

#[derive(Parser)]
#[command(name = "dwmr", version, about = "Discrete Boolean world models: data, training, probing and reports")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Flat JSON config with dotted keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set loss.lambda_var=10`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Run seed (same as `--set seed=N`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,
    /// Directory holding a pre-generated dataset.bin.
    #[arg(long, global = true, env = "DWMR_DATA_DIR")]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train/val/test transition datasets.
    GenData,
    /// Train a world model, writing checkpoints and metrics.csv.
    Train {
        /// Continue from the latest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Fit probes on a trained model and write eval_enc.json / eval_im.json.
    Eval {
        /// Checkpoint to evaluate (default: latest in the output directory).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Split to report on.
        #[arg(long, default_value = "test", value_parser = ["test", "val"])]
        split: String,
    },
    /// Random hyperparameter search selected on validation imagination F1.
    Sweep,
    /// Retrain with individual objective components removed.
    Ablate {
        /// Component to remove (var, cor, cos, loc, ema); repeatable.
        #[arg(long = "component")]
        components: Vec<String>,
    },
    /// Aggregate eval reports into a mean ± std table.
    Report {
        /// Report files or directories searched recursively (default: --out).
        inputs: Vec<PathBuf>,
    },
}

fn build_config(c: &Common, fallback: Option<&Path>) -> Result<Config> {
    let mut cfg = match (&c.config, fallback) {
        (Some(p), _) => Config::load(p)?,
        (None, Some(p)) if p.exists() => Config::load(p)?,
        _ => Config::default(),
    };
    for o in &c.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(s) = c.seed {
        cfg.set_value("seed", serde_json::json!(s))?;
    }
    cfg.train_config()?.validate()?;
    Ok(cfg)
}

/// Loads the dataset from `--data`, else from the output directory, else
/// generates it there. A stored dataset must match the configured spec.
fn dataset(c: &Common, cfg: &Config) -> Result<SplitSet> {
    let spec = cfg.data_spec()?;
    let stored = match &c.data {
        Some(dir) => {
            let p = dir.join(DATASET_FILE);
            if !p.exists() {
                return Err(CoreError::Config(format!("no {DATASET_FILE} in data directory {}", dir.display())));
            }
            Some(p)
        }
        None => Some(c.out.join(DATASET_FILE)).filter(|p| p.exists()),
    };
    let set = match stored {
        Some(p) => {
            log::info!("loading dataset {}", p.display());
            load_dataset(&p)?
        }
        None => {
            log::info!("generating {} dataset", spec.benchmark.name());
            let set = build_splits(&spec)?;
            save_dataset(&c.out.join(DATASET_FILE), &set)?;
            set
        }
    };
    let sizes = [set.train().len(), set.val().len(), set.test().len()];
    if set.benchmark != spec.benchmark || sizes != spec.sizes || set.noise != spec.noise {
        return Err(CoreError::Mismatch(format!(
            "stored dataset ({}, sizes {sizes:?}, noise {:?}) does not match the config ({}, sizes {:?}, noise {:?})",
            set.benchmark.name(),
            set.noise,
            spec.benchmark.name(),
            spec.sizes,
            spec.noise
        )));
    }
    Ok(set)
}

fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    std::fs::create_dir_all(&c.out)?;
    match cli.command {
        Command::GenData => {
            let cfg = build_config(c, None)?;
            let set = build_splits(&cfg.data_spec()?)?;
            let path = c.out.join(DATASET_FILE);
            save_dataset(&path, &set)?;
            println!(
                "wrote {} ({} / {} / {} transitions)",
                path.display(),
                set.train().len(),
                set.val().len(),
                set.test().len()
            );
        }
        Command::Train { resume } => {
            let cfg = build_config(c, None)?;
            let data = dataset(c, &cfg)?;
            write_atomic(&c.out.join("config.json"), cfg.to_json().as_bytes())?;
            let opts = dwmr_core::trainer::RunOptions {
                out_dir: Some(c.out.clone()),
                resume,
            };
            let state = dwmr_core::trainer::run_training::<f32>(&cfg.train_config()?, &data, &opts)?;
            println!("trained {} epochs; metrics in {}", state.epoch, c.out.join("metrics.csv").display());
        }
        Command::Eval { checkpoint, split } => {
            let cfg = build_config(c, Some(&c.out.join("config.json")))?;
            let tc = cfg.train_config()?;
            let data = dataset(c, &cfg)?;
            let path = match checkpoint {
                Some(p) => p,
                None => latest_checkpoint(&c.out)
                    .map(|(_, p)| p)
                    .ok_or_else(|| CoreError::Config(format!("no checkpoint in {}", c.out.display())))?,
            };
            log::info!("evaluating {}", path.display());
            let state = load_checkpoint::<f32>(&path, &tc)?;
            let eval_split = if split == "val" { data.val() } else { data.test() };
            let (enc, im) = evaluate(&state.model, data.train(), eval_split, &cfg.probe_config()?, &run_info(&cfg)?)?;
            let r = RunReports { enc, im };
            write_reports(&c.out, &r)?;
            println!(
                "encoding: F1 {:.1} acc {:.1} | imagination: F1 {:.1} acc {:.1}",
                r.enc.mean_f1, r.enc.mean_acc, r.im.mean_f1, r.im.mean_acc
            );
        }
        Command::Sweep => {
            let cfg = build_config(c, None)?;
            let data = dataset(c, &cfg)?;
            let o = run_sweep(&cfg, &data, &c.out)?;
            println!("winner: point {} (val im F1 {:.1})", o.winner, o.scores[o.winner]);
            print!("{}", std::fs::read_to_string(c.out.join("table.txt"))?);
        }
        Command::Ablate { components } => {
            let cfg = build_config(c, None)?;
            let list = if components.is_empty() {
                Component::parse_list(cfg.str("ablate.components"))?
            } else {
                components.iter().map(|s| Component::parse(s)).collect::<Result<Vec<_>>>()?
            };
            let data = dataset(c, &cfg)?;
            run_ablations(&cfg, &data, &list, &c.out)?;
            print!("{}", std::fs::read_to_string(c.out.join("table.txt"))?);
        }
        Command::Report { inputs } => {
            let cfg = build_config(c, None)?;
            let inputs = if inputs.is_empty() { vec![c.out.clone()] } else { inputs };
            let reports = collect_reports(&inputs)?;
            if reports.is_empty() {
                return Err(CoreError::Config("no eval_*.json reports found".into()));
            }
            let table = family_table(&reports, &cfg.family_order()?, Metric::parse(cfg.str("report.metric"))?);
            write_atomic(&c.out.join("table.txt"), table.as_bytes())?;
            print!("{table}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() || matches!(e, CoreError::Mismatch(_)) { 1 } else { 2 })
        }
    }
}
