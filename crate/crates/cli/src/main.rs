use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use orl_core::dataset::Dataset;
use orl_core::experiment::{run_experiment, ExperimentConfig, GenSpec, Task};
use orl_core::synth::{gen_lr, gen_pca};
use orl_core::OrlError;

#[derive(Parser)]
#[command(
    name = "orl",
    version,
    about = "Online and distributed robust learning experiments"
)]
struct Cli {
    /// Only log errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the config's dataset as `dataset.orld` and `dataset.csv`.
    Gen(Common),
    /// Run an online experiment sweep and write `trace.csv` and `summary.json`.
    Run(Common),
    /// Run a distributed experiment; also writes `reports.json`.
    Drl(Common),
    /// Geometric median of the config's `points`, printed as JSON.
    Median(Common),
}

fn exit_code(e: &OrlError) -> u8 {
    match e {
        OrlError::Config(_) | OrlError::InvalidParameter { .. } => 2,
        OrlError::Io(_) | OrlError::Csv(_) => 3,
        _ => 1,
    }
}

fn load(common: &Common) -> Result<ExperimentConfig, OrlError> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = Some(out.clone());
    }
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig) -> Result<&Path, OrlError> {
    cfg.output_dir.as_deref().ok_or_else(|| {
        OrlError::Config("no output directory: pass --out or set `output_dir`".into())
    })
}

fn generate(cfg: &ExperimentConfig) -> Result<(), OrlError> {
    let dataset = match &cfg.gen {
        Some(GenSpec::Pca(spec)) => {
            let mut spec = spec.clone();
            spec.seed = cfg.seed;
            let ds = gen_pca(&spec)?;
            Dataset::new(ds.samples, None, Some(ds.inlier_mask))?
        }
        Some(GenSpec::Lr(spec)) => {
            let mut spec = spec.clone();
            spec.seed = cfg.seed;
            let ds = gen_lr(&spec)?;
            Dataset::new(
                ds.data.x().clone(),
                Some(ds.data.y().to_vec()),
                Some(ds.inlier_mask),
            )?
        }
        None => return Err(OrlError::Config("missing `gen`".into())),
    };
    let dir = out_dir(cfg)?;
    std::fs::create_dir_all(dir)?;
    dataset.save(&dir.join("dataset.orld"))?;
    dataset.write_csv(&dir.join("dataset.csv"))?;
    info!(
        "wrote {} samples to {}",
        dataset.samples.ncols(),
        dir.display()
    );
    Ok(())
}

fn experiment(cfg: &ExperimentConfig, distributed: bool) -> Result<(), OrlError> {
    let is_distributed = matches!(cfg.task, Task::PcaDistributed | Task::LrDistributed);
    if cfg.task == Task::MedianBench || is_distributed != distributed {
        let cmd = if distributed { "drl" } else { "run" };
        return Err(OrlError::Config(format!(
            "task {:?} cannot be run with `{cmd}`",
            cfg.task
        )));
    }
    let dir = out_dir(cfg)?.to_path_buf();
    let out = run_experiment(cfg)?;
    out.write(&dir)?;
    info!(
        "wrote {} trace rows to {}",
        out.trace.rows.len(),
        dir.display()
    );
    Ok(())
}

fn median(cfg: &ExperimentConfig) -> Result<(), OrlError> {
    if cfg.task != Task::MedianBench {
        return Err(OrlError::Config(format!(
            "`median` needs task MedianBench, got {:?}",
            cfg.task
        )));
    }
    let out = run_experiment(cfg)?;
    if let Some(dir) = &cfg.output_dir {
        out.write(dir)?;
    }
    println!("{}", serde_json::to_string_pretty(&out.summary)?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match &cli.command {
        Command::Gen(c) => load(c).and_then(|cfg| generate(&cfg)),
        Command::Run(c) => load(c).and_then(|cfg| experiment(&cfg, false)),
        Command::Drl(c) => load(c).and_then(|cfg| experiment(&cfg, true)),
        Command::Median(c) => load(c).and_then(|cfg| median(&cfg)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
