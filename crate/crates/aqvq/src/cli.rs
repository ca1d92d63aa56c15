//! Command-line surface. Exit codes: 0 success, 1 configuration or usage
//! error, 2 runtime or numeric failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use aqvq_core::analysis::{fit_analytic, gradient_gap, optimal_n};
use aqvq_core::pool::enumerate_structures;
use clap::{ArgGroup, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::error::{AppError, AppResult};
use crate::experiments::{
    ablation_csv, adaptive_config, run_ablation, run_fixed_sweep, sweep_csv, sweep_traces_csv, train_run, usage_csv,
    AblationGrid, SweepResult,
};
use crate::report::{write_file, RunReport};

#[derive(Debug, Parser)]
#[command(name = "aqvq", version, about = "Adaptive vector quantization experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model from a config file.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train one fixed-codebook model per structure of capacity W.
    Sweep {
        #[arg(long)]
        capacity: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Train the adaptive model over every structure of capacity W.
    Adaptive {
        #[arg(long)]
        capacity: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run an ablation grid.
    Ablate {
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Gradient gap of a checkpoint, or an analytic fit of a sweep.
    #[command(group(ArgGroup::new("analysis").required(true).args(["gradient_gap", "fit_analytic"])))]
    Analyze {
        #[arg(long, requires = "gradient_gap")]
        checkpoint: Option<PathBuf>,
        #[arg(long, requires = "checkpoint")]
        gradient_gap: bool,
        /// A `sweep.json` written by the sweep command.
        #[arg(long, value_name = "REPORT")]
        fit_analytic: Option<PathBuf>,
    },
    /// Print a run's report.
    Report {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

/// Output of the sweep command, read back by `analyze --fit-analytic`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepFile {
    pub capacity: usize,
    pub results: Vec<SweepResult>,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_config(path: Option<&Path>) -> AppResult<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::read(p)?,
        None => RunConfig::default(),
    };
    cfg.with_env_seed()
}

fn create_dir(dir: &Path) -> AppResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))
}

fn execute(cmd: Command) -> AppResult<()> {
    match cmd {
        Command::Train { config, out, resume } => {
            let cfg = load_config(config.as_deref())?;
            let (cfg, train, val) = cfg.resolve()?;
            let state = match resume {
                Some(path) => {
                    let (stored, state) = load_checkpoint(&path)?;
                    if stored.model != cfg.model {
                        return Err(AppError::Config(format!(
                            "checkpoint {} was written for a different model configuration",
                            path.display()
                        )));
                    }
                    Some(state)
                }
                None => None,
            };
            create_dir(&out)?;
            cfg.write(&out.join("config.json"))?;
            let outcome = train_run(&cfg, &train, &val, state)?;
            outcome.report.write(&out)?;
            save_checkpoint(&cfg, &outcome.state, &out.join("checkpoint.json"))?;
            print_summary(&outcome.report);
        }
        Command::Sweep { capacity, config, out } => {
            let cfg = load_config(config.as_deref())?;
            enumerate_structures(capacity)?;
            let (cfg, train, val) = cfg.resolve()?;
            create_dir(&out)?;
            cfg.write(&out.join("config.json"))?;
            let results = run_fixed_sweep(&cfg, &train, &val, capacity)?;
            write_file(&out.join("sweep.csv"), &sweep_csv(&results)?)?;
            write_file(&out.join("traces.csv"), &sweep_traces_csv(&results)?)?;
            let file = SweepFile { capacity, results };
            write_file(&out.join("sweep.json"), &(serde_json::to_string_pretty(&file).expect("serializes") + "\n"))?;
            for r in &file.results {
                match &r.error {
                    None => println!(
                        "{:>12} recon_mean={:.6} recon_sum={:.6}",
                        r.spec.to_string(),
                        r.final_val_recon_mean,
                        r.final_val_recon_sum
                    ),
                    Some(e) => println!("{:>12} failed: {e}", r.spec.to_string()),
                }
            }
        }
        Command::Adaptive { capacity, config, out } => {
            let cfg = adaptive_config(&load_config(config.as_deref())?, capacity);
            let (cfg, train, val) = cfg.resolve()?;
            create_dir(&out)?;
            cfg.write(&out.join("config.json"))?;
            let outcome = train_run(&cfg, &train, &val, None)?;
            outcome.report.write(&out)?;
            let specs = enumerate_structures(capacity)?;
            let window = (cfg.training.steps as usize / 20).max(1);
            write_file(&out.join("usage.csv"), &usage_csv(&outcome.selections, window, &specs)?)?;
            save_checkpoint(&cfg, &outcome.state, &out.join("checkpoint.json"))?;
            print_summary(&outcome.report);
        }
        Command::Ablate { grid, out } => {
            let mut grid = match grid {
                Some(p) => AblationGrid::read(&p)?,
                None => AblationGrid::default(),
            };
            grid.base = grid.base.with_env_seed()?;
            grid.cells()?;
            create_dir(&out)?;
            write_file(&out.join("grid.json"), &(serde_json::to_string_pretty(&grid).expect("serializes") + "\n"))?;
            let rows = run_ablation(&grid)?;
            write_file(&out.join("ablation.csv"), &ablation_csv(&rows)?)?;
            write_file(&out.join("ablation.json"), &(serde_json::to_string_pretty(&rows).expect("serializes") + "\n"))?;
            for r in &rows {
                match &r.error {
                    None => println!("{:<28} seed={} recon_mean={:.6}", r.cell.label, r.seed, r.final_val_recon_mean),
                    Some(e) => println!("{:<28} seed={} failed: {e}", r.cell.label, r.seed),
                }
            }
        }
        Command::Analyze { checkpoint, gradient_gap: _, fit_analytic: Some(path) } if checkpoint.is_none() => {
            println!("{}", fit_report(&path)?);
        }
        Command::Analyze { checkpoint: Some(path), gradient_gap: true, fit_analytic: None } => {
            println!("{}", gap_report(&path)?);
        }
        Command::Analyze { .. } => {
            return Err(AppError::Config(
                "use either --checkpoint CKPT --gradient-gap or --fit-analytic REPORT".into(),
            ));
        }
        Command::Report { run, format } => {
            let report = RunReport::read(&run.join("report.json"))?;
            match format {
                Format::Csv => print!("{}", report.to_csv()?),
                Format::Json => println!("{}", report.to_json()),
            }
        }
    }
    Ok(())
}

fn print_summary(r: &RunReport) {
    let s = &r.summary;
    println!(
        "steps={} val_recon_mean={:.6} val_recon_sum={:.6} ({} batches) config={}",
        s.steps, s.final_val_recon_mean, s.final_val_recon_sum, s.val_batches, s.config_hash
    );
}

/// Gradient gap over the validation split of the checkpoint's own data.
pub fn gap_report(path: &Path) -> AppResult<String> {
    let (cfg, state) = load_checkpoint(path)?;
    let (_, _, val) = cfg.clone().resolve()?;
    let indices: Vec<usize> = (0..val.len()).collect();
    let mut gaps = Vec::new();
    let mut quant = Vec::new();
    for chunk in indices.chunks(cfg.training.eval_batch_size) {
        let m = gradient_gap(&state.model, &val.batch(chunk)?)?;
        gaps.push(m.gap);
        quant.push(m.quant_loss);
    }
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    Ok(serde_json::to_string_pretty(&json!({
        "checkpoint": path.display().to_string(),
        "step": state.step,
        "mean_gap": mean,
        "batch_gaps": gaps,
        "batch_quant_losses": quant,
    }))
    .expect("serializes"))
}

/// Fits `L(n) = V/n + a·n` to a sweep's validation losses.
pub fn fit_report(path: &Path) -> AppResult<String> {
    let text = std::fs::read_to_string(path).map_err(|source| AppError::MissingInput { path: path.into(), source })?;
    let sweep: SweepFile = serde_json::from_str(&text).map_err(|e| AppError::parse(path.display().to_string(), &e))?;
    let points: Vec<(f64, f64)> = sweep
        .results
        .iter()
        .filter(|r| r.error.is_none() && r.final_val_recon_mean.is_finite())
        .map(|r| (r.spec.n as f64, r.final_val_recon_mean))
        .collect();
    let fit = fit_analytic(&points)?;
    let optimum = fit.model().ok().map(|m| optimal_n(&m));
    Ok(serde_json::to_string_pretty(&json!({
        "capacity": sweep.capacity,
        "points": points,
        "fit": fit,
        "optimal_n": optimum,
    }))
    .expect("serializes"))
}
