use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use hirnet_core::data::{write_suite_csv, SuiteSpec};
use hirnet_core::diagnostics::{self, DiagOptions};
use hirnet_core::harness::{self, run_stem, ExperimentConfig, RunOptions};
use hirnet_core::losses::LossKind;
use hirnet_core::models::ModelParams;
use hirnet_core::HirError;
use log::info;

#[derive(Parser)]
#[command(name = "hirnet", version, about = "Hold-one-domain-out experiments with posterior alignment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "hirnet-out")]
        out: PathBuf,
        /// Also write one checkpoint per successful run.
        #[arg(long)]
        save_checkpoints: bool,
    },
    /// Run the config once per alpha value.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated alpha values.
        #[arg(long, value_delimiter = ',', required = true)]
        alpha: Vec<f64>,
        #[arg(long, default_value = "hirnet-out")]
        out: PathBuf,
        #[arg(long)]
        save_checkpoints: bool,
    },
    /// Probe a saved model on the suite described by a manifest.
    Diag {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        suite: PathBuf,
        #[arg(long, default_value = "hirnet-diag")]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        probe_size: usize,
        #[arg(long, default_value_t = 1)]
        per_class_per_domain: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Fixed MMD bandwidth; median heuristic when omitted.
        #[arg(long)]
        bandwidth: Option<f64>,
    },
    /// Write the suite described by a manifest as CSV.
    Gen {
        #[arg(long)]
        suite: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

const EXIT_CONFIG: u8 = 2;
const EXIT_ALL_FAILED: u8 = 3;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config = e.chain().any(|c| c.downcast_ref::<HirError>().is_some_and(HirError::is_config));
            ExitCode::from(if config { EXIT_CONFIG } else { 1 })
        }
    }
}

fn dispatch(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Run {
            config,
            out,
            save_checkpoints,
        } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            experiment(&cfg, &out, save_checkpoints)
        }
        Command::Sweep {
            config,
            alpha,
            out,
            save_checkpoints,
        } => {
            let mut cfg = ExperimentConfig::from_path(&config)?;
            if cfg.loss == LossKind::Agg {
                return Err(HirError::Config("sweeping alpha needs a loss other than agg".into()).into());
            }
            cfg.alphas = Some(alpha);
            cfg.validate()?;
            experiment(&cfg, &out, save_checkpoints)
        }
        Command::Diag {
            checkpoint,
            suite,
            out,
            probe_size,
            per_class_per_domain,
            seed,
            bandwidth,
        } => {
            let params = ModelParams::load(&checkpoint)
                .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
            let suite = load_suite(&suite)?.build()?;
            if params.input_dim() != suite.feature_dim() || params.class_count() != suite.class_count {
                return Err(HirError::Config(format!(
                    "checkpoint expects {} inputs and {} classes, suite has {} and {}",
                    params.input_dim(),
                    params.class_count(),
                    suite.feature_dim(),
                    suite.class_count
                ))
                .into());
            }
            let opts = DiagOptions {
                probe_size,
                per_class_per_domain,
                seed,
                bandwidth,
            };
            let bundle = diagnostics::diagnose(&params, &suite, &opts)?;
            diagnostics::write_bundle(&bundle, &out)?;
            println!("{}", serde_json::to_string_pretty(&bundle.summary())?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Gen { suite, out } => {
            let suite = load_suite(&suite)?.build()?;
            let f = std::fs::File::create(&out).with_context(|| format!("creating {}", out.display()))?;
            write_suite_csv(&suite, f)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn load_suite(path: &Path) -> Result<SuiteSpec> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| HirError::Config(format!("cannot read suite manifest {}: {e}", path.display())))?;
    Ok(SuiteSpec::from_json(&text)?)
}

fn experiment(cfg: &ExperimentConfig, out: &Path, save_checkpoints: bool) -> Result<ExitCode> {
    let workers = harness::workers_from_env()?;
    info!(
        "loss {} alphas {:?}, {} seeds, held out {}, {} workers",
        cfg.loss,
        cfg.alpha_grid(),
        cfg.seeds.len(),
        cfg.held_out,
        workers
    );
    let (report, models) = harness::run_experiment_with(cfg, RunOptions { workers })?;
    harness::write_outputs(&report, out).with_context(|| format!("writing outputs to {}", out.display()))?;
    if save_checkpoints {
        let dir = out.join("checkpoints");
        std::fs::create_dir_all(&dir)?;
        for (run, model) in report.runs.iter().zip(&models) {
            if let Some(m) = model {
                m.save(dir.join(format!("{}.ckpt", run_stem(run))))?;
            }
        }
    }
    for row in &report.summary {
        match (row.mean_accuracy, row.sd_accuracy) {
            (Some(m), Some(sd)) => println!(
                "alpha {:<8} held out {} ({:>5}): {:.2} ± {:.2}  [{} runs, {} failed]",
                row.alpha,
                row.held_out,
                row.held_out_param,
                100.0 * m,
                100.0 * sd,
                row.runs,
                row.failed
            ),
            _ => println!(
                "alpha {:<8} held out {} ({:>5}): all {} runs failed",
                row.alpha, row.held_out, row.held_out_param, row.runs
            ),
        }
    }
    if report.all_failed() {
        eprintln!("all {} runs failed", report.runs.len());
        return Ok(ExitCode::from(EXIT_ALL_FAILED));
    }
    if report.runs.is_empty() {
        bail!("no runs were scheduled");
    }
    Ok(ExitCode::SUCCESS)
}
