use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use bcnn_gsr::bench::{
    emit_plot_data, run_hyperparam_study, run_recovery_benchmark, run_single_recovery, run_variance_study,
    train_experiment, write_benchmark_csv, write_hyperparam_csv, write_single_recovery_csv, write_trials_csv, write_variance_csv,
    ExperimentConfig,
};
use bcnn_gsr::prior::{BcnnModel, PriorParams};
use bcnn_gsr::sensor::{ingest_sensor_dataset, write_sensor_dataset, IngestConfig, TimestampPolicy};
use bcnn_gsr::signal::write_signals_csv;
use bcnn_gsr::training::write_trace_csv;
use bcnn_gsr::vb::write_recovery_trace_csv;
use bcnn_gsr::{GsrError, Result};

#[derive(Parser)]
#[command(name = "bcnn-gsr", version, about = "Graph signal recovery with learned Chebyshev-filter priors")]
struct Cli {
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON experiment config; defaults are used for missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides the config's `out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every model on GMRF and GMM signals and report the KLD table.
    Hyperparam,
    /// Train the configured model and write its parameters and trace.
    Train {
        #[arg(long, value_parser = parse_model)]
        model: Option<BcnnModel>,
        /// Fill the wall-time column of the trace (not reproducible).
        #[arg(long)]
        timing: bool,
    },
    /// Recover one test signal with both methods.
    Recover {
        /// Prior parameters JSON; trained from the config when omitted.
        #[arg(long)]
        prior: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        trial: usize,
    },
    /// NMSE of both methods over the configured SNR and sampling grid.
    Bench,
    /// Mean and variance of the estimate of one signal across trials.
    Variance {
        #[arg(long, default_value_t = 100)]
        trials: usize,
    },
    /// Turn a sensor log into a graph and signals.
    Ingest {
        /// Readings file; taken from the config dataset when omitted.
        #[arg(long, requires = "coords")]
        readings: Option<PathBuf>,
        #[arg(long)]
        coords: Option<PathBuf>,
        /// Number of complete timestamps kept as training signals.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Reshape a results CSV into plot series.
    Plotdata {
        #[arg(long)]
        input: PathBuf,
    },
}

fn parse_model(s: &str) -> std::result::Result<BcnnModel, String> {
    serde_json::from_value(serde_json::Value::String(s.to_lowercase()))
        .map_err(|_| format!("unknown model `{s}` (expected bcnn1, bcnn2 or bcnn3)"))
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_path(cfg: &ExperimentConfig, name: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(&cfg.out)?;
    Ok(cfg.out.join(name))
}

fn report(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Hyperparam => {
            let rows = run_hyperparam_study(&cfg)?;
            let path = out_path(&cfg, "hyperparam.csv")?;
            write_hyperparam_csv(&path, &rows)?;
            report(&[path]);
        }
        Command::Train { model, timing } => {
            let model = model.unwrap_or(cfg.table1_model);
            let cfg = ExperimentConfig { table1_model: model, ..cfg };
            let (_, data, outcome) = train_experiment(&cfg)?;
            let prior = out_path(&cfg, "prior.json")?;
            let trace = out_path(&cfg, "train_trace.csv")?;
            let signals = out_path(&cfg, "train_signals.csv")?;
            outcome.params.save(&prior)?;
            write_trace_csv(&trace, &outcome.trace, timing)?;
            write_signals_csv(&signals, &data)?;
            println!("{}: {} iterations, converged: {}", model.name(), outcome.trace.len(), outcome.converged);
            report(&[prior, trace, signals]);
        }
        Command::Recover { prior, trial } => {
            let given = prior.as_deref().map(PriorParams::load).transpose()?;
            let r = run_single_recovery(&cfg, given, trial)?;
            let est = out_path(&cfg, "recovery.csv")?;
            let trace = out_path(&cfg, "recovery_trace.csv")?;
            let post = out_path(&cfg, "posterior.json")?;
            write_single_recovery_csv(&est, &r)?;
            write_recovery_trace_csv(&trace, &r.bcnn.trace)?;
            std::fs::write(&post, r.bcnn.posterior.to_json(256)?)?;
            let mut written = vec![est, trace, post];
            if prior.is_none() {
                let path = out_path(&cfg, "prior.json")?;
                r.prior.save(&path)?;
                written.push(path);
            }
            let last = |t: &[bcnn_gsr::vb::RecoveryTraceRow]| t.last().and_then(|r| r.nmse).unwrap_or(f64::NAN);
            println!("nmse bcnn_gsr {:.6} gmrf_vb {:.6}", last(&r.bcnn.trace), last(&r.baseline.trace));
            report(&written);
        }
        Command::Bench => {
            let out = run_recovery_benchmark(&cfg)?;
            let summary = out_path(&cfg, "benchmark.csv")?;
            let trials = out_path(&cfg, "benchmark_trials.csv")?;
            write_benchmark_csv(&summary, &out.summary)?;
            write_trials_csv(&trials, &out.trials)?;
            report(&[summary, trials]);
        }
        Command::Variance { trials } => {
            let rows = run_variance_study(&cfg, trials)?;
            let path = out_path(&cfg, "variance.csv")?;
            write_variance_csv(&path, &rows)?;
            report(&[path]);
        }
        Command::Ingest { readings, coords, count } => {
            let (readings, coords, mut ingest) = match (readings, coords, &cfg.dataset) {
                (Some(r), Some(c), ds) => (r, c, ds.as_ref().map(|d| d.ingest.clone()).unwrap_or_default()),
                (None, None, Some(ds)) => (ds.readings.clone(), ds.coords.clone(), ds.ingest.clone()),
                _ => return Err(GsrError::InvalidInput("ingest needs --readings and --coords or a config dataset".into())),
            };
            if let Some(count) = count {
                ingest = IngestConfig { policy: TimestampPolicy::FirstComplete { count }, ..ingest };
            }
            let ds = ingest_sensor_dataset(&readings, &coords, &ingest)?;
            let dir = out_path(&cfg, "sensor")?;
            std::fs::create_dir_all(&dir)?;
            write_sensor_dataset(&ds, &dir)?;
            println!(
                "{} nodes, {} training signals, {} held out, {} skipped rows",
                ds.graph.len(),
                ds.signals.len(),
                ds.held_out.len(),
                ds.skipped_rows
            );
            report(&[dir]);
        }
        Command::Plotdata { input } => {
            let dir = out_path(&cfg, "plot")?;
            report(&emit_plot_data(&input, &dir)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
