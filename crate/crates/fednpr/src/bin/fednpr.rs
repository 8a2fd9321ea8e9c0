//! Batch experiment runner. Resolves a configuration (defaults → preset →
//! TOML file → flags), executes the sweep, and writes `records.csv` plus
//! `summary.txt` into the output directory; `--verify` instead re-derives
//! an existing directory's summary from its CSV and checks byte equality.
//!
//! Exit codes: 0 success, 2 configuration error, 3 run or verification
//! failure, 4 I/O error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use fednpr::experiment::{parse_config, run_experiment, verify_output, CliOverrides};
use fednpr::federation::Algorithm;
use fednpr::Error;

#[derive(Parser)]
#[command(
    name = "fednpr",
    about = "Federated-learning simulator with prototype regularization: run seed sweeps over synthetic non-IID clients and emit deterministic CSV results",
    after_help = "Workers: set FEDNPR_WORKERS to cap the parallel seed runners (default: one per core).\n\
                  Presets: ich-like (10 clients, 5 classes, per-class skew), isic-like (6 clients, 8 classes)."
)]
struct Args {
    /// TOML experiment file; sections [data], [partition], [training], [sinkhorn], [sweep]
    #[arg(long)]
    config: Option<PathBuf>,

    /// Built-in preset to start from: ich-like or isic-like
    #[arg(long)]
    preset: Option<String>,

    /// Algorithm sweep axis (comma-separated): fednpr, fednpr_per, fedavg, fedprox, fedprox_npr, local_only
    #[arg(long, value_delimiter = ',')]
    algo: Option<Vec<Algorithm>>,

    /// Number of clients
    #[arg(long)]
    clients: Option<usize>,

    /// Federated rounds
    #[arg(long)]
    rounds: Option<usize>,

    /// Sub-clusters-per-class sweep axis (comma-separated)
    #[arg(long, value_delimiter = ',')]
    k: Option<Vec<usize>>,

    /// Prototype-regularizer weight sweep axis (comma-separated)
    #[arg(long, value_delimiter = ',')]
    lambda: Option<Vec<f64>>,

    /// Seeds to run (comma-separated); each seed gets its own dataset and partition
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,

    /// Output directory for records.csv and summary.txt
    #[arg(long)]
    out: Option<PathBuf>,

    /// Verify an existing output directory instead of running anything
    #[arg(long, value_name = "DIR", conflicts_with_all = ["config", "preset", "algo", "clients", "rounds", "k", "lambda", "seeds", "out"])]
    verify: Option<PathBuf>,
}

fn category(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Io(_) => 4,
        _ => 3,
    }
}

fn real_main(args: Args) -> Result<(), Error> {
    if let Some(dir) = &args.verify {
        verify_output(dir)?;
        println!("ok: summary.txt is consistent with records.csv in {}", dir.display());
        return Ok(());
    }
    let flags = CliOverrides {
        algorithms: args.algo,
        clients: args.clients,
        rounds: args.rounds,
        k_values: args.k,
        lambda_values: args.lambda,
        seeds: args.seeds,
        out_dir: args.out,
    };
    let spec = parse_config(args.config.as_deref(), args.preset.as_deref(), &flags)?;
    let n_runs = spec.sweep_points().len() * spec.seeds.len();
    println!(
        "running {n_runs} federation run(s): {} sweep point(s) x {} seed(s), {} clients, {} rounds",
        spec.sweep_points().len(),
        spec.seeds.len(),
        spec.partition.n_clients,
        spec.base.rounds
    );
    let out = run_experiment(&spec)?;
    for s in &out.summaries {
        println!(
            "algorithm={} K={} lambda={:.6} seeds={}: bacc {:.4} +/- {:.4}, bauc {:.4} +/- {:.4}",
            s.algorithm, s.k, s.lambda, s.n_seeds, s.mean_bacc, s.std_bacc, s.mean_bauc, s.std_bauc
        );
    }
    println!("wrote {}", out.csv_path.display());
    println!("wrote {}", out.summary_path.display());
    Ok(())
}

fn main() -> ExitCode {
    let args = Args::parse();
    match real_main(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(category(&e))
        }
    }
}
