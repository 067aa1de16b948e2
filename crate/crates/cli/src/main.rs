use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tscil::config::{ExperimentConfig, MethodSelection};
use tscil::error::{io_err, Error, Result};
use tscil::report::{metrics_of_csv, run_experiment, write_outputs};

#[derive(Parser)]
#[command(name = "tscil", version, about = "Exemplar-free class-incremental learning for time series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one method (or all of them) and write reports.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Run this seed only instead of the config's seed list.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Method name or ALL; overrides the config.
        #[arg(long)]
        method: Option<String>,
        /// Also dump the prototype store after every task.
        #[arg(long)]
        dump_prototypes: bool,
    },
    /// Recompute the metrics of a standalone accuracy matrix.
    Metrics {
        #[arg(long)]
        matrix: PathBuf,
    },
}

fn run(
    config: &Path,
    seed: Option<u64>,
    out: &Path,
    method: Option<&str>,
    dump_prototypes: bool,
) -> Result<()> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(m) = method {
        cfg.method = m.parse::<MethodSelection>()?;
    }
    let seeds = seed.map_or_else(|| cfg.seeds.clone(), |s| vec![s]);
    let base_dir = config.parent().unwrap_or(Path::new("."));
    let prototype_dir = dump_prototypes.then(|| out.join("prototypes"));
    let result = run_experiment(&cfg, &seeds, cfg.method, base_dir, prototype_dir.as_deref())?;
    write_outputs(&result, out)?;
    for r in &result.methods {
        let f_t = r.summary.f_t.map_or("n/a".to_string(), |f| format!("{f:.4}"));
        println!(
            "{:<18} A_T={:.4} F_T={f_t} A_cur={:.4}",
            r.method.name(),
            r.summary.a_t,
            r.summary.a_cur
        );
    }
    Ok(())
}

fn metrics(matrix: &Path) -> Result<()> {
    let text = fs::read_to_string(matrix).map_err(io_err(matrix))?;
    let summary = metrics_of_csv(&text)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run {
            config,
            seed,
            out,
            method,
            dump_prototypes,
        } => run(config, *seed, out, method.as_deref(), *dump_prototypes),
        Command::Metrics { matrix } => metrics(matrix),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Usage(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
