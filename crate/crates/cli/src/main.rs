//! `weft` — experiment runner for parameter-space knowledge transfer.
//!
//! Verbs:
//!   weft run <config.toml | preset:NAME>            one run per config
//!   weft sweep <config.toml | preset:NAME> --seeds 1,2,3
//!   weft report <dir>                               aggregate report rows
//!   weft curves <dir>                               plot-ready long CSV
//!
//! The output root is `--out`, else `$WEFT_OUT`, else `./weft-runs`.
//! Exit codes: 0 ok, 1 at least one run failed, 2 config error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use weft_core::checkpoint::write_atomic;
use weft_core::error::Error;
use weft_core::harness::{
    emit_curves, parse_config, preset, preset_names, report_dir, run_experiment, run_sweep,
    ExperimentConfig,
};

#[derive(Parser)]
#[command(name = "weft", about = "parameter-space knowledge transfer experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every config in a file or preset once.
    Run {
        /// Path to a TOML config, or `preset:<name>`.
        spec: String,
        /// Override the seed of every config.
        #[arg(long)]
        seed: Option<u64>,
        /// Output root (default $WEFT_OUT or ./weft-runs).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cartesian product of configs × seeds, with aggregation.
    Sweep {
        spec: String,
        /// Comma-separated seeds, e.g. 1,2,3.
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        /// Worker threads (each run stays single-threaded).
        #[arg(long, default_value_t = default_jobs())]
        jobs: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate report rows found under a directory into a table.
    Report { dir: PathBuf },
    /// Emit long-format curves from every run record under a directory.
    Curves { dir: PathBuf },
    /// List the built-in presets.
    Presets,
}

fn default_jobs() -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get().min(4))
        .unwrap_or(1)
}

fn out_root(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os("WEFT_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("weft-runs"))
}

fn load_configs(spec: &str) -> Result<Vec<ExperimentConfig>, Error> {
    if let Some(name) = spec.strip_prefix("preset:") {
        preset(name)
    } else {
        let text = std::fs::read_to_string(spec)
            .map_err(|e| Error::config(format!("cannot read {spec}: {e}")))?;
        Ok(vec![parse_config(&text)?])
    }
}

/// Collect `(variant/seedN, runrecord.csv)` pairs under a directory.
fn collect_run_records(dir: &Path, out: &mut Vec<(String, String)>) -> Result<(), Error> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_run_records(&path, out)?;
        } else if path.file_name().and_then(|n| n.to_str()) == Some("runrecord.csv") {
            let label = path
                .parent()
                .map(|p| {
                    let seed = p.file_name().and_then(|n| n.to_str()).unwrap_or("run");
                    match p.parent().and_then(|q| q.file_name()).and_then(|n| n.to_str()) {
                        Some(variant) => format!("{variant}/{seed}"),
                        None => seed.to_string(),
                    }
                })
                .unwrap_or_else(|| "run".to_string());
            out.push((label, std::fs::read_to_string(&path)?));
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool, Error> {
    match cli.command {
        Command::Run { spec, seed, out } => {
            let root = out_root(out);
            let mut any_failed = false;
            for mut cfg in load_configs(&spec)? {
                if let Some(s) = seed {
                    cfg.seed = s;
                }
                let res = run_experiment(&cfg, &root)?;
                any_failed |= res.row.failed;
                let summary: Vec<String> = res
                    .row
                    .models
                    .iter()
                    .map(|mm| {
                        format!(
                            "{} top1={}",
                            mm.id,
                            mm.final_top1.map(|v| format!("{v:.4}")).unwrap_or_default()
                        )
                    })
                    .collect();
                println!(
                    "{} seed {} [{}] {} → {}",
                    res.row.variant,
                    res.row.seed,
                    if res.row.failed { "FAILED" } else { "ok" },
                    summary.join(" "),
                    res.run_dir.display()
                );
            }
            Ok(any_failed)
        }
        Command::Sweep {
            spec,
            seeds,
            jobs,
            out,
        } => {
            let root = out_root(out);
            let configs = load_configs(&spec)?;
            let sweep = run_sweep(&configs, &seeds, &root, jobs)?;
            println!("{}", std::fs::read_to_string(&sweep.table_path)?);
            println!("table: {}", sweep.table_path.display());
            Ok(sweep.any_failed)
        }
        Command::Report { dir } => {
            let (rows, table) = report_dir(&dir)?;
            print!("{table}");
            write_atomic(&dir.join("report.csv"), table.as_bytes())?;
            Ok(rows.iter().any(|r| r.failed))
        }
        Command::Curves { dir } => {
            let mut inputs = Vec::new();
            collect_run_records(&dir, &mut inputs)?;
            if inputs.is_empty() {
                return Err(Error::format(format!(
                    "no runrecord.csv found under {}",
                    dir.display()
                )));
            }
            inputs.sort_by(|a, b| a.0.cmp(&b.0));
            let csv = emit_curves(&inputs)?;
            let path = dir.join("curves.csv");
            write_atomic(&path, csv.as_bytes())?;
            println!("{} rows → {}", csv.lines().count() - 1, path.display());
            Ok(false)
        }
        Command::Presets => {
            for name in preset_names() {
                println!("{name}");
            }
            Ok(false)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => ExitCode::from(1),
        Err(e @ (Error::Config(_) | Error::Plan(_))) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
