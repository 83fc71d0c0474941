//! Multi-config, multi-seed sweeps with deterministic aggregation.

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use super::{run_experiment, ExperimentConfig, ModelMetrics, ReportRow};
use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};
use crate::tensor::Real;

pub struct SweepOutput {
    pub rows: Vec<ReportRow>,
    pub table_path: PathBuf,
    pub any_failed: bool,
}

/// Run the Cartesian product of configs × seeds (each run seeded by the
/// sweep seed), aggregate mean/stddev per variant over the surviving runs,
/// and write `table.csv` under `out_root`. Runs execute on up to `jobs`
/// worker threads; outputs are identical regardless of scheduling because
/// every run is deterministic and rows are ordered by (config, seed).
pub fn run_sweep(
    configs: &[ExperimentConfig],
    seeds: &[u64],
    out_root: &Path,
    jobs: usize,
) -> Result<SweepOutput> {
    if configs.is_empty() || seeds.is_empty() {
        return Err(Error::config("a sweep needs at least one config and one seed"));
    }
    let mut work: Vec<(usize, ExperimentConfig)> = Vec::new();
    for cfg in configs {
        for &seed in seeds {
            let mut c = cfg.clone();
            c.seed = seed;
            c.output_dir = None;
            work.push((work.len(), c));
        }
    }

    let results: Mutex<Vec<Option<Result<ReportRow>>>> =
        Mutex::new((0..work.len()).map(|_| None).collect());
    let next: Mutex<usize> = Mutex::new(0);
    let jobs = jobs.max(1).min(work.len());
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let idx = {
                    let mut n = next.lock().unwrap();
                    if *n >= work.len() {
                        break;
                    }
                    let i = *n;
                    *n += 1;
                    i
                };
                let out = run_experiment(&work[idx].1, out_root).map(|r| r.row);
                results.lock().unwrap()[idx] = Some(out);
            });
        }
    });

    let mut rows = Vec::with_capacity(work.len());
    let mut any_failed = false;
    for slot in results.into_inner().unwrap() {
        let row = slot.expect("worker filled every slot")?;
        any_failed |= row.failed;
        rows.push(row);
    }

    let variants: Vec<String> = configs.iter().map(|c| c.name.clone()).collect();
    let table = sweep_table(&variants, seeds, &rows);
    let table_path = out_root.join("table.csv");
    write_atomic(&table_path, table.as_bytes())?;
    Ok(SweepOutput {
        rows,
        table_path,
        any_failed,
    })
}

pub const TABLE_HEADER: &str = "variant,seed,kind,status,model_0,final_top1_0,final_top5_0,best_top1_0,best_top5_0,model_1,final_top1_1,final_top5_1,best_top1_1,best_top5_1";

fn metric_columns(m: Option<&ModelMetrics>) -> [Option<Real>; 4] {
    match m {
        Some(m) => [m.final_top1, m.final_top5, m.best_top1, m.best_top5],
        None => [None; 4],
    }
}

fn fmt_cells(id: &str, vals: [Option<Real>; 4]) -> String {
    let cells: Vec<String> = vals
        .iter()
        .map(|v| v.map(|x| x.to_string()).unwrap_or_default())
        .collect();
    format!("{id},{}", cells.join(","))
}

/// The aggregate table: one row per run in (variant, seed) order, then a
/// `mean` and a `stddev` row per variant computed over its surviving runs
/// (sample standard deviation; 0 for a single run). Wall time is kept out
/// of this file so reruns are byte-identical.
pub fn sweep_table(variants: &[String], seeds: &[u64], rows: &[ReportRow]) -> String {
    let mut out = String::from(TABLE_HEADER);
    out.push('\n');
    for variant in variants {
        let variant_rows: Vec<&ReportRow> = seeds
            .iter()
            .filter_map(|&s| {
                rows.iter()
                    .find(|r| &r.variant == variant && r.seed == s)
            })
            .collect();
        for r in &variant_rows {
            let status = if r.failed { "failed" } else { "ok" };
            out.push_str(&format!(
                "{},{},run,{},{},{}\n",
                r.variant,
                r.seed,
                status,
                fmt_cells(
                    r.models.first().map(|m| m.id.as_str()).unwrap_or(""),
                    metric_columns(r.models.first())
                ),
                fmt_cells(
                    r.models.get(1).map(|m| m.id.as_str()).unwrap_or(""),
                    metric_columns(r.models.get(1))
                ),
            ));
        }
        let ok_rows: Vec<&&ReportRow> = variant_rows.iter().filter(|r| !r.failed).collect();
        for (kind, stat) in [("mean", Stat::Mean), ("stddev", Stat::Stddev)] {
            let agg = |slot: usize, pick: usize| -> Option<Real> {
                let vals: Vec<Real> = ok_rows
                    .iter()
                    .filter_map(|r| metric_columns(r.models.get(slot))[pick])
                    .collect();
                aggregate(&vals, stat)
            };
            let id0 = ok_rows
                .first()
                .and_then(|r| r.models.first())
                .map(|m| m.id.as_str())
                .unwrap_or("");
            let id1 = ok_rows
                .first()
                .and_then(|r| r.models.get(1))
                .map(|m| m.id.as_str())
                .unwrap_or("");
            out.push_str(&format!(
                "{},,{},{},{},{}\n",
                variant,
                kind,
                if ok_rows.is_empty() { "failed" } else { "ok" },
                fmt_cells(id0, [agg(0, 0), agg(0, 1), agg(0, 2), agg(0, 3)]),
                fmt_cells(id1, [agg(1, 0), agg(1, 1), agg(1, 2), agg(1, 3)]),
            ));
        }
    }
    out
}

#[derive(Clone, Copy)]
enum Stat {
    Mean,
    Stddev,
}

fn aggregate(vals: &[Real], stat: Stat) -> Option<Real> {
    if vals.is_empty() {
        return None;
    }
    let n = vals.len() as Real;
    let mean = vals.iter().sum::<Real>() / n;
    match stat {
        Stat::Mean => Some(mean),
        Stat::Stddev => {
            if vals.len() < 2 {
                Some(0.0)
            } else {
                let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / (n - 1.0);
                Some(var.sqrt())
            }
        }
    }
}

/// Aggregate previously written report rows found under `dir` (recursive
/// scan for `report_row.csv`). Returns the same table format as a sweep.
pub fn report_dir(dir: &Path) -> Result<(Vec<ReportRow>, String)> {
    let mut rows = Vec::new();
    collect_report_rows(dir, &mut rows)?;
    if rows.is_empty() {
        return Err(Error::format(format!(
            "no report_row.csv found under {}",
            dir.display()
        )));
    }
    rows.sort_by(|a, b| a.variant.cmp(&b.variant).then(a.seed.cmp(&b.seed)));
    let mut variants: Vec<String> = Vec::new();
    let mut seeds: Vec<u64> = Vec::new();
    for r in &rows {
        if !variants.contains(&r.variant) {
            variants.push(r.variant.clone());
        }
        if !seeds.contains(&r.seed) {
            seeds.push(r.seed);
        }
    }
    seeds.sort_unstable();
    let table = sweep_table(&variants, &seeds, &rows);
    Ok((rows, table))
}

fn collect_report_rows(dir: &Path, rows: &mut Vec<ReportRow>) -> Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        if path.is_dir() {
            collect_report_rows(&path, rows)?;
        } else if path.file_name().and_then(|n| n.to_str()) == Some("report_row.csv") {
            let text = std::fs::read_to_string(&path)?;
            rows.push(ReportRow::parse_csv(&text)?);
        }
    }
    Ok(())
}
