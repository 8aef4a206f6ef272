//! Command bodies. Each writes its artifacts under the run directory and
//! returns the tables it emitted so callers can inspect them.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use twotower_core::data::{
    build_splits, load_interactions, synth_generate, write_interactions, Format, SplitDataset,
    SplitName,
};
use twotower_core::drift::{drift_experiment, drift_windows, write_drift, DriftRecord};
use twotower_core::error::{Error, Result};
use twotower_core::eval::{evaluate, EvalResult, DEFAULT_KS};
use twotower_core::sampling::StrategyKind;
use twotower_core::towers::{read_checkpoint, write_checkpoint};
use twotower_core::trainer::{train, RunReport, TrainConfig};

use crate::config::Settings;
use crate::table::{emit_report, num, Table};

pub const REPORT_COLUMNS: [&str; 6] = [
    "iteration",
    "wall_seconds",
    "recall@20",
    "ndcg@20",
    "recall@50",
    "ndcg@50",
];

/// Columns that depend on wall-clock time and so differ between otherwise
/// identical runs.
pub const TIMING_COLUMNS: [&str; 5] = [
    "wall_seconds",
    "avg_time_1k_s",
    "avg_time_1k_s_range",
    "conv_time_min",
    "conv_time_min_range",
];

const NA: &str = "NA";

fn without_timing(table: &Table) -> Table {
    let keep: Vec<&str> = table
        .columns
        .iter()
        .map(String::as_str)
        .filter(|c| !TIMING_COLUMNS.contains(c))
        .collect();
    table.select(&keep)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    Ok(())
}

fn append_summary(path: &Path, fields: &[(&str, String)]) -> Result<()> {
    let mut f = fs::OpenOptions::new().append(true).open(path)?;
    let line: Vec<String> = fields.iter().map(|(k, v)| format!("{k}={v}")).collect();
    writeln!(f, "#summary\t{}", line.join("\t"))?;
    Ok(())
}

pub fn load_dataset(s: &Settings) -> Result<SplitDataset> {
    let path = s
        .data
        .as_ref()
        .ok_or_else(|| Error::Config("no dataset given; pass --data".into()))?;
    let rows = load_interactions(path, Format::Tsv)?;
    build_splits(&rows, &s.split_config())
}

/// Writes `<out>/interactions.tsv` from the synthetic generator.
pub fn synth(s: &Settings) -> Result<PathBuf> {
    fs::create_dir_all(&s.out)?;
    let data = synth_generate(&s.synth)?;
    let path = s.out.join("interactions.tsv");
    write_interactions(&path, &data.interactions)?;
    Ok(path)
}

pub fn report_table(report: &RunReport) -> Table {
    let mut t = Table::new(REPORT_COLUMNS);
    for r in &report.records {
        t.push(vec![
            r.iteration.to_string(),
            num(r.wall_seconds),
            num(r.recall20),
            num(r.ndcg20),
            num(r.recall50),
            num(r.ndcg50),
        ]);
    }
    t
}

fn metric(result: &EvalResult, recall: bool, k: usize) -> String {
    let v = if recall { result.recall(k) } else { result.ndcg(k) };
    v.map_or_else(|| NA.to_string(), num)
}

pub struct TrainOutput {
    pub report: RunReport,
    pub test: EvalResult,
    pub report_path: PathBuf,
    pub metrics_path: PathBuf,
}

/// Trains one configuration, evaluates its best checkpoint on the test
/// users and writes `report.tsv` (with timing), `metrics.tsv` (without),
/// `best.ckpt`, `splits.tsv` and `config.txt` into `dir`.
pub fn train_into(
    s: &Settings,
    dataset: &SplitDataset,
    config: &TrainConfig,
    dir: &Path,
) -> Result<TrainOutput> {
    fs::create_dir_all(dir)?;
    write_text(&dir.join("config.txt"), &s.to_text())?;
    dataset.write_manifest(BufWriter::new(File::create(dir.join("splits.tsv"))?))?;

    let report = train(config, dataset)?;
    let test = evaluate(&report.best_params, dataset, SplitName::Test, &DEFAULT_KS, config.max_history)?;
    write_checkpoint(&report.best_params, BufWriter::new(File::create(dir.join("best.ckpt"))?))?;

    let summary = report.summary();
    let shared = |with_timing: bool| {
        let mut f = vec![
            ("strategy", report.strategy.clone()),
            ("iterations", report.timing.iterations.to_string()),
            (
                "best_iteration",
                report.best_iteration.map_or_else(|| NA.to_string(), |i| i.to_string()),
            ),
            ("stop", report.stop.as_str().to_string()),
            ("converged", summary.converged.to_string()),
            ("skipped_batches", report.skipped_batches.to_string()),
            ("test_recall@20", metric(&test, true, 20)),
            ("test_ndcg@20", metric(&test, false, 20)),
            ("test_recall@50", metric(&test, true, 50)),
            ("test_ndcg@50", metric(&test, false, 50)),
        ];
        if with_timing {
            f.push(("convergence_minutes", num(summary.convergence_minutes)));
            f.push(("avg_seconds_per_1k", num(summary.avg_seconds_per_1k)));
        }
        f
    };

    let table = report_table(&report);
    let report_path = dir.join("report.tsv");
    emit_report(&table, &report_path)?;
    append_summary(&report_path, &shared(true))?;
    let metrics_path = dir.join("metrics.tsv");
    emit_report(&without_timing(&table), &metrics_path)?;
    append_summary(&metrics_path, &shared(false))?;
    Ok(TrainOutput {
        report,
        test,
        report_path,
        metrics_path,
    })
}

pub fn train_command(s: &Settings) -> Result<TrainOutput> {
    let dataset = load_dataset(s)?;
    let config = s.train_config(s.strategy, s.seed);
    train_into(s, &dataset, &config, &s.out)
}

/// Scores a checkpoint on the configured split; writes `<out>/eval.tsv` and,
/// with `per_user`, `<out>/eval_users.tsv`.
pub fn eval_command(s: &Settings) -> Result<Table> {
    let dataset = load_dataset(s)?;
    let ckpt = s
        .checkpoint
        .clone()
        .unwrap_or_else(|| s.out.join("best.ckpt"));
    let params = read_checkpoint(BufReader::new(File::open(&ckpt)?))?;
    if params.n_items() != dataset.n_items() {
        return Err(Error::Config(format!(
            "checkpoint has {} items, dataset {}",
            params.n_items(),
            dataset.n_items()
        )));
    }
    let result = evaluate(&params, &dataset, s.split, &DEFAULT_KS, s.max_history)?;
    let mut t = Table::new(["split", "k", "recall", "ndcg", "users"]);
    for (i, &k) in result.ks.iter().enumerate() {
        t.push(vec![
            s.split.as_str().to_string(),
            k.to_string(),
            num(result.mean_recall[i]),
            num(result.mean_ndcg[i]),
            result.n_users.to_string(),
        ]);
    }
    fs::create_dir_all(&s.out)?;
    emit_report(&t, &s.out.join("eval.tsv"))?;
    if s.per_user {
        let mut columns = vec!["user_id".to_string()];
        for k in &result.ks {
            columns.extend([format!("recall@{k}"), format!("ndcg@{k}")]);
        }
        let mut users = Table::new(columns);
        for m in &result.per_user {
            let mut row = vec![dataset.users.token(m.user).to_string()];
            for (r, n) in m.recall.iter().zip(&m.ndcg) {
                row.extend([num(*r), num(*n)]);
            }
            users.push(row);
        }
        emit_report(&users, &s.out.join("eval_users.tsv"))?;
    }
    Ok(t)
}

/// One sweep cell.
#[derive(Clone, Debug)]
pub struct CellSpec {
    pub name: String,
    pub kind: StrategyKind,
    pub seed: u64,
    pub bank_size: usize,
}

/// Per-cell record columns, stored in each cell's `cell.tsv`.
pub const CELL_COLUMNS: [&str; 13] = [
    "strategy",
    "seed",
    "bank_size",
    "n_neg",
    "avg_time_1k_s",
    "conv_time_min",
    "recall@20",
    "ndcg@20",
    "recall@50",
    "ndcg@50",
    "iterations",
    "best_iteration",
    "status",
];

fn one_line(msg: &str) -> String {
    msg.replace(['\t', '\n', '\r'], " ")
}

fn run_cell(s: &Settings, dataset: &SplitDataset, cell: &CellSpec, root: &Path, timed: bool) -> Vec<String> {
    let dir = root.join("cells").join(&cell.name);
    let done = dir.join("done");
    let record = dir.join("cell.tsv");
    if done.exists() {
        if let Ok(t) = Table::load(&record) {
            if t.columns == CELL_COLUMNS && t.rows.len() == 1 {
                return t.rows[0].clone();
            }
        }
    }
    let mut cs = s.clone();
    cs.strategy = cell.kind;
    cs.seed = cell.seed;
    cs.bank_size = cell.bank_size;
    cs.out = dir.clone();
    let config = cs.train_config(cell.kind, cell.seed);
    let n_neg = match cell.kind {
        StrategyKind::Uniform => config.strategy.n_global,
        StrategyKind::InBatch => config.batch_size,
        StrategyKind::Mns => config.batch_size + config.strategy.n_global,
        StrategyKind::Cbns => config.batch_size + cell.bank_size,
    };
    let head = vec![
        cell.kind.to_string(),
        cell.seed.to_string(),
        if cell.kind == StrategyKind::Cbns { cell.bank_size.to_string() } else { "0".into() },
        n_neg.to_string(),
    ];
    let row = match train_into(&cs, dataset, &config, &dir) {
        Ok(out) => {
            let summary = out.report.summary();
            let timing = |x: f64| if timed { num(x) } else { NA.to_string() };
            let mut row = head;
            row.extend([
                timing(summary.avg_seconds_per_1k),
                timing(summary.convergence_minutes),
                metric(&out.test, true, 20),
                metric(&out.test, false, 20),
                metric(&out.test, true, 50),
                metric(&out.test, false, 50),
                out.report.timing.iterations.to_string(),
                out.report
                    .best_iteration
                    .map_or_else(|| NA.to_string(), |i| i.to_string()),
                "ok".to_string(),
            ]);
            row
        }
        Err(e) => {
            let mut row = head;
            row.extend(std::iter::repeat(NA.to_string()).take(8));
            row.push(format!("failed: {}", one_line(&e.to_string())));
            row
        }
    };
    let mut t = Table::new(CELL_COLUMNS);
    t.push(row.clone());
    let persisted = fs::create_dir_all(&dir).is_ok() && emit_report(&t, &record).is_ok();
    if persisted && row.last().is_some_and(|s| s == "ok") {
        let _ = fs::write(&done, b"");
    }
    row
}

/// Runs every cell, sequentially unless `parallel` is set. Results are in
/// input order either way.
pub fn run_cells(s: &Settings, dataset: &SplitDataset, cells: &[CellSpec], root: &Path) -> Vec<Vec<String>> {
    if s.parallel {
        cells
            .par_iter()
            .map(|c| run_cell(s, dataset, c, root, false))
            .collect()
    } else {
        cells.iter().map(|c| run_cell(s, dataset, c, root, true)).collect()
    }
}

fn cell_value(row: &[String], column: &str) -> Option<f64> {
    let i = CELL_COLUMNS.iter().position(|c| *c == column)?;
    row[i].parse().ok()
}

/// Mean and range (max - min) of a column over successful rows.
fn mean_range(rows: &[&Vec<String>], column: &str) -> (String, String) {
    let xs: Vec<f64> = rows.iter().filter_map(|r| cell_value(r, column)).collect();
    if xs.is_empty() {
        return (NA.into(), NA.into());
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (num(mean), num(hi - lo))
}

fn ok_rows<'a>(rows: &'a [Vec<String>], pick: impl Fn(&Vec<String>) -> bool) -> Vec<&'a Vec<String>> {
    rows.iter()
        .filter(|r| pick(r) && r.last().is_some_and(|s| s == "ok"))
        .collect()
}

const STRATEGY_METRICS: [&str; 6] = [
    "avg_time_1k_s",
    "conv_time_min",
    "recall@20",
    "ndcg@20",
    "recall@50",
    "ndcg@50",
];

fn with_ranges(metrics: &[&str]) -> Vec<String> {
    metrics
        .iter()
        .flat_map(|m| [m.to_string(), format!("{m}_range")])
        .collect()
}

pub struct SweepOutput {
    pub table: Table,
    pub path: PathBuf,
    pub metrics_path: PathBuf,
}

fn emit_sweep(table: Table, out: &Path, stem: &str) -> Result<SweepOutput> {
    fs::create_dir_all(out)?;
    let path = out.join(format!("{stem}.tsv"));
    emit_report(&table, &path)?;
    let metrics_path = out.join(format!("{stem}.metrics.tsv"));
    emit_report(&without_timing(&table), &metrics_path)?;
    Ok(SweepOutput {
        table,
        path,
        metrics_path,
    })
}

/// Every (strategy, seed) cell followed by one mean row per strategy.
/// Writes `strategies.tsv` and `strategies.metrics.tsv` under `out`.
pub fn sweep_strategies(s: &Settings, dataset: &SplitDataset) -> Result<SweepOutput> {
    let cells: Vec<CellSpec> = s
        .strategies
        .iter()
        .flat_map(|&kind| {
            s.seeds.iter().map(move |&seed| CellSpec {
                name: format!("{kind}-s{seed}"),
                kind,
                seed,
                bank_size: s.bank_size,
            })
        })
        .collect();
    let rows = run_cells(s, dataset, &cells, &s.out);

    let mut columns = vec!["kind".to_string(), "strategy".into(), "seed".into()];
    columns.extend(with_ranges(&STRATEGY_METRICS));
    columns.push("status".into());
    let mut table = Table::new(columns);
    for row in &rows {
        let mut out = vec!["cell".to_string(), row[0].clone(), row[1].clone()];
        for m in STRATEGY_METRICS {
            let i = CELL_COLUMNS.iter().position(|c| *c == m).unwrap();
            out.push(row[i].clone());
            out.push("-".into());
        }
        out.push(row[12].clone());
        table.push(out);
    }
    for &kind in &s.strategies {
        let label = kind.to_string();
        let group = ok_rows(&rows, |r| r[0] == label);
        let mut out = vec!["mean".to_string(), label, "all".into()];
        for m in STRATEGY_METRICS {
            let (mean, range) = mean_range(&group, m);
            out.extend([mean, range]);
        }
        out.push(format!("n={}", group.len()));
        table.push(out);
    }
    emit_sweep(table, &s.out, "strategies")
}

const BANK_METRICS: [&str; 3] = ["recall@50", "ndcg@50", "avg_time_1k_s"];

/// cbns at bank sizes `bank_multiples x batch_size`, every seed, followed by
/// one mean row per size. Writes `bank.tsv` and `bank.metrics.tsv`.
pub fn sweep_bank(s: &Settings, dataset: &SplitDataset) -> Result<SweepOutput> {
    let sizes: Vec<usize> = s.bank_multiples.iter().map(|m| m * s.batch_size).collect();
    for &m in &sizes {
        let mut c = s.train_config(StrategyKind::Cbns, 0);
        c.strategy.bank_capacity = m;
        c.validate()?;
    }
    let cells: Vec<CellSpec> = sizes
        .iter()
        .flat_map(|&m| {
            s.seeds.iter().map(move |&seed| CellSpec {
                name: format!("cbns-m{m}-s{seed}"),
                kind: StrategyKind::Cbns,
                seed,
                bank_size: m,
            })
        })
        .collect();
    let rows = run_cells(s, dataset, &cells, &s.out);

    let mut columns = vec!["kind".to_string(), "bank_size".into(), "n_neg".into(), "seed".into()];
    columns.extend(with_ranges(&BANK_METRICS));
    columns.push("status".into());
    let mut table = Table::new(columns);
    for row in &rows {
        let mut out = vec!["cell".to_string(), row[2].clone(), row[3].clone(), row[1].clone()];
        for m in BANK_METRICS {
            let i = CELL_COLUMNS.iter().position(|c| *c == m).unwrap();
            out.push(row[i].clone());
            out.push("-".into());
        }
        out.push(row[12].clone());
        table.push(out);
    }
    for &m in &sizes {
        let label = m.to_string();
        let group = ok_rows(&rows, |r| r[2] == label);
        let mut out = vec![
            "mean".to_string(),
            label,
            (m + s.batch_size).to_string(),
            "all".into(),
        ];
        for metric in BANK_METRICS {
            let (mean, range) = mean_range(&group, metric);
            out.extend([mean, range]);
        }
        out.push(format!("n={}", group.len()));
        table.push(out);
    }
    emit_sweep(table, &s.out, "bank")
}

pub struct DriftOutput {
    pub records: Vec<DriftRecord>,
    pub summary: Table,
    pub report: RunReport,
}

/// Drift curve and early/late window summary: `drift.tsv` and
/// `drift_summary.tsv`.
pub fn drift_command(s: &Settings, dataset: &SplitDataset) -> Result<DriftOutput> {
    fs::create_dir_all(&s.out)?;
    write_text(&s.out.join("config.txt"), &s.to_text())?;
    let config = s.train_config(s.strategy, s.seed);
    let run = drift_experiment(&config, dataset, &s.drift_config())?;
    write_drift(&run.records, BufWriter::new(File::create(s.out.join("drift.tsv"))?))?;
    let mut summary = Table::new(["delta_t", "early_mean", "late_mean", "late_over_early"]);
    for w in drift_windows(&run.records, run.report.timing.iterations) {
        summary.push(vec![
            w.delta_t.to_string(),
            num(w.early),
            num(w.late),
            num(w.ratio()),
        ]);
    }
    emit_report(&summary, &s.out.join("drift_summary.tsv"))?;
    Ok(DriftOutput {
        records: run.records,
        summary,
        report: run.report,
    })
}
