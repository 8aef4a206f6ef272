use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use twotower_cli::table::Table;

const BIN: &str = env!("CARGO_BIN_EXE_twotower");

/// Settings shared by every run: a small model on a small dataset.
const SMALL: &[&str] = &[
    "--batch-size",
    "32",
    "--dim",
    "16",
    "--max-iters",
    "40",
    "--eval-every",
    "20",
    "--set",
    "hidden=32",
    "--set",
    "n_global=48",
];

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("TWOTOWER_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn small(cmd: &str, data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![cmd, "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    ok(&args)
}

fn dataset(dir: &Path) -> PathBuf {
    let out = dir.join("data");
    ok(&[
        "synth",
        "--out",
        out.to_str().unwrap(),
        "--set",
        "n_users=150",
        "--set",
        "n_items=200",
        "--set",
        "n_clusters=5",
        "--set",
        "interactions_per_user=15",
    ]);
    out.join("interactions.tsv")
}

fn config_value(dir: &Path, key: &str) -> String {
    let text = fs::read_to_string(dir.join("config.txt")).unwrap();
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key} = ")).map(str::to_string))
        .unwrap_or_else(|| panic!("{key} missing from config.txt"))
}

#[test]
fn flag_beats_file_beats_default() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(tmp.path());
    let cfg = tmp.path().join("run.conf");
    fs::write(&cfg, "# three layers\nseed = 3\nlr = 0.01\nl2 = 1e-5\n").unwrap();
    let out = tmp.path().join("train");
    small(
        "train",
        &data,
        &out,
        &["--config", cfg.to_str().unwrap(), "--seed", "5"],
    );
    assert_eq!(config_value(&out, "seed"), "5");
    assert_eq!(config_value(&out, "lr"), "0.01");
    assert_eq!(config_value(&out, "l2"), "0.00001");
    assert_eq!(config_value(&out, "patience"), "20");
    assert_eq!(config_value(&out, "hidden"), "32");
}

#[test]
fn train_then_eval_reports_both_cutoffs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(tmp.path());
    let out = tmp.path().join("train");
    small("train", &data, &out, &["--strategy", "cbns", "--bank-size", "64", "--warmup", "5"]);
    for f in ["report.tsv", "report.txt", "metrics.tsv", "metrics.txt", "best.ckpt", "splits.tsv"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let report = Table::load(&out.join("report.tsv")).unwrap();
    assert_eq!(report.rows.len(), 2);
    assert!(fs::read_to_string(out.join("metrics.tsv")).unwrap().contains("strategy=cbns(M=64)"));

    small("eval", &data, &out, &["--set", "split=val", "--set", "per_user=true"]);
    let eval = Table::load(&out.join("eval.tsv")).unwrap();
    let users = Table::load(&out.join("eval_users.tsv")).unwrap();
    assert_eq!(users.columns, ["user_id", "recall@20", "ndcg@20", "recall@50", "ndcg@50"]);
    assert_eq!(users.rows.len().to_string(), eval.get(0, "users").unwrap());
    let mean = (0..users.rows.len()).map(|r| users.number(r, "recall@50").unwrap()).sum::<f64>() / users.rows.len() as f64;
    assert!((mean - eval.number(1, "recall").unwrap()).abs() < 1e-12);
    assert_eq!(eval.rows.len(), 2);
    assert_eq!(eval.get(0, "split"), Some("val"));
    // Validation recall of the best checkpoint is the best recorded one.
    let best = (0..2).map(|r| report.number(r, "recall@50").unwrap()).fold(f64::MIN, f64::max);
    assert_eq!(eval.number(1, "recall"), Some(best));
}

#[test]
fn failures_map_to_distinct_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(tmp.path());
    let out = tmp.path().join("x");
    let d = data.to_str().unwrap();
    let o = out.to_str().unwrap();

    let code = |args: &[&str]| run(args).status.code();
    assert_eq!(code(&["train", "--data", d, "--out", o, "--set", "no_such_key=1"]), Some(2));
    assert_eq!(code(&["train", "--data", d, "--out", o, "--strategy", "cbns", "--bank-size", "10"]), Some(2));
    assert_eq!(code(&["train", "--data", d, "--out", o, "--l2", "0.5"]), Some(2));
    assert_eq!(code(&["train", "--data", "/nonexistent/file.tsv", "--out", o]), Some(1));

    let bad = tmp.path().join("bad.tsv");
    fs::write(&bad, "u1\ti1\t5\nu1\ti2\n").unwrap();
    assert_eq!(code(&["train", "--data", bad.to_str().unwrap(), "--out", o]), Some(3));

    let mut args = vec!["train", "--data", d, "--out", o, "--lr", "1e300"];
    args.extend_from_slice(SMALL);
    assert_eq!(code(&args), Some(4));
}

fn rows_of<'a>(t: &'a Table, kind: &str) -> Vec<usize> {
    (0..t.rows.len()).filter(|&r| t.get(r, "kind") == Some(kind)).collect()
}

#[test]
fn strategy_sweep_has_cells_and_means_and_resumes() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(tmp.path());
    let out = tmp.path().join("sweep");
    let extra = ["--bank-size", "64", "--warmup", "5"];
    small("sweep-strategies", &data, &out, &extra);
    let t = Table::load(&out.join("strategies.tsv")).unwrap();
    assert_eq!(rows_of(&t, "cell").len(), 12);
    assert_eq!(rows_of(&t, "mean").len(), 4);
    for m in rows_of(&t, "mean") {
        let strategy = t.get(m, "strategy").unwrap();
        let xs: Vec<f64> = rows_of(&t, "cell")
            .into_iter()
            .filter(|&r| t.get(r, "strategy") == Some(strategy))
            .map(|r| t.number(r, "recall@50").unwrap())
            .collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let range = xs.iter().cloned().fold(f64::MIN, f64::max) - xs.iter().cloned().fold(f64::MAX, f64::min);
        assert!((t.number(m, "recall@50").unwrap() - mean).abs() < 1e-15);
        assert!((t.number(m, "recall@50_range").unwrap() - range).abs() < 1e-15);
        assert_eq!(t.get(m, "status"), Some("n=3"));
    }
    let metrics = Table::load(&out.join("strategies.metrics.tsv")).unwrap();
    assert!(metrics.column("avg_time_1k_s").is_none());

    // A completed cell is not retrained: a doctored record survives.
    let cell = out.join("cells/mns-s1/cell.tsv");
    let text = fs::read_to_string(&cell).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let header: Vec<&str> = lines[0].split('\t').collect();
    let col = header.iter().position(|&c| c == "recall@50").unwrap();
    let mut fields: Vec<String> = lines[1].split('\t').map(String::from).collect();
    fields[col] = "0.123".into();
    lines[1] = fields.join("\t");
    fs::write(&cell, lines.join("\n") + "\n").unwrap();
    small("sweep-strategies", &data, &out, &extra);
    let again = Table::load(&out.join("strategies.tsv")).unwrap();
    let r = (0..again.rows.len())
        .find(|&r| again.get(r, "strategy") == Some("mns") && again.get(r, "seed") == Some("1"))
        .unwrap();
    assert_eq!(again.get(r, "recall@50"), Some("0.123"));

    // Without the marker the cell is trained again.
    fs::remove_file(out.join("cells/mns-s1/done")).unwrap();
    small("sweep-strategies", &data, &out, &extra);
    let third = Table::load(&out.join("strategies.tsv")).unwrap();
    assert_eq!(third.get(r, "recall@50"), t.get(r, "recall@50"));
}

#[test]
fn bank_sweep_zero_row_matches_in_batch() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(tmp.path());
    let bank = tmp.path().join("bank");
    let seeds = ["--set", "seeds=0,1", "--warmup", "0"];
    let mut extra = seeds.to_vec();
    extra.extend(["--set", "bank_multiples=0,1,2"]);
    small("sweep-bank", &data, &bank, &extra);
    let t = Table::load(&bank.join("bank.tsv")).unwrap();
    assert_eq!(rows_of(&t, "cell").len(), 6);
    assert_eq!(rows_of(&t, "mean").len(), 3);
    let sizes: Vec<&str> = rows_of(&t, "mean").into_iter().map(|r| t.get(r, "bank_size").unwrap()).collect();
    assert_eq!(sizes, ["0", "32", "64"]);
    assert_eq!(t.get(rows_of(&t, "mean")[2], "n_neg"), Some("96"));

    let strat = tmp.path().join("strat");
    let mut extra = seeds.to_vec();
    extra.extend(["--set", "strategies=in_batch"]);
    small("sweep-strategies", &data, &strat, &extra);
    let s = Table::load(&strat.join("strategies.tsv")).unwrap();
    for seed in ["0", "1"] {
        let b = (0..t.rows.len())
            .find(|&r| t.get(r, "kind") == Some("cell") && t.get(r, "bank_size") == Some("0") && t.get(r, "seed") == Some(seed))
            .unwrap();
        let i = (0..s.rows.len())
            .find(|&r| s.get(r, "kind") == Some("cell") && s.get(r, "seed") == Some(seed))
            .unwrap();
        assert_eq!(t.get(b, "recall@50"), s.get(i, "recall@50"));
        assert_eq!(t.get(b, "ndcg@50"), s.get(i, "ndcg@50"));
    }
}

#[test]
fn bank_smaller_than_batch_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(tmp.path());
    let out = tmp.path().join("bank");
    let args = [
        "train", "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap(),
        "--strategy", "cbns", "--batch-size", "32", "--bank-size", "31",
    ];
    assert_eq!(run(&args).status.code(), Some(2));
    assert!(!out.join("report.tsv").exists());
}

#[test]
fn parallel_sweep_drops_timing() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(tmp.path());
    let out = tmp.path().join("par");
    small("sweep-strategies", &data, &out, &["--parallel", "--set", "seeds=0", "--set", "strategies=in_batch,mns"]);
    let t = Table::load(&out.join("strategies.tsv")).unwrap();
    for r in rows_of(&t, "cell") {
        assert_eq!(t.get(r, "avg_time_1k_s"), Some("NA"));
    }
}

#[test]
fn drift_writes_curve_and_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(tmp.path());
    let out = tmp.path().join("drift");
    small("drift", &data, &out, &["--set", "probe_size=64"]);
    let curve = fs::read_to_string(out.join("drift.tsv")).unwrap();
    assert_eq!(curve.lines().next(), Some("t\tdelta_t\tD"));
    assert_eq!(curve.lines().count(), 1 + 40 + 36 + 31);
    let summary = Table::load(&out.join("drift_summary.tsv")).unwrap();
    assert_eq!(summary.rows.len(), 3);
}
