//! End-to-end checks of the `mvke` binary on a small generated dataset.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;

const SMALL: [&str; 12] = [
    "--set", "generator.n_users=400",
    "--set", "generator.n_ads=120",
    "--set", "generator.n_train=3000",
    "--set", "generator.n_test=800",
    "--set", "train.epochs=2",
    "--set", "generator.n_tags=30",
];

fn mvke(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvke")).args(args).env("MVKE_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = mvke(args);
    assert!(out.status.success(), "mvke {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(&SMALL);
    v
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read(p: PathBuf) -> String {
    std::fs::read_to_string(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn csv_files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".csv"))
        .collect();
    v.sort();
    v
}

/// Dataset plus a trained multi-task checkpoint, built once.
struct Fixture {
    _root: TempDir,
    data: PathBuf,
    model: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let root = tempfile::tempdir().unwrap();
        let data = root.path().join("data");
        let model = root.path().join("model");
        ok(&with_small(&["gen-data", "--out", s(&data)]));
        ok(&with_small(&["train", "--data", s(&data), "--out", s(&model)]));
        Fixture { _root: root, data, model }
    })
}

#[test]
fn gen_data_creates_nested_out_dir_and_is_reproducible() {
    let root = tempfile::tempdir().unwrap();
    let a = root.path().join("x/y/a");
    let b = root.path().join("b");
    ok(&with_small(&["gen-data", "--out", s(&a), "--seed", "3"]));
    ok(&with_small(&["gen-data", "--out", s(&b), "--seed", "3"]));
    for f in ["train.jsonl", "test.jsonl", "truth.json", "schema.json", "config.json"] {
        assert_eq!(read(a.join(f)), read(b.join(f)), "{f} differs");
    }
    assert_eq!(read(a.join("train.jsonl")).lines().count(), 3000);
    assert_eq!(read(a.join("test.jsonl")).lines().count(), 800);
}

#[test]
fn default_gen_data_sizes_match_generator_defaults() {
    let root = tempfile::tempdir().unwrap();
    ok(&["gen-data", "--out", s(root.path())]);
    assert_eq!(read(root.path().join("train.jsonl")).lines().count(), 200_000);
    assert_eq!(read(root.path().join("test.jsonl")).lines().count(), 40_000);
}

#[test]
fn flags_beat_file_values_beat_defaults() {
    let root = tempfile::tempdir().unwrap();
    let cfg = root.path().join("run.json");
    std::fs::write(&cfg, r#"{"seed": 3, "train": {"epochs": 1}, "serve": {"topk": 2}}"#).unwrap();
    let out = root.path().join("out");
    ok(&with_small(&["gen-data", "--config", s(&cfg), "--seed", "5", "--out", s(&out)]));
    let echo: serde_json::Value = serde_json::from_str(&read(out.join("config.json"))).unwrap();
    assert_eq!(echo["seed"], 5);
    assert_eq!(echo["generator"]["seed"], 5);
    assert_eq!(echo["train"]["seed"], 5);
    assert_eq!(echo["serve"]["topk"], 2);
    // --set came after the file, so it wins for epochs.
    assert_eq!(echo["train"]["epochs"], 2);
    assert_eq!(echo["train"]["batch_size"], 256);
}

#[test]
fn echoed_config_reproduces_training() {
    let f = fixture();
    let again = tempfile::tempdir().unwrap();
    let cfg = f.model.join("config.json");
    ok(&["train", "--config", s(&cfg), "--data", s(&f.data), "--out", s(again.path())]);
    assert_eq!(read(f.model.join("history.csv")), read(again.path().join("history.csv")));
    assert_eq!(read(f.model.join("checkpoint.jsonl")), read(again.path().join("checkpoint.jsonl")));
    assert_eq!(read(f.model.join("config.json")), read(again.path().join("config.json")));
}

#[test]
fn train_writes_history_and_five_expert_routing() {
    let f = fixture();
    assert_eq!(csv_files(&f.model), ["history.csv"]);
    let history = read(f.model.join("history.csv"));
    assert_eq!(history.lines().next().unwrap(), "epoch,train_loss,ctr_auc,cvr_auc");
    assert_eq!(history.lines().count(), 3);
    let cfg: serde_json::Value = serde_json::from_str(&read(f.model.join("model.json"))).unwrap();
    assert_eq!(cfg["routing"]["ctr"], serde_json::json!([0, 1, 2]));
    assert_eq!(cfg["routing"]["cvr"], serde_json::json!([1, 2, 3, 4]));
}

#[test]
fn single_task_baseline_holds_only_click_parameters() {
    let f = fixture();
    let out = tempfile::tempdir().unwrap();
    ok(&with_small(&["train", "--mode", "noMTL-ctr", "--data", s(&f.data), "--out", s(out.path())]));
    let names: Vec<String> = read(out.path().join("checkpoint.jsonl"))
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["name"].as_str().unwrap().to_string())
        .collect();
    assert!(!names.is_empty());
    assert!(names.iter().all(|n| !n.starts_with("cvr")), "{names:?}");
    let history = read(out.path().join("history.csv"));
    assert!(history.lines().skip(1).all(|l| l.ends_with(',')), "{history}");
}

#[test]
fn divergence_exits_with_numerical_failure() {
    let f = fixture();
    let out = tempfile::tempdir().unwrap();
    let r = mvke(&with_small(&["train", "--data", s(&f.data), "--out", s(out.path()), "--set", "train.learning_rate=1e300"]));
    assert_eq!(r.status.code(), Some(3), "{}", String::from_utf8_lossy(&r.stderr));
}

#[test]
fn eval_report_is_stable_across_reruns() {
    let f = fixture();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        ok(&with_small(&["eval", "--checkpoint", s(&f.model), "--data", s(&f.data), "--out", s(d.path())]));
    }
    assert_eq!(csv_files(a.path()), ["report.csv"]);
    let report = read(a.path().join("report.csv"));
    assert_eq!(report, read(b.path().join("report.csv")));
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(lines[0], "model,seed,task,auc,examples,positives");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].contains(",ctr,") && lines[2].contains(",cvr,"));
}

#[test]
fn export_attention_rows_sum_to_one() {
    let f = fixture();
    let out = tempfile::tempdir().unwrap();
    ok(&with_small(&["export-attention", "--checkpoint", s(&f.model), "--out", s(out.path())]));
    assert_eq!(csv_files(out.path()), ["weights.csv"]);
    let text = read(out.path().join("weights.csv"));
    let mut rows = 0;
    for line in text.lines().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        let w: Vec<f64> = cells[2..].iter().filter(|c| !c.is_empty()).map(|c| c.parse().unwrap()).collect();
        assert_eq!(w.len(), if cells[0] == "ctr" { 3 } else { 4 });
        assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-6, "{line}");
        rows += 1;
    }
    assert_eq!(rows, 2 * 30);
}

#[test]
fn sweep_writes_one_row_per_count() {
    let f = fixture();
    let out = tempfile::tempdir().unwrap();
    ok(&with_small(&["sweep", "--data", s(&f.data), "--out", s(out.path()), "--counts", "3,6", "--set", "train.epochs=1"]));
    assert_eq!(csv_files(out.path()), ["sweep.csv"]);
    let text = read(out.path().join("sweep.csv"));
    let ks: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ks, ["3", "6"]);
}

#[test]
fn predict_is_idempotent_and_rejects_zero_topk() {
    let f = fixture();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        ok(&with_small(&["predict", "--checkpoint", s(&f.model), "--data", s(&f.data), "--out", s(d.path()), "--topk", "3"]));
    }
    assert_eq!(csv_files(a.path()), ["assignments.csv"]);
    let text = read(a.path().join("assignments.csv"));
    assert_eq!(text, read(b.path().join("assignments.csv")));
    for f in ["users.bin", "users.json", "tags_ctr.bin", "tags_cvr.json"] {
        assert_eq!(std::fs::read(a.path().join("caches").join(f)).unwrap(), std::fs::read(b.path().join("caches").join(f)).unwrap());
    }
    let users: serde_json::Value = serde_json::from_str(&read(a.path().join("caches/users.json"))).unwrap();
    let n_users = users["count"].as_u64().unwrap() as usize;
    assert_eq!(text.lines().count(), 1 + n_users * 3 * 2);

    let c = tempfile::tempdir().unwrap();
    let r = mvke(&with_small(&["predict", "--checkpoint", s(&f.model), "--data", s(&f.data), "--out", s(c.path()), "--topk", "0"]));
    assert_eq!(r.status.code(), Some(1));
}

#[test]
fn bench_reports_invocation_formulas() {
    let f = fixture();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        ok(&with_small(&["bench", "--checkpoint", s(&f.model), "--out", s(d.path()), "--set", "serve.bench_sizes=[[40,10],[80,20]]"]));
    }
    assert_eq!(csv_files(a.path()), ["bench.csv"]);
    let text = read(a.path().join("bench.csv"));
    assert_eq!(text, read(b.path().join("bench.csv")));
    assert!(a.path().join("bench.log").exists());
    let rows: Vec<Vec<usize>> =
        text.lines().skip(1).map(|l| l.split(',').take(7).map(|c| c.parse().unwrap()).collect()).collect();
    for r in &rows {
        let (u, t, tasks) = (r[0], r[1], r[2]);
        assert_eq!(tasks, 2);
        assert_eq!(r[3], u * t * tasks);
        assert_eq!(r[4], u + t * tasks);
        assert_eq!((r[5], r[6]), (u, t * tasks));
    }
}

#[test]
fn exit_codes_for_usage_config_and_data_errors() {
    let root = tempfile::tempdir().unwrap();
    let out = root.path().join("o");
    assert_eq!(mvke(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(mvke(&["gen-data", "--out", s(&out), "--mode", "bogus"]).status.code(), Some(1));
    assert_eq!(mvke(&["gen-data", "--out", s(&out), "--set", "generator.n_users=0"]).status.code(), Some(1));
    assert_eq!(mvke(&["--help"]).status.code(), Some(0));

    let cfg = root.path().join("bad.json");
    std::fs::write(&cfg, r#"{"trian": {}}"#).unwrap();
    assert_eq!(mvke(&["gen-data", "--config", s(&cfg), "--out", s(&out)]).status.code(), Some(1));

    let data = root.path().join("data");
    ok(&with_small(&["gen-data", "--out", s(&data)]));
    let train = data.join("train.jsonl");
    let mut text = read(train.clone());
    text.push_str("{\"user_id\": 1, \"fields\": [[0]], \"tags\": [0], \"click\": 0, \"conv\": 1}\n");
    std::fs::write(&train, text).unwrap();
    let r = mvke(&with_small(&["train", "--data", s(&data), "--out", s(&out)]));
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("train.jsonl:3001"), "{}", String::from_utf8_lossy(&r.stderr));
}
