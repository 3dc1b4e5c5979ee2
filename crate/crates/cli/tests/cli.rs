use std::path::Path;
use std::process::{Command, Output};

fn tct(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tct")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, datasets: &str, test_count: &str) {
    let o = tct(&[
        "gen-data", "--out", s(dir), "--seed", "4", "--num-classes", "2", "--size", "16,16,16", "--datasets", datasets,
        "--test-count", test_count,
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

fn train_tiny(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "train", "--data", s(data), "--out", s(out), "--epochs", "2", "--batch-size", "2", "--patch-size", "16,16,16",
        "--base-width", "2",
    ];
    args.extend_from_slice(extra);
    tct(&args)
}

#[test]
fn oracle_evaluation_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen(&data, "d1:1x2", "0");
    let report = dir.path().join("report.csv");
    let o = tct(&["eval", "--data", s(&data), "--report", s(&report), "--oracle"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(&report).unwrap();
    let means: Vec<&str> = csv.lines().filter(|l| l.starts_with("mean,")).collect();
    assert_eq!(means.len(), 2);
    for row in means {
        let cells: Vec<&str> = row.split(',').collect();
        assert_eq!((cells[3], cells[5]), ("1", "0"), "{row}");
    }
}

#[test]
fn tal_run_prints_its_config_and_logs_no_consistency() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen(&data, "a:1x2;b:2x1", "0");
    let run = dir.path().join("run");
    let o = train_tiny(&data, &run, &["--method", "tal"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("defaults < config file < flags"));
    assert!(stdout.contains("\"method\": \"tal\""));
    let log = std::fs::read_to_string(run.join("train_log.csv")).unwrap();
    let mut lines = log.lines();
    let col = lines.next().unwrap().split(',').position(|c| c == "L_con").unwrap();
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2);
    for r in rows {
        assert_eq!(r.split(',').nth(col).unwrap().parse::<f64>().unwrap(), 0.0);
    }
}

#[test]
fn cli_resume_reproduces_the_straight_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen(&data, "a:1,2x3", "0");
    let straight = dir.path().join("straight");
    let split = dir.path().join("split");
    assert!(train_tiny(&data, &straight, &[]).status.success());
    assert!(train_tiny(&data, &split, &["--stop-after", "1"]).status.success());
    let ckpt = split.join("checkpoint.tctc");
    let o = tct(&["train", "--data", s(&data), "--out", s(&split), "--resume", s(&ckpt)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("checkpoint config < config file < flags"));
    assert_eq!(std::fs::read(straight.join("checkpoint.tctc")).unwrap(), std::fs::read(&ckpt).unwrap());
}

#[test]
fn inference_labels_stay_in_class_range() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen(&data, "a:1,2x2", "1");
    let run = dir.path().join("run");
    assert!(train_tiny(&data, &run, &[]).status.success());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(data.join("manifest.json")).unwrap()).unwrap();
    let volume = data.join(manifest["datasets"][0]["samples"][0]["volume"].as_str().unwrap());
    let seg = dir.path().join("seg.tctl");
    let ckpt = run.join("checkpoint.tctc");
    let o = tct(&["infer", "--ckpt", s(&ckpt), "--volume", s(&volume), "--out", s(&seg)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let labels = tct_core::data::load_labels(&seg).unwrap();
    assert_eq!(labels.dims, [16, 16, 16]);
    assert!(labels.max_label() <= 2);
    let report = dir.path().join("eval.csv");
    let o = tct(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--report", s(&report)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("\"split\": \"test\""));
}

#[test]
fn report_merges_runs_into_csv_and_svg() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen(&data, "a:1,2x2", "0");
    let runs = dir.path().join("runs");
    assert!(train_tiny(&data, &runs.join("tal"), &["--method", "tal"]).status.success());
    assert!(train_tiny(&data, &runs.join("tct"), &[]).status.success());
    let csv = dir.path().join("curves.csv");
    let svg = dir.path().join("curves.svg");
    let o = tct(&["report", "--runs", s(&runs), "--out", s(&csv), "--svg", s(&svg)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("run,epoch,L_main,"));
    assert_eq!(text.lines().filter(|l| l.starts_with("tal,")).count(), 2);
    assert_eq!(text.lines().filter(|l| l.starts_with("tct,")).count(), 2);
    let svg = std::fs::read_to_string(&svg).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("polyline"));
}

#[test]
fn exit_codes_separate_usage_from_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(tct(&["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(tct(&["--help"]).status.code(), Some(0));
    let data = dir.path().join("data");
    gen(&data, "a:1x1", "0");
    let o = train_tiny(&data, &dir.path().join("r"), &["--filter", "sometimes"]);
    assert_eq!(o.status.code(), Some(1));
    let bad = dir.path().join("bad.tctc");
    std::fs::write(&bad, b"XXXX\x01\x00\x00\x00").unwrap();
    let o = tct(&["infer", "--ckpt", s(&bad), "--volume", "v.tctv", "--out", "o.tctl"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad.tctc"));
    let o = tct(&["eval", "--data", s(&dir.path().join("missing")), "--report", "r.csv", "--oracle"]);
    assert_eq!(o.status.code(), Some(2));
}
