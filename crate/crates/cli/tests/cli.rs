use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cfc_core::methods::pac_slack;
use cfc_core::CalibrationArtifact;

fn cfc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cfc"))
        .args(args)
        .output()
        .expect("spawn cfc")
}

fn ok(args: &[&str]) -> String {
    let out = cfc(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, extra: &[&str]) {
    let mut args = vec!["synth", "--n-cal", "300", "--n-test", "200", "--m", "6", "--out-dir", p(dir)];
    args.extend_from_slice(extra);
    ok(&args);
}

fn data_rows(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count() - 1
}

#[test]
fn synth_defaults_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let line = ok(&["synth", "--seed", "4", "--out-dir", p(&a)]);
    assert!(line.contains("10000 cal + 10000 test"), "{line}");
    assert!(line.contains("M=50"));
    ok(&["synth", "--seed", "4", "--out-dir", p(&b)]);
    for f in ["cal.jsonl", "test.jsonl"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
    }
    let first = fs::read_to_string(a.join("cal.jsonl")).unwrap();
    let rec: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    assert_eq!(rec["candidates"].as_array().unwrap().len(), 50);

    let c = tmp.path().join("c");
    ok(&["synth", "--n-cal", "20", "--n-test", "20", "--m", "5", "--out-dir", p(&c)]);
    let line = fs::read_to_string(c.join("test.jsonl")).unwrap();
    let rec: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
    assert_eq!(rec["candidates"].as_array().unwrap().len(), 5);
}

#[test]
fn calibrate_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), &[]);
    let cal = tmp.path().join("cal.jsonl");
    let run = |out: &str| {
        let dir = tmp.path().join(out);
        ok(&["calibrate", "--cal", p(&cal), "--methods", "icp,cfc-pac", "--delta", "0.9", "--out-dir", p(&dir)]);
        dir
    };
    let (a, b) = (run("a"), run("b"));
    for f in ["icp.json", "cfc-pac.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let icp = CalibrationArtifact::from_json(&fs::read_to_string(a.join("icp.json")).unwrap()).unwrap();
    assert!(icp.global_threshold.is_some());
    let pac = CalibrationArtifact::from_json(&fs::read_to_string(a.join("cfc-pac.json")).unwrap()).unwrap();
    assert_eq!(pac.epsilon, pac_slack(300, 0.9, 1.0).unwrap());
    assert_eq!(pac.delta, Some(0.9));
}

#[test]
fn evaluate_writes_one_row_per_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), &[]);
    let art = tmp.path().join("art");
    let cal = tmp.path().join("cal.jsonl");
    ok(&["calibrate", "--cal", p(&cal), "--methods", "cfc", "--out-dir", p(&art)]);
    let out = tmp.path().join("ev");
    let test = tmp.path().join("test.jsonl");
    let artifact = art.join("cfc.json");
    ok(&["evaluate", "--test", p(&test), "--artifact", p(&artifact), "--n-bins", "4", "--out-dir", p(&out)]);
    assert_eq!(data_rows(&out.join("summary.csv")), 1);
    assert_eq!(data_rows(&out.join("groups.csv")), 4);
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.starts_with("method,alpha,seed,ecr,apss,gsc,abstention_rate\n"));
    assert!(!summary.contains('\r'));
}

#[test]
fn schema_mismatch_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), &[]);
    let cal = tmp.path().join("cal.jsonl");
    let art = tmp.path().join("art");
    ok(&["calibrate", "--cal", p(&cal), "--methods", "cfc", "--out-dir", p(&art)]);
    let bare = tmp.path().join("bare.jsonl");
    fs::write(
        &bare,
        "{\"id\":\"q\",\"candidates\":[{\"score\":0.2,\"correct\":1}],\"signals\":{\"other\":0.5}}\n",
    )
    .unwrap();
    let artifact = art.join("cfc.json");
    let out = cfc(&["evaluate", "--test", p(&bare), "--artifact", p(&artifact), "--n-bins", "1", "--out-dir", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn io_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let blocker = tmp.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let out = cfc(&["synth", "--n-cal", "10", "--n-test", "10", "--out-dir", p(&blocker.join("sub"))]);
    assert_eq!(out.status.code(), Some(2));
    let out = cfc(&["ingest-check", "/definitely/missing.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sweep_cross_product_and_rerun() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |out: &str| {
        let dir = tmp.path().join(out);
        ok(&[
            "sweep", "--n-cal", "150", "--n-test", "150", "--m", "5",
            "--methods", "topk,icp,learnt_cp,cfc,cfc-pac",
            "--alphas", "0.1,0.2,0.3,0.4", "--seeds", "1,2,3,4,5",
            "--n-bins", "3", "--out-dir", p(&dir),
        ]);
        dir
    };
    let a = run("a");
    assert_eq!(data_rows(&a.join("summary.csv")), 100);
    assert_eq!(data_rows(&a.join("groups.csv")), 300);
    assert_eq!(data_rows(&a.join("aggregate.csv")), 20);
    let agg = fs::read_to_string(a.join("aggregate.csv")).unwrap();
    for line in agg.lines().skip(1) {
        assert_eq!(line.split(',').nth(2), Some("5"), "{line}");
    }
    let b = run("b");
    for f in ["summary.csv", "groups.csv", "aggregate.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn config_file_with_flag_override() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.json");
    let out = tmp.path().join("out");
    fs::write(
        &cfg,
        serde_json::json!({
            "n_cal": 120, "n_test": 120, "m": 4,
            "methods": ["icp", "cfc"], "alphas": [0.2], "seeds": [7],
            "n_bins": 2, "out_dir": out,
        })
        .to_string(),
    )
    .unwrap();
    ok(&["sweep", "--config", p(&cfg), "--seeds", "7,8"]);
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 2 * 2);
    assert!(summary.contains("cfc,0.200000,8,"));

    let single = tmp.path().join("single");
    ok(&["sweep", "--config", p(&cfg), "--out-dir", p(&single)]);
    assert_eq!(data_rows(&single.join("aggregate.csv")), 2);

    fs::write(&cfg, r#"{"nonsense": true}"#).unwrap();
    assert_eq!(cfc(&["sweep", "--config", p(&cfg)]).status.code(), Some(4));
    let bad = cfc(&["sweep", "--alphas", "1.5", "--out-dir", p(&out)]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn ingest_check_reports_warnings() {
    let tmp = tempfile::tempdir().unwrap();
    let f = tmp.path().join("x.jsonl");
    fs::write(
        &f,
        "{\"id\":\"a\",\"candidates\":[{\"score\":1.2,\"correct\":true},{\"score\":0.1,\"correct\":false}]}\n\
         {\"id\":\"b\",\"candidates\":[{\"score\":0.3,\"correct\":false}]}\n",
    )
    .unwrap();
    let text = ok(&["ingest-check", p(&f)]);
    assert!(text.contains("2 records"), "{text}");
    assert!(text.contains("1 scores clamped"), "{text}");
    assert!(text.contains("1 without a correct candidate"), "{text}");
    fs::write(&f, "{not json\n").unwrap();
    assert_eq!(cfc(&["ingest-check", p(&f)]).status.code(), Some(4));
}
