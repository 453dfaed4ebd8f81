use std::path::Path;
use std::process::{Command, Output};

fn seqdg(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seqdg"))
        .args(args)
        .current_dir(cwd)
        .env("SEQDG_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn gen_then_train_writes_report_metrics_and_embeddings() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&seqdg(&["gen", "--domains", "3", "--classes", "2", "--n", "40", "--angle", "20", "--seed", "4", "--out", "data.bin"], d));
    let set = seqdg::domains::DomainSet::load(d.join("data.bin")).unwrap();
    assert_eq!((set.len(), set.classes, set.total_samples()), (3, 2, 120));

    let stdout = ok(&seqdg(
        &[
            "train", "--data", "data.bin", "--method", "FFO_S_MLDG", "--held-out", "1", "--seed", "2", "--iters", "8",
            "--batch-size", "6", "--eval-every", "4", "--hidden", "5", "--alpha", "0.05", "--gamma", "0.3", "--out", "run",
        ],
        d,
    ));
    assert!(stdout.contains("held_out=1 seed=2"), "{stdout}");
    for f in ["report.json", "metrics.csv", "timing.json", "embeddings.csv"] {
        assert!(d.join("run").join(f).is_file(), "{f} missing");
    }
    let emb = std::fs::read_to_string(d.join("run/embeddings.csv")).unwrap();
    assert_eq!(emb.lines().count(), 121);
    assert_eq!(emb.lines().next().unwrap(), "f1,f2,f3,f4,f5,class,domain");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("run/report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["hp"]["alpha"], serde_json::json!([0.05]));
    assert_eq!(report["config"]["hp"]["gamma"], serde_json::json!(0.3));
    assert_eq!(report["runs"].as_array().unwrap().len(), 1);
}

#[test]
fn sweep_reads_config_file_and_flags_override_it() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("exp.toml"),
        r#"
method = "S_MLDG"
held_out = "ALL"
iters = 6
batch_size = 5
seeds = [0, 1]
eval_every = 3

[dataset]
domains = 3
classes = 3
n = 30
angle = 25.0
noise = 0.3
seed = 1

[hp]
alpha = [0.05]
"#,
    )
    .unwrap();
    let stdout = ok(&seqdg(&["sweep", "--config", "exp.toml", "--gamma", "0.02", "--out", "sw"], d));
    assert!(stdout.contains("6 runs (2 seeds)"), "{stdout}");
    for f in ["report.json", "metrics.csv", "accuracy.csv", "curves.csv", "alignment.csv"] {
        assert!(d.join("sw").join(f).is_file(), "{f} missing");
    }
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("sw/report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["method"], "S_MLDG");
    assert_eq!(report["config"]["hp"]["gamma"], serde_json::json!(0.02));
}

#[test]
fn verify_reports_every_check_as_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&seqdg(&["verify", "--json"], dir.path()));
    let checks: serde_json::Value = serde_json::from_str(&out).unwrap();
    let checks = checks.as_array().unwrap();
    assert_eq!(checks.len(), 13);
    assert!(checks.iter().all(|c| c["passed"] == true));
}

#[test]
fn bench_and_probe_write_csv() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&seqdg(
        &["bench", "--methods", "FFO_S_MLDG", "--iters", "5", "--warmup", "1", "--hidden", "4", "--batch-size", "8", "--out", "b.csv"],
        d,
    ));
    let bench = std::fs::read_to_string(d.join("b.csv")).unwrap();
    let rows: Vec<&str> = bench.lines().collect();
    assert_eq!(rows[0], "method,mean_secs,std_secs,ratio_to_agg");
    assert!(rows[1].starts_with("AGG,") && rows[2].starts_with("FFO_S_MLDG,"));

    ok(&seqdg(&["probe", "--method", "AGG", "--phase1", "10", "--phase2", "10", "--log-every", "5", "--out", "p.csv"], d));
    let probe = std::fs::read_to_string(d.join("p.csv")).unwrap();
    assert_eq!(probe.lines().count(), 5);
}

#[test]
fn bad_input_exits_with_error_status() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let missing = seqdg(&["train", "--data", "nope.bin", "--iters", "1"], d);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("error"));
    let many = seqdg(&["train", "--seeds", "0,1", "--iters", "1"], d);
    assert_eq!(many.status.code(), Some(2));
    let preset = seqdg(&["sweep", "--preset", "nope", "--iters", "1"], d);
    assert_eq!(preset.status.code(), Some(2));
    let usage = seqdg(&["train", "--method", "SGD"], d);
    assert!(!usage.status.success());
}
