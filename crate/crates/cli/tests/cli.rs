use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_mixnorm");

const HEADER: &str = "epoch,loss_cls,loss_tri,loss_dcr,loss_total,target_acc,map,cmc1,cmc5,cmc10";

fn mixnorm(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("MIXNORM_SEED")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

// Short schedule so each run takes well under a second.
fn quick_config(dir: &Path, preset_body: &str) -> String {
    let path = dir.join("config.json");
    let text = format!(
        r#"{{ {preset_body} "schedule": {{ "epochs": 3, "iters_per_epoch": 4, "decay_epochs": [1, 2] }} }}"#
    );
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn train_writes_outputs_with_fixed_schema() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick_config(tmp.path(), r#""name": "baseline_bn", "model": { "norm": "bn" }, "loss": { "lambda": 0.0, "regularizer": "none" },"#);
    let out = tmp.path().join("run");
    let res = mixnorm(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next().unwrap(), HEADER);
    assert_eq!(metrics.lines().count(), 4);
    assert!(out.join("checkpoint.json").exists());
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("eval_report.json")).unwrap()).unwrap();
    for key in ["target_acc", "map", "cmc1", "cmc5", "cmc10", "center_distances"] {
        assert!(report.get(key).is_some(), "missing {key}");
    }
    assert_eq!(report["center_distances"].as_array().unwrap().len(), 3);
}

#[test]
fn train_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick_config(tmp.path(), "");
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for dir in [&a, &b] {
        assert_eq!(code(&mixnorm(&["train", "--config", &cfg, "--out", dir.to_str().unwrap()])), 0);
    }
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
}

#[test]
fn seed_flag_and_env_change_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick_config(tmp.path(), "");
    let run = |dir: &str, extra: &[&str], env: Option<&str>| {
        let out = tmp.path().join(dir);
        let mut cmd = Command::new(BIN);
        cmd.args(["train", "--config", &cfg, "--out", out.to_str().unwrap()]).args(extra);
        match env {
            Some(v) => cmd.env("MIXNORM_SEED", v),
            None => cmd.env_remove("MIXNORM_SEED"),
        };
        assert!(cmd.status().unwrap().success());
        fs::read_to_string(out.join("metrics.csv")).unwrap()
    };
    let base = run("base", &[], None);
    let env = run("env", &[], Some("9"));
    let flag = run("flag", &["--seed", "9"], None);
    assert_ne!(base, env);
    assert_eq!(env, flag);
    let bad = Command::new(BIN)
        .args(["train", "--config", &cfg, "--out", tmp.path().join("x").to_str().unwrap()])
        .env("MIXNORM_SEED", "abc")
        .output()
        .unwrap();
    assert_eq!(code(&bad), 2);
}

#[test]
fn invalid_config_exits_2_naming_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick_config(tmp.path(), r#""sampler": { "kind": "rs", "batch_size": 96, "k_per_id": 4 },"#);
    let res = mixnorm(&["train", "--config", &cfg, "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&res), 2);
    assert!(String::from_utf8_lossy(&res.stderr).contains("sampler.kind"));
    assert!(!tmp.path().join("o").exists());

    let neg = quick_config(tmp.path(), r#""loss": { "lambda": -1.0 },"#);
    let res = mixnorm(&["train", "--config", &neg, "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&res), 2);
    assert!(String::from_utf8_lossy(&res.stderr).contains("loss.lambda"));
}

#[test]
fn non_finite_loss_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick_config(tmp.path(), r#""loss": { "lambda": 1e300 }, "data": { "prototype_scale": 1e150 },"#);
    let res = mixnorm(&["train", "--config", &cfg, "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&res), 3, "{}", String::from_utf8_lossy(&res.stderr));
}

#[test]
fn eval_and_export_read_a_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick_config(tmp.path(), "");
    let run = tmp.path().join("run");
    assert_eq!(code(&mixnorm(&["train", "--config", &cfg, "--out", run.to_str().unwrap()])), 0);
    let ck = run.join("checkpoint.json");
    let res = mixnorm(&["eval", "--config", &cfg, "--checkpoint", ck.to_str().unwrap()]);
    assert_eq!(code(&res), 0);
    let fresh: serde_json::Value = serde_json::from_slice(&res.stdout).unwrap();
    let saved: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("eval_report.json")).unwrap()).unwrap();
    assert_eq!(fresh["target_acc"], saved["target_acc"]);
    assert_eq!(fresh["map"], saved["map"]);

    let csv = tmp.path().join("emb.csv");
    let res = mixnorm(&[
        "export-embeddings", "--config", &cfg, "--checkpoint", ck.to_str().unwrap(), "--out",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 0);
    let text = fs::read_to_string(csv).unwrap();
    assert!(text.starts_with("split,domain_id,class_id,pc1,pc2,e0,"));
    assert!(text.lines().any(|l| l.starts_with("target,3,")));
}

#[test]
fn gradcheck_passes_and_catches_injected_fault() {
    let ok = mixnorm(&["gradcheck"]);
    assert_eq!(code(&ok), 0);
    let text = String::from_utf8_lossy(&ok.stdout);
    assert!(text.contains("normlayers") && text.contains("end_to_end"));

    let bad = mixnorm(&["gradcheck", "--inject-fault", "grad-gamma-sign"]);
    assert_eq!(code(&bad), 1);
    assert!(String::from_utf8_lossy(&bad.stderr).contains("normlayers"));
}

#[test]
fn partition_stats_matches_enumeration() {
    let out = mixnorm(&["partition-stats", "--domains", "3", "--trials", "10000"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    let freq = |key: &str| -> f64 {
        let line = text.lines().find(|l| l.starts_with(&format!("{key},"))).unwrap();
        line.rsplit(',').next().unwrap().parse().unwrap()
    };
    assert!((freq("1+1+1") - 0.5).abs() < 0.02);
    assert!((freq("2+1") - 0.5).abs() < 0.02);

    let single = mixnorm(&["partition-stats", "--domains", "1", "--trials", "5"]);
    assert_eq!(String::from_utf8(single.stdout).unwrap(), "multiset,count,frequency\n1,5,1.000000\n");
}

#[test]
fn ablate_writes_cells_and_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick_config(tmp.path(), "");
    let out = tmp.path().join("abl");
    let res = mixnorm(&[
        "ablate", "--suite", "max_group", "--seeds", "1,2", "--config", &cfg, "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let cmp = fs::read_to_string(out.join("comparison.csv")).unwrap();
    assert_eq!(cmp.lines().count(), 1 + 4);
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.contains("max_group_d,") && summary.contains("max_group_d_minus_1,"));
    assert!(out.join("max_group_d_seed2").join("metrics.csv").exists());

    assert_eq!(code(&mixnorm(&["ablate", "--suite", "everything"])), 2);
}
