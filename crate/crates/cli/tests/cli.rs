use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn groklab(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_groklab"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env("GROKLAB_WORKERS", "1")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn missing_seed_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let res = groklab(&["train", "--steps", "10"], dir.path());
    assert_eq!(res.status.code(), Some(2), "{}", stderr(&res));
    assert!(stderr(&res).contains("seed"));
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let res = groklab(&["train", "--seed", "1", "--set", "optim.learning_rate=0.1"], dir.path());
    assert_eq!(res.status.code(), Some(2));
    assert!(stderr(&res).contains("optim.learning_rate"));
}

#[test]
fn invalid_values_exit_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["train", "--seed", "1", "--fraction", "1.5"],
        vec!["train", "--seed", "1", "--task", "addition", "--p", "0"],
        vec!["train", "--seed", "1", "--dec-lr", "-1"],
        vec!["efftheory", "--seed", "1", "--task", "s3"],
    ] {
        let res = groklab(&args, dir.path());
        assert_eq!(res.status.code(), Some(2), "{args:?}: {}", stderr(&res));
    }
}

#[test]
fn analyze_without_records_is_a_config_error() {
    let empty = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let res = Command::new(env!("CARGO_BIN_EXE_groklab"))
        .args(["analyze", "--in"])
        .arg(empty.path())
        .arg("--out")
        .arg(out.path())
        .output()
        .unwrap();
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"seed": 4, "task.p": 6, "optim.max_steps": 20, "optim.dec_lr": 0.5}"#).unwrap();
    let out = dir.path().join("run");
    let res = groklab(&["train", "--config", cfg.to_str().unwrap(), "--dec-lr", "0.002"], &out);
    assert!(res.status.success(), "{}", stderr(&res));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 4);
    assert_eq!(manifest["config"]["optim"]["dec_lr"], 0.002);
    assert_eq!(manifest["config"]["p"], 6);
    assert!(manifest["version"].as_str().is_some_and(|v| !v.is_empty()));
}

#[test]
fn full_training_fraction_reports_no_phase() {
    let dir = tempfile::tempdir().unwrap();
    let res = groklab(&["train", "--seed", "2", "--p", "5", "--fraction", "1", "--steps", "30"], dir.path());
    assert!(res.status.success(), "{}", stderr(&res));
    assert!(stderr(&res).contains("no validation data"));
    assert!(stdout(&res).contains("phase: none"));
}

#[test]
fn train_writes_its_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let res = groklab(&["train", "--seed", "2", "--p", "6", "--steps", "40", "--stride", "10"], dir.path());
    assert!(res.status.success(), "{}", stderr(&res));
    let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,train_acc,val_acc,train_loss,val_loss,rqi\n"));
    assert!(metrics.lines().count() >= 5);
    assert!(dir.path().join("embeddings.csv").exists());
    assert!(dir.path().join("record.json").exists());
    assert!(stdout(&res).contains("phase: "));
}

fn runs_rows(dir: &Path) -> Vec<String> {
    fs::read_to_string(dir.join("runs.csv")).unwrap().lines().skip(1).map(str::to_owned).collect()
}

#[test]
fn sweep_resume_reuses_stored_runs() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "sweep", "--seed", "5", "--steps", "60", "--set", "sweep.x.values=[0.001,0.01]", "--set", "sweep.y.values=[0]",
        "--seeds", "5",
    ];
    let first = groklab(&args, dir.path());
    assert!(first.status.success(), "{}", stderr(&first));
    assert!(stdout(&first).contains("2 runs trained, 0 reused"));
    let before = fs::read_to_string(dir.path().join("runs.csv")).unwrap();

    let mut resumed = args.to_vec();
    resumed.push("--resume");
    let second = groklab(&resumed, dir.path());
    assert!(second.status.success(), "{}", stderr(&second));
    assert!(stdout(&second).contains("0 runs trained, 2 reused"), "{}", stdout(&second));
    assert_eq!(fs::read_to_string(dir.path().join("runs.csv")).unwrap(), before);

    // drop one stored run: only that run is retrained
    let mut text = before.lines().take(2).collect::<Vec<_>>().join("\n");
    text.push('\n');
    fs::write(dir.path().join("runs.csv"), text).unwrap();
    let third = groklab(&resumed, dir.path());
    assert!(stdout(&third).contains("1 runs trained, 1 reused"), "{}", stdout(&third));
    assert_eq!(fs::read_to_string(dir.path().join("runs.csv")).unwrap(), before);
}

#[test]
fn single_cell_sweep_matches_train() {
    let root = tempfile::tempdir().unwrap();
    let sweep_dir = root.path().join("sweep");
    let train_dir = root.path().join("train");
    let res = groklab(
        &[
            "sweep", "--seed", "9", "--steps", "400", "--set", "sweep.x.values=[0.003]", "--set", "sweep.y.values=[0.5]",
            "--seeds", "9",
        ],
        &sweep_dir,
    );
    assert!(res.status.success(), "{}", stderr(&res));
    let res = groklab(&["train", "--seed", "9", "--steps", "400", "--dec-lr", "0.003", "--dec-wd", "0.5"], &train_dir);
    assert!(res.status.success(), "{}", stderr(&res));

    let record: serde_json::Value = serde_json::from_str(&fs::read_to_string(train_dir.join("record.json")).unwrap()).unwrap();
    let field = |k: &str| record[k].as_u64().map(|v| v.to_string()).unwrap_or_default();
    let rows = runs_rows(&sweep_dir);
    assert_eq!(rows.len(), 1);
    let cols: Vec<&str> = rows[0].split(',').collect();
    assert_eq!(cols[4], field("step_train90"));
    assert_eq!(cols[5], field("step_val90"));
    let phase = stdout(&res).lines().find_map(|l| l.strip_prefix("phase: ").map(str::to_owned)).unwrap();
    assert_eq!(cols[3], phase);
}

#[test]
fn mc_critical_writes_curve() {
    let dir = tempfile::tempdir().unwrap();
    let res = groklab(&["mc-critical", "--seed", "1", "--trials", "20", "--fractions", "0.2:0.8:4"], dir.path());
    assert!(res.status.success(), "{}", stderr(&res));
    let csv = fs::read_to_string(dir.path().join("critical.csv")).unwrap();
    assert!(csv.starts_with("fraction,probability,trials,seed\n"));
    assert_eq!(csv.lines().count(), 5);
}
