use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn noarb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_noarb")).args(args).output().expect("spawn noarb")
}

fn ok(args: &[&str]) -> String {
    let o = noarb(args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small grids and a short run keep every command under a second.
fn tiny_config(dir: &Path) -> String {
    let cfg = r#"{
        "grid": {"moneyness": [0.5, 1.0, 1.5], "tau": [0.5, 1.0], "boundary": 4},
        "out_sample": {"moneyness": [0.0, 0.5, 1.0, 1.5, 2.0, 2.5], "tau": [0.0, 1.0, 2.0]},
        "mesh": {"moneyness": [0.0, 1.0, 2.0], "tau": [0.0, 2.5, 5.0]},
        "train": {"epochs": 30, "architecture": [2, 4, 1]},
        "seeds": [3],
        "conditions": [{"nu": 0.0, "rho": 0.0}, {"nu": 0.6, "rho": -0.4}],
        "bench": {"layers": [2], "neurons": [4], "activations": ["tanh"], "repeats": 2, "epochs": 5}
    }"#;
    let p = dir.join("tiny.json");
    fs::write(&p, cfg).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn generate_defaults_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("nested/data");
    let stdout = ok(&["generate", "--out", path(&out)]);
    assert!(stdout.contains("375 in-sample"));
    let first = fs::read(out.join("in_sample.csv")).unwrap();
    assert_eq!(fs::read_to_string(out.join("in_sample.csv")).unwrap().lines().count(), 376);
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["counts"]["in_sample"], 375);
    assert_eq!(manifest["counts"]["out_sample"], 12726);
    assert_eq!(manifest["counts"]["mesh"], 286);
    ok(&["generate", "--out", path(&out)]);
    assert_eq!(fs::read(out.join("in_sample.csv")).unwrap(), first);
}

#[test]
fn train_is_deterministic_and_mode_maps_to_penalty() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let (a, b, m) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("m"));
    ok(&["--config", &cfg, "--out", path(&a), "--seed", "5", "train"]);
    ok(&["--config", &cfg, "--out", path(&b), "--seed", "5", "train"]);
    assert_eq!(fs::read(a.join("checkpoint.json")).unwrap(), fs::read(b.join("checkpoint.json")).unwrap());
    assert_eq!(fs::read(a.join("history.csv")).unwrap(), fs::read(b.join("history.csv")).unwrap());
    let history = fs::read_to_string(a.join("history.csv")).unwrap();
    assert!(history.starts_with("epoch,e_mse,e_penalty\n"));
    assert_eq!(history.lines().count(), 1 + 3);

    ok(&["--config", &cfg, "--out", path(&m), "--seed", "5", "--mode", "mlp", "--epochs", "12", "train"]);
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(m.join("train_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["mode"], "mlp");
    assert_eq!(summary["epochs"], 12);
    assert_ne!(fs::read(a.join("checkpoint.json")).unwrap(), fs::read(m.join("checkpoint.json")).unwrap());
}

#[test]
fn train_from_generated_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = dir.path().join("data");
    ok(&["--config", &cfg, "--out", path(&data), "generate"]);
    let run = dir.path().join("run");
    ok(&["--config", &cfg, "--out", path(&run), "train", "--data", path(&data)]);
    assert!(run.join("checkpoint.json").exists());
    assert!(run.join("history.svg").exists());
}

#[test]
fn evaluate_oracle_is_exact_and_emits_both_samples() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = dir.path().join("data");
    ok(&["--config", &cfg, "--out", path(&data), "generate"]);
    let out = dir.path().join("eval");
    ok(&["--config", &cfg, "--out", path(&out), "evaluate", "--oracle", "--data", path(&data), "--profiles"]);
    let rows: Vec<serde_json::Value> = serde_json::from_slice(&fs::read(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!((rows[0]["sample"].as_str(), rows[1]["sample"].as_str()), (Some("in"), Some("out")));
    for r in &rows {
        assert_eq!(r["e_mse"], 0.0);
        assert_eq!(r["invalid_iv"], 0);
    }
    assert!(rows[1]["e_mse_sigma"].as_f64().unwrap() < 1e-12);
    assert!(out.join("metrics.csv").exists());
    assert!(out.join("profiles/oracle.csv").exists());
    assert!(out.join("profiles/oracle_dual_gamma.svg").exists());
}

#[test]
fn evaluate_and_profile_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = dir.path().join("run");
    ok(&["--config", &cfg, "--out", path(&run), "train"]);
    let ckpt = run.join("checkpoint.json");
    let eval = dir.path().join("eval");
    let stdout = ok(&["--config", &cfg, "--out", path(&eval), "evaluate", "--checkpoint", path(&ckpt)]);
    assert!(stdout.contains("checkpoint out"));
    ok(&["--config", &cfg, "--out", path(&eval), "profiles", "--checkpoint", path(&ckpt)]);
    let csv = fs::read_to_string(eval.join("profiles/checkpoint.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 5 * 126);
}

#[test]
fn matrix_rows_and_byte_identical_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["--config", &cfg, "--out", path(&a), "matrix", "--seeds", "2"]);
    ok(&["--config", &cfg, "--out", path(&b), "--jobs", "2", "matrix", "--seeds", "2"]);
    let csv = fs::read(a.join("matrix.csv")).unwrap();
    assert_eq!(csv, fs::read(b.join("matrix.csv")).unwrap());
    assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 1 + 2 * 2 * 2);
    assert!(a.join("matrix_summary.csv").exists());
    assert!(a.join("matrix_in_penalty.svg").exists());
}

#[test]
fn bench_writes_timings() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("bench");
    let stdout = ok(&["--config", &cfg, "--out", path(&out), "bench"]);
    assert!(stdout.contains("ratio"));
    let rows = fs::read_to_string(out.join("bench.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 4);
    assert!(out.join("bench_summary.csv").exists());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"train": {"epochs": 10, "typo": 1}}"#).unwrap();
    let out = dir.path().join("o");
    assert_eq!(noarb(&["--config", path(&bad), "--out", path(&out), "generate"]).status.code(), Some(2));
    assert_eq!(noarb(&["--out", path(&out), "--mode", "cnn", "train"]).status.code(), Some(2));
    assert_eq!(noarb(&["--config", "/definitely/missing.json", "generate"]).status.code(), Some(4));
    let missing = dir.path().join("none.json");
    assert_eq!(noarb(&["--out", path(&out), "evaluate", "--checkpoint", path(&missing)]).status.code(), Some(4));

    let diverge = dir.path().join("diverge.json");
    fs::write(&diverge, r#"{"train": {"epochs": 50, "learning_rate": 1e300, "architecture": [2, 4, 1]}}"#).unwrap();
    let o = noarb(&["--config", path(&diverge), "--out", path(&out), "train"]);
    assert_eq!(o.status.code(), Some(3));
    let diag: serde_json::Value = serde_json::from_slice(&fs::read(out.join("diagnostic.json")).unwrap()).unwrap();
    assert!(diag["error"].as_str().unwrap().contains("diverged"));
}

#[test]
fn help_documents_every_config_key() {
    let help = ok(&["--help"]);
    let dump: serde_json::Value = serde_json::from_str(&ok(&["dump-config"])).unwrap();
    let mut keys: Vec<String> = dump.as_object().unwrap().keys().cloned().collect();
    for section in ["sabr", "grid", "penalty", "train", "bench"] {
        keys.extend(dump[section].as_object().unwrap().keys().cloned());
    }
    for k in keys {
        assert!(help.contains(&k), "--help does not mention `{k}`");
    }
    for cmd in ["generate", "train", "evaluate", "matrix", "profiles", "bench"] {
        assert!(help.contains(cmd));
    }
}

#[test]
fn config_round_trips_through_dump() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let first = ok(&["--config", &cfg, "dump-config"]);
    let dumped = dir.path().join("dumped.json");
    fs::write(&dumped, &first).unwrap();
    assert_eq!(ok(&["--config", path(&dumped), "dump-config"]), first);
}
