use std::path::Path;
use std::process::{Command, Output};

fn cellvta(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_cellvta")).args(args).env("RUST_LOG", "warn").output().unwrap();
    assert!(out.status.success(), "cellvta {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn report(file: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(file).unwrap()).unwrap()
}

#[test]
fn synth_train_infer_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    let pred = tmp.path().join("pred");
    let manifest = data.join("manifest.json");
    let config = tmp.path().join("config.json");
    std::fs::write(&config, r#"{"batch_size": 4, "synth": {"num_patients": 5}}"#).unwrap();

    cellvta(&["synth", "--out", path(&data), "--count", "20", "--seed", "3", "--config", path(&config)]);
    cellvta(&["train", "--manifest", path(&manifest), "--out", path(&run), "--epochs", "2", "--seed", "3"]);
    for f in ["best.ckpt", "loss.jsonl", "epochs.jsonl", "run_config.json", "history.json"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let first: serde_json::Value =
        serde_json::from_str(std::fs::read_to_string(run.join("loss.jsonl")).unwrap().lines().next().unwrap()).unwrap();
    for key in ["step", "np_dice", "np_ft", "hv_mse", "hv_msge", "nc_dice", "nc_ft", "nc_ce", "tc_ce", "total"] {
        assert!(first.get(key).is_some(), "loss line lacks {key}");
    }

    cellvta(&[
        "infer",
        "--manifest",
        path(&manifest),
        "--out",
        path(&pred),
        "--checkpoint",
        path(&run.join("best.ckpt")),
        "--test-split",
        "--overlays",
        "--seed",
        "3",
    ]);
    assert!(std::fs::read_dir(pred.join("overlays")).unwrap().count() > 0);
    let scores = tmp.path().join("scores.json");
    cellvta(&["eval", "--pred", path(&pred), "--manifest", path(&manifest), "--out", path(&scores), "--test-split", "--seed", "3"]);
    let r = report(&scores);
    let mpq = r["mPQ"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&mpq));
    assert!(r["n_images"].as_u64().unwrap() > 0);
}

#[test]
fn ideal_bypass_scores_near_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let pred = tmp.path().join("pred");
    let manifest = data.join("manifest.json");
    cellvta(&["synth", "--out", path(&data), "--count", "10", "--sequential"]);
    cellvta(&["infer", "--manifest", path(&manifest), "--out", path(&pred), "--ideal"]);
    let out = cellvta(&["eval", "--pred", path(&pred), "--manifest", path(&manifest)]);
    let r: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(r["mPQ"].as_f64().unwrap() >= 0.95, "{r}");
    assert_eq!(r["n_images"].as_u64().unwrap(), 10);
}

#[test]
fn infer_without_checkpoint_fails_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    cellvta(&["synth", "--out", path(&data), "--count", "3"]);
    let out = Command::new(env!("CARGO_BIN_EXE_cellvta"))
        .args(["infer", "--manifest", path(&data.join("manifest.json")), "--out", path(&tmp.path().join("p"))])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--checkpoint"));
}
