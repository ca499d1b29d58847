//! End-to-end runs of the `siphi` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const MEMBERS: [&str; 5] = ["a", "b", "c", "d", "e"];
const FAST: [&str; 10] = [
    "--dim", "8", "--recipe", "desk", "--epochs", "2", "--batch", "16", "--pool-factor", "4",
];

fn siphi(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_siphi"))
        .current_dir(cwd)
        .env_remove("SIPHI_WORKERS")
        .args(args)
        .output()
        .unwrap()
}

fn ok(cwd: &Path, args: &[&str]) {
    let out = siphi(cwd, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Five models over 60 shared samples with two layers each, under `data/`.
fn family(cwd: &Path) {
    ok(
        cwd,
        &[
            "synth", "--out", "data", "--samples", "60", "--layers", "2", "--frames", "8", "--channels", "4",
            "--members", "a,b,c,d,e",
        ],
    );
}

fn sweep_args<'a>(manifest: &'a str, out: &'a str) -> Vec<&'a str> {
    let mut v = vec![
        "sweep-layers", "--manifest", manifest, "--split", "split/split.json", "--arch", "wa-tgp", "--out", out,
    ];
    v.extend(FAST);
    v
}

#[test]
fn usage_errors_exit_2_and_name_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    family(cwd);

    let out = siphi(cwd, &["split", "--out", "s"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("--manifest"), "{}", stderr(&out));

    let out = siphi(cwd, &["sweep-layers", "--manifest", "missing.json", "--arch", "dt"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("--manifest"), "{}", stderr(&out));

    let out = siphi(cwd, &["split", "--manifest", "data/a/manifest.json", "--frobnicate"]);
    assert_eq!(code(&out), 2);

    let out = siphi(cwd, &["train", "--manifest", "data/a/manifest.json", "--arch", "cnn"]);
    assert_eq!(code(&out), 2);

    let out = siphi(cwd, &["ensemble", "--manifest", "data/a/manifest.json", "--sweep", "data/synth.json", "--k", "2"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("--k"), "{}", stderr(&out));

    // nothing but the synthetic data was created: usage errors do no work
    let entries: Vec<String> = fs::read_dir(cwd)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(entries, vec!["data".to_string()]);
}

#[test]
fn runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    fs::write(cwd.join("broken.json"), "{ not json").unwrap();
    let out = siphi(cwd, &["split", "--manifest", "broken.json", "--out", "s"]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
}

#[test]
fn split_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    family(cwd);
    ok(cwd, &["split", "--manifest", "data/a/manifest.json", "--seed", "17", "--out", "s"]);
    let first = fs::read(cwd.join("s/split.json")).unwrap();
    ok(cwd, &["split", "--manifest", "data/a/manifest.json", "--seed", "17", "--out", "s"]);
    assert_eq!(first, fs::read(cwd.join("s/split.json")).unwrap());

    let v = json(&cwd.join("s/split.json"));
    assert_eq!(v["provenance"]["seed"], 17);
    assert_eq!(v["provenance"]["command"][1], "split");
    assert_eq!(v["provenance"]["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
    assert_eq!(v["payload"]["folds"].as_array().unwrap().len(), 3);

    // members share samples, so their splits agree; a new seed changes it
    ok(cwd, &["split", "--manifest", "data/b/manifest.json", "--out", "t"]);
    assert_eq!(json(&cwd.join("t/split.json"))["payload"], v["payload"]);
    ok(cwd, &["split", "--manifest", "data/a/manifest.json", "--seed", "18", "--out", "u"]);
    assert_ne!(json(&cwd.join("u/split.json"))["payload"], v["payload"]);
}

#[test]
fn layer_sweep_rows_and_reproducibility() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    family(cwd);
    ok(cwd, &["split", "--manifest", "data/a/manifest.json", "--out", "split"]);
    let args = sweep_args("data/a/manifest.json", "sw");
    ok(cwd, &args);
    let path = cwd.join("sw/a.wa-tgp.layers.json");
    let first = fs::read(&path).unwrap();
    let v = json(&path);
    let rows = v["payload"]["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 3, "two layers plus all");
    assert_eq!(rows[2]["id"]["layer_mode"], "all");
    assert_eq!(v["payload"]["seed"], 17);
    let command: Vec<&str> = v["provenance"]["command"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c.as_str().unwrap())
        .collect();
    assert_eq!(command[0], "siphi");
    assert_eq!(&command[1..], &args[..]);
    let roles: Vec<&str> = v["provenance"]["inputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|i| i["role"].as_str().unwrap())
        .collect();
    assert_eq!(roles, ["manifest", "split"]);
    let table = fs::read_to_string(cwd.join("sw/a.wa-tgp.layers.txt")).unwrap();
    assert!(table.starts_with("# siphi"));
    assert!(table.contains("# seed: 17"));

    // same command, more workers via the environment: same bytes
    let out = Command::new(env!("CARGO_BIN_EXE_siphi"))
        .current_dir(cwd)
        .env("SIPHI_WORKERS", "3")
        .args(&args)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(first, fs::read(&path).unwrap());
}

#[test]
fn ensemble_over_five_members_ranks_ten_triples() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    family(cwd);
    ok(cwd, &["split", "--manifest", "data/a/manifest.json", "--out", "split"]);
    let manifests: Vec<String> = MEMBERS.iter().map(|m| format!("data/{m}/manifest.json")).collect();
    for m in &manifests {
        ok(cwd, &sweep_args(m, "sw"));
    }
    let sweeps: Vec<String> = MEMBERS.iter().map(|m| format!("sw/{m}.wa-tgp.layers.json")).collect();
    let mut args = vec!["ensemble", "--manifest", "data/a/manifest.json", "--k", "3", "--out", "ens"];
    for s in &sweeps {
        args.extend(["--sweep", s.as_str()]);
    }
    ok(cwd, &args);
    let v = json(&cwd.join("ens/ensemble.json"));
    let rows = v["payload"]["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 10);
    let ranks: Vec<u64> = rows.iter().map(|r| r["rank"].as_u64().unwrap()).collect();
    assert_eq!(ranks, (1..=10).collect::<Vec<_>>());
    let rmse: Vec<f64> = rows.iter().map(|r| r["report"]["mean_rmse"].as_f64().unwrap()).collect();
    assert!(rmse.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(v["provenance"]["inputs"].as_array().unwrap().len(), 6);
    assert!(fs::read_to_string(cwd.join("ens/ensemble.txt")).unwrap().contains("# command: siphi ensemble"));

    // the same member twice is refused
    let out = siphi(
        cwd,
        &["ensemble", "--manifest", "data/a/manifest.json", "--k", "2", "--out", "ens2", "--sweep", &sweeps[0], "--sweep", &sweeps[0]],
    );
    assert_eq!(code(&out), 2);

    let mut args = vec!["report", "--out", "rep"];
    for s in &sweeps {
        args.extend(["--sweep", s.as_str()]);
    }
    ok(cwd, &args);
    let summary = json(&cwd.join("rep/summary.json"));
    assert_eq!(summary["payload"]["best"].as_array().unwrap().len(), 5);
    let text = fs::read_to_string(cwd.join("rep/report.txt")).unwrap();
    assert_eq!(text.matches("layer sweep: sfm").count(), 5);
}

#[test]
fn train_matches_sweep_and_eval_matches_train() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    family(cwd);
    ok(cwd, &["split", "--manifest", "data/c/manifest.json", "--out", "split"]);
    ok(cwd, &sweep_args("data/c/manifest.json", "sw"));
    let mut args = vec![
        "train", "--manifest", "data/c/manifest.json", "--split", "split/split.json", "--arch", "wa-tgp", "--layer",
        "all", "--fold", "1", "--out", "tr",
    ];
    args.extend(FAST);
    ok(cwd, &args);

    let sweep = json(&cwd.join("sw/c.wa-tgp.layers.json"));
    let run = json(&cwd.join("tr/run.json"));
    assert_eq!(run["payload"]["run"], sweep["payload"]["rows"][2]["runs"][1]);
    assert_eq!(run["payload"]["record"]["checkpoint_path"], "head.ckpt");

    ok(
        cwd,
        &[
            "eval", "--manifest", "data/c/manifest.json", "--split", "split/split.json", "--checkpoint", "tr/head.ckpt",
            "--fold", "1", "--out", "ev",
        ],
    );
    let ev = json(&cwd.join("ev/eval.json"));
    assert_eq!(ev["payload"]["predictions"], run["payload"]["run"]["test_predictions"]);
    assert_eq!(ev["payload"]["metrics"], run["payload"]["test"]);
    assert_eq!(ev["payload"]["checkpoint_sha256"], run["payload"]["checkpoint_sha256"]);

    // a checkpoint for different input dims is refused at runtime
    ok(cwd, &["synth", "--out", "other", "--samples", "40", "--layers", "3", "--frames", "8", "--channels", "4"]);
    let out = siphi(
        cwd,
        &["eval", "--manifest", "other/manifest.json", "--checkpoint", "tr/head.ckpt", "--out", "ev2"],
    );
    assert_eq!(code(&out), 1, "{}", stderr(&out));
}

#[test]
fn dim_sweep_inherits_the_best_layer() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    family(cwd);
    ok(cwd, &["split", "--manifest", "data/a/manifest.json", "--out", "split"]);
    ok(cwd, &sweep_args("data/a/manifest.json", "sw"));
    let layers = json(&cwd.join("sw/a.wa-tgp.layers.json"));
    let best = layers["payload"]["rows"]
        .as_array()
        .unwrap()
        .iter()
        .min_by(|x, y| {
            let key = |r: &Value| r["report"]["mean_rmse"].as_f64().unwrap();
            key(x).total_cmp(&key(y))
        })
        .unwrap()["id"]["layer_mode"]
        .clone();
    ok(
        cwd,
        &[
            "sweep-dims", "--manifest", "data/a/manifest.json", "--arch", "dt", "--inherit", "sw/a.wa-tgp.layers.json",
            "--dims", "4,8", "--folds", "0", "--recipe", "desk", "--epochs", "2", "--batch", "16", "--pool-factor",
            "4", "--out", "dims",
        ],
    );
    let v = json(&cwd.join("dims/a.dt.dims.json"));
    let rows = v["payload"]["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    for r in rows {
        assert_eq!(r["id"]["layer_mode"], best);
    }
    let out = siphi(
        cwd,
        &["sweep-dims", "--manifest", "data/a/manifest.json", "--arch", "dt", "--layer", "0", "--inherit", "sw/a.wa-tgp.layers.json"],
    );
    assert_eq!(code(&out), 2);
}
