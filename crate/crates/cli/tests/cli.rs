use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

const BIN: &str = env!("CARGO_BIN_EXE_fcf");

fn fcf(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn fcf")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Small dataset shared by every test: 4 lateral and 4 vertical trials plus
/// extracted features.
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    features: PathBuf,
    fast: PathBuf,
}

fn fixture() -> &'static Fixture {
    static FIX: OnceLock<Fixture> = OnceLock::new();
    FIX.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let data = root.join("data");
        let o = fcf(&["synth", "--trials", "4", "--task", "lateral,vertical", "--out", data.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let features = root.join("feat.csv");
        let o = fcf(&["extract", "--input", data.to_str().unwrap(), "--out", features.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let fast = root.join("fast.cfg");
        fs::write(&fast, "# keep the ensembles small\nforest.n_trees = 20\ngbt.rounds = 40\n").unwrap();
        Fixture { _dir: dir, root, features, fast }
    })
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn synth_manifest_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        let o = fcf(&["--seed", seed, "synth", "--trials", "1", "--out", p(&out)]);
        assert_eq!(code(&o), 0);
        let line = stdout(&o).lines().find(|l| l.starts_with("manifest sha256")).unwrap().to_string();
        (line, fs::read(out.join("manifest.json")).unwrap())
    };
    let a = run("a", "11");
    let b = run("b", "11");
    let c = run("c", "12");
    assert_eq!(a, b);
    assert_ne!(a.0, c.0);
    let manifest: serde_json::Value = serde_json::from_slice(&a.1).unwrap();
    assert_eq!(manifest["seed"], 11);
    assert!(manifest["trials"][0]["files"].as_object().unwrap().len() >= 3);
    assert!(dir.path().join("a.run.json").exists());
}

#[test]
fn eval_report_is_byte_identical_across_runs() {
    let f = fixture();
    let run = |name: &str| {
        let out = f.root.join(name);
        let o = fcf(&[
            "--config",
            p(&f.fast),
            "eval",
            "--loto",
            "--features",
            p(&f.features),
            "--family",
            "forest",
            "--task",
            "lateral",
            "--out",
            p(&out),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        fs::read(out).unwrap()
    };
    let a = run("r1.json");
    assert_eq!(a, run("r2.json"));
    let v: serde_json::Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(v["folds"].as_array().unwrap().len(), 4);
    assert_eq!(v["config"]["forest.n_trees"], "20");
}

#[test]
fn check_mode_sets_exit_code() {
    let f = fixture();
    let strict = f.root.join("strict.cfg");
    fs::write(&strict, "forest.n_trees = 20\ncheck.loto_forest = 0.001\n").unwrap();
    let args = |cfg: &Path| {
        vec![
            "--check".to_string(),
            "--config".into(),
            p(cfg).into(),
            "eval".into(),
            "--features".into(),
            p(&f.features).into(),
            "--family".into(),
            "forest".into(),
            "--task".into(),
            "lateral".into(),
        ]
    };
    let o = Command::new(BIN).args(args(&f.fast)).output().unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = Command::new(BIN).args(args(&strict)).output().unwrap();
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("FAIL"));
}

#[test]
fn cross_task_with_saved_model_matches_fresh_fit() {
    let f = fixture();
    let model = f.root.join("gbt.model");
    let o = fcf(&[
        "--config",
        p(&f.fast),
        "train",
        "--features",
        p(&f.features),
        "--family",
        "gbt",
        "--task",
        "lateral",
        "--out",
        p(&model),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let cross = |extra: &[&str]| {
        let mut args = vec!["--config", p(&f.fast), "cross", "--features", p(&f.features), "--family", "gbt"];
        args.extend_from_slice(&["--train-task", "lateral", "--test-task", "vertical"]);
        args.extend_from_slice(extra);
        let o = fcf(&args);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        serde_json::from_slice::<serde_json::Value>(&o.stdout).unwrap()
    };
    let fresh = cross(&[]);
    let saved = cross(&["--model", p(&model)]);
    assert_eq!(fresh["rmse"], saved["rmse"]);
    assert_eq!(fresh["kind"], "cross_task");
    assert_eq!(fresh["folds"].as_array().unwrap().len(), 4);
}

#[test]
fn importance_and_report() {
    let f = fixture();
    let o = fcf(&["--config", p(&f.fast), "importance", "--features", p(&f.features), "--family", "forest", "--task", "vertical"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let total: f64 = v["importance"]["families"].as_array().unwrap().iter().map(|x| x["share"].as_f64().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-9);

    let o = fcf(&["--check", "report", "--features", p(&f.features)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["srf_fcf"]["pooled"]["r_squared"].as_f64().unwrap() > 0.9);
}

#[test]
fn usage_errors_exit_two() {
    let f = fixture();
    let bad = f.root.join("bad.cfg");
    fs::write(&bad, "forest.n_treez = 3\n").unwrap();
    let feats = p(&f.features);
    for args in [
        vec!["--config", p(&bad), "eval", "--features", feats, "--family", "forest", "--task", "lateral"],
        vec!["eval", "--features", feats, "--family", "forest"],
        vec!["eval", "--features", feats, "--family", "cnn", "--task", "lateral"],
        vec!["importance", "--features", feats, "--family", "linear", "--task", "lateral"],
        vec!["train", "--features", feats, "--family", "linear", "--task", "lateral"],
        vec!["eval", "--features", feats, "--family", "svm"],
        vec!["frobnicate"],
    ] {
        let o = fcf(&args);
        assert_eq!(code(&o), 2, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let o = fcf(&["eval", "--features", "/nonexistent/feat.csv", "--family", "linear"]);
    assert_eq!(code(&o), 1);
}
