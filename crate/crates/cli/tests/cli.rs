use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mechlab_cli::Summary;

fn mechlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mechlab")).args(args).output().expect("binary runs")
}

fn recipe(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../recipes").join(name).to_string_lossy().into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_override_is_a_usage_error_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = mechlab(&["--out", s(&out), "recipe", "run", &recipe("grad-audit.toml"), "--override", "gradient.no_such_key=1"]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!out.exists());
}

#[test]
fn malformed_override_and_missing_file_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = mechlab(&["--out", s(&out), "recipe", "run", &recipe("grad-audit.toml"), "--override", "gradient"]);
    assert_eq!(o.status.code(), Some(2));
    let o = mechlab(&["--out", s(&out), "recipe", "run", "/nonexistent/recipe.toml"]);
    assert_eq!(o.status.code(), Some(2));
    let o = mechlab(&["--out", s(&out), "recipe", "run", &recipe("grad-audit.toml"), "--override", "gradient.step=-1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

fn small_audit(out: &Path) -> Output {
    mechlab(&[
        "--out",
        s(out),
        "recipe",
        "run",
        &recipe("grad-audit.toml"),
        "--override",
        "gradient.models_per_loss=6",
        "--override",
        "permutation.models=3",
        "--override",
        "permutation.max_width=32",
    ])
}

#[test]
fn repeated_runs_write_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(small_audit(&a).status.code(), Some(0));
    assert_eq!(small_audit(&b).status.code(), Some(0));
    for f in ["gradients.csv", "permutations.csv", "checks.csv", "summary.json", "recipe.toml"] {
        let x = std::fs::read(a.join(f)).unwrap();
        let y = std::fs::read(b.join(f)).unwrap();
        assert!(x == y, "{f} differs between runs");
    }
}

#[test]
fn report_reprints_a_summary_losslessly() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    assert_eq!(small_audit(&a).status.code(), Some(0));
    let stored = Summary::from_json(&std::fs::read_to_string(a.join("summary.json")).unwrap()).unwrap();
    let o = mechlab(&["--format", "json", "report", s(&a)]);
    assert_eq!(o.status.code(), Some(0));
    let printed = Summary::from_json(&String::from_utf8(o.stdout).unwrap()).unwrap();
    assert_eq!(printed, stored);
    let o = mechlab(&["--format", "csv", "report", s(&a.join("summary.json"))]);
    assert_eq!(String::from_utf8(o.stdout).unwrap(), stored.checks_csv());
}

#[test]
fn recorded_recipe_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(small_audit(&a).status.code(), Some(0));
    let o = mechlab(&["--out", s(&b), "recipe", "run", s(&a.join("recipe.toml"))]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(std::fs::read(a.join("gradients.csv")).unwrap(), std::fs::read(b.join("gradients.csv")).unwrap());
}

#[test]
fn failing_check_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = mechlab(&[
        "--out",
        s(&out),
        "recipe",
        "run",
        &recipe("grad-audit.toml"),
        "--override",
        "gradient.models_per_loss=3",
        "--override",
        "permutation.models=1",
        "--override",
        "gradient.max_rel_error=0.0",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));
}

fn path_in(dir: &Path, parts: &[&str]) -> PathBuf {
    parts.iter().fold(dir.to_path_buf(), |p, s| p.join(s))
}

#[test]
fn single_step_verbs_chain_together() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let gen = |name: &str, seed: &str, extra: &[&str]| {
        let out = d.join(name);
        let mut args = vec!["--out", s(&out), "generate", "slab", "--seed", seed, "--override", "dim=16", "--override", "num_samples=400"];
        args.extend_from_slice(extra);
        let o = mechlab(&args);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        out.join("dataset.mlds")
    };
    let data = gen("data", "1", &[]);
    let other = gen("other", "2", &[]);
    let train = |name: &str, seed: &str| {
        let out = d.join(name);
        let o = mechlab(&[
            "--out", s(&out), "train", "--data", s(&data), "--hidden", "8", "--seed", seed,
            "--override", "epochs=3", "--override", "batch_size=32",
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        out.join("model.json")
    };
    let (m1, m2) = (train("m1", "1"), train("m2", "2"));
    assert!(path_in(d, &["m1", "losses.csv"]).exists());

    let o = mechlab(&["--out", s(&d.join("mech")), "mechanism", "--model", s(&m1), "--data", s(&data), "--repeats", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let profile = std::fs::read_to_string(path_in(d, &["mech", "profile.csv"])).unwrap();
    assert!(profile.contains("randomize_0_k0") && profile.contains("randomize_1_k4"));

    let o = mechlab(&["--out", s(&d.join("align")), "align", "--a", s(&m1), "--b", s(&m2), "--data", s(&data), "--grid", "5"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let aligned = path_in(d, &["align", "aligned.json"]);
    assert!(aligned.exists() && path_in(d, &["align", "permutation.json"]).exists());

    let o = mechlab(&[
        "--out", s(&d.join("path")), "path", "--start", s(&m1), "--end", s(&aligned),
        "--data", s(&data), "--data", s(&other), "--grid", "5",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let curve = std::fs::read_to_string(path_in(d, &["path", "path.csv"])).unwrap();
    assert!(curve.lines().count() > 5);

    let o = mechlab(&[
        "--out", s(&d.join("quad")), "path", "--start", s(&m1), "--end", s(&m2), "--train-mid",
        "--data", s(&data), "--grid", "5", "--override", "epochs=1",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(path_in(d, &["quad", "midpoint.json"]).exists());
}

#[test]
fn grid_datasets_feed_the_fine_tuning_verb() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let gen = |name: &str, p: &str, seed: &str| {
        let out = d.join(name);
        let o = mechlab(&[
            "--out", s(&out), "generate", "grid", "--seed", seed,
            "--override", "num_samples=200", "--override", &format!("cue_proportion={p}"),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        out.join("dataset.mlds")
    };
    let cue = gen("cue", "0.9", "1");
    let clean = gen("clean", "0.0", "2");
    let anchor = d.join("anchor");
    let o = mechlab(&[
        "--out", s(&anchor), "train", "--data", s(&cue), "--hidden", "16", "--override", "epochs=2",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let model = anchor.join("model.json");
    let o = mechlab(&[
        "--out", s(&d.join("ft")), "cbft", "--anchor", s(&model), "--cue-data", s(&cue),
        "--clean-data", s(&clean), "--override", "epochs=1",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.join("ft").join("model.json").exists());
    let o = mechlab(&[
        "--out", s(&d.join("lpft")), "cbft", "--method", "lpft", "--anchor", s(&model),
        "--cue-data", s(&cue), "--clean-data", s(&clean),
    ]);
    assert_eq!(o.status.code(), Some(2), "LPFT without validation data is a usage error");
}
