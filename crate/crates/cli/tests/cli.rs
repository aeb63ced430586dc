use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rbsde-lab"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn fixture(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

fn write(dir: &TempDir, name: &str, text: &str) -> String {
    let p = dir.path().join(name);
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

const ZERO_DRIVER_PUT: &str = r#"{
  "model": {"kind": "brownian_walk", "steps": 4, "horizon": 1.0},
  "payoff": {"kind": "american_put", "strike": 1.0, "sigma": 0.5}
}"#;

/// Driver `y` with clock steps of 0.5. Without the clock weight the Picard
/// differences grow for several iterates before they settle.
const STEEP_DRIVER: &str = r#"{
  "model": {"kind": "brownian_walk", "steps": 8, "horizon": 4.0},
  "payoff": {"kind": "american_put", "strike": 1.0, "sigma": 0.3},
  "generator": {"family": "affine", "params": {"b": 1.0}},
  "lipschitz": 1.0
}"#;

fn solve_into(dir: &TempDir, config: &str) -> PathBuf {
    let out = dir.path().join("run");
    let res = run(&["solve", "--config", config, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    out
}

#[test]
fn solve_writes_json_and_csv() {
    let dir = TempDir::new().unwrap();
    let out = solve_into(&dir, &fixture("american_put.json"));
    let doc: Value = serde_json::from_str(&fs::read_to_string(out.join("solution.json")).unwrap()).unwrap();
    assert_eq!(doc["kind"], "rbsde");
    let n = doc["Y"].as_array().unwrap().len();
    assert_eq!(doc["Z"].as_array().unwrap().len(), n);
    assert_eq!(doc["dK"].as_array().unwrap().len(), n);
    assert_eq!(doc["diagnostics"]["converged"], true);

    let csv = fs::read_to_string(out.join("solution.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("level,node,Y,mZ_norm,dK"));
    assert_eq!(lines.count(), n);
}

#[test]
fn solve_prints_root_value() {
    let res = run(&["solve", "--config", &fixture("snell_small.json")]);
    assert_eq!(code(&res), 0);
    let text = stdout(&res);
    let root = text.lines().find_map(|l| l.strip_prefix("root value: ")).unwrap();
    assert!(root.parse::<f64>().unwrap().is_finite());
}

#[test]
fn double_solution_has_both_increments() {
    let dir = TempDir::new().unwrap();
    let out = solve_into(&dir, &fixture("game_option.json"));
    let doc: Value = serde_json::from_str(&fs::read_to_string(out.join("solution.json")).unwrap()).unwrap();
    assert_eq!(doc["kind"], "drbsde");
    assert!(doc["dL"].is_array() && doc["dU"].is_array());
    let csv = fs::read_to_string(out.join("solution.csv")).unwrap();
    assert!(csv.starts_with("level,node,Y,mZ_norm,dL,dU,active_barrier"));
}

#[test]
fn verify_accepts_saved_solution() {
    let dir = TempDir::new().unwrap();
    for name in ["american_put.json", "game_option.json"] {
        let config = fixture(name);
        let out = solve_into(&dir, &config);
        let sol = out.join("solution.json");
        let saved = run(&["verify", "--config", &config, "--solution", sol.to_str().unwrap()]);
        assert_eq!(code(&saved), 0, "{}", stderr(&saved));
        let fresh = run(&["verify", "--config", &config]);
        assert_eq!(code(&fresh), 0);
        // the saved solution reproduces the fresh one
        assert_eq!(stdout(&saved), stdout(&fresh));
        let text = stdout(&saved);
        let names: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
        assert_eq!(names, ["apriori", "stability", "picard_step"]);
    }
}

#[test]
fn corrupted_solution_is_invalid_input() {
    let dir = TempDir::new().unwrap();
    let config = fixture("american_put.json");
    let out = solve_into(&dir, &config);
    let mut doc: Value = serde_json::from_str(&fs::read_to_string(out.join("solution.json")).unwrap()).unwrap();
    doc["Y"].as_array_mut().unwrap().pop();
    let bad = write(&dir, "short.json", &doc.to_string());
    let res = run(&["verify", "--config", &config, "--solution", &bad]);
    assert_eq!(code(&res), 3);
    assert!(stderr(&res).contains("`Y`"), "{}", stderr(&res));

    doc["Y"] = Value::String("nope".into());
    let bad = write(&dir, "typed.json", &doc.to_string());
    let res = run(&["verify", "--config", &config, "--solution", &bad]);
    assert_eq!(code(&res), 3);
    assert!(stderr(&res).contains("at `Y`"), "{}", stderr(&res));
}

#[test]
fn solution_kind_must_match_scenario() {
    let dir = TempDir::new().unwrap();
    let out = solve_into(&dir, &fixture("game_option.json"));
    let sol = out.join("solution.json");
    let res = run(&["verify", "--config", &fixture("american_put.json"), "--solution", sol.to_str().unwrap()]);
    assert_eq!(code(&res), 3);
}

#[test]
fn tight_slack_fails_verification() {
    let res = run(&["verify", "--config", &fixture("american_put.json"), "--slack-factor", "1e-9"]);
    assert_eq!(code(&res), 4);
    assert!(stdout(&res).contains("false"));
}

#[test]
fn type_errors_name_the_field() {
    let dir = TempDir::new().unwrap();
    let config = write(
        &dir,
        "bad.json",
        r#"{"model": {"kind": "brownian_walk", "steps": 3, "horizon": 1.0},
            "payoff": {"kind": "american_put", "strike": 1.0},
            "solver": {"kind": "rbsde", "tol": "small"}}"#,
    );
    let res = run(&["solve", "--config", &config]);
    assert_eq!(code(&res), 3);
    assert!(stderr(&res).contains("at `solver.tol`"), "{}", stderr(&res));
}

#[test]
fn crossed_obstacles_name_the_node() {
    let dir = TempDir::new().unwrap();
    let config = write(
        &dir,
        "crossed.json",
        r#"{"model": {"kind": "brownian_walk", "steps": 3, "horizon": 1.0},
            "payoff": {"kind": "custom", "xi": "0.2 * m", "eta": "0.2 * m + 0.1", "zeta": "0.5 - t"},
            "solver": {"kind": "drbsde"}}"#,
    );
    let res = run(&["solve", "--config", &config]);
    assert_eq!(code(&res), 3);
    assert!(stderr(&res).contains("at node"), "{}", stderr(&res));
}

#[test]
fn missing_config_and_bad_thread_count() {
    assert_eq!(code(&run(&["solve"])), 3);
    let res = bin()
        .args(["solve", "--config", &fixture("snell_small.json")])
        .env("RBSDE_LAB_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(code(&res), 3);
    assert_eq!(code(&run(&["solve", "--config", "/nonexistent/scenario.json"])), 1);
}

#[test]
fn iteration_cap_reports_diagnostics() {
    let res = run(&["solve", "--config", &fixture("american_put.json"), "--max-iter", "1"]);
    assert_eq!(code(&res), 2);
    let err = stderr(&res);
    let line = err.lines().find_map(|l| l.strip_prefix("diagnostics: ")).unwrap();
    let diag: Value = serde_json::from_str(line).unwrap();
    assert_eq!(diag["converged"], false);
}

#[test]
fn oracle_compare_agrees_and_respects_cap() {
    for name in ["snell_small.json", "dynkin_small.json"] {
        let res = run(&["oracle-compare", "--config", &fixture(name)]);
        assert_eq!(code(&res), 0, "{}", stderr(&res));
        let text = stdout(&res);
        let d = text.lines().find_map(|l| l.strip_prefix("discrepancy: ")).unwrap();
        assert!(d.parse::<f64>().unwrap() <= 1e-9);
    }
    let res = run(&["oracle-compare", "--config", &fixture("snell_small.json"), "--cap", "3"]);
    assert_eq!(code(&res), 5);
}

#[test]
fn oracle_compare_writes_json() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("cmp.json");
    let res = run(&["oracle-compare", "--config", &fixture("snell_small.json"), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&res), 0);
    let doc: Value = serde_json::from_str(&fs::read_to_string(out).unwrap()).unwrap();
    assert_eq!(doc["oracle_lower"], doc["oracle_upper"]);
}

#[test]
fn fixed_driver_convergence_table_has_one_row() {
    let dir = TempDir::new().unwrap();
    let config = write(&dir, "zero.json", ZERO_DRIVER_PUT);
    let res = run(&["convergence", "--config", &config]);
    assert_eq!(code(&res), 0);
    let text = stdout(&res);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2, "{text}");
    assert_eq!(lines[0], "iteration,diff,log_diff,plain_diff,ratio");
}

#[test]
fn convergence_table_decreases() {
    let res = run(&["convergence", "--config", &fixture("snell_small.json")]);
    assert_eq!(code(&res), 0);
    let text = stdout(&res);
    let diffs: Vec<f64> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert!(diffs.len() > 2);
    assert!(diffs.windows(2).all(|w| w[1] < w[0]), "{diffs:?}");
}

#[test]
fn zero_beta_breaks_the_ratio_bound() {
    let dir = TempDir::new().unwrap();
    let config = write(&dir, "steep.json", STEEP_DRIVER);
    let res = run(&["convergence", "--config", &config, "--beta", "0"]);
    assert_eq!(code(&res), 4);
}

#[test]
fn build_model_accepts_bare_model_config() {
    let dir = TempDir::new().unwrap();
    let bare = write(&dir, "model.json", r#"{"kind": "brownian_walk", "steps": 2, "horizon": 1.0}"#);
    let res = run(&["build-model", "--config", &bare]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let doc: Value = serde_json::from_slice(&res.stdout).unwrap();
    assert_eq!(doc["nodes"].as_array().unwrap().len(), 7);

    // the emitted document loads back as a file model
    let tree = dir.path().join("tree.json");
    fs::write(&tree, &res.stdout).unwrap();
    let scenario = write(
        &dir,
        "from_file.json",
        r#"{"model": {"kind": "file", "path": "tree.json"},
            "payoff": {"kind": "custom", "xi": "m - 2", "eta": "m"}}"#,
    );
    let res = run(&["solve", "--config", &scenario]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
}

#[test]
fn random_models_follow_the_seed() {
    let config = fixture("random_lipschitz.json");
    let a = run(&["build-model", "--config", &config, "--seed", "5"]);
    let b = run(&["build-model", "--config", &config, "--seed", "5"]);
    let c = run(&["build-model", "--config", &config, "--seed", "6"]);
    assert_eq!(a.stdout, b.stdout);
    assert_ne!(a.stdout, c.stdout);
}
