use std::path::Path;
use std::process::{Command, Output};

fn pionm(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pionm"))
        .args(args)
        .current_dir(cwd)
        .env_remove("PIONM_OUT")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

const LINE: &str = r#"{
    "init_mean": [-1.0], "init_std": 0.5, "target": [1.0],
    "obstacles": [], "sigma": 0.5, "T": 1.0, "N": 10
}"#;

const QUICK_FIXED: &str = r#""fixed": {"paths": 64, "hjb_samples": 32, "fit_samples": 32, "measure_samples": 32,
    "max_rounds": 3, "patience": 0}"#;

#[test]
fn missing_scenario_file_exits_4_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = pionm(&["oracle", "--scenario", "nope.json", "--out", out.to_str().unwrap()], dir.path());
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!out.exists());
}

#[test]
fn schema_violations_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), r#"{"fixed": {"pathz": 1}}"#).unwrap();
    std::fs::write(dir.path().join("line.json"), LINE).unwrap();
    let o = pionm(&["train-fixed", "--config", "bad.json", "--scenario", "line.json"], dir.path());
    assert_eq!(code(&o), 2);
    let o = pionm(&["train-fixed", "--scenario", "line.json", "--device", "gpu"], dir.path());
    assert_eq!(code(&o), 2);
    let o = pionm(&["oracle", "--family", "no-such-family"], dir.path());
    assert_eq!(code(&o), 2);
    let o = pionm(&["eval", "--family", "obstacle-change"], dir.path());
    assert_eq!(code(&o), 2, "eval without a checkpoint");
    assert!(!dir.path().join("runs").exists());
}

#[test]
fn fixed_run_then_eval_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("line.json"), LINE).unwrap();
    std::fs::write(p.join("cfg.json"), format!("{{{QUICK_FIXED}, \"eval\": {{\"agents\": 200, \"quadrature\": 400}}, \"plot\": {{\"agents\": 200, \"panel\": 64}}}}")).unwrap();
    let o = pionm(&["train-fixed", "--config", "cfg.json", "--scenario", "line.json", "--seed", "3", "--out", "fixed"], p);
    // Three rounds cannot meet the convergence test: exit 3, artifacts kept.
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["solution.json", "rounds.csv", "scenario.json", "summary.json"] {
        assert!(p.join("fixed/line").join(f).is_file(), "{f}");
    }
    let rounds = std::fs::read_to_string(p.join("fixed/line/rounds.csv")).unwrap();
    assert_eq!(rounds.lines().count(), 4);

    let eval = |dest: &str| {
        let o = pionm(&["eval", "--config", "cfg.json", "--scenario", "line.json", "--checkpoint", "fixed", "--out", dest], p);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let text = std::fs::read_to_string(p.join(dest).join("metrics.csv")).unwrap();
        let rows: Vec<String> = text.lines().map(String::from).collect();
        assert_eq!(rows.len(), 2);
        assert!(p.join(dest).join("metrics.json").is_file());
        rows.iter()
            .map(|r| r.rsplit_once(',').map(|(head, _)| head.to_string()).unwrap())
            .collect::<Vec<_>>()
    };
    assert_eq!(eval("e1"), eval("e2"));

    let o = pionm(&["plot", "--config", "cfg.json", "--scenario", "line.json", "--checkpoint", "fixed/line/solution.json", "--out", "plots"], p);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let png = std::fs::read(p.join("plots/line/snapshots.png")).unwrap();
    assert_eq!(&png[1..4], b"PNG");
}

#[test]
fn default_output_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("line.json"), LINE).unwrap();
    std::fs::write(p.join("cfg.json"), r#"{"oracle": {"points": 32, "levels_per_step": 4}}"#).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_pionm"))
        .args(["oracle", "--config", "cfg.json", "--scenario", "line.json"])
        .current_dir(p)
        .env("PIONM_OUT", p.join("root"))
        .output()
        .unwrap();
    assert!(matches!(code(&o), 0 | 3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(p.join("root/oracle/line/fields.csv").is_file());
    assert!(p.join("root/oracle/run_config.json").is_file());
}

#[test]
fn operator_eval_on_the_obstacle_family_has_five_rows() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    // A loose tolerance lets the two-round inner solves count as converged.
    let cfg = format!(
        r#"{{"fixed": {{"paths": 64, "hjb_samples": 32, "fit_samples": 32, "measure_samples": 32,
            "max_rounds": 4, "patience": 1, "tol": 1e9}},
        "operator": {{"train": {{"codes": 1, "queries": 32, "warm_points": 0,
            "arch": {{"width": 8, "layers": 1, "modes": 4, "steps": 20, "feature_scale": 2.0}}}}}},
        "eval": {{"agents": 100}}}}"#
    );
    std::fs::write(p.join("cfg.json"), cfg).unwrap();
    let o = pionm(&["train-operator", "--config", "cfg.json", "--out", "op"], p);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(p.join("op/session.csv").is_file());
    let o = pionm(&["eval", "--config", "cfg.json", "--family", "obstacle-change", "--checkpoint", "op/operator.json", "--out", "ev"], p);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(p.join("ev/metrics.csv")).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 6);
    assert!(rows[1].starts_with("obstacle-change-0,"));
    for r in &rows[1..] {
        let rate: f64 = r.split(',').nth(1).unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&rate));
    }

    let o = pionm(&["infer", "--family", "obstacle-change", "--checkpoint", "op/operator.json", "--out", "inf"], p);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(p.join("inf/obstacle-change-4/fields.csv").is_file());
    let o = pionm(&["infer", "--family", "diffusion-change", "--checkpoint", "op/operator.json", "--out", "inf2"], p);
    assert_eq!(code(&o), 2, "ellipse family against a circle-layout operator");
    assert!(!p.join("inf2").exists());
}
