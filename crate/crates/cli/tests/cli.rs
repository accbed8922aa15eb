use std::path::Path;
use std::process::{Command, Output};

fn histctl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_histctl"))
        .current_dir(dir)
        .env_remove("HISTCTL_OUT_DIR")
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn generate_run_report_timeline() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    let g = histctl(dir, &["generate"]);
    assert!(g.status.success(), "{}", String::from_utf8_lossy(&g.stderr));
    let manifest: serde_json::Value = serde_json::from_slice(&g.stdout).unwrap();
    assert!(manifest["n_patients"].as_u64().unwrap() > 0);
    assert!(dir.join("data/registry.jsonl").exists());

    let r = histctl(dir, &["run", "--analyses.cll=false", "--balance.solver.max_iter", "150"]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(stdout(&r).contains("outputs in out"));
    assert!(dir.join("out/estimates.csv").exists());

    let rep = histctl(dir, &["report", "--json", "--analyses.cll=false", "--balance.solver.max_iter=150"]);
    assert!(rep.status.success());
    let summary: serde_json::Value = serde_json::from_slice(&rep.stdout).unwrap();
    assert_eq!(summary["config"]["balance"]["solver"]["max_iter"], 150);
    assert!(summary["cll"].is_null());

    // A different config may not write into the same directory without --force.
    let clash = histctl(dir, &["run", "--analyses.cll=false"]);
    assert!(!clash.status.success());
    assert!(String::from_utf8_lossy(&clash.stderr).contains("--force"));

    let unknown = histctl(dir, &["timeline", "nobody"]);
    assert!(!unknown.status.success());
}

#[test]
fn config_overrides_and_validation() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("c.toml"), "seed = 11\n[analyses]\nplacebo = false\n").unwrap();

    let c = histctl(dir, &["--config", "c.toml", "config", "--seed", "12", "--set", "horizons.pain=12"]);
    assert!(c.status.success(), "{}", String::from_utf8_lossy(&c.stderr));
    let text = stdout(&c);
    assert!(text.contains("seed = 12"));
    assert!(text.contains("placebo = false"));

    let bad = histctl(dir, &["config", "--balance.no_such_key", "1"]);
    assert!(!bad.status.success());

    let missing = histctl(dir, &["config", "--seed"]);
    assert!(!missing.status.success());

    let no_registry = histctl(dir, &["balance"]);
    assert!(!no_registry.status.success());
    assert!(String::from_utf8_lossy(&no_registry.stderr).contains("stage load"));
}
