use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use sha2::{Digest, Sha256};

use histctl::pipeline::{
    attrition_telescopes, cmd_balance, cmd_generate, cmd_run, cmd_timeline, load_report, GenerateManifest,
    PipelineConfig, RunOptions, HASH_FILE,
};
use histctl::registry::PatientId;

/// One registry shared by every test; each test writes to its own output directory.
fn fixture() -> &'static (PathBuf, GenerateManifest) {
    static DATA: OnceLock<(PathBuf, GenerateManifest)> = OnceLock::new();
    DATA.get_or_init(|| {
        let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("pipeline-fixture");
        let _ = std::fs::remove_dir_all(&root);
        let cfg = config(&root, "unused");
        let m = cmd_generate(&cfg, RunOptions { force: true }).unwrap();
        (root, m)
    })
}

fn config(root: &Path, out: &str) -> PipelineConfig {
    let data = root.join("data");
    let mut cfg = PipelineConfig::default();
    cfg.paths.registry = data.join("registry.jsonl");
    cfg.paths.truth = data.join("truth.jsonl");
    cfg.paths.placebo = data.join("placebo.csv");
    cfg.paths.out_dir = root.join(out);
    cfg
}

fn fresh(out: &str) -> PipelineConfig {
    let (root, _) = fixture();
    let cfg = config(root, out);
    let _ = std::fs::remove_dir_all(&cfg.paths.out_dir);
    cfg
}

fn force() -> RunOptions {
    RunOptions { force: true }
}

#[test]
fn manifest_checksums_match_files() {
    let (_, m) = fixture();
    assert!(m.n_patients >= m.n_treated + m.n_comparison);
    assert!(m.files.len() >= 3);
    for f in &m.files {
        let bytes = std::fs::read(&f.path).unwrap();
        assert_eq!(bytes.len() as u64, f.bytes, "{}", f.path);
        assert_eq!(hex::encode(Sha256::digest(&bytes)), f.sha256, "{}", f.path);
    }
}

#[test]
fn run_writes_hashed_artifacts_and_a_consistent_summary() {
    let cfg = fresh("run");
    let report = cmd_run(&cfg, RunOptions::default()).unwrap();
    let dir = &cfg.paths.out_dir;
    let hash = cfg.hash();
    assert_eq!(std::fs::read_to_string(dir.join(HASH_FILE)).unwrap().trim(), hash);
    for name in ["estimates.csv", "placebo.csv", "attrition.csv", "balance.csv", "weights.csv"] {
        let text = std::fs::read_to_string(dir.join(name)).unwrap();
        assert_eq!(text.lines().next().unwrap(), format!("# config_hash={hash}"), "{name}");
    }
    assert!(attrition_telescopes(&report.attrition));
    assert_eq!(load_report(dir).unwrap(), report);
    assert_eq!(report.config_hash, hash);
    assert!(!report.strata.is_empty());
    let treated_kept = report.attrition.iter().filter(|a| a.arm == histctl::registry::Arm::Treated).last().unwrap();
    let in_strata: usize = report.strata.iter().map(|s| s.n_treated).sum();
    assert_eq!(treated_kept.output, in_strata);
}

#[test]
fn placebo_toggle_leaves_estimates_unchanged() {
    let on = fresh("placebo-on");
    let mut off = fresh("placebo-off");
    off.analyses.placebo = false;
    let r_on = cmd_run(&on, force()).unwrap();
    let r_off = cmd_run(&off, force()).unwrap();
    assert!(r_on.placebo.is_some());
    assert!(r_off.placebo.is_none());
    assert!(r_on.render().contains("Placebo test"));
    assert!(!r_off.render().contains("Placebo test"));
    assert!(!off.paths.out_dir.join("placebo.csv").exists());
    let body = |c: &PipelineConfig| {
        let t = std::fs::read_to_string(c.paths.out_dir.join("estimates.csv")).unwrap();
        t.lines().skip(1).collect::<Vec<_>>().join("\n")
    };
    assert_ne!(on.hash(), off.hash());
    assert_eq!(body(&on), body(&off));
}

#[test]
fn foreign_output_directory_needs_force() {
    let a = fresh("owned");
    cmd_balance(&a, RunOptions::default()).unwrap();
    // Same config again is fine.
    cmd_balance(&a, RunOptions::default()).unwrap();
    let mut b = a.clone();
    b.estimator.overall_alpha = 0.01;
    let err = cmd_balance(&b, RunOptions::default()).unwrap_err().to_string();
    assert!(err.contains("--force"), "{err}");
    cmd_balance(&b, force()).unwrap();
    assert_eq!(std::fs::read_to_string(b.paths.out_dir.join(HASH_FILE)).unwrap().trim(), b.hash());
}

#[test]
fn hash_ignores_output_directory_only() {
    let a = fresh("hash-a");
    let mut b = a.clone();
    b.paths.out_dir = "somewhere/else".into();
    assert_eq!(a.hash(), b.hash());
    b.seed += 1;
    assert_ne!(a.hash(), b.hash());
}

#[test]
fn failures_name_their_stage() {
    let mut cfg = fresh("missing");
    cfg.paths.registry = cfg.paths.out_dir.join("nope.jsonl");
    let err = cmd_run(&cfg, force()).unwrap_err().to_string();
    assert!(err.contains("stage load"), "{err}");
}

#[test]
fn timeline_shows_balancing_weights() {
    let cfg = fresh("timeline");
    let b = cmd_balance(&cfg, force()).unwrap();
    let (id, profile) = b
        .weight_profiles()
        .into_iter()
        .find(|(_, p)| p.iter().any(|(_, w)| *w > 0.0))
        .unwrap();
    let text = cmd_timeline(&cfg, &id).unwrap();
    assert!(text.contains(&id.0));
    assert!(text.contains("weights by stratum"));
    let (w, _) = profile[0];
    assert!(text.lines().any(|l| l.trim_start().starts_with(&w.to_string())));
    assert!(cmd_timeline(&cfg, &PatientId("no-such-patient".into())).is_err());
}

#[test]
fn config_rejects_unknown_keys_and_applies_overrides() {
    assert!(PipelineConfig::from_toml("[balance]\nnot_a_key = 1\n").is_err());
    let cfg = PipelineConfig::load(
        None,
        &[
            ("balance.solver.max_iter".into(), "321".into()),
            ("analyses.placebo".into(), "false".into()),
        ],
    )
    .unwrap();
    assert_eq!(cfg.balance.solver.max_iter, 321);
    assert!(!cfg.analyses.placebo);
    let back = PipelineConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
    assert_eq!(back, cfg);
    assert!(PipelineConfig::load(None, &[("balance.solver.max_iter".into(), "0".into())]).is_err());
}
