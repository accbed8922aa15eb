//! Batch driver: generate → select → covariates → balance → outcomes →
//! estimates, with hashed configuration and cached balancing.

pub mod config;
pub mod report;
pub mod timeline;

pub use config::{Analyses, Paths, PipelineConfig, OUT_DIR_ENV};
pub use report::{attrition_telescopes, RunReport, StratumSummary, SubgroupRow};
pub use timeline::render_timeline;

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::balance::{balance_all, write_balance_csv, BalanceResults};
use crate::covariates::descriptive::descriptive_table;
use crate::covariates::{build_covariates, CovariateTable};
use crate::error::{Error, Result};
use crate::estimate::cll::fit_cll;
use crate::estimate::{
    derive_outcomes, main_estimates, morbidity_bounds, placebo_test, subgroup_analysis, write_estimates_csv,
    AnalysisTag, EffectEstimate, MorbidityBounds, Outcome, OutcomePanel, PlaceboResult, PLACEBO_NAMES,
};
use crate::registry::{load_registry, select_cohorts, write_registry, Arm, AttritionStep, Cohorts, PatientId, Registry};
use crate::synth::{emit_placebo_covariates, generate, GroundTruth};

/// File in the output directory recording the hash of the config that owns it.
pub const HASH_FILE: &str = "config.hash";

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Replace outputs written under a different config hash.
    pub force: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileChecksum {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateManifest {
    pub config_hash: String,
    pub seed: u64,
    pub n_patients: usize,
    pub n_treated: usize,
    pub n_comparison: usize,
    pub files: Vec<FileChecksum>,
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Stage { .. } => e,
        Error::NoCommonSupport { stratum } => e.in_stage(name, Some(stratum)),
        other => other.in_stage(name, None),
    })
}

fn sha256_file(path: &Path) -> Result<FileChecksum> {
    let bytes = std::fs::read(path)?;
    Ok(FileChecksum {
        path: path.display().to_string(),
        sha256: hex::encode(Sha256::digest(&bytes)),
        bytes: bytes.len() as u64,
    })
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    Ok(())
}

/// Claims `dir` for `hash`. A directory owned by another config is only
/// taken over with `force`.
fn claim_dir(dir: &Path, hash: &str, opts: RunOptions) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let marker = dir.join(HASH_FILE);
    if let Ok(existing) = std::fs::read_to_string(&marker) {
        let existing = existing.trim();
        if existing != hash && !opts.force {
            return Err(Error::Config(format!(
                "{} holds outputs of config {existing}; this config is {hash} (use --force or another output directory)",
                dir.display()
            )));
        }
    }
    std::fs::write(marker, format!("{hash}\n"))?;
    Ok(())
}

/// Writes a comma-separated artifact preceded by a `# config_hash=` line.
fn write_csv_artifact(path: &Path, hash: &str, body: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
    let mut buf = format!("# config_hash={hash}\n").into_bytes();
    body(&mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value).map_err(std::io::Error::from)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

fn write_placebo_csv(path: &Path, rows: &[crate::synth::PlaceboCovariates]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["patient_id", "psa_level", "gleason_score", "metastasis_at_diagnosis"])?;
    for r in rows {
        w.write_record([
            r.patient_id.0.clone(),
            format!("{:.12e}", r.psa_level),
            format!("{}", r.gleason_score),
            format!("{}", r.metastasis_at_diagnosis),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads placebo covariates; empty cells are missing.
pub fn read_placebo_csv(path: &Path) -> Result<BTreeMap<PatientId, [Option<f64>; 3]>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = BTreeMap::new();
    for rec in r.records() {
        let rec = rec?;
        let id = PatientId(rec.get(0).unwrap_or_default().to_string());
        let mut v = [None; 3];
        for (k, slot) in v.iter_mut().enumerate() {
            let cell = rec.get(k + 1).unwrap_or_default().trim();
            if !cell.is_empty() {
                *slot = Some(
                    cell.parse::<f64>()
                        .map_err(|e| Error::InvalidInput(format!("placebo value {cell:?} for {id}: {e}")))?,
                );
            }
        }
        out.insert(id, v);
    }
    Ok(out)
}

/// Simulates a registry and writes it with its ground truth, placebo
/// covariates and a manifest of checksums next to `paths.registry`.
pub fn cmd_generate(cfg: &PipelineConfig, opts: RunOptions) -> Result<GenerateManifest> {
    let hash = cfg.hash();
    let paths = &cfg.paths;
    create_parent(&paths.registry)?;
    let manifest_path = manifest_path(cfg);
    if let Ok(text) = std::fs::read_to_string(&manifest_path) {
        if let Ok(old) = serde_json::from_str::<GenerateManifest>(&text) {
            if old.config_hash != hash && !opts.force {
                return Err(Error::Config(format!(
                    "{} was generated under config {}; this config is {hash} (use --force)",
                    manifest_path.display(),
                    old.config_hash
                )));
            }
        }
    }
    let data = stage("generate", generate(&cfg.generator()))?;
    {
        let mut f = BufWriter::new(File::create(&paths.registry)?);
        write_registry(&data.registry, &mut f)?;
        f.flush()?;
    }
    create_parent(&paths.truth)?;
    {
        let mut f = BufWriter::new(File::create(&paths.truth)?);
        data.truth.write_jsonl(&mut f)?;
        f.flush()?;
    }
    create_parent(&paths.placebo)?;
    write_placebo_csv(&paths.placebo, &emit_placebo_covariates(&data.registry, &data.truth))?;
    let manifest = GenerateManifest {
        config_hash: hash,
        seed: cfg.seed,
        n_patients: data.registry.len(),
        n_treated: data.cohorts.treated.len(),
        n_comparison: data.cohorts.comparison.len(),
        files: [&paths.registry, &paths.truth, &paths.placebo]
            .into_iter()
            .map(|p| sha256_file(p))
            .collect::<Result<_>>()?,
    };
    write_json(&manifest_path, &manifest)?;
    info!(
        "generated {} patients ({} treated, {} comparison)",
        manifest.n_patients, manifest.n_treated, manifest.n_comparison
    );
    Ok(manifest)
}

fn manifest_path(cfg: &PipelineConfig) -> PathBuf {
    let dir = cfg.paths.registry.parent().map(Path::to_path_buf).unwrap_or_default();
    dir.join("manifest.json")
}

/// Registry, cohorts and covariates shared by the analysis commands.
pub struct Prepared {
    pub registry: Registry,
    pub registry_sha256: String,
    pub cohorts: Cohorts,
    pub table: CovariateTable,
}

pub fn load_registry_file(path: &Path) -> Result<(Registry, String)> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Config(format!("cannot read registry {}: {e}", path.display())))?;
    let sha = hex::encode(Sha256::digest(&bytes));
    let registry = load_registry(BufReader::new(&bytes[..]))?;
    Ok((registry, sha))
}

fn load_severity(cfg: &PipelineConfig) -> Result<Option<HashMap<PatientId, Vec<f64>>>> {
    if !cfg.uses_severity_oracle() {
        return Ok(None);
    }
    let f = File::open(&cfg.paths.truth).map_err(|e| {
        Error::Config(format!(
            "balancing spec uses SEV_ columns but truth file {} is unreadable: {e}",
            cfg.paths.truth.display()
        ))
    })?;
    Ok(Some(GroundTruth::read_jsonl(BufReader::new(f))?.severity_map()))
}

pub fn prepare(cfg: &PipelineConfig) -> Result<Prepared> {
    let (registry, registry_sha256) = stage("load", load_registry_file(&cfg.paths.registry))?;
    let cohorts = stage("select", select_cohorts(&registry, &cfg.eligibility))?;
    let severity = stage("covariates", load_severity(cfg))?;
    let table = stage(
        "covariates",
        build_covariates(&registry, &cohorts, &cfg.covariates, severity.as_ref()),
    )?;
    Ok(Prepared {
        registry,
        registry_sha256,
        cohorts,
        table,
    })
}

/// Cache key of the balancing stage: registry contents plus every setting
/// the stage reads.
fn balance_key(cfg: &PipelineConfig, registry_sha256: &str) -> String {
    #[derive(Serialize)]
    struct Key<'a> {
        registry: &'a str,
        eligibility: &'a crate::registry::EligibilityConfig,
        covariates: &'a crate::covariates::CovariateConfig,
        balance: &'a crate::balance::BalanceConfig,
        truth: Option<String>,
    }
    let truth = if cfg.uses_severity_oracle() {
        std::fs::read(&cfg.paths.truth).ok().map(|b| hex::encode(Sha256::digest(b)))
    } else {
        None
    };
    let key = Key {
        registry: registry_sha256,
        eligibility: &cfg.eligibility,
        covariates: &cfg.covariates,
        balance: &cfg.balance,
        truth,
    };
    let text = serde_json::to_string(&key).expect("key serializes");
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Balances every stratum, reusing a cached result with the same key.
pub fn balance_stage(cfg: &PipelineConfig, prep: &Prepared) -> Result<BalanceResults> {
    let key = balance_key(cfg, &prep.registry_sha256);
    let cache = cfg.paths.out_dir.join("cache").join(format!("balance-{}.json", &key[..16]));
    if let Ok(f) = File::open(&cache) {
        if let Ok(b) = serde_json::from_reader::<_, BalanceResults>(BufReader::new(f)) {
            info!("balancing reused from {}", cache.display());
            return Ok(b);
        }
        warn!("unreadable cache {}; recomputing", cache.display());
    }
    let b = stage(
        "balance",
        balance_all(&prep.table, &prep.registry, &prep.cohorts, &cfg.balance),
    )?;
    if b.strata.is_empty() {
        let first = b.skipped.first().map(|s| s.stratum_w);
        return Err(Error::InvalidInput("no stratum could be balanced; analysis cannot proceed".into())
            .in_stage("balance", first));
    }
    create_parent(&cache)?;
    let tmp = cache.with_extension("tmp");
    {
        let mut f = BufWriter::new(File::create(&tmp)?);
        serde_json::to_writer(&mut f, &b).map_err(std::io::Error::from)?;
        f.flush()?;
    }
    std::fs::rename(tmp, &cache)?;
    Ok(b)
}

/// Attrition chains extended by the balancing stage.
pub fn attrition(cohorts: &Cohorts, balance: &BalanceResults, min_stratum: u32, max_stratum: u32) -> Vec<AttritionStep> {
    let mut steps = cohorts.attrition.clone();
    let n_t = cohorts.treated.len();
    let in_range = cohorts
        .treated
        .iter()
        .filter(|t| t.dtp_months.is_some_and(|d| (min_stratum..=max_stratum).contains(&d)))
        .count();
    let balanced: usize = balance.strata.values().map(|s| s.treated_ids.len()).sum();
    steps.push(AttritionStep {
        arm: Arm::Treated,
        step: format!("DTP within strata {min_stratum}-{max_stratum}"),
        input: n_t,
        output: in_range,
    });
    steps.push(AttritionStep {
        arm: Arm::Treated,
        step: "stratum balanced".into(),
        input: in_range,
        output: balanced,
    });
    let mut used: Vec<&PatientId> = balance
        .strata
        .values()
        .flat_map(|s| s.comparison_ids.iter().zip(&s.solution.weights).filter(|(_, w)| **w > 0.0).map(|(id, _)| id))
        .collect();
    used.sort();
    used.dedup();
    steps.push(AttritionStep {
        arm: Arm::Comparison,
        step: "positive weight in a balanced stratum".into(),
        input: cohorts.comparison.len(),
        output: used.len(),
    });
    steps
}

pub struct Estimates {
    pub panel: OutcomePanel,
    pub estimates: Vec<EffectEstimate>,
    pub bounds: Vec<MorbidityBounds>,
    pub subgroups: Vec<SubgroupRow>,
    pub cll: Option<crate::estimate::cll::HazardFit>,
    pub warnings: Vec<String>,
}

/// Main WLS estimates for every outcome and period, then the optional
/// bounds, subgroup and hazard-model analyses.
pub fn estimate_stage(cfg: &PipelineConfig, prep: &Prepared, balance: &BalanceResults) -> Result<Estimates> {
    let panel = stage("outcomes", derive_outcomes(&prep.registry, balance, &cfg.horizons))?;
    let est = &cfg.estimator;
    let mut estimates = stage("estimate", main_estimates(&panel, est))?;
    let mut warnings = Vec::new();

    let mut bounds = Vec::new();
    if cfg.analyses.bounds {
        for o in [Outcome::Pain, Outcome::Sre] {
            for m in 1..=cfg.horizons.get(o) {
                let b = stage("bounds", morbidity_bounds(&panel, o, m, est))?;
                if b.mortality_contrast == 0.0 {
                    continue;
                }
                if !crate::estimate::MorbidityBounds::monotone(&panel, o, m, est) {
                    warnings.push(format!(
                        "{o} month {m}: imputation not monotone; complete case may fall outside the bounds"
                    ));
                }
                estimates.push(b.lower.clone());
                estimates.push(b.upper.clone());
                bounds.push(b);
            }
        }
    }

    let mut subgroups = Vec::new();
    if cfg.analyses.subgroups {
        for o in Outcome::ALL {
            for m in 1..=cfg.horizons.get(o) {
                match subgroup_analysis(&panel, o, m, est) {
                    Ok(g) => {
                        estimates.push(g.lower.clone());
                        estimates.push(g.upper.clone());
                        subgroups.push(SubgroupRow {
                            outcome: o.name().into(),
                            month: m,
                            result: g,
                        });
                    }
                    Err(e) => {
                        warnings.push(format!("{o} month {m}: subgroup analysis skipped: {e}"));
                    }
                }
            }
        }
    }

    let mut cll = None;
    if cfg.analyses.cll {
        let mut c = cfg.cll.clone();
        c.horizon = c.horizon.min(cfg.horizons.dead);
        let fit = stage("cll", fit_cll(&panel, est.weighting, &c))?;
        if !fit.converged {
            warnings.push(format!(
                "hazard model stopped after {} iterations (gradient norm {:.2e})",
                fit.iterations, fit.gradient_norm
            ));
        }
        let threshold = crate::estimate::bonferroni_threshold(est.family_size, est.overall_alpha)?;
        estimates.push(EffectEstimate::new(
            Outcome::Dead.name(),
            c.horizon,
            fit.tau,
            fit.tau_se,
            threshold,
            AnalysisTag::Cll,
        ));
        cll = Some(fit);
    }
    Ok(Estimates {
        panel,
        estimates,
        bounds,
        subgroups,
        cll,
        warnings,
    })
}

/// Placebo regression on the pre-treatment covariates in `paths.placebo`.
pub fn placebo_stage(cfg: &PipelineConfig, panel: &OutcomePanel) -> Result<PlaceboResult> {
    let values = stage("placebo", read_placebo_csv(&cfg.paths.placebo))?;
    stage("placebo", placebo_test(panel, &values, &cfg.estimator))
}

fn balance_warnings(b: &BalanceResults) -> Vec<String> {
    let mut w: Vec<String> = b
        .skipped
        .iter()
        .map(|s| format!("stratum {} skipped: {}", s.stratum_w, s.reason))
        .collect();
    for s in b.strata.values().filter(|s| !s.solution.converged) {
        w.push(format!(
            "stratum {}: tolerance not reached (max violation {:.2e}); kept with max SMD {:.3}",
            s.stratum_w, s.solution.max_constraint_violation, s.report.max_abs_smd_after
        ));
    }
    w
}

fn write_balance_outputs(dir: &Path, hash: &str, b: &BalanceResults) -> Result<()> {
    write_csv_artifact(&dir.join("balance.csv"), hash, |buf| {
        write_balance_csv(b.strata.values().map(|s| &s.report), buf)
    })?;
    write_csv_artifact(&dir.join("weights.csv"), hash, |buf| b.write_weight_profiles(buf))?;
    #[derive(Serialize)]
    struct Summary<'a> {
        config_hash: &'a str,
        strata: Vec<StratumSummary>,
        skipped: &'a [crate::balance::SkippedStratum],
    }
    write_json(
        &dir.join("balance_summary.json"),
        &Summary {
            config_hash: hash,
            strata: b.strata.values().map(StratumSummary::from).collect(),
            skipped: &b.skipped,
        },
    )
}

fn write_placebo_output(dir: &Path, hash: &str, p: &PlaceboResult) -> Result<()> {
    write_csv_artifact(&dir.join("placebo.csv"), hash, |buf| write_estimates_csv(&p.estimates, buf))
}

/// Balancing only: writes balance tables, weight profiles and the summary.
pub fn cmd_balance(cfg: &PipelineConfig, opts: RunOptions) -> Result<BalanceResults> {
    let hash = cfg.hash();
    claim_dir(&cfg.paths.out_dir, &hash, opts)?;
    let prep = prepare(cfg)?;
    let b = balance_stage(cfg, &prep)?;
    write_balance_outputs(&cfg.paths.out_dir, &hash, &b)?;
    Ok(b)
}

/// Effect estimation (reusing cached balancing): writes `estimates.csv`.
pub fn cmd_estimate(cfg: &PipelineConfig, opts: RunOptions) -> Result<Vec<EffectEstimate>> {
    let hash = cfg.hash();
    claim_dir(&cfg.paths.out_dir, &hash, opts)?;
    let prep = prepare(cfg)?;
    let b = balance_stage(cfg, &prep)?;
    let e = estimate_stage(cfg, &prep, &b)?;
    write_csv_artifact(&cfg.paths.out_dir.join("estimates.csv"), &hash, |buf| {
        write_estimates_csv(&e.estimates, buf)
    })?;
    Ok(e.estimates)
}

/// Placebo test only: writes `placebo.csv`.
pub fn cmd_placebo(cfg: &PipelineConfig, opts: RunOptions) -> Result<PlaceboResult> {
    let hash = cfg.hash();
    claim_dir(&cfg.paths.out_dir, &hash, opts)?;
    let prep = prepare(cfg)?;
    let b = balance_stage(cfg, &prep)?;
    let panel = stage("outcomes", derive_outcomes(&prep.registry, &b, &cfg.horizons))?;
    let p = placebo_stage(cfg, &panel)?;
    write_placebo_output(&cfg.paths.out_dir, &hash, &p)?;
    Ok(p)
}

/// The full protocol. Writes every table, `summary.json` and `report.txt`.
pub fn cmd_run(cfg: &PipelineConfig, opts: RunOptions) -> Result<RunReport> {
    let hash = cfg.hash();
    let dir = cfg.paths.out_dir.clone();
    claim_dir(&dir, &hash, opts)?;
    std::fs::write(dir.join("config.toml"), format!("# config_hash={hash}\n{}", cfg.to_toml()?))?;

    let prep = prepare(cfg)?;
    let b = balance_stage(cfg, &prep)?;
    let mut warnings = balance_warnings(&b);
    let e = estimate_stage(cfg, &prep, &b)?;
    warnings.extend(e.warnings.iter().cloned());

    let placebo = if cfg.analyses.placebo {
        if cfg.paths.placebo.exists() {
            let p = placebo_stage(cfg, &e.panel)?;
            if p.hidden_bias {
                warnings.push("placebo test rejects at the Bonferroni threshold: possible hidden bias".into());
            }
            Some(p)
        } else {
            warnings.push(format!(
                "placebo file {} missing; placebo test skipped",
                cfg.paths.placebo.display()
            ));
            None
        }
    } else {
        None
    };

    let rows: Vec<_> = prep.table.rows.clone();
    let report = RunReport {
        config_hash: hash.clone(),
        config: cfg.clone(),
        attrition: attrition(&prep.cohorts, &b, cfg.balance.min_stratum, cfg.balance.max_stratum),
        descriptive: descriptive_table(&rows),
        factor_model: prep.table.factor_model.clone(),
        strata: b.strata.values().map(StratumSummary::from).collect(),
        skipped_strata: b.skipped.clone(),
        estimates: e.estimates.clone(),
        bounds: e.bounds.clone(),
        subgroups: e.subgroups.clone(),
        placebo: placebo.clone(),
        cll: e.cll.clone(),
        warnings,
    };
    debug_assert!(attrition_telescopes(&report.attrition));

    write_balance_outputs(&dir, &hash, &b)?;
    write_csv_artifact(&dir.join("estimates.csv"), &hash, |buf| write_estimates_csv(&e.estimates, buf))?;
    let _ = std::fs::remove_file(dir.join("placebo.csv"));
    if let Some(p) = &placebo {
        write_placebo_output(&dir, &hash, p)?;
    }
    write_csv_artifact(&dir.join("attrition.csv"), &hash, |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["arm", "step", "input", "output"])?;
        for a in &report.attrition {
            let arm = match a.arm {
                Arm::Treated => "treated",
                Arm::Comparison => "comparison",
            };
            w.write_record([arm, a.step.as_str(), &a.input.to_string(), &a.output.to_string()])?;
        }
        w.flush()?;
        Ok(())
    })?;
    write_json(&dir.join("summary.json"), &report)?;
    std::fs::write(dir.join("report.txt"), report.render())?;
    Ok(report)
}

/// Reads `summary.json` from the output directory.
pub fn load_report(dir: &Path) -> Result<RunReport> {
    let f = File::open(dir.join("summary.json"))
        .map_err(|e| Error::Config(format!("no run summary in {}: {e}", dir.display())))?;
    serde_json::from_reader(BufReader::new(f)).map_err(|e| Error::InvalidInput(format!("summary.json: {e}")))
}

/// Timeline of one patient, with weights from the cached balancing if any.
pub fn cmd_timeline(cfg: &PipelineConfig, id: &PatientId) -> Result<String> {
    let (registry, sha) = stage("load", load_registry_file(&cfg.paths.registry))?;
    let cohorts = select_cohorts(&registry, &cfg.eligibility).ok();
    let cache = cfg
        .paths
        .out_dir
        .join("cache")
        .join(format!("balance-{}.json", &balance_key(cfg, &sha)[..16]));
    let balance: Option<BalanceResults> = File::open(cache)
        .ok()
        .and_then(|f| serde_json::from_reader(BufReader::new(f)).ok());
    render_timeline(&registry, cohorts.as_ref(), balance.as_ref(), id)
}

/// Names of the placebo covariates, in file column order.
pub fn placebo_names() -> [&'static str; 3] {
    PLACEBO_NAMES
}
