//! Per-stratum entropy balancing of comparison patients against the treated
//! patients whose NAM started in month `w`.

pub mod constraints;
pub mod dual;
pub mod lp;
pub mod report;

pub use constraints::{build_constraints, ConstraintSet, ConstraintSpec, DropReason, DroppedConstraint};
pub use dual::{kl_divergence, solve_dual, DualFailure, SolverConfig, WeightSolution};
pub use report::{balance_report, smd, write_balance_csv, BalanceReport, CovariateBalance};

use std::collections::BTreeMap;
use std::io::Write;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariates::features::{diagnostic_columns, history_columns, stratum_matrix};
use crate::covariates::{CovariateTable, PatientCovariates};
use crate::error::{Error, Result};
use crate::registry::{censor_dead_controls, Arm, Cohorts, PatientId, Registry};

pub const MIN_STRATUM: u32 = 4;
pub const MAX_STRATUM: u32 = 36;

/// SMD threshold below which an unconverged solution is still usable.
pub const SMD_THRESHOLD: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BalanceConfig {
    pub spec: ConstraintSpec,
    pub solver: SolverConfig,
    pub min_stratum: u32,
    pub max_stratum: u32,
    /// Additional columns reported in the diagnostics besides the
    /// pre-diagnosis block and the trajectory fields.
    pub extra_diagnostics: Vec<String>,
    /// Also report every trajectory field at each month before `w`.
    pub history_diagnostics: bool,
}

impl Default for BalanceConfig {
    fn default() -> Self {
        BalanceConfig {
            spec: ConstraintSpec::default(),
            solver: SolverConfig::default(),
            min_stratum: MIN_STRATUM,
            max_stratum: MAX_STRATUM,
            extra_diagnostics: Vec::new(),
            history_diagnostics: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpecLevel {
    Full,
    MeansOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumBalance {
    pub stratum_w: u32,
    pub level: SpecLevel,
    pub treated_ids: Vec<PatientId>,
    /// Comparisons alive at the start of month `w`, aligned with the weights.
    pub comparison_ids: Vec<PatientId>,
    pub constraint_labels: Vec<String>,
    pub dropped: Vec<DroppedConstraint>,
    pub solution: WeightSolution,
    pub report: BalanceReport,
}

impl StratumBalance {
    /// Usable when converged, or when every diagnostic SMD is below the threshold.
    pub fn usable(&self) -> bool {
        self.solution.converged || self.report.max_abs_smd_after < SMD_THRESHOLD
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedStratum {
    pub stratum_w: u32,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct BalanceResults {
    pub strata: BTreeMap<u32, StratumBalance>,
    pub skipped: Vec<SkippedStratum>,
    /// Treated patients with DTP below the first balanced stratum.
    pub excluded_early_treated: usize,
    /// Treated patients with DTP above the last balanced stratum.
    pub excluded_late_treated: usize,
}

fn columns_of(rows: &[Vec<f64>], k: usize) -> Vec<Vec<f64>> {
    (0..k).map(|j| rows.iter().map(|r| r[j]).collect()).collect()
}

fn attempt(
    w: u32,
    treated: &[&PatientCovariates],
    comparison: &[&PatientCovariates],
    spec: &ConstraintSpec,
    level: SpecLevel,
    cfg: &BalanceConfig,
) -> Result<StratumBalance> {
    let cols = spec.columns();
    let t = stratum_matrix(treated, &cols, w)?;
    let c = stratum_matrix(comparison, &cols, w)?;
    let set = build_constraints(&t, &c, spec)?;
    if set.labels.len() >= comparison.len() {
        return Err(Error::InvalidInput(format!(
            "{} constraints for {} comparisons",
            set.labels.len(),
            comparison.len()
        )));
    }
    let n_t = treated.len() as f64;
    let raw = solve_dual(&set.features, &set.targets, None, n_t, &set.tolerances, &cfg.solver);
    let mut solution = dual::check_result(raw, w)?;

    // Moments implied by collinear constraints must hold as well.
    for (label, target, values) in &set.implied {
        let mean = values.iter().zip(&solution.weights).map(|(v, w)| v * w).sum::<f64>() / n_t;
        let m = values.iter().sum::<f64>() / values.len() as f64;
        let sd = (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / values.len() as f64).sqrt();
        let v = (mean - target).abs() / if sd > 0.0 { sd } else { 1.0 };
        if v > spec.tolerance_for(label) {
            solution.converged = false;
            solution.max_constraint_violation = solution.max_constraint_violation.max(v);
        }
    }

    // The stratum's covariate set comes first; only it enters the SMD rule.
    let mut names = diagnostic_columns(w);
    for name in &cols {
        if !names.contains(name) {
            names.push(name.clone());
        }
    }
    let core = names.len();
    let history = if cfg.history_diagnostics { history_columns(w) } else { Vec::new() };
    for extra in cfg.extra_diagnostics.iter().chain(&history) {
        if !names.contains(extra) {
            names.push(extra.clone());
        }
    }
    let constrained: Vec<bool> = names.iter().map(|n| set.labels.contains(n)).collect();
    let td = stratum_matrix(treated, &names, w)?;
    let cd = stratum_matrix(comparison, &names, w)?;
    let mut report = balance_report(
        w,
        &names,
        &constrained,
        &columns_of(&td, names.len()),
        &columns_of(&cd, names.len()),
        &solution.weights,
    );
    report.max_abs_smd_after = report.covariates[..core]
        .iter()
        .map(|c| c.smd_after.abs())
        .fold(0.0, f64::max);
    Ok(StratumBalance {
        stratum_w: w,
        level,
        treated_ids: treated.iter().map(|r| r.patient_id.clone()).collect(),
        comparison_ids: comparison.iter().map(|r| r.patient_id.clone()).collect(),
        constraint_labels: set.labels,
        dropped: set.dropped,
        solution,
        report,
    })
}

/// Balances one stratum, falling back from the full spec to base-covariate
/// means when the full problem has no common support or yields an unusable
/// solution.
pub fn balance_stratum(
    w: u32,
    treated: &[&PatientCovariates],
    comparison: &[&PatientCovariates],
    cfg: &BalanceConfig,
) -> Result<StratumBalance> {
    if !(1..=MAX_STRATUM).contains(&w) {
        return Err(Error::InvalidInput(format!("stratum {w} outside 1..={MAX_STRATUM}")));
    }
    if treated.is_empty() {
        return Err(Error::InvalidInput(format!("stratum {w} has no treated patients")));
    }
    let full = attempt(w, treated, comparison, &cfg.spec, SpecLevel::Full, cfg);
    match &full {
        Ok(s) if s.usable() => return full,
        Ok(s) => info!(
            "stratum {w}: full constraint set unconverged (max SMD {:.3}); retrying with means only",
            s.report.max_abs_smd_after
        ),
        Err(e) => info!("stratum {w}: {e}; retrying with means only"),
    }
    let means = attempt(w, treated, comparison, &cfg.spec.means_only(), SpecLevel::MeansOnly, cfg);
    match (full, means) {
        (_, Ok(m)) if m.usable() => Ok(m),
        (Ok(f), Ok(m)) => Ok(if f.report.max_abs_smd_after <= m.report.max_abs_smd_after { f } else { m }),
        (Ok(f), Err(_)) => Ok(f),
        (Err(_), Ok(m)) => Ok(m),
        (Err(e), Err(_)) => Err(e),
    }
}

/// Balances every stratum `min_stratum..=max_stratum` with treated patients.
/// Comparisons enter stratum `w` when alive at the start of month `w`.
pub fn balance_all(
    table: &CovariateTable,
    registry: &Registry,
    cohorts: &Cohorts,
    cfg: &BalanceConfig,
) -> Result<BalanceResults> {
    if cfg.min_stratum < 1 || cfg.min_stratum > cfg.max_stratum || cfg.max_stratum > MAX_STRATUM {
        return Err(Error::Config(format!(
            "strata {}..={} outside 1..={MAX_STRATUM}",
            cfg.min_stratum, cfg.max_stratum
        )));
    }
    let treated: Vec<&PatientCovariates> = table.arm(Arm::Treated).collect();
    let mut by_w: BTreeMap<u32, Vec<&PatientCovariates>> = BTreeMap::new();
    let mut early = 0;
    let mut late = 0;
    for r in treated {
        let Some(d) = r.dtp_months else { continue };
        if d < cfg.min_stratum {
            early += 1;
        } else if d > cfg.max_stratum {
            late += 1;
        } else {
            by_w.entry(d).or_default().push(r);
        }
    }
    if early > 0 {
        info!("{early} treated patients with DTP below {} excluded", cfg.min_stratum);
    }
    let mut skipped = Vec::new();
    for w in cfg.min_stratum..=cfg.max_stratum {
        if !by_w.contains_key(&w) {
            info!("stratum {w} has no treated patients; skipped");
            skipped.push(SkippedStratum {
                stratum_w: w,
                reason: "no treated patients".into(),
            });
        }
    }

    let jobs: Vec<(u32, Vec<&PatientCovariates>)> = by_w.into_iter().collect();
    let results: Vec<(u32, Result<StratumBalance>)> = jobs
        .par_iter()
        .map(|(w, t)| {
            let alive = censor_dead_controls(*w, &cohorts.comparison, registry);
            let comparison: Vec<&PatientCovariates> =
                alive.iter().filter_map(|c| table.get(&c.patient_id)).collect();
            (*w, balance_stratum(*w, t, &comparison, cfg))
        })
        .collect();

    let mut strata = BTreeMap::new();
    for (w, r) in results {
        match r {
            Ok(s) => {
                if !s.usable() {
                    warn!(
                        "stratum {w}: balance not reached (max SMD {:.3}); stratum dropped",
                        s.report.max_abs_smd_after
                    );
                    skipped.push(SkippedStratum {
                        stratum_w: w,
                        reason: format!("unconverged, max SMD {:.3}", s.report.max_abs_smd_after),
                    });
                } else {
                    strata.insert(w, s);
                }
            }
            Err(e) => {
                warn!("stratum {w} skipped: {e}");
                skipped.push(SkippedStratum {
                    stratum_w: w,
                    reason: e.to_string(),
                });
            }
        }
    }
    skipped.sort_by_key(|s| s.stratum_w);
    Ok(BalanceResults {
        strata,
        skipped,
        excluded_early_treated: early,
        excluded_late_treated: late,
    })
}

impl BalanceResults {
    /// Weight of each comparison patient in every stratum it belongs to.
    pub fn weight_profiles(&self) -> BTreeMap<PatientId, Vec<(u32, f64)>> {
        let mut out: BTreeMap<PatientId, Vec<(u32, f64)>> = BTreeMap::new();
        for (w, s) in &self.strata {
            for (id, &wt) in s.comparison_ids.iter().zip(&s.solution.weights) {
                out.entry(id.clone()).or_default().push((*w, wt));
            }
        }
        out
    }

    pub fn weight_profile(&self, id: &PatientId) -> Vec<(u32, f64)> {
        self.strata
            .iter()
            .filter_map(|(w, s)| {
                let i = s.comparison_ids.binary_search(id).ok()?;
                Some((*w, s.solution.weights[i]))
            })
            .collect()
    }

    /// Long-format weight profiles: `patient_id, stratum, weight`.
    pub fn write_weight_profiles<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["patient_id", "stratum", "weight"])?;
        for (id, profile) in self.weight_profiles() {
            for (s, wt) in profile {
                w.write_record([id.0.clone(), s.to_string(), format!("{wt:.12e}")])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}
