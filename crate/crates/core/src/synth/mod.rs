//! Synthetic registries with confounded treatment assignment and known
//! potential outcomes.
//!
//! Each patient has a latent severity random walk from diagnosis. Severity
//! drives admissions, metastasis codes, androgen-deprivation dispensing,
//! death, pain medication and skeletal events. Patients diagnosed in the
//! treated window receive a NAM with a monthly hazard increasing in severity
//! (scaled by the confounding strength). Potential outcomes under both arms
//! share the same monthly uniforms, so individual effects are monotone in the
//! injected effect size.

mod config;
mod patient;
mod placebo;
mod truth;

pub use config::{
    cloglog_inv, AssignmentConfig, EffectScale, HazardModel, OutcomeModel, ProgressionConfig, ScenarioConfig,
    TrueEffects,
};
pub use patient::FOLLOW_UP_MONTHS;
pub use placebo::{emit_placebo_covariates, PlaceboCovariates};
pub use truth::{GroundTruth, Outcome, PatientTruth, PotentialOutcomes};

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::registry::{select_cohorts, Cohorts, Registry};
use patient::{simulate, Era, SimulatedPatient};

pub struct SyntheticData {
    pub registry: Registry,
    pub cohorts: Cohorts,
    pub truth: GroundTruth,
}

const TREATED_ERA_STREAM: u64 = 1 << 48;
const COMPARISON_ERA_STREAM: u64 = 2 << 48;

fn simulate_one(cfg: &ScenarioConfig, era: Era, index: u64) -> SimulatedPatient {
    let stream = match era {
        Era::Treated => TREATED_ERA_STREAM,
        Era::Comparison => COMPARISON_ERA_STREAM,
    } | index;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    simulate(cfg, era, index, stream, &mut rng)
}

/// Treated-era patients in index order, stopping at the one that completes
/// the treated target. Independent of batch size and thread count.
fn simulate_treated_era(cfg: &ScenarioConfig) -> Result<Vec<SimulatedPatient>> {
    let target = cfg.n_treated_target;
    let limit = (target * cfg.max_draws_per_treated) as u64;
    let batch = (target as u64 * 4).max(256);
    let mut out: Vec<SimulatedPatient> = Vec::new();
    let mut treated = 0usize;
    let mut next = 0u64;
    while treated < target {
        if next >= limit {
            return Err(Error::Config(format!(
                "treated target {target} unreachable: only {treated} treated among {limit} simulated patients"
            )));
        }
        let end = (next + batch).min(limit);
        let sims: Vec<SimulatedPatient> =
            (next..end).into_par_iter().map(|i| simulate_one(cfg, Era::Treated, i)).collect();
        next = end;
        for s in sims {
            let is_treated = s.dtp.is_some();
            out.push(s);
            if is_treated {
                treated += 1;
                if treated == target {
                    break;
                }
            }
        }
    }
    Ok(out)
}

/// Generates a registry, its cohort assignment and the ground truth.
pub fn generate(cfg: &ScenarioConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let treated_era = simulate_treated_era(cfg)?;
    let comparison_era: Vec<SimulatedPatient> = (0..cfg.n_comparison_target as u64)
        .into_par_iter()
        .map(|i| simulate_one(cfg, Era::Comparison, i))
        .collect();
    info!(
        "simulated {} treated-era and {} comparison-era patients",
        treated_era.len(),
        comparison_era.len()
    );

    let (records, mut truths): (Vec<_>, Vec<_>) = treated_era
        .into_iter()
        .chain(comparison_era)
        .map(|s| (s.record, s.truth))
        .unzip();
    truths.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
    let registry = Registry::new(records)?;
    let cohorts = select_cohorts(&registry, &cfg.windows)?;
    Ok(SyntheticData {
        registry,
        cohorts,
        truth: GroundTruth {
            seed: cfg.seed,
            patients: truths,
        },
    })
}

/// Sample ATET of `outcome` at period `m` among the treated of `cfg`, computed
/// from potential outcomes without building the registry.
pub fn scenario_atet(cfg: &ScenarioConfig, outcome: Outcome, m: u32) -> Result<f64> {
    cfg.validate()?;
    let truths: Vec<PatientTruth> = simulate_treated_era(cfg)?.into_iter().map(|s| s.truth).collect();
    GroundTruth {
        seed: cfg.seed,
        patients: truths,
    }
    .atet(outcome, m)
    .ok_or_else(|| Error::Config(format!("period {m} beyond the scenario horizon")))
}

/// Finds the effect size for `outcome` giving treated-sample ATET `target` at
/// period `m`, by bisection on the scenario's effect scale.
pub fn calibrate_effect(cfg: &ScenarioConfig, outcome: Outcome, m: u32, target: f64) -> Result<f64> {
    let (mut lo, mut hi) = match cfg.true_effects.scale {
        EffectScale::LogHazard => (-6.0, 6.0),
        EffectScale::Probability => (-1.0, 1.0),
    };
    let mut trial = cfg.clone();
    let mut eval = |x: f64| -> Result<f64> {
        match outcome {
            Outcome::Dead => trial.true_effects.dead = x,
            Outcome::Pain => trial.true_effects.pain = x,
            Outcome::Sre => trial.true_effects.sre = x,
        }
        scenario_atet(&trial, outcome, m)
    };
    if eval(lo)? > target || eval(hi)? < target {
        return Err(Error::Config(format!("ATET {target} not reachable for {}", outcome.name())));
    }
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if eval(mid)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}
