//! Covariate construction: the pre-diagnosis block and the monthly
//! trajectory block for every cohort member.

pub mod descriptive;
pub mod elixhauser;
pub mod factor;
pub mod features;
pub mod impute;
pub mod prediag;
pub mod trajectory;

pub use elixhauser::{elixhauser, elixhauser_map, ElixCategory};
pub use factor::{fit_factor_model, FactorModel};
pub use impute::{impute_education, ImputeConfig, TieBreak};
pub use prediag::{visit_windows, PreDiagnosisCovariates, VisitWindows};
pub use trajectory::{adt_cumulative_ddd, adt_status, build_trajectory, AdtStatus, TrajectoryVector};

use std::collections::HashMap;

use log::{info, warn};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::registry::{ses_names, Arm, Cohorts, PatientId, PatientRecord, Registry, SES_BASE, SES_VARS};

pub const N_FACTORS: usize = 5;
pub const MAX_MONTHS: u32 = 36;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct CovariateConfig {
    pub impute: ImputeConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientCovariates {
    pub patient_id: PatientId,
    pub arm: Arm,
    pub dtp_months: Option<u32>,
    pub education_imputed: bool,
    pub pre: PreDiagnosisCovariates,
    /// Months `0..MAX_MONTHS` after diagnosis.
    pub trajectory: Vec<TrajectoryVector>,
    /// Latent severity by month since diagnosis, when an oracle is available.
    pub severity: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct CovariateTable {
    pub rows: Vec<PatientCovariates>,
    pub factor_model: FactorModel,
    index: HashMap<PatientId, usize>,
}

impl CovariateTable {
    pub fn get(&self, id: &PatientId) -> Option<&PatientCovariates> {
        self.index.get(id).map(|&i| &self.rows[i])
    }

    pub fn arm(&self, arm: Arm) -> impl Iterator<Item = &PatientCovariates> {
        self.rows.iter().filter(move |r| r.arm == arm)
    }
}

/// Socioeconomic row with missing values filled from the other years; `None`
/// entries remain where a measure is missing in all three years.
fn ses_row(p: &PatientRecord) -> Vec<Option<f64>> {
    (0..SES_VARS)
        .map(|i| p.ses_panel.filled(i % SES_BASE.len(), i / SES_BASE.len()))
        .collect()
}

/// Builds covariates for all cohort members. The factor model is fitted on
/// the complete socioeconomic rows of the pooled cohort; education is imputed
/// from cohort members with observed education.
pub fn build_covariates(
    registry: &Registry,
    cohorts: &Cohorts,
    cfg: &CovariateConfig,
    severity: Option<&HashMap<PatientId, Vec<f64>>>,
) -> Result<CovariateTable> {
    let members: Vec<(&PatientRecord, Arm, Option<u32>)> = cohorts
        .treated
        .iter()
        .chain(&cohorts.comparison)
        .filter_map(|c| registry.get(&c.patient_id).map(|p| (p, c.arm, c.dtp_months)))
        .collect();

    let ses: Vec<Vec<Option<f64>>> = members.iter().map(|(p, _, _)| ses_row(p)).collect();
    let complete: Vec<&Vec<Option<f64>>> = ses.iter().filter(|r| r.iter().all(Option::is_some)).collect();
    let data = DMatrix::from_fn(complete.len(), SES_VARS, |i, j| complete[i][j].unwrap_or_default());
    let factor_model = fit_factor_model(&data, ses_names(), N_FACTORS)?;
    info!(
        "factor model: {} rows, cumulative variance {:.3}",
        complete.len(),
        factor_model.cumulative_var[N_FACTORS - 1]
    );

    let donors: Vec<_> = members
        .iter()
        .filter_map(|(p, _, _)| p.demographics.education.map(|e| (impute::donor_features(p), e)))
        .collect();
    let missing = members.len() - donors.len();
    let pool = if missing > 0 {
        Some(impute::DonorPool::new(&donors, &cfg.impute)?)
    } else {
        None
    };
    if missing > 0 {
        info!("imputing education for {missing} patients from {} donors", donors.len());
    }

    let rows: Vec<PatientCovariates> = members
        .par_iter()
        .zip(ses.par_iter())
        .map(|(&(p, arm, dtp), ses)| {
            let filled: Vec<f64> = ses
                .iter()
                .enumerate()
                .map(|(j, v)| v.unwrap_or(factor_model.means[j]))
                .collect();
            let s = factor_model.score(&filled);
            let scores = [s[0], s[1], s[2], s[3], s[4]];
            let (education, imputed) = match (p.demographics.education, &pool) {
                (Some(e), _) => (e, false),
                (None, Some(pool)) => (pool.impute(&impute::donor_features(p), &cfg.impute), true),
                (None, None) => unreachable!("pool exists when education is missing"),
            };
            PatientCovariates {
                patient_id: p.patient_id.clone(),
                arm,
                dtp_months: dtp,
                education_imputed: imputed,
                pre: PreDiagnosisCovariates::build(p, education, scores),
                trajectory: trajectory::trajectory_through(p, MAX_MONTHS),
                severity: severity.and_then(|m| m.get(&p.patient_id).cloned()),
            }
        })
        .collect();

    if severity.is_some() && rows.iter().any(|r| r.severity.is_none()) {
        warn!("severity oracle missing for some patients");
    }
    let index = rows.iter().enumerate().map(|(i, r)| (r.patient_id.clone(), i)).collect();
    Ok(CovariateTable {
        rows,
        factor_model,
        index,
    })
}
