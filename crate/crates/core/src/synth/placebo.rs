use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::patient::gaussian;
use super::truth::GroundTruth;
use crate::registry::{PatientId, Registry};

const PLACEBO_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Pre-treatment covariates used as placebo outcomes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaceboCovariates {
    pub patient_id: PatientId,
    /// Natural log of PSA (ng/mL) at diagnosis.
    pub psa_level: f64,
    pub gleason_score: f64,
    pub metastasis_at_diagnosis: f64,
}

pub const PSA_BASELINE: f64 = 2.3;
pub const GLEASON_BASELINE: f64 = 7.0;
pub const METS_BASELINE_LOGIT: f64 = -1.0;

/// Draws the three covariates from severity at diagnosis plus noise from the
/// patient's own placebo stream. Patients absent from `truth` are skipped.
pub fn emit_placebo_covariates(registry: &Registry, truth: &GroundTruth) -> Vec<PlaceboCovariates> {
    registry
        .patients()
        .iter()
        .filter_map(|p| truth.get(&p.patient_id))
        .map(|t| {
            let s0 = t.severity.first().copied().unwrap_or(0.0);
            let mut rng = ChaCha8Rng::seed_from_u64(truth.seed ^ PLACEBO_SALT);
            rng.set_stream(t.stream);
            let psa = PSA_BASELINE + 0.5 * s0 + gaussian(&mut rng, 1.2);
            let gleason = (GLEASON_BASELINE + 0.5 * s0 + gaussian(&mut rng, 1.0)).round().clamp(6.0, 10.0);
            let p_mets = 1.0 / (1.0 + (-(METS_BASELINE_LOGIT + 1.5 * s0)).exp());
            let mets = if rng.gen::<f64>() < p_mets { 1.0 } else { 0.0 };
            PlaceboCovariates {
                patient_id: t.patient_id.clone(),
                psa_level: psa,
                gleason_score: gleason,
                metastasis_at_diagnosis: mets,
            }
        })
        .collect()
}
