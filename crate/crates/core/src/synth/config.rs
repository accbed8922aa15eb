use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registry::EligibilityConfig;

/// Latent disease severity: a Gaussian random walk in months since diagnosis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProgressionConfig {
    pub initial_mean: f64,
    pub initial_sd: f64,
    /// Added to initial severity per year of age above 70.
    pub age_effect: f64,
    pub drift: f64,
    pub volatility: f64,
}

impl Default for ProgressionConfig {
    fn default() -> Self {
        ProgressionConfig {
            initial_mean: 0.0,
            initial_sd: 1.0,
            age_effect: 0.02,
            drift: 0.04,
            volatility: 0.25,
        }
    }
}

/// Monthly probability `1 - exp(-exp(intercept + severity * s))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HazardModel {
    pub intercept: f64,
    pub severity: f64,
}

impl HazardModel {
    pub fn linear(&self, s: f64) -> f64 {
        self.intercept + self.severity * s
    }

    pub fn prob(&self, s: f64) -> f64 {
        cloglog_inv(self.linear(s))
    }
}

pub fn cloglog_inv(eta: f64) -> f64 {
    -(-eta.exp()).exp_m1()
}

/// NAM prescription hazard for treated-era patients. The severity slope is
/// multiplied by the scenario's confounding strength.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AssignmentConfig {
    pub intercept: f64,
    pub severity: f64,
}

impl Default for AssignmentConfig {
    fn default() -> Self {
        AssignmentConfig {
            intercept: -4.2,
            severity: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutcomeModel {
    pub death: HazardModel,
    pub pain: HazardModel,
    pub sre: HazardModel,
    /// Added to the SRE linear predictor once skeletal metastases are present.
    pub sre_skeletal: f64,
}

impl Default for OutcomeModel {
    fn default() -> Self {
        OutcomeModel {
            death: HazardModel {
                intercept: -4.6,
                severity: 0.8,
            },
            pain: HazardModel {
                intercept: -2.6,
                severity: 0.5,
            },
            sre: HazardModel {
                intercept: -4.8,
                severity: 0.5,
            },
            sre_skeletal: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectScale {
    /// Additive shift of the complementary log-log linear predictor.
    #[default]
    LogHazard,
    /// Additive shift of the monthly event probability, clamped to [0, 1].
    Probability,
}

/// Treatment effects applied from the treatment month onward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrueEffects {
    pub scale: EffectScale,
    pub dead: f64,
    pub pain: f64,
    pub sre: f64,
    /// Change in every effect per month of DTP above 18 months.
    pub dtp_slope: f64,
}

impl Default for TrueEffects {
    fn default() -> Self {
        TrueEffects {
            scale: EffectScale::LogHazard,
            dead: 0.0,
            pain: 0.0,
            sre: 0.0,
            dtp_slope: 0.0,
        }
    }
}

impl TrueEffects {
    pub fn at(&self, base: f64, dtp: u32) -> f64 {
        if base == 0.0 && self.dtp_slope == 0.0 {
            return 0.0;
        }
        base + self.dtp_slope * (f64::from(dtp) - 18.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub n_treated_target: usize,
    pub n_comparison_target: usize,
    pub seed: u64,
    pub windows: EligibilityConfig,
    pub progression: ProgressionConfig,
    pub assignment: AssignmentConfig,
    pub outcome_model: OutcomeModel,
    pub true_effects: TrueEffects,
    pub confounding_strength: f64,
    /// Months of potential outcomes recorded after treatment.
    pub horizon_months: u32,
    /// Upper bound on treated-era patients simulated per treated target.
    pub max_draws_per_treated: usize,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            n_treated_target: 200,
            n_comparison_target: 3000,
            seed: 20_240_601,
            windows: EligibilityConfig::default(),
            progression: ProgressionConfig::default(),
            assignment: AssignmentConfig::default(),
            outcome_model: OutcomeModel::default(),
            true_effects: TrueEffects::default(),
            confounding_strength: 1.0,
            horizon_months: 36,
            max_draws_per_treated: 200,
        }
    }
}

impl ScenarioConfig {
    /// Cohort sizes of the registry study the protocol was written for.
    pub fn full_scale() -> Self {
        ScenarioConfig {
            n_treated_target: 1285,
            n_comparison_target: 19_456,
            ..ScenarioConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_treated_target == 0 || self.n_comparison_target == 0 {
            return Err(Error::Config("scenario targets must be positive".into()));
        }
        if !(self.confounding_strength >= 0.0) {
            return Err(Error::Config("confounding_strength must be >= 0".into()));
        }
        if !(self.progression.initial_sd >= 0.0 && self.progression.volatility >= 0.0) {
            return Err(Error::Config("severity dispersion must be >= 0".into()));
        }
        if self.horizon_months == 0 || self.horizon_months > 36 {
            return Err(Error::Config("horizon_months must be in [1, 36]".into()));
        }
        let hazard = cloglog_inv(self.assignment.intercept + 6.0 * self.assignment.severity.abs() * self.confounding_strength);
        if !(hazard > 1e-12) {
            return Err(Error::Config("NAM assignment hazard is zero; treated target unreachable".into()));
        }
        let w = &self.windows;
        if w.treated_start > w.treated_end || w.comparison_start > w.comparison_end {
            return Err(Error::Config("diagnosis window inverted".into()));
        }
        Ok(())
    }
}
