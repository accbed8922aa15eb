//! Effect estimation on the balanced strata: per-month WLS with robust
//! standard errors, Bonferroni control, morbidity bounds, subgroups, placebo
//! covariates and the complementary log-log duration model.

pub mod cll;
pub mod outcomes;
pub mod wls;

pub use cll::{fit_cll, fit_cll_obs, CllConfig, CllObs, HazardFit};
pub use outcomes::{derive_outcomes, outcome_series, Horizons, Outcome, OutcomePanel, OutcomeSeries, PanelRow};
pub use wls::{fit_stratified, p_value, wls_hc0, Covariance, Obs, StratifiedFit};

use std::collections::BTreeMap;
use std::io::Write;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registry::PatientId;

pub const Z_95: f64 = 1.96;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnalysisTag {
    Main,
    BoundLo,
    BoundHi,
    SubgroupLo,
    SubgroupHi,
    Placebo,
    Cll,
}

impl AnalysisTag {
    pub fn name(self) -> &'static str {
        match self {
            AnalysisTag::Main => "main",
            AnalysisTag::BoundLo => "bound_lo",
            AnalysisTag::BoundHi => "bound_hi",
            AnalysisTag::SubgroupLo => "subgroup_lo",
            AnalysisTag::SubgroupHi => "subgroup_hi",
            AnalysisTag::Placebo => "placebo",
            AnalysisTag::Cll => "cll",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Entropy-balancing weights.
    #[default]
    Balanced,
    /// Every comparison in a stratum weighted equally.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    pub covariance: Covariance,
    pub weighting: Weighting,
    pub family_size: usize,
    pub overall_alpha: f64,
    /// Quantile of treated DTP splitting the subgroups.
    pub subgroup_quantile: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            covariance: Covariance::Hc0,
            weighting: Weighting::Balanced,
            family_size: 3,
            overall_alpha: 0.05,
            subgroup_quantile: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub outcome: String,
    /// Period after treatment; 0 for analyses without a month dimension.
    pub month: u32,
    pub beta: f64,
    pub se: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub p: f64,
    pub threshold: f64,
    pub significant: bool,
    pub degenerate: bool,
    pub n_treated: usize,
    pub n_comparison: usize,
    pub tag: AnalysisTag,
}

impl EffectEstimate {
    pub fn new(outcome: &str, month: u32, beta: f64, se: f64, threshold: f64, tag: AnalysisTag) -> Self {
        let p = p_value(beta, se);
        EffectEstimate {
            outcome: outcome.to_string(),
            month,
            beta,
            se,
            ci_lo: beta - Z_95 * se,
            ci_hi: beta + Z_95 * se,
            p,
            threshold,
            significant: p < threshold,
            degenerate: !(se > 0.0),
            n_treated: 0,
            n_comparison: 0,
            tag,
        }
    }

    fn from_fit(outcome: &str, month: u32, fit: &StratifiedFit, threshold: f64, tag: AnalysisTag) -> Self {
        let mut e = EffectEstimate::new(outcome, month, fit.beta, fit.se, threshold, tag);
        e.degenerate |= fit.degenerate;
        e.n_treated = fit.n_treated;
        e.n_comparison = fit.n_comparison;
        e
    }
}

/// Per-test significance threshold `overall / family_size`.
pub fn bonferroni_threshold(family_size: usize, overall: f64) -> Result<f64> {
    if family_size == 0 {
        return Err(Error::Config("Bonferroni family size must be at least 1".into()));
    }
    Ok(overall / family_size as f64)
}

/// Threshold and decisions (`p < threshold`) for a family of tests.
pub fn bonferroni(p_values: &[f64], family_size: usize, overall: f64) -> Result<(f64, Vec<bool>)> {
    let t = bonferroni_threshold(family_size, overall)?;
    Ok((t, p_values.iter().map(|&p| p < t).collect()))
}

fn observations(
    panel: &OutcomePanel,
    weighting: Weighting,
    keep: impl Fn(&PanelRow) -> bool,
    y: impl Fn(&PanelRow) -> Option<f64>,
) -> Vec<Obs> {
    panel
        .rows
        .iter()
        .filter(|r| keep(r))
        .filter_map(|r| {
            Some(Obs {
                stratum: r.stratum,
                treated: r.treated(),
                weight: match weighting {
                    Weighting::Balanced => r.weight,
                    Weighting::Uniform => r.uniform_weight,
                },
                y: y(r)?,
                cluster: r.cluster,
            })
        })
        .collect()
}

/// ATET of `outcome` at period `m`; rows with an undefined outcome are left out.
pub fn wls_atet(panel: &OutcomePanel, outcome: Outcome, m: u32, cfg: &EstimatorConfig) -> Result<EffectEstimate> {
    panel.check(outcome, m)?;
    let obs = observations(panel, cfg.weighting, |_| true, |r| r.value(outcome, m));
    let fit = fit_stratified(&obs, cfg.covariance)?;
    let t = bonferroni_threshold(cfg.family_size, cfg.overall_alpha)?;
    Ok(EffectEstimate::from_fit(outcome.name(), m, &fit, t, AnalysisTag::Main))
}

/// Main estimates for every outcome and period up to its horizon.
pub fn main_estimates(panel: &OutcomePanel, cfg: &EstimatorConfig) -> Result<Vec<EffectEstimate>> {
    let mut out = Vec::new();
    for o in Outcome::ALL {
        for m in 1..=panel.horizons.get(o) {
            out.push(wls_atet(panel, o, m, cfg)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MorbidityBounds {
    pub lower: EffectEstimate,
    pub upper: EffectEstimate,
    pub complete_case: EffectEstimate,
    /// Treated minus comparison share of patients dead before the period
    /// starts, on the imputed sample: the gap between the two imputations.
    pub mortality_contrast: f64,
    /// Outcome value imputed for the dead in the lower-bound fit.
    pub lower_imputed: u8,
}

impl MorbidityBounds {
    /// Whether the complete-case estimate is guaranteed to lie between the
    /// bounds: imputing 1 for the dead must move the arm with more deaths at
    /// least as far up as the other, and imputing 0 at least as far down.
    pub fn monotone(panel: &OutcomePanel, outcome: Outcome, m: u32, cfg: &EstimatorConfig) -> bool {
        let mut by_stratum: BTreeMap<(u32, bool), (f64, f64, f64)> = BTreeMap::new();
        for r in &panel.rows {
            let w = match cfg.weighting {
                Weighting::Balanced => r.weight,
                Weighting::Uniform => r.uniform_weight,
            };
            let e = by_stratum.entry((r.stratum, r.treated())).or_default();
            e.0 += w;
            match r.value(outcome, m) {
                Some(y) => e.1 += w * y,
                None => e.2 += w,
            }
        }
        let mut arms = [(0.0, 0.0, 0.0); 2];
        for (&(_, t), v) in &by_stratum {
            let a = &mut arms[usize::from(t)];
            a.0 += v.0;
            a.1 += v.1;
            a.2 += v.2;
        }
        let stats = |a: (f64, f64, f64)| {
            let dead = a.2 / a.0;
            let alive = a.0 - a.2;
            let ybar = if alive > 0.0 { a.1 / alive } else { 0.0 };
            (dead, ybar)
        };
        let (d_c, y_c) = stats(arms[0]);
        let (d_t, y_t) = stats(arms[1]);
        let ((d_hi, y_hi), (d_lo, y_lo)) = if d_t >= d_c { ((d_t, y_t), (d_c, y_c)) } else { ((d_c, y_c), (d_t, y_t)) };
        d_hi * y_hi >= d_lo * y_lo && d_hi * (1.0 - y_hi) >= d_lo * (1.0 - y_lo)
    }
}

/// Bounds for a morbidity outcome: the dead are imputed 1 in one fit and 0
/// in the other. The fit with the smaller estimate is the lower bound; this
/// coincides with choosing by the sign of the mortality difference, because
/// the two estimates differ by exactly that difference.
pub fn morbidity_bounds(panel: &OutcomePanel, outcome: Outcome, m: u32, cfg: &EstimatorConfig) -> Result<MorbidityBounds> {
    if outcome == Outcome::Dead {
        return Err(Error::InvalidInput("bounds apply to PAIN and SRE".into()));
    }
    panel.check(outcome, m)?;
    let t = bonferroni_threshold(cfg.family_size, cfg.overall_alpha)?;
    let fit_with = |imputed: f64| -> Result<StratifiedFit> {
        let obs = observations(panel, cfg.weighting, |_| true, |r| Some(r.value(outcome, m).unwrap_or(imputed)));
        fit_stratified(&obs, cfg.covariance)
    };
    let one = fit_with(1.0)?;
    let zero = fit_with(0.0)?;
    let cc = wls_atet(panel, outcome, m, cfg)?;
    let (lo, hi, lower_imputed) = if one.beta <= zero.beta { (one.clone(), zero.clone(), 1) } else { (zero.clone(), one.clone(), 0) };
    Ok(MorbidityBounds {
        lower: EffectEstimate::from_fit(outcome.name(), m, &lo, t, AnalysisTag::BoundLo),
        upper: EffectEstimate::from_fit(outcome.name(), m, &hi, t, AnalysisTag::BoundHi),
        complete_case: cc,
        mortality_contrast: one.beta - zero.beta,
        lower_imputed,
    })
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q.clamp(0.0, 1.0);
    let i = h.floor() as usize;
    let frac = h - i as f64;
    if i + 1 >= n {
        sorted[n - 1]
    } else {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupEstimates {
    pub split: f64,
    pub lower: EffectEstimate,
    pub upper: EffectEstimate,
}

/// Refits on strata below and at-or-above the DTP split (median by default).
pub fn subgroup_analysis(panel: &OutcomePanel, outcome: Outcome, m: u32, cfg: &EstimatorConfig) -> Result<SubgroupEstimates> {
    panel.check(outcome, m)?;
    let mut dtp: Vec<f64> = panel.rows.iter().filter(|r| r.treated()).map(|r| f64::from(r.stratum)).collect();
    if dtp.is_empty() {
        return Err(Error::InvalidInput("no treated patients".into()));
    }
    dtp.sort_by(f64::total_cmp);
    if dtp[0] == dtp[dtp.len() - 1] {
        return Err(Error::InvalidInput("all treated share one DTP; no subgroup split".into()));
    }
    let split = quantile(&dtp, cfg.subgroup_quantile);
    let t = bonferroni_threshold(cfg.family_size, cfg.overall_alpha)?;
    let fit = |upper: bool, tag| -> Result<EffectEstimate> {
        let obs = observations(
            panel,
            cfg.weighting,
            |r| (f64::from(r.stratum) >= split) == upper,
            |r| r.value(outcome, m),
        );
        let f = fit_stratified(&obs, cfg.covariance)?;
        Ok(EffectEstimate::from_fit(outcome.name(), m, &f, t, tag))
    };
    Ok(SubgroupEstimates {
        split,
        lower: fit(false, AnalysisTag::SubgroupLo)?,
        upper: fit(true, AnalysisTag::SubgroupHi)?,
    })
}

pub const PLACEBO_NAMES: [&str; 3] = ["PSA", "GLEASON", "METS_AT_DX"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaceboResult {
    pub estimates: Vec<EffectEstimate>,
    pub threshold: f64,
    /// Any placebo covariate shows a significant difference.
    pub hidden_bias: bool,
    pub skipped: Vec<String>,
}

/// Treats each pre-treatment placebo covariate as an outcome in the
/// stratified regression; a Bonferroni family of three.
pub fn placebo_test(
    panel: &OutcomePanel,
    values: &BTreeMap<PatientId, [Option<f64>; 3]>,
    cfg: &EstimatorConfig,
) -> Result<PlaceboResult> {
    let threshold = bonferroni_threshold(PLACEBO_NAMES.len(), cfg.overall_alpha)?;
    let mut estimates = Vec::new();
    let mut skipped = Vec::new();
    for (k, name) in PLACEBO_NAMES.iter().enumerate() {
        let obs = observations(panel, cfg.weighting, |_| true, |r| values.get(&r.patient_id).and_then(|v| v[k]));
        let has_both = obs.iter().any(|o| o.treated) && obs.iter().any(|o| !o.treated);
        if !has_both {
            warn!("placebo covariate {name} missing for one arm; skipped");
            skipped.push(name.to_string());
            continue;
        }
        let fit = fit_stratified(&obs, cfg.covariance)?;
        estimates.push(EffectEstimate::from_fit(name, 0, &fit, threshold, AnalysisTag::Placebo));
    }
    let hidden_bias = estimates.iter().any(|e| e.significant);
    if hidden_bias {
        warn!("placebo test rejects: possible hidden bias");
    }
    Ok(PlaceboResult {
        estimates,
        threshold,
        hidden_bias,
        skipped,
    })
}

/// Tidy estimate table.
pub fn write_estimates_csv<'a, W: Write>(estimates: impl IntoIterator<Item = &'a EffectEstimate>, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "outcome",
        "month",
        "beta",
        "se",
        "ci_lo",
        "ci_hi",
        "p",
        "threshold",
        "significant",
        "analysis_tag",
    ])?;
    for e in estimates {
        w.write_record([
            e.outcome.clone(),
            e.month.to_string(),
            format!("{:.12e}", e.beta),
            format!("{:.12e}", e.se),
            format!("{:.12e}", e.ci_lo),
            format!("{:.12e}", e.ci_hi),
            format!("{:.12e}", e.p),
            format!("{:.12e}", e.threshold),
            e.significant.to_string(),
            e.tag.name().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bonferroni_thresholds() {
        assert!((bonferroni_threshold(3, 0.05).unwrap() - 0.0166667).abs() < 1e-7);
        assert_eq!(bonferroni_threshold(1, 0.05).unwrap(), 0.05);
        let (_, d) = bonferroni(&[0.0166, 0.0168], 3, 0.05).unwrap();
        assert_eq!(d, [true, false]);
        assert!(bonferroni_threshold(0, 0.05).is_err());
    }

    #[test]
    fn median_split() {
        assert_eq!(quantile(&[6.0, 12.0, 24.0, 36.0], 0.5), 18.0);
        assert_eq!(quantile(&[1.0, 2.0, 3.0], 0.5), 2.0);
    }

    #[test]
    fn interval_is_symmetric() {
        let e = EffectEstimate::new("DEAD", 3, 0.1, 0.05, 0.05 / 3.0, AnalysisTag::Main);
        assert!((e.ci_hi - e.beta - Z_95 * e.se).abs() < 1e-15);
        assert!((e.beta - e.ci_lo - Z_95 * e.se).abs() < 1e-15);
    }
}
