//! Balance diagnostics: standardized mean differences and weight dispersion.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateBalance {
    pub name: String,
    pub treated_mean: f64,
    pub treated_sd: f64,
    pub comparison_mean: f64,
    pub weighted_mean: f64,
    pub smd_before: f64,
    pub smd_after: f64,
    /// Whether the covariate's mean is one of the imposed constraints.
    pub constrained: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    /// Stored as `null` when unbounded.
    #[serde(with = "unbounded")]
    pub hi: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub stratum_w: u32,
    pub n_treated: usize,
    pub n_comparison: usize,
    pub covariates: Vec<CovariateBalance>,
    pub weight_histogram: Vec<HistogramBin>,
    pub share_above_001: f64,
    /// Kish effective sample size of the comparison weights.
    pub effective_comparisons: f64,
    /// Largest absolute SMD over the stratum's covariate set.
    pub max_abs_smd_after: f64,
}

mod unbounded {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

pub const HISTOGRAM_EDGES: [f64; 7] = [0.0, 1e-4, 1e-3, 1e-2, 1e-1, 1.0, f64::INFINITY];

fn mean_sd(xs: &[f64], w: Option<&[f64]>) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let ones;
    let w = match w {
        Some(w) => w,
        None => {
            ones = vec![1.0; n];
            &ones
        }
    };
    let ws: f64 = w.iter().sum();
    let m = xs.iter().zip(w).map(|(x, wi)| x * wi).sum::<f64>() / ws;
    let v = xs.iter().zip(w).map(|(x, wi)| wi * (x - m).powi(2)).sum::<f64>() / ws;
    (m, v.sqrt())
}

/// Standardized mean difference `(treated - comparison) / sd`, where `sd` is
/// the treated SD, falling back to the pooled SD when the treated column is
/// constant; zero when both arms are constant.
pub fn smd(treated_mean: f64, treated_sd: f64, comparison_mean: f64, comparison_sd: f64) -> f64 {
    let diff = treated_mean - comparison_mean;
    if treated_sd > 0.0 {
        return diff / treated_sd;
    }
    let pooled = (0.5 * (treated_sd.powi(2) + comparison_sd.powi(2))).sqrt();
    if pooled > 0.0 {
        diff / pooled
    } else {
        0.0
    }
}

/// Builds the report from named columns of both arms (column-major) and
/// the comparison weights.
pub fn balance_report(
    stratum_w: u32,
    names: &[String],
    constrained: &[bool],
    treated: &[Vec<f64>],
    comparison: &[Vec<f64>],
    weights: &[f64],
) -> BalanceReport {
    let covariates: Vec<CovariateBalance> = names
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let (tm, ts) = mean_sd(&treated[k], None);
            let (cm, cs) = mean_sd(&comparison[k], None);
            let (wm, _) = mean_sd(&comparison[k], Some(weights));
            CovariateBalance {
                name: name.clone(),
                treated_mean: tm,
                treated_sd: ts,
                comparison_mean: cm,
                weighted_mean: wm,
                smd_before: smd(tm, ts, cm, cs),
                smd_after: smd(tm, ts, wm, cs),
                constrained: constrained[k],
            }
        })
        .collect();
    let mut weight_histogram: Vec<HistogramBin> = HISTOGRAM_EDGES
        .windows(2)
        .map(|e| HistogramBin {
            lo: e[0],
            hi: e[1],
            count: 0,
        })
        .collect();
    for &w in weights {
        if let Some(bin) = weight_histogram.iter_mut().find(|b| w >= b.lo && w < b.hi) {
            bin.count += 1;
        }
    }
    let n_c = weights.len();
    let above = weights.iter().filter(|&&w| w > 0.01).count();
    let s1: f64 = weights.iter().sum();
    let s2: f64 = weights.iter().map(|w| w * w).sum();
    BalanceReport {
        stratum_w,
        n_treated: treated.first().map_or(0, Vec::len),
        n_comparison: n_c,
        max_abs_smd_after: covariates.iter().map(|c| c.smd_after.abs()).fold(0.0, f64::max),
        covariates,
        weight_histogram,
        share_above_001: if n_c > 0 { above as f64 / n_c as f64 } else { 0.0 },
        effective_comparisons: if s2 > 0.0 { s1 * s1 / s2 } else { 0.0 },
    }
}

/// One row per stratum and covariate.
pub fn write_balance_csv<'a, W: Write>(reports: impl IntoIterator<Item = &'a BalanceReport>, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "stratum",
        "covariate",
        "constrained",
        "treated_mean",
        "treated_sd",
        "comparison_mean",
        "weighted_mean",
        "smd_before",
        "smd_after",
    ])?;
    for r in reports {
        for c in &r.covariates {
            w.write_record([
                r.stratum_w.to_string(),
                c.name.clone(),
                u8::from(c.constrained).to_string(),
                format!("{:.10}", c.treated_mean),
                format!("{:.10}", c.treated_sd),
                format!("{:.10}", c.comparison_mean),
                format!("{:.10}", c.weighted_mean),
                format!("{:.10}", c.smd_before),
                format!("{:.10}", c.smd_after),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smd_uses_treated_sd() {
        assert_eq!(smd(1.0, 2.0, 0.0, 10.0), 0.5);
        // Constant treated column: pooled SD sqrt((0 + 4) / 2).
        assert!((smd(1.0, 0.0, 0.0, 2.0) - 1.0 / 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(smd(1.0, 0.0, 1.0, 0.0), 0.0);
    }

    #[test]
    fn report_counts_weights() {
        let names = vec!["A".to_string()];
        let r = balance_report(
            5,
            &names,
            &[true],
            &[vec![1.0, 3.0]],
            &[vec![0.0, 2.0, 4.0]],
            &[0.5, 1.0, 0.5],
        );
        assert_eq!(r.covariates[0].weighted_mean, 2.0);
        assert_eq!(r.covariates[0].smd_after, 0.0);
        assert_eq!(r.covariates[0].smd_before, 0.0);
        assert_eq!(r.share_above_001, 1.0);
        assert_eq!(r.weight_histogram[4].count, 2);
        assert_eq!(r.weight_histogram[5].count, 1);
        assert!((r.effective_comparisons - 4.0 / 1.5).abs() < 1e-12);
    }
}
