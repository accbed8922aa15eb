//! Pre-diagnosis descriptive table: per-arm means (SD) and the difference
//! with significance stars from Welch's t-test.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::elixhauser::ElixCategory;
use super::PatientCovariates;
use crate::registry::Arm;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptiveRow {
    pub label: String,
    pub comparison_mean: f64,
    pub comparison_sd: f64,
    pub treated_mean: f64,
    pub treated_sd: f64,
    /// Comparison mean minus treated mean.
    pub difference: f64,
    pub p_value: f64,
}

impl DescriptiveRow {
    pub fn stars(&self) -> &'static str {
        match self.p_value {
            p if p < 0.01 => "***",
            p if p < 0.05 => "**",
            p if p < 0.1 => "*",
            _ => "",
        }
    }
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = xs.iter().sum::<f64>() / n;
    let v = if xs.len() > 1 {
        xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, v.sqrt())
}

/// Two-sided Welch t-test p-value.
pub fn welch_p(a: &[f64], b: &[f64]) -> f64 {
    let (ma, sa) = mean_sd(a);
    let (mb, sb) = mean_sd(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let va = sa * sa / na;
    let vb = sb * sb / nb;
    let se = (va + vb).sqrt();
    if !(se > 0.0) {
        return if ma == mb { 1.0 } else { 0.0 };
    }
    let t = (ma - mb) / se;
    let df = (va + vb).powi(2) / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df.max(1.0)).expect("valid t distribution");
    2.0 * (1.0 - dist.cdf(t.abs()))
}

type Extractor = fn(&PatientCovariates) -> f64;

fn b(x: bool) -> f64 {
    if x {
        1.0
    } else {
        0.0
    }
}

const ROWS: [(&str, Extractor); 15] = [
    ("Age at diagnosis", |r| r.pre.age_at_diagnosis),
    ("Number of visits 1 month bf. diagnosis", |r| f64::from(r.pre.visits.v1m)),
    ("Number of visits 1-6 months bf. diagnosis", |r| f64::from(r.pre.visits.v1_6m)),
    ("Number of visits 6-12 months bf. diagnosis", |r| f64::from(r.pre.visits.v6_12m)),
    ("Number of visits 1-60 months bf. diagnosis", |r| f64::from(r.pre.visits.v1_60m)),
    ("Elixhauser index 0, at diagnosis", |r| b(r.pre.elix_at_dx_cat == ElixCategory::Zero)),
    ("Elixhauser index 1-4, at diagnosis", |r| b(r.pre.elix_at_dx_cat == ElixCategory::OneToFour)),
    ("Elixhauser index >=5, at diagnosis", |r| b(r.pre.elix_at_dx_cat == ElixCategory::FiveOrMore)),
    ("Elixhauser index 0, 12 months bf. diagnosis", |r| b(r.pre.elix_12m_cat == ElixCategory::Zero)),
    ("Elixhauser index 1-4, 12 months bf. diagnosis", |r| b(r.pre.elix_12m_cat == ElixCategory::OneToFour)),
    ("Elixhauser index >=5, 12 months bf. diagnosis", |r| b(r.pre.elix_12m_cat == ElixCategory::FiveOrMore)),
    ("Less than secondary school education", |r| b(r.pre.edu_below)),
    ("Secondary school education", |r| b(r.pre.edu_secondary)),
    ("Living with a partner", |r| b(r.pre.partnered)),
    ("Born in the Nordic countries", |r| b(r.pre.nordic_born)),
];

pub fn descriptive_table(rows: &[PatientCovariates]) -> Vec<DescriptiveRow> {
    ROWS.iter()
        .map(|(label, f)| {
            let c: Vec<f64> = rows.iter().filter(|r| r.arm == Arm::Comparison).map(f).collect();
            let t: Vec<f64> = rows.iter().filter(|r| r.arm == Arm::Treated).map(f).collect();
            let (cm, cs) = mean_sd(&c);
            let (tm, ts) = mean_sd(&t);
            DescriptiveRow {
                label: label.to_string(),
                comparison_mean: cm,
                comparison_sd: cs,
                treated_mean: tm,
                treated_sd: ts,
                difference: cm - tm,
                p_value: welch_p(&c, &t),
            }
        })
        .collect()
}

pub fn render_descriptive(rows: &[DescriptiveRow]) -> String {
    let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(11).max(11);
    let mut s = String::new();
    let _ = writeln!(s, "{:width$} {:>16} {:>16} {:>12}", "Description", "SoC", "NAM", "Difference");
    for r in rows {
        let _ = writeln!(
            s,
            "{:width$} {:>16} {:>16} {:>12}",
            r.label,
            format!("{:.2} ({:.2})", r.comparison_mean, r.comparison_sd),
            format!("{:.2} ({:.2})", r.treated_mean, r.treated_sd),
            format!("{:.2}{}", r.difference, r.stars()),
        );
    }
    s.push_str("Standard deviations within parentheses. * p<0.1; ** p<0.05; *** p<0.01.\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn welch_matches_reference() {
        // Reference value from a standard statistics package.
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [2.0, 4.0, 6.0, 8.0, 10.0, 12.0];
        let p = welch_p(&a, &b);
        assert!((p - 0.049284338).abs() < 1e-6, "{p}");
    }

    #[test]
    fn identical_constant_groups() {
        assert_eq!(welch_p(&[1.0, 1.0], &[1.0, 1.0, 1.0]), 1.0);
    }
}
