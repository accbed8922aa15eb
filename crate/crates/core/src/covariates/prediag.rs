//! Pre-diagnosis covariate block.

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::elixhauser::{elixhauser_map, ElixCategory};
use crate::months::{days_after, MONTH_DAYS};
use crate::registry::{Education, InpatientVisit, Marital, PatientRecord};

/// Comorbidity look-back window, in months, ending at the evaluation date.
pub const ELIX_LOOKBACK_MONTHS: i64 = 60;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct VisitWindows {
    pub v1m: u32,
    pub v1_6m: u32,
    pub v6_12m: u32,
    pub v1_60m: u32,
}

/// Admissions in (dx-1m, dx], (dx-6m, dx-1m], (dx-12m, dx-6m] and (dx-60m, dx-1m].
pub fn visit_windows(visits: &[InpatientVisit], diagnosis_date: NaiveDate) -> VisitWindows {
    let mut out = VisitWindows::default();
    for v in visits {
        let before = -days_after(diagnosis_date, v.admission_date);
        if before < 0 {
            continue;
        }
        let m = MONTH_DAYS;
        if before < m {
            out.v1m += 1;
        } else {
            if before < 6 * m {
                out.v1_6m += 1;
            } else if before < 12 * m {
                out.v6_12m += 1;
            }
            if before < 60 * m {
                out.v1_60m += 1;
            }
        }
    }
    out
}

/// Elixhauser group count over visits admitted in `[end - lookback, end)`.
pub fn elixhauser_before(visits: &[InpatientVisit], end_exclusive: NaiveDate) -> u32 {
    let map = elixhauser_map();
    let start = end_exclusive - chrono::Duration::days(ELIX_LOOKBACK_MONTHS * MONTH_DAYS);
    visits
        .iter()
        .filter(|v| v.admission_date >= start && v.admission_date < end_exclusive)
        .fold(0u32, |acc, v| acc | map.mask_of(v.icd10_codes.iter().map(String::as_str)))
        .count_ones()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreDiagnosisCovariates {
    pub age_at_diagnosis: f64,
    pub visits: VisitWindows,
    pub elix_at_dx: u32,
    pub elix_12m: u32,
    pub elix_at_dx_cat: ElixCategory,
    pub elix_12m_cat: ElixCategory,
    pub edu_below: bool,
    pub edu_secondary: bool,
    pub partnered: bool,
    pub nordic_born: bool,
    pub factor_scores: [f64; 5],
}

pub const PREDIAG_COLUMNS: [&str; 19] = [
    "ALDER",
    "VISITS_BFD_1",
    "VISITS_BFD_6",
    "VISITS_BFD_12",
    "VISITS_BFD_60",
    "ELIX_DX_1_4",
    "ELIX_DX_5",
    "ELIX_12M_1_4",
    "ELIX_12M_5",
    "UTBNFORGYMN",
    "UTBNGYMN",
    "CIVIL",
    "NORDIC",
    "FACTOR1",
    "FACTOR2",
    "FACTOR3",
    "FACTOR4",
    "FACTOR5",
    "ELIX_DX",
];

impl PreDiagnosisCovariates {
    /// Builds the block. `education` is the observed or imputed level.
    pub fn build(p: &PatientRecord, education: Education, factor_scores: [f64; 5]) -> Self {
        let dx = p.diagnosis_date;
        let elix_at_dx = elixhauser_before(&p.visits, dx + chrono::Duration::days(1));
        let elix_12m = elixhauser_before(
            &p.visits,
            dx - chrono::Duration::days(12 * MONTH_DAYS) + chrono::Duration::days(1),
        );
        PreDiagnosisCovariates {
            age_at_diagnosis: f64::from(p.age_at_diagnosis()),
            visits: visit_windows(&p.visits, dx),
            elix_at_dx,
            elix_12m,
            elix_at_dx_cat: ElixCategory::from_count(elix_at_dx),
            elix_12m_cat: ElixCategory::from_count(elix_12m),
            edu_below: education == Education::BelowSecondary,
            edu_secondary: education == Education::Secondary,
            partnered: p.demographics.marital == Marital::Partnered,
            nordic_born: p.demographics.nordic_born,
            factor_scores,
        }
    }

    /// Values in `PREDIAG_COLUMNS` order.
    pub fn to_row(&self) -> [f64; 19] {
        let b = |x: bool| if x { 1.0 } else { 0.0 };
        let f = self.factor_scores;
        [
            self.age_at_diagnosis,
            f64::from(self.visits.v1m),
            f64::from(self.visits.v1_6m),
            f64::from(self.visits.v6_12m),
            f64::from(self.visits.v1_60m),
            b(self.elix_at_dx_cat == ElixCategory::OneToFour),
            b(self.elix_at_dx_cat == ElixCategory::FiveOrMore),
            b(self.elix_12m_cat == ElixCategory::OneToFour),
            b(self.elix_12m_cat == ElixCategory::FiveOrMore),
            b(self.edu_below),
            b(self.edu_secondary),
            b(self.partnered),
            b(self.nordic_born),
            f[0],
            f[1],
            f[2],
            f[3],
            f[4],
            f64::from(self.elix_at_dx),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::Duration;

    fn visit(dx: NaiveDate, days_before: i64, code: &str) -> InpatientVisit {
        let d = dx - Duration::days(days_before);
        InpatientVisit {
            admission_date: d,
            discharge_date: d,
            icd10_codes: vec![code.into()],
        }
    }

    #[test]
    fn counts_each_window() {
        let dx: NaiveDate = "2009-06-15".parse().unwrap();
        let visits = vec![visit(dx, 200, "I10"), visit(dx, 45, "I10"), visit(dx, 15, "I10")];
        let w = visit_windows(&visits, dx);
        assert_eq!((w.v1m, w.v1_6m, w.v6_12m, w.v1_60m), (1, 1, 1, 2));
    }

    #[test]
    fn no_visits_all_zero() {
        let dx: NaiveDate = "2009-06-15".parse().unwrap();
        assert_eq!(visit_windows(&[], dx), VisitWindows::default());
    }

    #[test]
    fn post_diagnosis_and_old_visits_ignored() {
        let dx: NaiveDate = "2009-06-15".parse().unwrap();
        let visits = vec![visit(dx, -3, "I10"), visit(dx, 0, "I10"), visit(dx, 1800, "I10")];
        let w = visit_windows(&visits, dx);
        assert_eq!((w.v1m, w.v1_6m, w.v6_12m, w.v1_60m), (1, 0, 0, 0));
    }

    #[test]
    fn elixhauser_windows() {
        let dx: NaiveDate = "2009-06-15".parse().unwrap();
        let visits = vec![visit(dx, 400, "I500"), visit(dx, 100, "E119"), visit(dx, 0, "J449")];
        assert_eq!(elixhauser_before(&visits, dx + Duration::days(1)), 3);
        assert_eq!(elixhauser_before(&visits, dx - Duration::days(359)), 1);
    }
}
