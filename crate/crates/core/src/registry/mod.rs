//! Registry data model: patients, inpatient visits, dispensed prescriptions,
//! the socioeconomic panel and cohort eligibility.

mod cohort;
mod io;

pub use cohort::{
    censor_dead_controls, dtp_months, select_cohorts, Arm, AttritionStep, CohortAssignment, Cohorts,
    EligibilityConfig,
};
pub use io::{export_csv, load_registry, write_registry, RegistryError, RowError};

use std::collections::HashMap;
use std::fmt;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::codes;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PatientId(pub String);

impl fmt::Display for PatientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for PatientId {
    fn from(s: &str) -> Self {
        PatientId(s.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InpatientVisit {
    pub admission_date: NaiveDate,
    pub discharge_date: NaiveDate,
    pub icd10_codes: Vec<String>,
}

impl InpatientVisit {
    /// Days in care, counting admission and discharge days inclusively.
    pub fn inpatient_days(&self) -> i64 {
        (self.discharge_date - self.admission_date).num_days() + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prescription {
    pub dispense_date: NaiveDate,
    pub atc_code: String,
    pub ddd_count: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Marital {
    Partnered,
    Single,
}

/// Ordered from lowest to highest attainment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Education {
    BelowSecondary,
    Secondary,
    AboveSecondary,
}

impl Education {
    pub const ALL: [Education; 3] = [
        Education::BelowSecondary,
        Education::Secondary,
        Education::AboveSecondary,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demographics {
    pub birth_year: i32,
    pub marital: Marital,
    pub nordic_born: bool,
    pub education: Option<Education>,
}

/// Base names of the socioeconomic measures. Each is observed at the year of
/// diagnosis and the two preceding years (`_1y`, `_2y` suffixes), 42 columns in total.
pub const SES_BASE: [&str; 14] = [
    "LoneInk",
    "InkFNetto",
    "KapInk",
    "DispInk",
    "DispInkFam",
    "SjukRe",
    "ArbLos",
    "ForTid",
    "SocInk",
    "SocBidrPers",
    "SocBidrFam",
    "AldPens",
    "SumTjp",
    "PrivPens",
];

pub const SES_VARS: usize = 42;

/// Column name for base variable `b` at lag `lag` years (0, 1 or 2).
pub fn ses_name(b: usize, lag: usize) -> String {
    match lag {
        0 => SES_BASE[b].to_string(),
        l => format!("{}_{}y", SES_BASE[b], l),
    }
}

/// Canonical column order: all variables at diagnosis, then `_1y`, then `_2y`.
pub fn ses_names() -> Vec<String> {
    (0..3)
        .flat_map(|lag| (0..SES_BASE.len()).map(move |b| ses_name(b, lag)))
        .collect()
}

pub fn ses_index(name: &str) -> Option<usize> {
    ses_names().iter().position(|n| n == name)
}

/// Rectangular socioeconomic panel row, canonical column order, `None` = missing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SocioPanel {
    pub values: Vec<Option<f64>>,
}

impl Default for SocioPanel {
    fn default() -> Self {
        SocioPanel {
            values: vec![None; SES_VARS],
        }
    }
}

impl SocioPanel {
    pub fn get(&self, base: usize, lag: usize) -> Option<f64> {
        self.values[lag * SES_BASE.len() + base]
    }

    /// Fills a missing value with the average of the observed values of the
    /// same measure in the other years; `None` if all three are missing.
    pub fn filled(&self, base: usize, lag: usize) -> Option<f64> {
        self.get(base, lag).or_else(|| {
            let others: Vec<f64> = (0..3)
                .filter(|&l| l != lag)
                .filter_map(|l| self.get(base, l))
                .collect();
            (!others.is_empty()).then(|| others.iter().sum::<f64>() / others.len() as f64)
        })
    }

    pub fn is_complete(&self) -> bool {
        self.values.iter().all(Option::is_some)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: PatientId,
    pub diagnosis_date: NaiveDate,
    pub death_date: Option<NaiveDate>,
    pub visits: Vec<InpatientVisit>,
    pub prescriptions: Vec<Prescription>,
    pub ses_panel: SocioPanel,
    pub demographics: Demographics,
}

impl PatientRecord {
    pub fn age_at_diagnosis(&self) -> i32 {
        self.diagnosis_date.year() - self.demographics.birth_year
    }

    /// First dispense of any of the given ATC codes.
    pub fn first_dispense_of(&self, atc: &[&str]) -> Option<NaiveDate> {
        self.prescriptions
            .iter()
            .find(|p| atc.contains(&p.atc_code.as_str()))
            .map(|p| p.dispense_date)
    }

    /// Checks the per-patient invariants. Visits and prescriptions must already be sorted.
    pub fn validate(&self) -> Result<(), String> {
        if let Some(death) = self.death_date {
            if death < self.diagnosis_date {
                return Err("death_date precedes diagnosis_date".into());
            }
        }
        let age = self.age_at_diagnosis();
        if !(18..=110).contains(&age) {
            return Err(format!("age at diagnosis {age} outside [18, 110]"));
        }
        if self.ses_panel.values.len() != SES_VARS {
            return Err(format!(
                "socioeconomic panel has {} columns, expected {SES_VARS}",
                self.ses_panel.values.len()
            ));
        }
        for v in &self.visits {
            if v.discharge_date < v.admission_date {
                return Err("visit interval inverted".into());
            }
            if v.icd10_codes.is_empty() {
                return Err("visit without diagnosis codes".into());
            }
            if let Some(bad) = v
                .icd10_codes
                .iter()
                .find(|c| codes::normalize_icd10(c).as_deref() != Some(c.as_str()))
            {
                return Err(format!("invalid ICD-10 code {bad}"));
            }
        }
        for p in &self.prescriptions {
            if !(p.ddd_count >= 0.0) {
                return Err(format!("negative ddd_count {}", p.ddd_count));
            }
            if codes::normalize_atc(&p.atc_code).as_deref() != Some(p.atc_code.as_str()) {
                return Err(format!("invalid ATC code {}", p.atc_code));
            }
        }
        if self.visits.windows(2).any(|w| w[0].admission_date > w[1].admission_date) {
            return Err("visits not sorted by admission date".into());
        }
        if self
            .prescriptions
            .windows(2)
            .any(|w| w[0].dispense_date > w[1].dispense_date)
        {
            return Err("prescriptions not sorted by dispense date".into());
        }
        Ok(())
    }

    pub(crate) fn sort_events(&mut self) {
        self.visits.sort_by(|a, b| {
            a.admission_date
                .cmp(&b.admission_date)
                .then(a.discharge_date.cmp(&b.discharge_date))
        });
        self.prescriptions.sort_by(|a, b| {
            a.dispense_date
                .cmp(&b.dispense_date)
                .then_with(|| a.atc_code.cmp(&b.atc_code))
        });
    }
}

/// Validated, immutable collection of patient records.
#[derive(Debug, Clone, Default)]
pub struct Registry {
    patients: Vec<PatientRecord>,
    index: HashMap<PatientId, usize>,
}

impl Registry {
    /// Builds a registry, sorting each patient's events and checking invariants.
    pub fn new(mut patients: Vec<PatientRecord>) -> Result<Self, RegistryError> {
        let mut index = HashMap::with_capacity(patients.len());
        for (i, p) in patients.iter_mut().enumerate() {
            p.sort_events();
            if let Err(message) = p.validate() {
                return Err(RegistryError::Rows(vec![RowError {
                    line: 0,
                    patient_id: p.patient_id.0.clone(),
                    message,
                }]));
            }
            if index.insert(p.patient_id.clone(), i).is_some() {
                return Err(RegistryError::DuplicatePatient {
                    patient_id: p.patient_id.0.clone(),
                    line: 0,
                });
            }
        }
        Ok(Registry { patients, index })
    }

    pub fn patients(&self) -> &[PatientRecord] {
        &self.patients
    }

    pub fn get(&self, id: &PatientId) -> Option<&PatientRecord> {
        self.index.get(id).map(|&i| &self.patients[i])
    }

    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ses_names_are_42_unique() {
        let names = ses_names();
        assert_eq!(names.len(), SES_VARS);
        let set: std::collections::HashSet<_> = names.iter().collect();
        assert_eq!(set.len(), SES_VARS);
        assert_eq!(names[0], "LoneInk");
        assert_eq!(names[14], "LoneInk_1y");
        assert_eq!(ses_index("PrivPens_2y"), Some(41));
    }

    #[test]
    fn panel_fill_uses_other_years() {
        let mut panel = SocioPanel::default();
        panel.values[3] = None;
        panel.values[14 + 3] = Some(100.0);
        panel.values[28 + 3] = Some(200.0);
        assert_eq!(panel.filled(3, 0), Some(150.0));
        assert_eq!(panel.filled(0, 0), None);
    }
}
