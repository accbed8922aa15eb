use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::{PatientId, Registry};
use crate::codes::NAM_ATC;
use crate::error::Error;
use crate::months::{ceil_months, month_start};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EligibilityConfig {
    pub treated_start: NaiveDate,
    pub treated_end: NaiveDate,
    pub comparison_start: NaiveDate,
    pub comparison_end: NaiveDate,
    pub nam_atc: Vec<String>,
    pub max_dtp_months: u32,
}

impl Default for EligibilityConfig {
    fn default() -> Self {
        EligibilityConfig {
            treated_start: NaiveDate::from_ymd_opt(2012, 6, 1).unwrap(),
            treated_end: NaiveDate::from_ymd_opt(2015, 6, 15).unwrap(),
            comparison_start: NaiveDate::from_ymd_opt(2008, 6, 1).unwrap(),
            comparison_end: NaiveDate::from_ymd_opt(2010, 6, 1).unwrap(),
            nam_atc: NAM_ATC.iter().map(|s| s.to_string()).collect(),
            max_dtp_months: 36,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Treated,
    Comparison,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortAssignment {
    pub patient_id: PatientId,
    pub arm: Arm,
    /// Months from diagnosis to first NAM dispense; treated only.
    pub dtp_months: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttritionStep {
    pub arm: Arm,
    pub step: String,
    pub input: usize,
    pub output: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cohorts {
    pub treated: Vec<CohortAssignment>,
    pub comparison: Vec<CohortAssignment>,
    pub attrition: Vec<AttritionStep>,
}

/// Months from diagnosis to the first dispense of a NAM, rounded up to whole
/// 30-day months (a dispense on the diagnosis day counts as month 1).
pub fn dtp_months(dx: NaiveDate, first_nam: NaiveDate) -> Option<u32> {
    if first_nam < dx {
        return None;
    }
    Some(ceil_months(dx, first_nam).max(1) as u32)
}

/// Applies the eligibility rules. Output lists are sorted by patient id.
pub fn select_cohorts(registry: &Registry, cfg: &EligibilityConfig) -> Result<Cohorts, Error> {
    let nam: Vec<&str> = cfg.nam_atc.iter().map(String::as_str).collect();
    let horizon = i64::from(cfg.max_dtp_months);

    let mut treated = Vec::new();
    let mut comparison = Vec::new();
    let (mut t_window, mut c_window) = (0usize, 0usize);

    for p in registry.patients() {
        let dx = p.diagnosis_date;
        let first_nam = p.first_dispense_of(&nam);
        if (cfg.treated_start..=cfg.treated_end).contains(&dx) {
            t_window += 1;
            if let Some(dtp) = first_nam.and_then(|d| dtp_months(dx, d)) {
                if dtp <= cfg.max_dtp_months {
                    treated.push(CohortAssignment {
                        patient_id: p.patient_id.clone(),
                        arm: Arm::Treated,
                        dtp_months: Some(dtp),
                    });
                    continue;
                }
            }
        }
        if (cfg.comparison_start..=cfg.comparison_end).contains(&dx) {
            c_window += 1;
            let follow_up_end = month_start(dx, horizon);
            if first_nam.map_or(true, |d| d >= follow_up_end) {
                comparison.push(CohortAssignment {
                    patient_id: p.patient_id.clone(),
                    arm: Arm::Comparison,
                    dtp_months: None,
                });
            }
        }
    }

    if treated.is_empty() {
        return Err(Error::Config("treated arm is empty".into()));
    }
    if comparison.is_empty() {
        return Err(Error::Config("comparison arm is empty".into()));
    }
    treated.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
    comparison.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));

    let n = registry.len();
    let attrition = vec![
        AttritionStep {
            arm: Arm::Treated,
            step: "diagnosed in treated window".into(),
            input: n,
            output: t_window,
        },
        AttritionStep {
            arm: Arm::Treated,
            step: format!("first NAM within {} months", cfg.max_dtp_months),
            input: t_window,
            output: treated.len(),
        },
        AttritionStep {
            arm: Arm::Comparison,
            step: "diagnosed in comparison window".into(),
            input: n,
            output: c_window,
        },
        AttritionStep {
            arm: Arm::Comparison,
            step: format!("no NAM within {} months", cfg.max_dtp_months),
            input: c_window,
            output: comparison.len(),
        },
    ];
    Ok(Cohorts {
        treated,
        comparison,
        attrition,
    })
}

/// Drops comparison patients who died before the start of month `w` after
/// their diagnosis, i.e. before their imputed treatment time in stratum `w`.
pub fn censor_dead_controls(
    stratum_w: u32,
    comparison: &[CohortAssignment],
    registry: &Registry,
) -> Vec<CohortAssignment> {
    comparison
        .iter()
        .filter(|c| {
            let Some(p) = registry.get(&c.patient_id) else {
                return false;
            };
            match p.death_date {
                Some(death) => death >= month_start(p.diagnosis_date, i64::from(stratum_w)),
                None => true,
            }
        })
        .cloned()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::{Demographics, Marital, PatientRecord, Prescription, SocioPanel};
    use chrono::Duration;

    fn patient(id: &str, dx: &str, nam_after_days: Option<i64>, death_after_days: Option<i64>) -> PatientRecord {
        let dx: NaiveDate = dx.parse().unwrap();
        PatientRecord {
            patient_id: id.into(),
            diagnosis_date: dx,
            death_date: death_after_days.map(|d| dx + Duration::days(d)),
            visits: vec![],
            prescriptions: nam_after_days
                .map(|d| {
                    vec![Prescription {
                        dispense_date: dx + Duration::days(d),
                        atc_code: "L02BB04".into(),
                        ddd_count: 30.0,
                    }]
                })
                .unwrap_or_default(),
            ses_panel: SocioPanel::default(),
            demographics: Demographics {
                birth_year: 1940,
                marital: Marital::Single,
                nordic_born: true,
                education: None,
            },
        }
    }

    fn registry() -> Registry {
        Registry::new(vec![
            patient("T1", "2013-01-15", Some(100), None),
            patient("T2", "2013-06-01", Some(40 * 30), None),
            patient("C1", "2009-01-20", None, None),
            patient("C2", "2009-05-01", None, Some(200)),
            patient("X1", "2011-01-01", None, None),
        ])
        .unwrap()
    }

    #[test]
    fn selects_arms_and_dtp() {
        let cohorts = select_cohorts(&registry(), &EligibilityConfig::default()).unwrap();
        assert_eq!(cohorts.treated.len(), 1);
        assert_eq!(cohorts.treated[0].patient_id.0, "T1");
        assert_eq!(cohorts.treated[0].dtp_months, Some(4));
        let ids: Vec<_> = cohorts.comparison.iter().map(|c| c.patient_id.0.as_str()).collect();
        assert_eq!(ids, vec!["C1", "C2"]);
        assert!(cohorts.comparison.iter().all(|c| c.dtp_months.is_none()));
    }

    #[test]
    fn nam_after_36_months_excluded_from_both_arms() {
        let cohorts = select_cohorts(&registry(), &EligibilityConfig::default()).unwrap();
        assert!(cohorts.treated.iter().all(|c| c.patient_id.0 != "T2"));
        assert!(cohorts.comparison.iter().all(|c| c.patient_id.0 != "T2"));
    }

    #[test]
    fn empty_arm_is_fatal() {
        let reg = Registry::new(vec![patient("C1", "2009-01-20", None, None)]).unwrap();
        assert!(matches!(
            select_cohorts(&reg, &EligibilityConfig::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn attrition_telescopes_within_arm() {
        let cohorts = select_cohorts(&registry(), &EligibilityConfig::default()).unwrap();
        for arm in [Arm::Treated, Arm::Comparison] {
            let steps: Vec<_> = cohorts.attrition.iter().filter(|s| s.arm == arm).collect();
            for pair in steps.windows(2) {
                assert_eq!(pair[0].output, pair[1].input);
            }
        }
    }

    #[test]
    fn censoring_rule() {
        let w = 6u32;
        let reg = Registry::new(vec![
            patient("C1", "2009-01-20", None, Some(30 * (w as i64 - 1) + 3)),
            patient("C2", "2009-01-20", None, Some(30 * (w as i64 + 5))),
            patient("C3", "2009-01-20", None, None),
        ])
        .unwrap();
        let comps: Vec<_> = ["C1", "C2", "C3"]
            .iter()
            .map(|id| CohortAssignment {
                patient_id: (*id).into(),
                arm: Arm::Comparison,
                dtp_months: None,
            })
            .collect();
        let kept = censor_dead_controls(w, &comps, &reg);
        let ids: Vec<_> = kept.iter().map(|c| c.patient_id.0.as_str()).collect();
        assert_eq!(ids, vec!["C2", "C3"]);
        let all_alive = censor_dead_controls(w, &comps[2..], &reg);
        assert_eq!(all_alive, comps[2..].to_vec());
    }
}
