//! Monthly health-progression summaries after diagnosis.
//!
//! The vector for month `t` summarizes everything observed in
//! `[dx, dx + 30·(t+1))`, i.e. up to and including month `t`.

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::prediag::elixhauser_before;
use crate::codes::{is_adt, is_gnrh, metastasis_site, MetastasisSite, BICALUTAMIDE};
use crate::error::{Error, Result};
use crate::months::{month_index, month_start};
use crate::registry::{PatientRecord, Prescription};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdtStatus {
    BicalutamideOnly,
    BicaPlusGnrh,
    /// Neither of the two tracked combinations, including GnRH without bicalutamide.
    Neither,
}

impl AdtStatus {
    /// Categorical code used in exported tables: 1, 2 or 3.
    pub fn code(self) -> u8 {
        match self {
            AdtStatus::BicalutamideOnly => 1,
            AdtStatus::BicaPlusGnrh => 2,
            AdtStatus::Neither => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryVector {
    pub month: u32,
    pub elix_score: u32,
    pub cum_visits: u32,
    pub months_visceral_mets: u32,
    pub months_skeletal_mets: u32,
    pub any_mets: bool,
    pub cum_add_ddd: f64,
    pub adt_status: AdtStatus,
    pub sum_inpatient_days: u32,
}

/// Total DDDs of androgen-deprivation drugs dispensed in `[dx, dx + t months)`.
pub fn adt_cumulative_ddd(prescriptions: &[Prescription], dx: NaiveDate, t: u32) -> f64 {
    let end = month_start(dx, i64::from(t));
    prescriptions
        .iter()
        .filter(|p| p.dispense_date >= dx && p.dispense_date < end && is_adt(&p.atc_code))
        .map(|p| p.ddd_count)
        .sum()
}

/// Bicalutamide/GnRH classification over dispenses before `dx + t months`.
pub fn adt_status(prescriptions: &[Prescription], dx: NaiveDate, t: u32) -> AdtStatus {
    let end = month_start(dx, i64::from(t));
    let before = prescriptions.iter().filter(|p| p.dispense_date < end);
    let (mut bica, mut gnrh) = (false, false);
    for p in before {
        bica |= p.atc_code == BICALUTAMIDE;
        gnrh |= is_gnrh(&p.atc_code);
    }
    match (bica, gnrh) {
        (true, false) => AdtStatus::BicalutamideOnly,
        (true, true) => AdtStatus::BicaPlusGnrh,
        _ => AdtStatus::Neither,
    }
}

/// Trajectory for months `0..months` without a survival check.
pub fn trajectory_through(p: &PatientRecord, months: u32) -> Vec<TrajectoryVector> {
    let dx = p.diagnosis_date;
    let onset = |site: MetastasisSite| {
        p.visits
            .iter()
            .filter(|v| v.icd10_codes.iter().any(|c| metastasis_site(c) == Some(site)))
            .map(|v| month_index(dx, v.admission_date).max(0))
            .min()
    };
    let visceral = onset(MetastasisSite::Visceral);
    let skeletal = onset(MetastasisSite::Skeletal);
    let any_onset = p
        .visits
        .iter()
        .filter(|v| v.icd10_codes.iter().any(|c| metastasis_site(c).is_some()))
        .map(|v| month_index(dx, v.admission_date))
        .min();
    let months_since = |onset: Option<i64>, t: i64| onset.map_or(0, |o| (t - o + 1).max(0) as u32);

    (0..months)
        .map(|t| {
            let ti = i64::from(t);
            let end = month_start(dx, ti + 1);
            let (mut cum_visits, mut days) = (0u32, 0u32);
            for v in p.visits.iter().filter(|v| v.admission_date >= dx && v.admission_date < end) {
                cum_visits += 1;
                days += v.inpatient_days() as u32;
            }
            TrajectoryVector {
                month: t,
                elix_score: elixhauser_before(&p.visits, end),
                cum_visits,
                months_visceral_mets: months_since(visceral, ti),
                months_skeletal_mets: months_since(skeletal, ti),
                any_mets: any_onset.is_some_and(|o| o <= ti),
                cum_add_ddd: adt_cumulative_ddd(&p.prescriptions, dx, t + 1),
                adt_status: adt_status(&p.prescriptions, dx, t + 1),
                sum_inpatient_days: days,
            }
        })
        .collect()
}

/// Trajectory for months `0..w`; the patient must be alive at the start of month `w - 1`.
pub fn build_trajectory(p: &PatientRecord, w: u32) -> Result<Vec<TrajectoryVector>> {
    if !(1..=36).contains(&w) {
        return Err(Error::InvalidInput(format!("stratum {w} outside [1, 36]")));
    }
    if let Some(death) = p.death_date {
        if death < month_start(p.diagnosis_date, i64::from(w) - 1) {
            return Err(Error::TrajectoryTruncated {
                patient_id: p.patient_id.0.clone(),
                month: w - 1,
            });
        }
    }
    Ok(trajectory_through(p, w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::{Demographics, InpatientVisit, Marital, SocioPanel};
    use chrono::Duration;

    fn patient(visits: Vec<InpatientVisit>, prescriptions: Vec<Prescription>) -> PatientRecord {
        PatientRecord {
            patient_id: "P".into(),
            diagnosis_date: "2009-01-01".parse().unwrap(),
            death_date: None,
            visits,
            prescriptions,
            ses_panel: SocioPanel::default(),
            demographics: Demographics {
                birth_year: 1940,
                marital: Marital::Single,
                nordic_born: true,
                education: None,
            },
        }
    }

    fn rx(dx: NaiveDate, day: i64, atc: &str, ddd: f64) -> Prescription {
        Prescription {
            dispense_date: dx + Duration::days(day),
            atc_code: atc.into(),
            ddd_count: ddd,
        }
    }

    #[test]
    fn empty_history_all_zero() {
        let p = patient(vec![], vec![]);
        let traj = build_trajectory(&p, 6).unwrap();
        assert_eq!(traj.len(), 6);
        for v in traj {
            assert_eq!((v.cum_visits, v.elix_score, v.months_skeletal_mets), (0, 0, 0));
            assert!(!v.any_mets);
            assert_eq!(v.cum_add_ddd, 0.0);
            assert_eq!(v.adt_status, AdtStatus::Neither);
        }
    }

    #[test]
    fn skeletal_counting() {
        let dx: NaiveDate = "2009-01-01".parse().unwrap();
        let d = dx + Duration::days(95);
        let p = patient(
            vec![InpatientVisit {
                admission_date: d,
                discharge_date: d + Duration::days(2),
                icd10_codes: vec!["C795".into()],
            }],
            vec![],
        );
        let traj = build_trajectory(&p, 6).unwrap();
        let sk: Vec<u32> = traj.iter().map(|v| v.months_skeletal_mets).collect();
        assert_eq!(sk, vec![0, 0, 0, 1, 2, 3]);
        let any: Vec<bool> = traj.iter().map(|v| v.any_mets).collect();
        assert_eq!(any, vec![false, false, false, true, true, true]);
        assert_eq!(traj[5].sum_inpatient_days, 3);
        assert!(traj.iter().all(|v| v.months_visceral_mets == 0));
    }

    #[test]
    fn ddd_accounting() {
        let dx: NaiveDate = "2009-01-01".parse().unwrap();
        assert_eq!(adt_cumulative_ddd(&[], dx, 12), 0.0);
        // 150 mg/day for 30 days at 50 mg per DDD.
        let month = [rx(dx, 3, BICALUTAMIDE, 150.0 * 30.0 / 50.0)];
        assert_eq!(adt_cumulative_ddd(&month, dx, 1), 90.0);
        let two = [rx(dx, 3, "L02AE02", 30.0), rx(dx, 40, "L02BB03", 30.0), rx(dx, 70, "N02BE01", 5.0)];
        assert_eq!(adt_cumulative_ddd(&two, dx, 3), 60.0);
        assert_eq!(adt_cumulative_ddd(&two, dx, 1), 30.0);
    }

    #[test]
    fn status_classification() {
        let dx: NaiveDate = "2009-01-01".parse().unwrap();
        let bica = [rx(dx, 5, "L02BB03", 90.0)];
        assert_eq!(adt_status(&bica, dx, 1), AdtStatus::BicalutamideOnly);
        let both = [rx(dx, 5, "L02BB03", 90.0), rx(dx, 40, "L02AE02", 30.0)];
        assert_eq!(adt_status(&both, dx, 1), AdtStatus::BicalutamideOnly);
        assert_eq!(adt_status(&both, dx, 2), AdtStatus::BicaPlusGnrh);
        let gnrh = [rx(dx, 5, "L02AE03", 90.0)];
        assert_eq!(adt_status(&gnrh, dx, 3), AdtStatus::Neither);
    }

    #[test]
    fn truncated_by_death() {
        let mut p = patient(vec![], vec![]);
        p.death_date = Some(p.diagnosis_date + Duration::days(100));
        assert!(build_trajectory(&p, 4).is_ok());
        assert!(matches!(
            build_trajectory(&p, 5),
            Err(Error::TrajectoryTruncated { month: 4, .. })
        ));
    }
}
