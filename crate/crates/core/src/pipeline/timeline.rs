//! Text rendering of one patient's registry events.

use std::fmt::Write as _;

use chrono::NaiveDate;

use crate::balance::BalanceResults;
use crate::codes::NAM_ATC;
use crate::error::{Error, Result};
use crate::months::{month_index, month_start};
use crate::registry::{Cohorts, PatientId, Registry};

/// Months after diagnosis covered by the observation window.
pub const WINDOW_MONTHS: i64 = 36;

struct Event {
    date: NaiveDate,
    order: u8,
    text: String,
}

/// Chronological event listing. Lines inside the 36-month window after
/// diagnosis carry a `#` marker. The first NAM dispense is flagged with the
/// DTP; comparison patients get their per-stratum weights when `balance` is
/// supplied.
pub fn render_timeline(
    registry: &Registry,
    cohorts: Option<&Cohorts>,
    balance: Option<&BalanceResults>,
    id: &PatientId,
) -> Result<String> {
    let p = registry
        .get(id)
        .ok_or_else(|| Error::InvalidInput(format!("unknown patient {id}")))?;
    let dx = p.diagnosis_date;
    let window_end = month_start(dx, WINDOW_MONTHS);
    let first_nam = p.first_dispense_of(NAM_ATC);
    let assignment = cohorts.and_then(|c| {
        c.treated
            .iter()
            .chain(&c.comparison)
            .find(|a| &a.patient_id == id)
    });

    let mut events = vec![Event {
        date: dx,
        order: 0,
        text: "DIAGNOSIS".into(),
    }];
    for v in &p.visits {
        events.push(Event {
            date: v.admission_date,
            order: 1,
            text: format!("VISIT {} (discharged {})", v.icd10_codes.join(" "), v.discharge_date),
        });
    }
    for rx in &p.prescriptions {
        let mut text = format!("RX {} ddd {}", rx.atc_code, rx.ddd_count);
        if Some(rx.dispense_date) == first_nam && NAM_ATC.contains(&rx.atc_code.as_str()) {
            let dtp = crate::registry::dtp_months(dx, rx.dispense_date).unwrap_or(0);
            let _ = write!(text, "  <- first NAM, DTP {dtp}");
        }
        events.push(Event {
            date: rx.dispense_date,
            order: 2,
            text,
        });
    }
    if let Some(d) = p.death_date {
        events.push(Event {
            date: d,
            order: 3,
            text: "DEATH".into(),
        });
    }
    events.sort_by(|a, b| a.date.cmp(&b.date).then(a.order.cmp(&b.order)));

    let mut s = String::new();
    let _ = writeln!(
        s,
        "patient {id}  born {}  diagnosed {dx}",
        p.demographics.birth_year
    );
    match assignment {
        Some(a) => match a.dtp_months {
            Some(d) => {
                let _ = writeln!(s, "arm: treated, DTP {d}");
            }
            None => {
                let _ = writeln!(s, "arm: comparison");
            }
        },
        None => {
            let _ = writeln!(s, "arm: not in a cohort");
        }
    }
    let _ = writeln!(s, "window: {dx} .. {window_end} (months 0-{})", WINDOW_MONTHS - 1);
    let _ = writeln!(s, "{:1} {:>10} {:>6} {:>5}  event", "", "date", "day", "month");
    for e in &events {
        let day = (e.date - dx).num_days();
        let in_window = e.date >= dx && e.date < window_end;
        let _ = writeln!(
            s,
            "{:1} {:>10} {:>6} {:>5}  {}",
            if in_window { "#" } else { " " },
            e.date,
            day,
            month_index(dx, e.date),
            e.text
        );
    }

    if let Some(b) = balance {
        let profile = b.weight_profile(id);
        if !profile.is_empty() {
            let _ = writeln!(s, "weights by stratum:");
            let _ = writeln!(s, "{:>7} {:>14}", "stratum", "weight");
            for (w, wt) in profile {
                let _ = writeln!(s, "{w:>7} {wt:>14.6e}");
            }
        }
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::{Demographics, InpatientVisit, Marital, PatientRecord, Prescription, SocioPanel};
    use chrono::Duration;

    fn registry(rx_atc: &str) -> Registry {
        let dx = NaiveDate::from_ymd_opt(2013, 3, 1).unwrap();
        Registry::new(vec![PatientRecord {
            patient_id: "P9".into(),
            diagnosis_date: dx,
            death_date: None,
            visits: vec![InpatientVisit {
                admission_date: dx + Duration::days(40),
                discharge_date: dx + Duration::days(42),
                icd10_codes: vec!["C795".into()],
            }],
            prescriptions: vec![Prescription {
                dispense_date: dx + Duration::days(200),
                atc_code: rx_atc.into(),
                ddd_count: 30.0,
            }],
            ses_panel: SocioPanel::default(),
            demographics: Demographics {
                birth_year: 1944,
                marital: Marital::Partnered,
                education: None,
                nordic_born: true,
            },
        }])
        .unwrap()
    }

    fn event_lines(s: &str) -> Vec<&str> {
        s.lines()
            .filter(|l| l.trim_start_matches(['#', ' ']).starts_with(|c: char| c.is_ascii_digit()))
            .collect()
    }

    #[test]
    fn one_visit_one_prescription() {
        let r = registry("L02BB03");
        let s = render_timeline(&r, None, None, &"P9".into()).unwrap();
        let lines = event_lines(&s);
        // Diagnosis marker plus the two events.
        assert_eq!(lines.len(), 3);
        assert!(lines[1].contains("VISIT C795"));
        assert!(lines[2].contains("RX L02BB03"));
        assert!(!s.contains("first NAM"));
    }

    #[test]
    fn nam_dispense_flagged() {
        let r = registry("L02BX03");
        let s = render_timeline(&r, None, None, &"P9".into()).unwrap();
        assert!(s.contains("first NAM, DTP 7"));
    }

    #[test]
    fn unknown_patient() {
        let r = registry("L02BX03");
        assert!(render_timeline(&r, None, None, &"nope".into()).is_err());
    }
}
