//! Simulation of one patient's latent trajectory, registry events and
//! potential outcomes.

use chrono::{Datelike, Duration, NaiveDate};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, Poisson, StandardNormal};

use super::config::{cloglog_inv, EffectScale, HazardModel, ScenarioConfig};
use super::truth::{PatientTruth, PotentialOutcomes};
use crate::codes::{GNRH_ATC, SRE_ICD};
use crate::registry::{
    Demographics, Education, InpatientVisit, Marital, PatientRecord, Prescription, SocioPanel, SES_BASE,
    SES_VARS,
};

/// Months simulated after diagnosis.
pub const FOLLOW_UP_MONTHS: usize = 72;
const PRE_MONTHS: usize = 60;

/// One representative ICD-10 code per comorbidity group (metastatic and solid
/// tumour groups excluded; those arise from the cancer itself).
const COMORBIDITY_CODES: [&str; 29] = [
    "I500", "I480", "I350", "I269", "I739", "I10", "I150", "G819", "G20", "J449", "E119", "E112", "E039",
    "N185", "K703", "K259", "B20", "C833", "M069", "D685", "E669", "R634", "E871", "D500", "D519", "F101",
    "F112", "F200", "F329",
];
const OTHER_CODES: [&str; 8] = ["R069", "K590", "N390", "R509", "J189", "S720", "R104", "H251"];
const PAIN_CODES: [&str; 4] = ["N02AA01", "N02AA05", "N02AX02", "N02BE01"];
const NODE_CODE: &str = "C772";
const VISCERAL_CODE: &str = "C787";
const SKELETAL_CODE: &str = "C795";

/// Comparison-arm visit rates per month before diagnosis, by months before:
/// 1, 2-6, 7-12 and 13-60.
fn pre_rate(k: usize) -> f64 {
    match k {
        1 => 0.47,
        2..=6 => 0.276,
        7..=12 => 0.138,
        _ => 0.102,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Era {
    Treated,
    Comparison,
}

pub struct SimulatedPatient {
    pub record: PatientRecord,
    pub truth: PatientTruth,
    pub dtp: Option<u32>,
}

fn poisson(rng: &mut ChaCha8Rng, lambda: f64) -> usize {
    if lambda <= 0.0 {
        return 0;
    }
    Poisson::new(lambda).map(|p| p.sample(rng) as usize).unwrap_or(0)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn uniform_date(rng: &mut ChaCha8Rng, start: NaiveDate, end: NaiveDate) -> NaiveDate {
    let span = (end - start).num_days().max(0);
    start + Duration::days(rng.gen_range(0..=span))
}

fn treated_prob(base: &HazardModel, s: f64, effect: f64, scale: EffectScale) -> f64 {
    match scale {
        EffectScale::LogHazard => cloglog_inv(base.linear(s) + effect),
        EffectScale::Probability => (base.prob(s) + effect).clamp(0.0, 1.0),
    }
}

/// Per-month latent draws shared by both potential outcomes.
struct MonthDraws {
    death: f64,
    pain: f64,
    sre: f64,
}

fn acquire(rng: &mut ChaCha8Rng, comorbid: &mut Vec<(&'static str, i64)>, month: i64) {
    let c = COMORBIDITY_CODES[rng.gen_range(0..COMORBIDITY_CODES.len())];
    if !comorbid.iter().any(|(x, _)| *x == c) {
        comorbid.push((c, month));
    }
}

/// Simulates one patient. `stream` identifies the patient's random stream and
/// is recorded in the ground truth.
pub fn simulate(cfg: &ScenarioConfig, era: Era, index: u64, stream: u64, rng: &mut ChaCha8Rng) -> SimulatedPatient {
    let windows = &cfg.windows;
    let (id, dx) = match era {
        Era::Treated => (format!("T{index:06}"), uniform_date(rng, windows.treated_start, windows.treated_end)),
        Era::Comparison => (
            format!("C{index:06}"),
            uniform_date(rng, windows.comparison_start, windows.comparison_end),
        ),
    };
    let age = (70.0 + 8.5 * normal(rng)).round().clamp(45.0, 95.0);
    let birth_year = dx.year() - age as i32;

    // Socioeconomic panel from a five-factor structure.
    let factors: [f64; 5] = std::array::from_fn(|_| normal(rng));
    let mut panel = SocioPanel::default();
    for b in 0..SES_BASE.len() {
        let (f, load, mean, scale) = ses_structure(b);
        let age_shift = if f == 0 { 0.03 * (age - 70.0) } else { 0.0 };
        let unique = normal(rng);
        let latent = load * factors[f] + (1.0 - load * load).sqrt() * unique + age_shift;
        for lag in 0..3 {
            let z = 0.95 * latent + 0.312 * normal(rng);
            let value = (mean + scale * z).round();
            if rng.gen::<f64>() >= 0.02 {
                panel.values[lag * SES_BASE.len() + b] = Some(value);
            }
        }
    }
    debug_assert_eq!(panel.values.len(), SES_VARS);
    let income_z = factors[4];
    let edu_latent = 0.6 * income_z + 0.8 * normal(rng);
    let education = if edu_latent < -0.31 {
        Education::BelowSecondary
    } else if edu_latent < 0.74 {
        Education::Secondary
    } else {
        Education::AboveSecondary
    };
    let edu_missing = rng.gen::<f64>() < 1.0 / (1.0 + (2.8 + 0.7 * income_z).exp());
    let demographics = Demographics {
        birth_year,
        marital: if rng.gen::<f64>() < 0.65 { Marital::Partnered } else { Marital::Single },
        nordic_born: rng.gen::<f64>() < 0.95,
        education: (!edu_missing).then_some(education),
    };

    // Latent severity path.
    let prog = &cfg.progression;
    let mut severity = Vec::with_capacity(FOLLOW_UP_MONTHS);
    let mut s = prog.initial_mean + prog.age_effect * (age - 70.0) + prog.initial_sd * normal(rng);
    for _ in 0..FOLLOW_UP_MONTHS {
        severity.push(s);
        s += prog.drift + prog.volatility * normal(rng);
    }
    let s0 = severity[0];
    let frailty = Gamma::new(2.0, 0.5).expect("valid gamma").sample(rng);

    // Comorbidity codes with the month (relative to diagnosis) they were acquired.
    let mut comorbid: Vec<(&str, i64)> = Vec::new();
    for _ in 0..poisson(rng, 0.45 * (0.3 * s0).exp()) {
        acquire(rng, &mut comorbid, -(PRE_MONTHS as i64));
    }

    let mut visits = Vec::new();
    let visit_codes = |rng: &mut ChaCha8Rng, first: &str, comorbid: &[(&str, i64)], month: i64| {
        let mut codes = vec![first.to_string()];
        for (c, since) in comorbid {
            if *since <= month && rng.gen::<f64>() < 0.6 {
                codes.push(c.to_string());
            }
        }
        codes
    };
    let los = |rng: &mut ChaCha8Rng, s: f64| poisson(rng, 1.5 + 0.5 * s.max(0.0)) as i64;

    // Months before diagnosis, oldest first.
    let pre_scale = frailty * (0.3 * s0 - 0.045).exp();
    for k in (1..=PRE_MONTHS).rev() {
        if rng.gen::<f64>() < 0.005 * (0.4 * s0).exp() {
            acquire(rng, &mut comorbid, -(k as i64));
        }
        for _ in 0..poisson(rng, pre_rate(k) * pre_scale) {
            let before = 30 * (k as i64 - 1) + rng.gen_range(0..30);
            let adm = dx - Duration::days(before);
            let reason = OTHER_CODES[rng.gen_range(0..OTHER_CODES.len())];
            let codes = visit_codes(rng, reason, &comorbid, -(k as i64));
            let stay = los(rng, s0);
            visits.push(InpatientVisit {
                admission_date: adm,
                discharge_date: adm + Duration::days(stay),
                icd10_codes: codes,
            });
        }
    }

    // Latent post-diagnosis process, independent of death.
    struct Month {
        visits: usize,
        onset: [bool; 3],
        bica: bool,
        gnrh: bool,
        nam_draw: f64,
        draws: MonthDraws,
    }
    let mut months = Vec::with_capacity(FOLLOW_UP_MONTHS);
    let mut mets = [false; 3];
    let (mut bica_on, mut gnrh_on) = (false, false);
    let site_hazards = [
        HazardModel { intercept: -5.0, severity: 0.8 },
        HazardModel { intercept: -6.0, severity: 0.8 },
        HazardModel { intercept: -4.3, severity: 0.9 },
    ];
    for (t, &s) in severity.iter().enumerate() {
        let mut onset = [false; 3];
        for (j, h) in site_hazards.iter().enumerate() {
            if !mets[j] && rng.gen::<f64>() < h.prob(s) {
                mets[j] = true;
                onset[j] = true;
            }
        }
        if rng.gen::<f64>() < 0.006 * (0.4 * s).exp() {
            acquire(rng, &mut comorbid, t as i64);
        }
        bica_on |= rng.gen::<f64>() < cloglog_inv(-3.3 + 0.7 * s);
        gnrh_on |= rng.gen::<f64>() < cloglog_inv(-4.0 + 0.8 * s);
        let bica = bica_on && rng.gen::<f64>() < 0.85;
        let gnrh = gnrh_on && rng.gen::<f64>() < 0.8;
        months.push(Month {
            visits: poisson(rng, 0.3 * frailty * (0.5 * s).exp()),
            onset,
            bica,
            gnrh,
            nam_draw: rng.gen(),
            draws: MonthDraws {
                death: rng.gen(),
                pain: rng.gen(),
                sre: rng.gen(),
            },
        });
    }

    // Death before treatment and NAM assignment.
    let out = &cfg.outcome_model;
    let slope = cfg.assignment.severity * cfg.confounding_strength;
    let mut dtp: Option<u32> = None;
    let mut death_untreated: Option<usize> = None;
    for (t, m) in months.iter().enumerate() {
        if m.draws.death < out.death.prob(severity[t]) {
            death_untreated = Some(t);
            break;
        }
        if era == Era::Treated && t < 36 && dtp.is_none() {
            let h = cloglog_inv(cfg.assignment.intercept + slope * severity[t]);
            if m.nam_draw < h {
                dtp = Some(t as u32 + 1);
                break;
            }
        }
    }

    // Death month under each arm once treated at `w` (months >= w since dx).
    let skeletal_by: Vec<bool> = {
        let mut seen = false;
        months
            .iter()
            .map(|m| {
                seen |= m.onset[2];
                seen
            })
            .collect()
    };
    let effects = &cfg.true_effects;
    let arm_probs = |t: usize, treated: bool, w: u32| -> (f64, f64, f64) {
        let s = severity[t];
        let sre_model = HazardModel {
            intercept: out.sre.intercept + if skeletal_by[t] { out.sre_skeletal } else { 0.0 },
            severity: out.sre.severity,
        };
        if treated {
            (
                treated_prob(&out.death, s, effects.at(effects.dead, w), effects.scale),
                treated_prob(&out.pain, s, effects.at(effects.pain, w), effects.scale),
                treated_prob(&sre_model, s, effects.at(effects.sre, w), effects.scale),
            )
        } else {
            (out.death.prob(s), out.pain.prob(s), sre_model.prob(s))
        }
    };
    let death_month_from = |start: usize, treated: bool, w: u32| -> Option<usize> {
        (start..FOLLOW_UP_MONTHS).find(|&t| months[t].draws.death < arm_probs(t, treated, w).0)
    };

    let (observed_death, potential) = match dtp {
        Some(w) => {
            let start = w as usize;
            let d0 = death_month_from(start, false, w);
            let d1 = death_month_from(start, true, w);
            let horizon = cfg.horizon_months as usize;
            let mut po = PotentialOutcomes::new(horizon);
            for m in 1..=horizon {
                let t = start + m - 1;
                let (_, q0, r0) = arm_probs(t, false, w);
                let (_, q1, r1) = arm_probs(t, true, w);
                let dr = &months[t].draws;
                po.dead0[m - 1] = d0.is_some_and(|d| d <= t);
                po.dead1[m - 1] = d1.is_some_and(|d| d <= t);
                po.pain0[m - 1] = dr.pain < q0;
                po.pain1[m - 1] = dr.pain < q1;
                po.sre0[m - 1] = dr.sre < r0;
                po.sre1[m - 1] = dr.sre < r1;
            }
            (d1, Some(po))
        }
        None => (death_untreated, None),
    };

    // Death day within the death month.
    let death_offset = observed_death.map(|t| 30 * t as i64 + rng.gen_range(0..30));
    let death_date = death_offset.map(|d| dx + Duration::days(d));
    let last_month = observed_death.unwrap_or(FOLLOW_UP_MONTHS - 1);
    let day_in = |rng: &mut ChaCha8Rng, t: usize| -> i64 {
        let start = 30 * t as i64;
        match death_offset {
            Some(d) if t == last_month && observed_death.is_some() => rng.gen_range(start..=d),
            _ => start + rng.gen_range(0..30),
        }
    };

    let mut prescriptions = Vec::new();
    let gnrh_code = GNRH_ATC[rng.gen_range(0..GNRH_ATC.len())];
    let nam_code = if rng.gen::<f64>() < 0.5 { "L02BX03" } else { "L02BB04" };
    let mut mets_seen = [false; 3];
    let treated_from = dtp.map(|w| w as usize);
    for t in 0..=last_month {
        let m = &months[t];
        let s = severity[t];
        let is_treated = treated_from.is_some_and(|w| t >= w);
        let w = dtp.unwrap_or(0);

        let mut n_visits = m.visits;
        let mut forced: Vec<&str> = Vec::new();
        for (j, code) in [NODE_CODE, VISCERAL_CODE, SKELETAL_CODE].iter().enumerate() {
            if m.onset[j] {
                mets_seen[j] = true;
                forced.push(code);
            }
        }
        if !forced.is_empty() {
            n_visits = n_visits.max(1);
        }
        for v in 0..n_visits {
            let adm = dx + Duration::days(day_in(rng, t));
            let mut codes = visit_codes(rng, "C619", &comorbid, t as i64);
            for (j, code) in [NODE_CODE, VISCERAL_CODE, SKELETAL_CODE].iter().enumerate() {
                let force = v == 0 && forced.contains(code);
                if force || (mets_seen[j] && !m.onset[j] && rng.gen::<f64>() < 0.7) {
                    codes.push(code.to_string());
                }
            }
            let stay = los(rng, s);
            visits.push(InpatientVisit {
                admission_date: adm,
                discharge_date: adm + Duration::days(stay),
                icd10_codes: codes,
            });
        }
        if m.bica {
            prescriptions.push(Prescription {
                dispense_date: dx + Duration::days(day_in(rng, t)),
                atc_code: "L02BB03".into(),
                ddd_count: 90.0,
            });
        }
        if m.gnrh {
            prescriptions.push(Prescription {
                dispense_date: dx + Duration::days(day_in(rng, t)),
                atc_code: gnrh_code.into(),
                ddd_count: 30.0,
            });
        }
        if dtp.is_some_and(|w| t + 1 == w as usize) {
            // First NAM dispense: day 30(w-1)+1 ..= 30w after diagnosis.
            let day = 30 * t as i64 + 1 + rng.gen_range(0..30);
            prescriptions.push(Prescription {
                dispense_date: dx + Duration::days(day),
                atc_code: nam_code.into(),
                ddd_count: 30.0,
            });
        } else if is_treated && rng.gen::<f64>() < 0.9 {
            prescriptions.push(Prescription {
                dispense_date: dx + Duration::days(day_in(rng, t)),
                atc_code: nam_code.into(),
                ddd_count: 30.0,
            });
        }
        let (_, q, r) = arm_probs(t, is_treated, w);
        if m.draws.pain < q {
            prescriptions.push(Prescription {
                dispense_date: dx + Duration::days(day_in(rng, t)),
                atc_code: PAIN_CODES[rng.gen_range(0..PAIN_CODES.len())].into(),
                ddd_count: 10.0,
            });
        }
        if m.draws.sre < r {
            let adm = dx + Duration::days(day_in(rng, t));
            let mut codes = vec!["C619".to_string(), SRE_ICD[rng.gen_range(0..SRE_ICD.len())].to_string()];
            if mets_seen[2] {
                codes.push(SKELETAL_CODE.into());
            }
            let stay = los(rng, s);
            visits.push(InpatientVisit {
                admission_date: adm,
                discharge_date: adm + Duration::days(stay),
                icd10_codes: codes,
            });
        }
    }

    let record = PatientRecord {
        patient_id: id.as_str().into(),
        diagnosis_date: dx,
        death_date,
        visits,
        prescriptions,
        ses_panel: panel,
        demographics,
    };
    let truth = PatientTruth {
        patient_id: record.patient_id.clone(),
        severity,
        dtp_months: dtp,
        potential,
        stream,
    };
    SimulatedPatient { record, truth, dtp }
}

/// Factor index, loading, mean and scale for socioeconomic base variable `b`.
fn ses_structure(b: usize) -> (usize, f64, f64, f64) {
    match SES_BASE[b] {
        "AldPens" => (0, 0.85, 120_000.0, 40_000.0),
        "SumTjp" => (0, 0.8, 60_000.0, 30_000.0),
        "PrivPens" => (0, 0.7, 25_000.0, 15_000.0),
        "SocInk" => (1, 0.8, 4_000.0, 3_000.0),
        "SocBidrPers" => (1, 0.85, 2_000.0, 1_500.0),
        "SocBidrFam" => (1, 0.8, 3_000.0, 2_000.0),
        "SjukRe" => (2, 0.8, 10_000.0, 8_000.0),
        "ForTid" => (2, 0.75, 8_000.0, 6_000.0),
        "ArbLos" => (2, 0.6, 3_000.0, 2_500.0),
        "KapInk" => (3, 0.8, 15_000.0, 20_000.0),
        "InkFNetto" => (3, 0.7, 10_000.0, 15_000.0),
        "LoneInk" => (4, 0.85, 90_000.0, 60_000.0),
        "DispInk" => (4, 0.8, 180_000.0, 50_000.0),
        "DispInkFam" => (4, 0.75, 280_000.0, 80_000.0),
        other => unreachable!("unknown socioeconomic variable {other}"),
    }
}

/// Normal draw helper for the placebo generator.
pub(crate) fn gaussian(rng: &mut ChaCha8Rng, sd: f64) -> f64 {
    Normal::new(0.0, sd).map(|n| n.sample(rng)).unwrap_or(0.0)
}
