//! Monthly outcome series after the (imputed) treatment month.
//!
//! Period `m` of a patient in stratum `w` covers days
//! `[30 (w + m - 1), 30 (w + m))` after diagnosis. `DEAD` is absorbing;
//! `PAIN` and `SRE` are undefined for periods starting after death.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::balance::BalanceResults;
use crate::codes::{is_pain, is_sre};
use crate::error::{Error, Result};
use crate::months::{month_index, month_start};
use crate::registry::{Arm, PatientId, PatientRecord, Registry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Outcome {
    Dead,
    Pain,
    Sre,
}

impl Outcome {
    pub const ALL: [Outcome; 3] = [Outcome::Dead, Outcome::Pain, Outcome::Sre];

    pub fn name(self) -> &'static str {
        match self {
            Outcome::Dead => "DEAD",
            Outcome::Pain => "PAIN",
            Outcome::Sre => "SRE",
        }
    }
}

impl std::fmt::Display for Outcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Outcome {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "DEAD" => Ok(Outcome::Dead),
            "PAIN" => Ok(Outcome::Pain),
            "SRE" => Ok(Outcome::Sre),
            _ => Err(Error::Config(format!("unknown outcome {s}"))),
        }
    }
}

pub const MAX_HORIZON: u32 = 36;

/// Months of follow-up available for each outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Horizons {
    pub dead: u32,
    pub pain: u32,
    pub sre: u32,
}

impl Default for Horizons {
    fn default() -> Self {
        Horizons {
            dead: 24,
            pain: 24,
            sre: 24,
        }
    }
}

impl Horizons {
    pub fn get(&self, o: Outcome) -> u32 {
        match o {
            Outcome::Dead => self.dead,
            Outcome::Pain => self.pain,
            Outcome::Sre => self.sre,
        }
    }

    pub fn max(&self) -> u32 {
        self.dead.max(self.pain).max(self.sre)
    }

    pub fn validate(&self) -> Result<()> {
        for o in Outcome::ALL {
            let h = self.get(o);
            if h == 0 || h > MAX_HORIZON {
                return Err(Error::Config(format!("{o} horizon {h} outside 1..={MAX_HORIZON}")));
            }
        }
        Ok(())
    }
}

/// Outcome series of a patient in one stratum. Index `m - 1` holds period `m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeSeries {
    pub dead: Vec<bool>,
    pub pain: Vec<Option<bool>>,
    pub sre: Vec<Option<bool>>,
}

/// Outcome series anchored at the start of month `w` after diagnosis.
pub fn outcome_series(p: &PatientRecord, w: u32, periods: u32) -> OutcomeSeries {
    let dx = p.diagnosis_date;
    let first = i64::from(w);
    let last = first + i64::from(periods);
    let n = periods as usize;
    let mut pain = vec![false; n];
    let mut sre = vec![false; n];
    let slot = |date| {
        let k = month_index(dx, date);
        (first..last).contains(&k).then(|| (k - first) as usize)
    };
    for rx in &p.prescriptions {
        if is_pain(&rx.atc_code) {
            if let Some(i) = slot(rx.dispense_date) {
                pain[i] = true;
            }
        }
    }
    for v in &p.visits {
        if v.icd10_codes.iter().any(|c| is_sre(c)) {
            if let Some(i) = slot(v.admission_date) {
                sre[i] = true;
            }
        }
    }
    let mut out = OutcomeSeries {
        dead: Vec::with_capacity(n),
        pain: Vec::with_capacity(n),
        sre: Vec::with_capacity(n),
    };
    for i in 0..n {
        let k = first + i as i64;
        let start = month_start(dx, k);
        let end = month_start(dx, k + 1);
        let alive_at_start = p.death_date.map_or(true, |d| d >= start);
        out.dead.push(p.death_date.is_some_and(|d| d < end));
        out.pain.push(alive_at_start.then_some(pain[i]));
        out.sre.push(alive_at_start.then_some(sre[i]));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelRow {
    pub patient_id: PatientId,
    pub arm: Arm,
    pub stratum: u32,
    /// 1 for treated patients; the stratum's balancing weight for comparisons.
    pub weight: f64,
    /// Comparison weight if all comparisons in the stratum counted equally
    /// (treated count / comparison count); 1 for treated patients.
    pub uniform_weight: f64,
    /// Dense index of the patient, shared across strata, for clustering.
    pub cluster: usize,
    pub series: OutcomeSeries,
}

impl PanelRow {
    pub fn treated(&self) -> bool {
        self.arm == Arm::Treated
    }

    /// Outcome at period `m` as 0/1, `None` when undefined.
    pub fn value(&self, o: Outcome, m: u32) -> Option<f64> {
        let i = (m as usize).checked_sub(1)?;
        let v = match o {
            Outcome::Dead => Some(*self.series.dead.get(i)?),
            Outcome::Pain => *self.series.pain.get(i)?,
            Outcome::Sre => *self.series.sre.get(i)?,
        };
        v.map(|b| if b { 1.0 } else { 0.0 })
    }

    /// First period with `DEAD = 1`, if any.
    pub fn death_period(&self) -> Option<u32> {
        self.series.dead.iter().position(|&d| d).map(|i| i as u32 + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomePanel {
    pub horizons: Horizons,
    pub rows: Vec<PanelRow>,
}

impl OutcomePanel {
    pub fn check(&self, o: Outcome, m: u32) -> Result<()> {
        let h = self.horizons.get(o);
        if m == 0 || m > h {
            return Err(Error::BeyondHorizon {
                outcome: o.name().into(),
                month: m,
                horizon: h,
            });
        }
        Ok(())
    }

    pub fn n_clusters(&self) -> usize {
        self.rows.iter().map(|r| r.cluster + 1).max().unwrap_or(0)
    }
}

/// Builds outcome rows for the treated of each balanced stratum (weight 1)
/// and for comparisons with positive weight in that stratum.
pub fn derive_outcomes(registry: &Registry, balance: &BalanceResults, horizons: &Horizons) -> Result<OutcomePanel> {
    horizons.validate()?;
    let periods = horizons.max();
    let mut clusters: BTreeMap<PatientId, usize> = BTreeMap::new();
    for s in balance.strata.values() {
        for id in s.treated_ids.iter().chain(&s.comparison_ids) {
            let next = clusters.len();
            clusters.entry(id.clone()).or_insert(next);
        }
    }
    let lookup = |id: &PatientId| {
        registry
            .get(id)
            .ok_or_else(|| Error::InvalidInput(format!("patient {id} missing from registry")))
    };
    let mut rows = Vec::new();
    for (&w, s) in &balance.strata {
        let n_t = s.treated_ids.len() as f64;
        let n_c = s.comparison_ids.len() as f64;
        for id in &s.treated_ids {
            rows.push(PanelRow {
                patient_id: id.clone(),
                arm: Arm::Treated,
                stratum: w,
                weight: 1.0,
                uniform_weight: 1.0,
                cluster: clusters[id],
                series: outcome_series(lookup(id)?, w, periods),
            });
        }
        for (id, &wt) in s.comparison_ids.iter().zip(&s.solution.weights) {
            if wt <= 0.0 {
                continue;
            }
            rows.push(PanelRow {
                patient_id: id.clone(),
                arm: Arm::Comparison,
                stratum: w,
                weight: wt,
                uniform_weight: n_t / n_c,
                cluster: clusters[id],
                series: outcome_series(lookup(id)?, w, periods),
            });
        }
    }
    Ok(OutcomePanel {
        horizons: horizons.clone(),
        rows,
    })
}
