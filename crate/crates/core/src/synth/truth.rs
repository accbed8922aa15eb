use std::collections::HashMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use crate::estimate::Outcome;
use crate::registry::PatientId;

/// Potential outcomes of a treated patient for periods `m = 1..=horizon`
/// after the treatment month (index `m - 1`). Pain and SRE entries are the
/// latent monthly indicators, defined whether or not the patient is alive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialOutcomes {
    pub dead0: Vec<bool>,
    pub dead1: Vec<bool>,
    pub pain0: Vec<bool>,
    pub pain1: Vec<bool>,
    pub sre0: Vec<bool>,
    pub sre1: Vec<bool>,
}

impl PotentialOutcomes {
    pub fn new(horizon: usize) -> Self {
        PotentialOutcomes {
            dead0: vec![false; horizon],
            dead1: vec![false; horizon],
            pain0: vec![false; horizon],
            pain1: vec![false; horizon],
            sre0: vec![false; horizon],
            sre1: vec![false; horizon],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientTruth {
    pub patient_id: PatientId,
    /// Latent severity by month since diagnosis.
    pub severity: Vec<f64>,
    pub dtp_months: Option<u32>,
    pub potential: Option<PotentialOutcomes>,
    /// Random stream index of the patient, reused for placebo covariates.
    pub stream: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub patients: Vec<PatientTruth>,
}

impl GroundTruth {
    /// Lookup by id; `patients` is kept sorted by id.
    pub fn get(&self, id: &PatientId) -> Option<&PatientTruth> {
        self.patients
            .binary_search_by(|p| p.patient_id.cmp(id))
            .ok()
            .map(|i| &self.patients[i])
    }

    /// Sample ATET over treated patients for `outcome` at period `m` (1-based).
    pub fn atet(&self, outcome: Outcome, m: u32) -> Option<f64> {
        self.atet_where(outcome, m, |_| true)
    }

    /// Sample ATET over treated patients satisfying `keep`.
    pub fn atet_where(&self, outcome: Outcome, m: u32, keep: impl Fn(&PatientTruth) -> bool) -> Option<f64> {
        let idx = (m as usize).checked_sub(1)?;
        let (mut sum, mut n) = (0.0, 0usize);
        for p in self.patients.iter().filter(|p| keep(p)) {
            let Some(po) = &p.potential else { continue };
            let (y0, y1) = match outcome {
                Outcome::Dead => (&po.dead0, &po.dead1),
                Outcome::Pain => (&po.pain0, &po.pain1),
                Outcome::Sre => (&po.sre0, &po.sre1),
            };
            let (Some(&a), Some(&b)) = (y0.get(idx), y1.get(idx)) else { continue };
            sum += f64::from(u8::from(b)) - f64::from(u8::from(a));
            n += 1;
        }
        (n > 0).then(|| sum / n as f64)
    }

    /// Severity paths keyed by patient, for oracle covariates.
    pub fn severity_map(&self) -> HashMap<PatientId, Vec<f64>> {
        self.patients
            .iter()
            .map(|p| (p.patient_id.clone(), p.severity.clone()))
            .collect()
    }

    /// Line-delimited sidecar: a header line with the seed, then one patient per line.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        let header = serde_json::json!({ "seed": self.seed });
        writeln!(out, "{header}")?;
        for p in &self.patients {
            let line = serde_json::to_string(p).map_err(|e| Error::InvalidInput(e.to_string()))?;
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::InvalidInput("empty ground-truth file".into()))??;
        let header: serde_json::Value =
            serde_json::from_str(&header).map_err(|e| Error::InvalidInput(e.to_string()))?;
        let seed = header["seed"]
            .as_u64()
            .ok_or_else(|| Error::InvalidInput("ground-truth header lacks seed".into()))?;
        let mut patients = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            patients.push(serde_json::from_str(&line).map_err(|e| Error::InvalidInput(e.to_string()))?);
        }
        patients.sort_by(|a: &PatientTruth, b| a.patient_id.cmp(&b.patient_id));
        Ok(GroundTruth { seed, patients })
    }
}
