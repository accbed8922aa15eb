//! Nearest-neighbour imputation of missing education.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registry::{ses_index, Education, PatientRecord};

/// Which level wins when two or more levels share the highest count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    #[default]
    Lower,
    Higher,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImputeConfig {
    pub neighbours: usize,
    pub tie_break: TieBreak,
}

impl Default for ImputeConfig {
    fn default() -> Self {
        ImputeConfig {
            neighbours: 5,
            tie_break: TieBreak::Lower,
        }
    }
}

/// Distance features: disposable income, total pension, age, Nordic birth.
pub fn donor_features(p: &PatientRecord) -> [f64; 4] {
    let panel = &p.ses_panel;
    let col = |name: &str| {
        let i = ses_index(name).expect("known socioeconomic column");
        panel.filled(i % 14, i / 14).unwrap_or(0.0)
    };
    [
        col("DispInk"),
        col("AldPens") + col("SumTjp") + col("PrivPens"),
        f64::from(p.age_at_diagnosis()),
        if p.demographics.nordic_born { 1.0 } else { 0.0 },
    ]
}

/// Most frequent level among `levels`, ties resolved by `tie_break`.
pub fn mode_level(levels: &[Education], tie_break: TieBreak) -> Option<Education> {
    let counts = Education::ALL.map(|e| levels.iter().filter(|&&l| l == e).count());
    let max = *counts.iter().max()?;
    if max == 0 {
        return None;
    }
    let mut winners = Education::ALL.iter().zip(counts).filter(|(_, c)| *c == max).map(|(e, _)| *e);
    match tie_break {
        TieBreak::Lower => winners.next(),
        TieBreak::Higher => winners.last(),
    }
}

/// Donor pool with features standardized by the pool's own mean and SD.
pub struct DonorPool {
    mean: [f64; 4],
    sd: [f64; 4],
    rows: Vec<([f64; 4], Education)>,
}

impl DonorPool {
    pub fn new(donors: &[([f64; 4], Education)], cfg: &ImputeConfig) -> Result<Self> {
        if donors.len() < cfg.neighbours.max(1) {
            return Err(Error::InsufficientDonors {
                found: donors.len(),
                needed: cfg.neighbours.max(1),
            });
        }
        let n = donors.len() as f64;
        let mut mean = [0.0; 4];
        let mut sd = [0.0; 4];
        for k in 0..4 {
            mean[k] = donors.iter().map(|(f, _)| f[k]).sum::<f64>() / n;
            let var = donors.iter().map(|(f, _)| (f[k] - mean[k]).powi(2)).sum::<f64>() / n;
            sd[k] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        let rows = donors
            .iter()
            .map(|(f, e)| (std::array::from_fn(|k| (f[k] - mean[k]) / sd[k]), *e))
            .collect();
        Ok(DonorPool { mean, sd, rows })
    }

    pub fn impute(&self, target: &[f64; 4], cfg: &ImputeConfig) -> Education {
        let z: [f64; 4] = std::array::from_fn(|k| (target[k] - self.mean[k]) / self.sd[k]);
        let mut dist: Vec<(f64, usize)> = self
            .rows
            .iter()
            .enumerate()
            .map(|(i, (f, _))| (f.iter().zip(&z).map(|(a, b)| (a - b).powi(2)).sum(), i))
            .collect();
        let k = cfg.neighbours.max(1);
        dist.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let levels: Vec<Education> = dist[..k].iter().map(|&(_, i)| self.rows[i].1).collect();
        mode_level(&levels, cfg.tie_break).expect("k >= 1 neighbours")
    }
}

/// Imputes education for `target` from donors with observed education.
pub fn impute_education(
    target: &PatientRecord,
    donors: &[&PatientRecord],
    cfg: &ImputeConfig,
) -> Result<Education> {
    let rows: Vec<_> = donors
        .iter()
        .filter(|d| d.patient_id != target.patient_id)
        .filter_map(|d| d.demographics.education.map(|e| (donor_features(d), e)))
        .collect();
    let pool = DonorPool::new(&rows, cfg)?;
    Ok(pool.impute(&donor_features(target), cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use Education::*;

    #[test]
    fn mode_examples() {
        let lower = TieBreak::Lower;
        assert_eq!(mode_level(&[Secondary, Secondary, AboveSecondary, BelowSecondary, Secondary], lower), Some(Secondary));
        assert_eq!(mode_level(&[AboveSecondary; 5], lower), Some(AboveSecondary));
        let tie = [Secondary, Secondary, BelowSecondary, BelowSecondary, AboveSecondary];
        assert_eq!(mode_level(&tie, lower), Some(BelowSecondary));
        assert_eq!(mode_level(&tie, TieBreak::Higher), Some(Secondary));
    }

    #[test]
    fn too_few_donors() {
        let rows = vec![([0.0; 4], Secondary); 4];
        assert!(matches!(
            DonorPool::new(&rows, &ImputeConfig::default()),
            Err(Error::InsufficientDonors { found: 4, needed: 5 })
        ));
    }

    #[test]
    fn nearest_five_decide() {
        // Five donors near the origin are all `Secondary`; far donors are not.
        let mut rows: Vec<_> = (0..5).map(|i| ([i as f64 * 0.01, 0.0, 0.0, 0.0], Secondary)).collect();
        rows.extend((0..20).map(|i| ([10.0 + i as f64, 5.0, 3.0, 1.0], AboveSecondary)));
        let cfg = ImputeConfig::default();
        let pool = DonorPool::new(&rows, &cfg).unwrap();
        assert_eq!(pool.impute(&[0.0; 4], &cfg), Secondary);
        assert_eq!(pool.impute(&[25.0, 5.0, 3.0, 1.0], &cfg), AboveSecondary);
    }

    proptest! {
        #[test]
        fn result_present_in_pool(
            feats in proptest::collection::vec((0.0f64..10.0, 0.0f64..10.0, 50.0f64..90.0, 0usize..2, 0usize..3), 5..30),
            target in (0.0f64..10.0, 0.0f64..10.0, 50.0f64..90.0),
        ) {
            let rows: Vec<_> = feats
                .iter()
                .map(|&(a, b, c, d, e)| ([a, b, c, d as f64], Education::ALL[e]))
                .collect();
            let cfg = ImputeConfig::default();
            let pool = DonorPool::new(&rows, &cfg).unwrap();
            let got = pool.impute(&[target.0, target.1, target.2, 1.0], &cfg);
            prop_assert!(rows.iter().any(|(_, e)| *e == got));
        }
    }
}
