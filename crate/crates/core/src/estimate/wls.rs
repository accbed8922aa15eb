//! Weighted least squares of an outcome on stratum fixed effects and the
//! treatment indicator, with heteroskedasticity-robust covariance.

use std::collections::BTreeMap;

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Covariance {
    /// Eicker-Huber-White HC0: every row is an independent observation.
    #[default]
    Hc0,
    /// Cluster-robust by patient: rows of one comparison patient across
    /// strata share a cluster.
    ClusterPatient,
}

/// One row of a stratified regression.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Obs {
    pub stratum: u32,
    pub treated: bool,
    pub weight: f64,
    pub y: f64,
    pub cluster: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StratifiedFit {
    pub beta: f64,
    pub se: f64,
    /// Strata kept in the fit, in ascending order.
    pub strata: Vec<u32>,
    pub dropped_strata: Vec<u32>,
    pub n_treated: usize,
    pub n_comparison: usize,
    /// Outcome constant in the estimation sample, or zero standard error.
    pub degenerate: bool,
}

/// Dense WLS with the HC0 sandwich `(X'WX)^-1 (sum w_i^2 e_i^2 x_i x_i') (X'WX)^-1`.
/// Returns coefficients and covariance.
pub fn wls_hc0(x: &DMatrix<f64>, y: &DVector<f64>, w: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (n, k) = x.shape();
    if y.len() != n || w.len() != n {
        return Err(Error::InvalidInput("dimension mismatch".into()));
    }
    let mut xtwx = DMatrix::<f64>::zeros(k, k);
    let mut xtwy = DVector::<f64>::zeros(k);
    for i in 0..n {
        let xi = x.row(i).transpose();
        xtwx += w[i] * &xi * xi.transpose();
        xtwy += w[i] * y[i] * &xi;
    }
    let bread = xtwx
        .try_inverse()
        .ok_or_else(|| Error::Numerical("singular weighted design".into()))?;
    let beta = &bread * xtwy;
    let mut meat = DMatrix::<f64>::zeros(k, k);
    for i in 0..n {
        let xi = x.row(i).transpose();
        let e = y[i] - (x.row(i) * &beta)[0];
        meat += (w[i] * e).powi(2) * &xi * xi.transpose();
    }
    let cov = &bread * meat * &bread;
    Ok((beta, cov))
}

/// Fits `y ~ intercept + stratum dummies + T`. Strata without both arms
/// (positive weight) are dropped. The fit aggregates rows into
/// stratum-by-arm cells, so it is linear in the number of rows.
pub fn fit_stratified(obs: &[Obs], covariance: Covariance) -> Result<StratifiedFit> {
    #[derive(Default, Clone, Copy)]
    struct Cell {
        w: f64,
        wy: f64,
        n: usize,
    }
    let mut cells: BTreeMap<(u32, bool), Cell> = BTreeMap::new();
    for o in obs.iter().filter(|o| o.weight > 0.0) {
        if !(o.y.is_finite() && o.weight.is_finite()) {
            return Err(Error::InvalidInput("non-finite outcome or weight".into()));
        }
        let c = cells.entry((o.stratum, o.treated)).or_default();
        c.w += o.weight;
        c.wy += o.weight * o.y;
        c.n += 1;
    }
    let all: Vec<u32> = {
        let mut s: Vec<u32> = cells.keys().map(|k| k.0).collect();
        s.dedup();
        s
    };
    let (strata, dropped): (Vec<u32>, Vec<u32>) = all
        .into_iter()
        .partition(|s| cells.contains_key(&(*s, true)) && cells.contains_key(&(*s, false)));
    if !dropped.is_empty() {
        warn!("strata {dropped:?} lack one arm; dropped from the fit");
    }
    if strata.is_empty() {
        return Err(Error::InvalidInput("no stratum has both arms".into()));
    }
    let s_count = strata.len();
    let k = s_count + 1;
    let pos: BTreeMap<u32, usize> = strata.iter().enumerate().map(|(i, s)| (*s, i)).collect();
    // Columns: intercept, dummies for strata[1..], treatment.
    let design = |stratum: u32, treated: bool| -> Vec<(usize, f64)> {
        let mut v = vec![(0, 1.0)];
        let p = pos[&stratum];
        if p > 0 {
            v.push((p, 1.0));
        }
        if treated {
            v.push((s_count, 1.0));
        }
        v
    };

    let mut xtwx = DMatrix::<f64>::zeros(k, k);
    let mut xtwy = DVector::<f64>::zeros(k);
    for (&(s, t), c) in &cells {
        if !pos.contains_key(&s) {
            continue;
        }
        let x = design(s, t);
        for &(a, va) in &x {
            xtwy[a] += va * c.wy;
            for &(b, vb) in &x {
                xtwx[(a, b)] += va * vb * c.w;
            }
        }
    }
    let bread = xtwx
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Numerical("singular stratified design".into()))?;
    let coef = &bread * xtwy;
    let fitted = |s: u32, t: bool| -> f64 { design(s, t).iter().map(|&(a, v)| v * coef[a]).sum() };

    let used: Vec<&Obs> = obs
        .iter()
        .filter(|o| o.weight > 0.0 && pos.contains_key(&o.stratum))
        .collect();
    let mut meat = DMatrix::<f64>::zeros(k, k);
    let mut sse = 0.0;
    match covariance {
        Covariance::Hc0 => {
            let mut cell_e2: BTreeMap<(u32, bool), f64> = BTreeMap::new();
            for o in &used {
                let e = o.y - fitted(o.stratum, o.treated);
                sse += e * e;
                *cell_e2.entry((o.stratum, o.treated)).or_default() += (o.weight * e).powi(2);
            }
            for (&(s, t), &v) in &cell_e2 {
                let x = design(s, t);
                for &(a, va) in &x {
                    for &(b, vb) in &x {
                        meat[(a, b)] += va * vb * v;
                    }
                }
            }
        }
        Covariance::ClusterPatient => {
            let mut scores: BTreeMap<usize, DVector<f64>> = BTreeMap::new();
            for o in &used {
                let e = o.y - fitted(o.stratum, o.treated);
                sse += e * e;
                let u = scores.entry(o.cluster).or_insert_with(|| DVector::zeros(k));
                for (a, v) in design(o.stratum, o.treated) {
                    u[a] += v * o.weight * e;
                }
            }
            for u in scores.values() {
                meat += u * u.transpose();
            }
        }
    }
    let cov = &bread * meat * &bread;
    let var = cov[(s_count, s_count)].max(0.0);
    let n_treated = used.iter().filter(|o| o.treated).count();
    let first_y = used.first().map(|o| o.y);
    let constant = used.iter().all(|o| Some(o.y) == first_y);
    Ok(StratifiedFit {
        beta: coef[s_count],
        se: var.sqrt(),
        strata,
        dropped_strata: dropped,
        n_treated,
        n_comparison: used.len() - n_treated,
        degenerate: constant || var == 0.0 || sse == 0.0,
    })
}

/// Two-sided normal p-value of `beta / se`; 1 for a zero estimate with zero
/// standard error.
pub fn p_value(beta: f64, se: f64) -> f64 {
    if !(se > 0.0) {
        return if beta == 0.0 { 1.0 } else { 0.0 };
    }
    let z = (beta / se).abs();
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    2.0 * (1.0 - n.cdf(z))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(stratum: u32, treated: bool, weight: f64, y: f64) -> Obs {
        Obs {
            stratum,
            treated,
            weight,
            y,
            cluster: 0,
        }
    }

    #[test]
    fn single_stratum_is_difference_in_means() {
        let o = vec![
            obs(5, true, 1.0, 1.0),
            obs(5, true, 1.0, 0.0),
            obs(5, false, 0.5, 1.0),
            obs(5, false, 1.5, 0.0),
        ];
        let f = fit_stratified(&o, Covariance::Hc0).unwrap();
        assert!((f.beta - (0.5 - 0.25)).abs() < 1e-15);
    }

    #[test]
    fn dense_and_cell_fits_agree() {
        let mut o = Vec::new();
        for i in 0..40u32 {
            let s = 4 + i % 3;
            let t = i % 4 == 0;
            let y = ((i * 7919) % 13) as f64 / 13.0;
            o.push(Obs {
                stratum: s,
                treated: t,
                weight: 0.3 + (i % 5) as f64,
                y,
                cluster: i as usize,
            });
        }
        let f = fit_stratified(&o, Covariance::Hc0).unwrap();
        let x = DMatrix::from_fn(o.len(), 4, |i, j| match j {
            0 => 1.0,
            1 => f64::from(o[i].stratum == 5),
            2 => f64::from(o[i].stratum == 6),
            _ => f64::from(o[i].treated),
        });
        let y = DVector::from_iterator(o.len(), o.iter().map(|r| r.y));
        let w = DVector::from_iterator(o.len(), o.iter().map(|r| r.weight));
        let (b, cov) = wls_hc0(&x, &y, &w).unwrap();
        assert!((b[3] - f.beta).abs() < 1e-12);
        assert!((cov[(3, 3)].sqrt() - f.se).abs() < 1e-12);
        // With singleton clusters the cluster-robust estimator is HC0.
        let g = fit_stratified(&o, Covariance::ClusterPatient).unwrap();
        assert!((g.se - f.se).abs() < 1e-12);
    }

    #[test]
    fn one_arm_stratum_dropped() {
        let o = vec![
            obs(4, true, 1.0, 1.0),
            obs(4, false, 1.0, 0.0),
            obs(7, false, 1.0, 1.0),
        ];
        let f = fit_stratified(&o, Covariance::Hc0).unwrap();
        assert_eq!(f.strata, [4]);
        assert_eq!(f.dropped_strata, [7]);
    }

    #[test]
    fn constant_outcome_is_degenerate() {
        let o = vec![obs(4, true, 1.0, 0.0), obs(4, false, 2.0, 0.0), obs(4, false, 1.0, 0.0)];
        let f = fit_stratified(&o, Covariance::Hc0).unwrap();
        assert!(f.degenerate);
        assert_eq!(f.se, 0.0);
        assert_eq!(p_value(f.beta, f.se), 1.0);
    }

    #[test]
    fn normal_p_value() {
        assert!((p_value(1.959963984540054, 1.0) - 0.05).abs() < 1e-9);
    }
}
