//! Weighted discrete-time hazard model with complementary log-log link:
//! `p_im = 1 - exp(-exp(gamma_m + alpha_t + tau T_i))`, fitted by Newton's
//! method on cell-aggregated weighted Bernoulli likelihood.

use std::collections::BTreeMap;

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::outcomes::{OutcomePanel, Outcome};
use super::Weighting;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CllConfig {
    pub horizon: u32,
    pub max_iter: usize,
    pub gradient_tol: f64,
}

impl Default for CllConfig {
    fn default() -> Self {
        CllConfig {
            horizon: 24,
            max_iter: 100,
            gradient_tol: 1e-6,
        }
    }
}

/// One patient-stratum record: at risk from period 1 until the event or the horizon.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CllObs {
    pub stratum: u32,
    pub treated: bool,
    pub weight: f64,
    /// Period of the event, if it happens within the horizon.
    pub event: Option<u32>,
    pub cluster: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HazardFit {
    /// Baseline per period `1..=horizon`; periods merged for identification
    /// share a value.
    pub gamma: Vec<f64>,
    /// Stratum effects relative to the first stratum (which has 0).
    pub alpha: Vec<(u32, f64)>,
    pub tau: f64,
    /// Patient-clustered sandwich standard error of `tau`.
    pub tau_se: f64,
    pub loglik: f64,
    pub gradient_norm: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Groups of periods sharing one baseline parameter, when any were merged.
    pub merged_periods: Vec<Vec<u32>>,
    pub dropped_strata: Vec<u32>,
}

impl HazardFit {
    pub fn hazard(&self, m: u32, stratum: u32, treated: bool) -> f64 {
        let a = self
            .alpha
            .iter()
            .find(|(s, _)| *s == stratum)
            .map_or(0.0, |(_, a)| *a);
        let eta = self.gamma[(m - 1) as usize] + a + if treated { self.tau } else { 0.0 };
        -(-eta.exp()).exp_m1()
    }

    /// Fitted survival through period `m`.
    pub fn survival(&self, m: u32, stratum: u32, treated: bool) -> f64 {
        (1..=m).map(|k| 1.0 - self.hazard(k, stratum, treated)).product()
    }
}

#[derive(Default, Clone, Copy)]
struct Cell {
    at_risk: f64,
    events: f64,
}

/// Per-cell contributions at linear predictor `eta` with weighted event
/// count `e` among weighted at-risk `n`: log-likelihood, first and second
/// derivative in `eta`.
fn cell_terms(eta: f64, e: f64, n: f64) -> (f64, f64, f64) {
    let mu = eta.exp();
    if e == 0.0 {
        return (-n * mu, -n * mu, -n * mu);
    }
    let log_p = (-(-mu).exp_m1()).ln();
    let (ratio, curv) = if mu < 1e-8 {
        (1.0 - 0.5 * mu, mu * (-0.5 + mu / 6.0))
    } else {
        let em1 = mu.exp_m1();
        (mu / em1, (em1 - mu * mu.exp()) / (em1 * em1) * mu)
    };
    let ll = e * log_p - (n - e) * mu;
    let d1 = e * ratio - (n - e) * mu;
    let d2 = e * curv - (n - e) * mu;
    (ll, d1, d2)
}

struct Model {
    /// Parameter index of each period's baseline.
    bin_of: Vec<usize>,
    n_bins: usize,
    /// Strata kept, the first is the reference.
    strata: Vec<u32>,
    cells: BTreeMap<(u32, u32, bool), Cell>,
}

impl Model {
    fn k(&self) -> usize {
        self.n_bins + self.strata.len() - 1 + 1
    }

    fn index(&self, m: u32, stratum: u32, treated: bool) -> Vec<usize> {
        let mut v = vec![self.bin_of[(m - 1) as usize]];
        let p = self.strata.iter().position(|&s| s == stratum).expect("kept stratum");
        if p > 0 {
            v.push(self.n_bins + p - 1);
        }
        if treated {
            v.push(self.k() - 1);
        }
        v
    }

    fn eta(&self, theta: &DVector<f64>, m: u32, stratum: u32, treated: bool) -> f64 {
        self.index(m, stratum, treated).iter().map(|&i| theta[i]).sum()
    }

    fn evaluate(&self, theta: &DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>) {
        let k = self.k();
        let mut ll = 0.0;
        let mut g = DVector::zeros(k);
        let mut h = DMatrix::zeros(k, k);
        for (&(m, s, t), c) in &self.cells {
            let idx = self.index(m, s, t);
            let eta: f64 = idx.iter().map(|&i| theta[i]).sum();
            let (l, d1, d2) = cell_terms(eta, c.events, c.at_risk);
            ll += l;
            for &a in &idx {
                g[a] += d1;
                for &b in &idx {
                    h[(a, b)] += d2;
                }
            }
        }
        (ll, g, h)
    }

    fn loglik(&self, theta: &DVector<f64>) -> f64 {
        self.cells
            .iter()
            .map(|(&(m, s, t), c)| cell_terms(self.eta(theta, m, s, t), c.events, c.at_risk).0)
            .sum()
    }
}

/// Groups periods so that each group has weighted events and non-events;
/// a trailing group lacking either is merged into the previous one.
fn period_bins(events: &[f64], at_risk: &[f64]) -> Vec<usize> {
    let mut bin_of = vec![0; events.len()];
    let mut bin = 0;
    let (mut e, mut n) = (0.0, 0.0);
    let mut open = false;
    for m in 0..events.len() {
        bin_of[m] = bin;
        e += events[m];
        n += at_risk[m];
        open = true;
        if e > 0.0 && n - e > 0.0 {
            bin += 1;
            e = 0.0;
            n = 0.0;
            open = false;
        }
    }
    if open && bin > 0 {
        for b in bin_of.iter_mut() {
            if *b == bin {
                *b = bin - 1;
            }
        }
    }
    bin_of
}

/// Fits the model on raw records.
pub fn fit_cll_obs(obs: &[CllObs], cfg: &CllConfig) -> Result<HazardFit> {
    let horizon = cfg.horizon;
    if horizon == 0 {
        return Err(Error::Config("CLL horizon must be positive".into()));
    }
    let obs: Vec<&CllObs> = obs.iter().filter(|o| o.weight > 0.0).collect();
    let total_events: f64 = obs.iter().filter(|o| o.event.is_some_and(|e| e <= horizon)).map(|o| o.weight).sum();
    if total_events <= 0.0 {
        return Err(Error::InvalidInput("no events within the horizon".into()));
    }

    // Strata without events (or without survivors) have unbounded effects
    // and carry no information on tau; they are left out.
    let mut per_stratum: BTreeMap<u32, (f64, f64)> = BTreeMap::new();
    for o in &obs {
        let e = per_stratum.entry(o.stratum).or_default();
        let exit = o.event.filter(|&e| e <= horizon);
        let periods = f64::from(exit.unwrap_or(horizon));
        e.0 += o.weight * periods;
        if exit.is_some() {
            e.1 += o.weight;
        }
    }
    let (strata, dropped): (Vec<u32>, Vec<u32>) =
        per_stratum.iter().map(|(s, _)| *s).partition(|s| {
            let (n, e) = per_stratum[s];
            e > 0.0 && n - e > 0.0
        });
    if !dropped.is_empty() {
        warn!("strata {dropped:?} have no events or no survivors; left out of the hazard model");
    }
    let obs: Vec<&CllObs> = obs.into_iter().filter(|o| strata.contains(&o.stratum)).collect();
    if !(obs.iter().any(|o| o.treated) && obs.iter().any(|o| !o.treated)) {
        return Err(Error::InvalidInput("hazard model needs both arms".into()));
    }

    let mut cells: BTreeMap<(u32, u32, bool), Cell> = BTreeMap::new();
    let mut ev = vec![0.0; horizon as usize];
    let mut risk = vec![0.0; horizon as usize];
    for o in &obs {
        let exit = o.event.filter(|&e| e <= horizon);
        let last = exit.unwrap_or(horizon);
        for m in 1..=last {
            let c = cells.entry((m, o.stratum, o.treated)).or_default();
            c.at_risk += o.weight;
            risk[(m - 1) as usize] += o.weight;
            if exit == Some(m) {
                c.events += o.weight;
                ev[(m - 1) as usize] += o.weight;
            }
        }
    }
    let bin_of = period_bins(&ev, &risk);
    let n_bins = bin_of.iter().max().map_or(0, |b| b + 1);
    let mut merged: Vec<Vec<u32>> = Vec::new();
    for b in 0..n_bins {
        let ms: Vec<u32> = (0..horizon).filter(|&m| bin_of[m as usize] == b).map(|m| m + 1).collect();
        if ms.len() > 1 {
            merged.push(ms);
        }
    }
    if !merged.is_empty() {
        warn!("periods merged for identification: {merged:?}");
    }
    let model = Model {
        bin_of,
        n_bins,
        strata: strata.clone(),
        cells,
    };

    let k = model.k();
    let mut theta = DVector::zeros(k);
    // Start the baseline at the pooled cloglog of the crude hazard.
    let mut be = vec![0.0; n_bins];
    let mut bn = vec![0.0; n_bins];
    for m in 0..horizon as usize {
        be[model.bin_of[m]] += ev[m];
        bn[model.bin_of[m]] += risk[m];
    }
    for b in 0..n_bins {
        let p = (be[b] / bn[b]).clamp(1e-9, 1.0 - 1e-9);
        theta[b] = (-(-p).ln_1p()).ln();
    }

    let (mut ll, mut g, mut h) = model.evaluate(&theta);
    let mut iterations = 0;
    let mut converged = g.amax() <= cfg.gradient_tol;
    while !converged && iterations < cfg.max_iter {
        iterations += 1;
        let neg = -&h;
        let step = match neg.clone().cholesky() {
            Some(ch) => ch.solve(&g),
            None => neg
                .lu()
                .solve(&g)
                .ok_or_else(|| Error::Numerical("singular hazard information".into()))?,
        };
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let trial = &theta + t * &step;
            let lt = model.loglik(&trial);
            if lt.is_finite() && lt >= ll {
                theta = trial;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
        (ll, g, h) = model.evaluate(&theta);
        converged = g.amax() <= cfg.gradient_tol;
    }
    if !converged {
        warn!("hazard model not converged after {iterations} iterations (gradient {:.2e})", g.amax());
    }

    // Sandwich with patient-level score clusters.
    let info = -&h;
    let bread = info
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Numerical("singular hazard information".into()))?;
    let mut scores: BTreeMap<usize, DVector<f64>> = BTreeMap::new();
    for o in &obs {
        let exit = o.event.filter(|&e| e <= horizon);
        let last = exit.unwrap_or(horizon);
        let u = scores.entry(o.cluster).or_insert_with(|| DVector::zeros(k));
        for m in 1..=last {
            let idx = model.index(m, o.stratum, o.treated);
            let eta: f64 = idx.iter().map(|&i| theta[i]).sum();
            let y = if exit == Some(m) { 1.0 } else { 0.0 };
            let (_, d1, _) = cell_terms(eta, o.weight * y, o.weight);
            for i in idx {
                u[i] += d1;
            }
        }
    }
    let mut meat = DMatrix::zeros(k, k);
    for u in scores.values() {
        meat += u * u.transpose();
    }
    let cov = &bread * meat * &bread;

    let gamma = (0..horizon as usize).map(|m| theta[model.bin_of[m]]).collect();
    let mut alpha = vec![(strata[0], 0.0)];
    for (i, &s) in strata.iter().enumerate().skip(1) {
        alpha.push((s, theta[n_bins + i - 1]));
    }
    Ok(HazardFit {
        gamma,
        alpha,
        tau: theta[k - 1],
        tau_se: cov[(k - 1, k - 1)].max(0.0).sqrt(),
        loglik: ll,
        gradient_norm: g.amax(),
        converged,
        iterations,
        merged_periods: merged,
        dropped_strata: dropped,
    })
}

/// Mortality hazard model on the outcome panel up to `cfg.horizon`.
pub fn fit_cll(panel: &OutcomePanel, weighting: Weighting, cfg: &CllConfig) -> Result<HazardFit> {
    panel.check(Outcome::Dead, cfg.horizon)?;
    let obs: Vec<CllObs> = panel
        .rows
        .iter()
        .map(|r| CllObs {
            stratum: r.stratum,
            treated: r.treated(),
            weight: match weighting {
                Weighting::Balanced => r.weight,
                Weighting::Uniform => r.uniform_weight,
            },
            event: r.death_period(),
            cluster: r.cluster,
        })
        .collect();
    fit_cll_obs(&obs, cfg)
}

/// Weighted log-likelihood and its analytic gradient at arbitrary parameters,
/// for derivative checks. Parameters are ordered: one baseline per period,
/// stratum effects for all but the first stratum, then `tau`. No periods are
/// merged.
pub fn loglik_and_gradient(obs: &[CllObs], horizon: u32, theta: &[f64]) -> (f64, Vec<f64>) {
    let mut strata: Vec<u32> = obs.iter().map(|o| o.stratum).collect();
    strata.sort_unstable();
    strata.dedup();
    let mut cells: BTreeMap<(u32, u32, bool), Cell> = BTreeMap::new();
    for o in obs {
        let exit = o.event.filter(|&e| e <= horizon);
        for m in 1..=exit.unwrap_or(horizon) {
            let c = cells.entry((m, o.stratum, o.treated)).or_default();
            c.at_risk += o.weight;
            if exit == Some(m) {
                c.events += o.weight;
            }
        }
    }
    let model = Model {
        bin_of: (0..horizon as usize).collect(),
        n_bins: horizon as usize,
        strata,
        cells,
    };
    let theta = DVector::from_column_slice(theta);
    let (ll, g, _) = model.evaluate(&theta);
    (ll, g.iter().copied().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cell_derivatives_match_finite_differences() {
        for &(eta, e, n) in &[(-2.0, 3.0, 40.0), (0.3, 5.0, 6.0), (-6.0, 0.5, 100.0)] {
            let (_, d1, d2) = cell_terms(eta, e, n);
            let h = 1e-5;
            let f = |x: f64| cell_terms(x, e, n);
            let fd1 = (f(eta + h).0 - f(eta - h).0) / (2.0 * h);
            let fd2 = (f(eta + h).1 - f(eta - h).1) / (2.0 * h);
            assert!(((d1 - fd1) / d1).abs() < 1e-7, "{d1} {fd1}");
            assert!(((d2 - fd2) / d2).abs() < 1e-7, "{d2} {fd2}");
        }
    }

    #[test]
    fn empty_periods_merge() {
        let bins = period_bins(&[1.0, 0.0, 2.0, 0.0, 0.0], &[10.0, 9.0, 9.0, 7.0, 7.0]);
        assert_eq!(bins, [0, 1, 1, 1, 1]);
    }

    #[test]
    fn small_fit_converges() {
        let mut obs = Vec::new();
        for i in 0..40 {
            let event = if i % 5 == 0 { Some(1 + (i % 3) as u32) } else { None };
            obs.push(CllObs {
                stratum: 5,
                treated: i % 2 == 0,
                weight: 1.0,
                event,
                cluster: i,
            });
        }
        let fit = fit_cll_obs(&obs, &CllConfig { horizon: 3, ..CllConfig::default() }).unwrap();
        assert!(fit.converged);
        assert!(fit.gradient_norm <= 1e-6);
    }
}
