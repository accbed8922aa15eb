//! Entropy-balancing weights from the dual problem.
//!
//! Minimizing `sum w_j log(w_j / q_j)` subject to `sum w_j = W` and
//! `sum w_j c(Z_j) = W m` gives `w_j ∝ q_j exp(λ'c(Z_j))`, where `λ`
//! minimizes the convex dual `log sum_j q_j exp(λ'(c(Z_j) - m))`. Features
//! are centered and scaled by their comparison-arm moments before solving.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::lp::phase_one;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub max_iter: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { max_iter: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSolution {
    pub stratum_w: u32,
    /// One weight per comparison, summing to the treated count.
    pub weights: Vec<f64>,
    /// Dual variables on the original feature scale.
    pub multipliers: Vec<f64>,
    pub converged: bool,
    /// Largest `|weighted mean - target| / comparison SD` over constraints.
    pub max_constraint_violation: f64,
    pub iterations: usize,
}

/// Why the solver could not produce weights at all.
#[derive(Debug, Clone, PartialEq)]
pub enum DualFailure {
    /// Targets lie outside the convex hull of the comparison features.
    NoCommonSupport,
}

struct Problem {
    n: usize,
    r: usize,
    /// Row-major standardized features minus standardized targets.
    z: Vec<f64>,
    log_q: Vec<f64>,
}

impl Problem {
    fn eta(&self, lambda: &[f64], out: &mut [f64]) {
        for (j, e) in out.iter_mut().enumerate() {
            let row = &self.z[j * self.r..(j + 1) * self.r];
            *e = self.log_q[j] + row.iter().zip(lambda).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    /// Dual objective `log sum exp(eta)`, with normalized probabilities in `p`.
    fn objective(&self, lambda: &[f64], p: &mut [f64]) -> f64 {
        self.eta(lambda, p);
        let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in p.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        p.iter_mut().for_each(|v| *v /= sum);
        max + sum.ln()
    }

    fn gradient(&self, p: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.r];
        for (j, &pj) in p.iter().enumerate() {
            let row = &self.z[j * self.r..(j + 1) * self.r];
            g.iter_mut().zip(row).for_each(|(a, b)| *a += pj * b);
        }
        g
    }

    fn hessian(&self, p: &[f64], g: &[f64]) -> DMatrix<f64> {
        let r = self.r;
        // Upper triangle, row-major; rows with negligible mass are skipped.
        let mut upper = vec![0.0; r * r];
        let mut d = vec![0.0; r];
        for (j, &pj) in p.iter().enumerate() {
            if pj < 1e-17 {
                continue;
            }
            let row = &self.z[j * r..(j + 1) * r];
            d.iter_mut().zip(row.iter().zip(g)).for_each(|(x, (a, b))| *x = a - b);
            for a in 0..r {
                let da = pj * d[a];
                let out = &mut upper[a * r + a..(a + 1) * r];
                out.iter_mut().zip(&d[a..]).for_each(|(h, db)| *h += da * db);
            }
        }
        DMatrix::from_fn(r, r, |a, b| if a <= b { upper[a * r + b] } else { upper[b * r + a] })
    }
}

fn newton_direction(h: &DMatrix<f64>, g: &[f64]) -> Vec<f64> {
    let rhs = DVector::from_iterator(g.len(), g.iter().map(|v| -v));
    let scale = (h.trace() / h.nrows().max(1) as f64).max(1e-300);
    let mut ridge = 0.0;
    for _ in 0..20 {
        let mut m = h.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += ridge;
        }
        if let Some(ch) = m.cholesky() {
            let d = ch.solve(&rhs);
            if d.iter().all(|v| v.is_finite()) {
                return d.iter().copied().collect();
            }
        }
        ridge = if ridge == 0.0 { 1e-12 * scale } else { ridge * 10.0 };
    }
    rhs.iter().copied().collect()
}

fn within(g: &[f64], tol: &[f64]) -> bool {
    g.iter().zip(tol).all(|(v, t)| v.abs() <= *t)
}

fn weighted_sd(features: &[Vec<f64>], q: &[f64], c: usize) -> f64 {
    let qs: f64 = q.iter().sum();
    let m = features.iter().zip(q).map(|(f, qj)| qj * f[c]).sum::<f64>() / qs;
    let v = features.iter().zip(q).map(|(f, qj)| qj * (f[c] - m).powi(2)).sum::<f64>() / qs;
    if v > 0.0 {
        v.sqrt()
    } else {
        1.0
    }
}

/// Entropy-balancing weights for comparison rows `features` (one row per
/// comparison, one column per constraint) matching `targets`.
///
/// `base_weights` default to uniform; `w_total` is the required weight sum.
/// Targets on the boundary of a feature's range force zero weight on rows
/// away from it before the Newton iterations start.
pub fn solve_dual(
    features: &[Vec<f64>],
    targets: &[f64],
    base_weights: Option<&[f64]>,
    w_total: f64,
    tolerances: &[f64],
    cfg: &SolverConfig,
) -> std::result::Result<WeightSolution, DualFailure> {
    let n = features.len();
    let r0 = targets.len();
    assert_eq!(tolerances.len(), r0, "one tolerance per constraint");
    assert!(features.iter().all(|f| f.len() == r0), "feature rows match targets");
    if n == 0 {
        return Err(DualFailure::NoCommonSupport);
    }
    let q: Vec<f64> = match base_weights {
        Some(q) => q.to_vec(),
        None => vec![1.0; n],
    };

    // Boundary reduction and standardization.
    let mut active: Vec<bool> = q.iter().map(|&v| v > 0.0).collect();
    let mut cols: Vec<usize> = (0..r0).collect();
    loop {
        let mut changed = false;
        let mut next_cols = Vec::with_capacity(cols.len());
        for &c in &cols {
            let vals = (0..n).filter(|&j| active[j]).map(|j| features[j][c]);
            let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
            if !lo.is_finite() {
                return Err(DualFailure::NoCommonSupport);
            }
            let eps = 1e-12 * (hi - lo).max(lo.abs().max(hi.abs())).max(1e-300);
            let t = targets[c];
            if t < lo - eps || t > hi + eps {
                return Err(DualFailure::NoCommonSupport);
            }
            if hi - lo <= eps {
                changed = true;
                continue;
            }
            if (t - lo).abs() <= eps || (t - hi).abs() <= eps {
                let edge = if (t - lo).abs() <= eps { lo } else { hi };
                for j in 0..n {
                    if active[j] && (features[j][c] - edge).abs() > eps {
                        active[j] = false;
                    }
                }
                changed = true;
                continue;
            }
            next_cols.push(c);
        }
        cols = next_cols;
        if !changed {
            break;
        }
    }
    let rows: Vec<usize> = (0..n).filter(|&j| active[j]).collect();
    if rows.is_empty() {
        return Err(DualFailure::NoCommonSupport);
    }
    let r = cols.len();
    let q_sum: f64 = rows.iter().map(|&j| q[j]).sum();
    let mut center = vec![0.0; r];
    let mut scale = vec![0.0; r];
    for (k, &c) in cols.iter().enumerate() {
        let m = rows.iter().map(|&j| q[j] * features[j][c]).sum::<f64>() / q_sum;
        let v = rows.iter().map(|&j| q[j] * (features[j][c] - m).powi(2)).sum::<f64>() / q_sum;
        center[k] = m;
        scale[k] = if v > 0.0 { v.sqrt() } else { 1.0 };
    }
    let mut z = Vec::with_capacity(rows.len() * r);
    for &j in &rows {
        for (k, &c) in cols.iter().enumerate() {
            z.push((features[j][c] - center[k]) / scale[k] - (targets[c] - center[k]) / scale[k]);
        }
    }
    let problem = Problem {
        n: rows.len(),
        r,
        z,
        log_q: rows.iter().map(|&j| (q[j] / q_sum).ln()).collect(),
    };
    // Violations are reported relative to the SD over all comparisons; the
    // Newton tolerance is rescaled to the active-row standardization, with
    // headroom for rounding in the final recomputation.
    let full_sd: Vec<f64> = (0..r0).map(|c| weighted_sd(features, &q, c)).collect();
    let tol: Vec<f64> = cols
        .iter()
        .enumerate()
        .map(|(k, &c)| 0.5 * tolerances[c] * full_sd[c] / scale[k])
        .collect();

    let kl_floor = problem.log_q.iter().copied().fold(f64::INFINITY, f64::min);
    let mut lambda = vec![0.0; r];
    let mut p = vec![0.0; problem.n];
    let mut trial_p = vec![0.0; problem.n];
    let mut f = problem.objective(&lambda, &mut p);
    let mut g = problem.gradient(&p);
    let mut converged = within(&g, &tol);
    let mut iterations = 0;
    while !converged && iterations < cfg.max_iter {
        iterations += 1;
        let h = problem.hessian(&p, &g);
        let d = newton_direction(&h, &g);
        let slope: f64 = d.iter().zip(&g).map(|(a, b)| a * b).sum();
        let mut step = 1.0;
        let mut accepted = false;
        // Near the optimum the decrease falls below the objective's rounding.
        let slack = 8.0 * f64::EPSILON * f.abs().max(1.0);
        for _ in 0..60 {
            let trial: Vec<f64> = lambda.iter().zip(&d).map(|(l, di)| l + step * di).collect();
            let ft = problem.objective(&trial, &mut trial_p);
            if ft.is_finite() && ft <= f + 1e-4 * step * slope.min(0.0) + slack {
                lambda = trial;
                std::mem::swap(&mut p, &mut trial_p);
                f = ft;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        // The dual minimum is minus the smallest feasible KL divergence, which
        // cannot exceed -min log q; a lower objective certifies an empty hull.
        if f < kl_floor - 1e-9 {
            return Err(DualFailure::NoCommonSupport);
        }
        g = problem.gradient(&p);
        converged = within(&g, &tol);
        if lambda.iter().any(|l| l.abs() > 1e8) {
            break;
        }
    }

    if !converged {
        // Distinguish an empty hull from slow convergence.
        let mut a: Vec<Vec<f64>> = vec![vec![1.0; problem.n]];
        for k in 0..r {
            a.push((0..problem.n).map(|j| problem.z[j * r + k]).collect());
        }
        let mut b = vec![1.0];
        b.extend(std::iter::repeat(0.0).take(r));
        if phase_one(&a, &b) > 1e-7 {
            return Err(DualFailure::NoCommonSupport);
        }
    }

    let mut weights = vec![0.0; n];
    for (&j, &pj) in rows.iter().zip(&p) {
        weights[j] = w_total * pj;
    }
    let mut multipliers = vec![0.0; r0];
    for (k, &c) in cols.iter().enumerate() {
        multipliers[c] = lambda[k] / scale[k];
    }
    let mut worst = 0.0f64;
    for c in 0..r0 {
        let mean = features.iter().zip(&weights).map(|(f, w)| w * f[c]).sum::<f64>() / w_total;
        let v = (mean - targets[c]).abs() / full_sd[c];
        worst = worst.max(v);
        if v > tolerances[c] {
            converged = false;
        }
    }
    Ok(WeightSolution {
        stratum_w: 0,
        weights,
        multipliers,
        converged,
        max_constraint_violation: worst,
        iterations,
    })
}

/// Kullback-Leibler divergence `sum p_j log(p_j / q_j)` of normalized weights.
pub fn kl_divergence(weights: &[f64], base: &[f64]) -> f64 {
    let ws: f64 = weights.iter().sum();
    let qs: f64 = base.iter().sum();
    weights
        .iter()
        .zip(base)
        .filter(|(w, _)| **w > 0.0)
        .map(|(w, q)| {
            let p = w / ws;
            p * (p / (q / qs)).ln()
        })
        .sum()
}

pub(crate) fn check_result(r: std::result::Result<WeightSolution, DualFailure>, stratum: u32) -> Result<WeightSolution> {
    match r {
        Ok(mut s) => {
            s.stratum_w = stratum;
            Ok(s)
        }
        Err(DualFailure::NoCommonSupport) => Err(Error::NoCommonSupport { stratum }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(xs: &[f64]) -> Vec<Vec<f64>> {
        xs.iter().map(|&x| vec![x]).collect()
    }

    fn solve(xs: &[f64], target: f64, w_total: f64) -> WeightSolution {
        solve_dual(&col(xs), &[target], None, w_total, &[1e-10], &SolverConfig::default()).unwrap()
    }

    #[test]
    fn two_points_pinned() {
        let s = solve(&[0.0, 1.0], 0.75, 1.0);
        assert!((s.weights[0] - 0.25).abs() < 1e-10);
        assert!((s.weights[1] - 0.75).abs() < 1e-10);
    }

    #[test]
    fn uniform_when_target_is_mean() {
        let s = solve(&[0.0, 1.0, 2.0], 1.0, 1.0);
        assert_eq!(s.iterations, 0);
        for w in s.weights {
            assert!((w - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn closed_form_three_points() {
        // Weights proportional to a^x with a^2 - a - 3 = 0.
        let a = (1.0 + 13f64.sqrt()) / 2.0;
        let z = 1.0 + a + a * a;
        let s = solve(&[0.0, 1.0, 2.0], 1.5, 1.0);
        for (k, w) in s.weights.iter().enumerate() {
            assert!((w - a.powi(k as i32) / z).abs() < 1e-10);
        }
        assert!((s.weights[0] - 0.1162).abs() < 1e-4);
        assert!((s.weights[2] - 0.6162).abs() < 1e-4);
    }

    #[test]
    fn outside_hull_rejected() {
        let r = solve_dual(&col(&[0.0, 1.0]), &[1.5], None, 1.0, &[1e-8], &SolverConfig::default());
        assert_eq!(r.unwrap_err(), DualFailure::NoCommonSupport);
    }

    #[test]
    fn boundary_target_zeroes_other_rows() {
        let f = vec![vec![0.0, 1.0], vec![0.0, 3.0], vec![1.0, 2.0], vec![1.0, 5.0]];
        let s = solve_dual(&f, &[0.0, 2.5], None, 4.0, &[1e-10; 2], &SolverConfig::default()).unwrap();
        assert!(s.converged);
        assert_eq!(&s.weights[2..], &[0.0, 0.0]);
        assert!((s.weights[0] - 1.0).abs() < 1e-9 && (s.weights[1] - 3.0).abs() < 1e-9);
    }

    #[test]
    fn weight_sum_exact() {
        let xs: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin()).collect();
        let s = solve(&xs, 0.3, 7.0);
        let sum: f64 = s.weights.iter().sum();
        assert!(((sum - 7.0) / 7.0).abs() < 1e-12);
    }
}
