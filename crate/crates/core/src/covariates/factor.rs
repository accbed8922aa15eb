//! Maximum-likelihood exploratory factor analysis with varimax rotation.
//!
//! Extraction runs EM on the correlation matrix of the standardized data.
//! Rotation uses Kaiser-normalized varimax. Factors are put in a canonical
//! order (descending sum of squared loadings) with the sign chosen so that each
//! factor's largest-magnitude loading is positive.

use std::fmt::Write as _;

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_ROWS: usize = 200;
pub const UNIQUENESS_FLOOR: f64 = 0.005;
pub const DISPLAY_THRESHOLD: f64 = 0.2;

const EM_TOL: f64 = 1e-9;
const EM_MAX_ITER: usize = 50_000;
const VARIMAX_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorModel {
    pub variable_names: Vec<String>,
    /// p x k rotated loadings.
    pub loadings: DMatrix<f64>,
    pub uniquenesses: DVector<f64>,
    /// k x k orthogonal matrix taking unrotated to rotated loadings.
    pub rotation: DMatrix<f64>,
    pub ss_loadings: Vec<f64>,
    pub proportion_var: Vec<f64>,
    pub cumulative_var: Vec<f64>,
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
    /// p x k regression-score coefficients applied to standardized rows.
    pub score_weights: DMatrix<f64>,
    pub heywood: bool,
    pub iterations: usize,
    pub converged: bool,
}

impl FactorModel {
    pub fn n_factors(&self) -> usize {
        self.loadings.ncols()
    }

    /// Model-implied correlation matrix `LL' + diag(psi)`.
    pub fn implied_correlation(&self) -> DMatrix<f64> {
        let mut s = &self.loadings * self.loadings.transpose();
        for i in 0..s.nrows() {
            s[(i, i)] += self.uniquenesses[i];
        }
        s
    }

    /// Regression-method scores for one raw row, standardized with the fit-time
    /// means and SDs.
    pub fn score(&self, row: &[f64]) -> Vec<f64> {
        let k = self.n_factors();
        let mut out = vec![0.0; k];
        for (i, &x) in row.iter().enumerate() {
            let z = (x - self.means[i]) / self.sds[i];
            for (j, o) in out.iter_mut().enumerate() {
                *o += z * self.score_weights[(i, j)];
            }
        }
        out
    }

    /// Plain-text loadings table: one row per variable, loadings below
    /// `threshold` in absolute value left blank, followed by the
    /// `SS loadings`, `Proportion Var` and `Cumulative Var` rows.
    pub fn render(&self, threshold: f64) -> String {
        let k = self.n_factors();
        let width = self
            .variable_names
            .iter()
            .map(String::len)
            .chain(std::iter::once("Cumulative Var".len()))
            .max()
            .unwrap_or(0);
        let mut s = String::new();
        let _ = write!(s, "{:width$}", "");
        for j in 0..k {
            let _ = write!(s, " {:>8}", format!("Factor{}", j + 1));
        }
        s.push('\n');
        for (i, name) in self.variable_names.iter().enumerate() {
            let _ = write!(s, "{name:width$}");
            for j in 0..k {
                let l = self.loadings[(i, j)];
                if l.abs() < threshold {
                    let _ = write!(s, " {:>8}", "");
                } else {
                    let _ = write!(s, " {l:>8.3}");
                }
            }
            s.push('\n');
        }
        s.push('\n');
        for (label, vals) in [
            ("SS loadings", &self.ss_loadings),
            ("Proportion Var", &self.proportion_var),
            ("Cumulative Var", &self.cumulative_var),
        ] {
            let _ = write!(s, "{label:width$}");
            for v in vals {
                let _ = write!(s, " {v:>8.3}");
            }
            s.push('\n');
        }
        s
    }
}

/// Congruence coefficient between two loading vectors.
pub fn tucker_congruence(a: &[f64], b: &[f64]) -> f64 {
    let ab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let aa: f64 = a.iter().map(|x| x * x).sum();
    let bb: f64 = b.iter().map(|x| x * x).sum();
    ab / (aa * bb).sqrt()
}

/// Fits a `k`-factor model to the rows of `data` (n x p, complete).
pub fn fit_factor_model(data: &DMatrix<f64>, names: Vec<String>, k: usize) -> Result<FactorModel> {
    let (n, p) = data.shape();
    if n < MIN_ROWS {
        return Err(Error::InvalidInput(format!(
            "factor analysis needs at least {MIN_ROWS} complete rows, got {n}"
        )));
    }
    if names.len() != p {
        return Err(Error::InvalidInput(format!("{} names for {p} columns", names.len())));
    }
    if k == 0 || k >= p {
        return Err(Error::InvalidInput(format!("cannot extract {k} factors from {p} variables")));
    }
    if data.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("non-finite value in factor data".into()));
    }

    let means: Vec<f64> = (0..p).map(|j| data.column(j).mean()).collect();
    let mut sds = Vec::with_capacity(p);
    for j in 0..p {
        let v = data.column(j).iter().map(|x| (x - means[j]).powi(2)).sum::<f64>() / (n - 1) as f64;
        if v <= 0.0 {
            return Err(Error::InvalidInput(format!("variable {} is constant", names[j])));
        }
        sds.push(v.sqrt());
    }
    let z = DMatrix::from_fn(n, p, |i, j| (data[(i, j)] - means[j]) / sds[j]);
    let mut r = z.transpose() * &z / (n - 1) as f64;
    r = (&r + r.transpose()) * 0.5;
    for i in 0..p {
        r[(i, i)] = 1.0;
    }

    let (unrotated, psi, heywood, iterations, converged) = ml_extract(&r, k);
    if heywood {
        warn!("Heywood case in factor extraction; uniquenesses clamped to {UNIQUENESS_FLOOR}");
    }
    if !converged {
        warn!("factor extraction stopped after {iterations} iterations without converging");
    }

    let (rotated, rotation) = varimax(&unrotated);
    let (loadings, rotation) = canonicalize(rotated, rotation);

    let ss_loadings: Vec<f64> = (0..k).map(|j| loadings.column(j).norm_squared()).collect();
    let proportion_var: Vec<f64> = ss_loadings.iter().map(|s| s / p as f64).collect();
    let cumulative_var: Vec<f64> = proportion_var
        .iter()
        .scan(0.0, |acc, v| {
            *acc += v;
            Some(*acc)
        })
        .collect();

    let score_weights = match r.clone().cholesky() {
        Some(ch) => ch.solve(&loadings),
        None => {
            let mut sigma = &loadings * loadings.transpose();
            for i in 0..p {
                sigma[(i, i)] += psi[i];
            }
            sigma
                .cholesky()
                .ok_or_else(|| Error::Numerical("model-implied correlation not positive definite".into()))?
                .solve(&loadings)
        }
    };

    Ok(FactorModel {
        variable_names: names,
        loadings,
        uniquenesses: psi,
        rotation,
        ss_loadings,
        proportion_var,
        cumulative_var,
        means,
        sds,
        score_weights,
        heywood,
        iterations,
        converged,
    })
}

/// EM for the ML factor model on a correlation matrix. Returns unrotated
/// loadings, uniquenesses, Heywood flag, iterations and convergence.
fn ml_extract(r: &DMatrix<f64>, k: usize) -> (DMatrix<f64>, DVector<f64>, bool, usize, bool) {
    let p = r.nrows();
    let mut heywood = false;
    let mut psi = match r.clone().try_inverse() {
        Some(inv) if (0..p).all(|i| inv[(i, i)] > 0.0 && inv[(i, i)].is_finite()) => {
            DVector::from_fn(p, |i, _| (1.0 - 0.5 * k as f64 / p as f64) / inv[(i, i)])
        }
        _ => DVector::from_element(p, 0.5),
    };
    psi.apply(|v| *v = v.clamp(UNIQUENESS_FLOOR, 1.0));

    // Principal-axis start on the scaled correlation matrix.
    let s = DMatrix::from_fn(p, p, |i, j| r[(i, j)] / (psi[i] * psi[j]).sqrt());
    let eig = s.symmetric_eigen();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut lambda = DMatrix::from_fn(p, k, |i, j| {
        let c = order[j];
        let e = (eig.eigenvalues[c] - 1.0).max(1e-3);
        psi[i].sqrt() * eig.eigenvectors[(i, c)] * e.sqrt()
    });

    let eye = DMatrix::<f64>::identity(k, k);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < EM_MAX_ITER {
        iterations += 1;
        let a = DMatrix::from_fn(p, k, |i, j| lambda[(i, j)] / psi[i]);
        let m = &eye + lambda.transpose() * &a;
        let Some(m_inv) = m.try_inverse() else { break };
        let beta = m_inv * a.transpose();
        let rb = r * beta.transpose();
        let czz = &eye - &beta * &lambda + &beta * &rb;
        let Some(czz_inv) = czz.try_inverse() else { break };
        let new_lambda = &rb * czz_inv;
        let mut new_psi = DVector::from_fn(p, |i, _| {
            r[(i, i)] - (0..k).map(|j| new_lambda[(i, j)] * rb[(i, j)]).sum::<f64>()
        });
        for v in new_psi.iter_mut() {
            if *v < UNIQUENESS_FLOOR {
                *v = UNIQUENESS_FLOOR;
                heywood = true;
            }
        }
        let delta = (&new_lambda - &lambda).amax().max((&new_psi - &psi).amax());
        lambda = new_lambda;
        psi = new_psi;
        if delta < EM_TOL {
            converged = true;
            break;
        }
    }
    (lambda, psi, heywood, iterations, converged)
}

/// Kaiser-normalized varimax. Returns rotated loadings and the rotation matrix.
pub fn varimax(x: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let (p, k) = x.shape();
    if k < 2 {
        return (x.clone(), DMatrix::identity(k, k));
    }
    let sc: Vec<f64> = (0..p)
        .map(|i| {
            let s = x.row(i).norm();
            if s > 0.0 { s } else { 1.0 }
        })
        .collect();
    let xn = DMatrix::from_fn(p, k, |i, j| x[(i, j)] / sc[i]);
    let mut t = DMatrix::<f64>::identity(k, k);
    let mut d = 0.0;
    for _ in 0..1000 {
        let z = &xn * &t;
        let col_ss: Vec<f64> = (0..k).map(|j| z.column(j).norm_squared() / p as f64).collect();
        let target = DMatrix::from_fn(p, k, |i, j| z[(i, j)].powi(3) - z[(i, j)] * col_ss[j]);
        let b = xn.transpose() * target;
        let svd = b.svd(true, true);
        let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
        t = u * vt;
        let d_past = d;
        d = svd.singular_values.sum();
        if d < d_past * (1.0 + VARIMAX_EPS) {
            break;
        }
    }
    let z = &xn * &t;
    let rotated = DMatrix::from_fn(p, k, |i, j| z[(i, j)] * sc[i]);
    (rotated, t)
}

fn canonicalize(loadings: DMatrix<f64>, rotation: DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let k = loadings.ncols();
    let ss: Vec<f64> = (0..k).map(|j| loadings.column(j).norm_squared()).collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| ss[b].total_cmp(&ss[a]).then(a.cmp(&b)));
    let mut out_l = loadings.clone();
    let mut out_r = rotation.clone();
    for (dst, &src) in order.iter().enumerate() {
        let col = loadings.column(src);
        let imax = col.iamax();
        let sign = if col[imax] < 0.0 { -1.0 } else { 1.0 };
        out_l.set_column(dst, &(col * sign));
        out_r.set_column(dst, &(rotation.column(src) * sign));
    }
    (out_l, out_r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn simulate(loadings: &DMatrix<f64>, n: usize, seed: u64) -> DMatrix<f64> {
        let (p, k) = loadings.shape();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = DMatrix::zeros(n, p);
        for i in 0..n {
            let f: Vec<f64> = (0..k).map(|_| StandardNormal.sample(&mut rng)).collect();
            for j in 0..p {
                let common: f64 = (0..k).map(|c| loadings[(j, c)] * f[c]).sum();
                let psi = 1.0 - loadings.row(j).norm_squared();
                let e: f64 = StandardNormal.sample(&mut rng);
                out[(i, j)] = common + psi.sqrt() * e;
            }
        }
        out
    }

    fn names(p: usize) -> Vec<String> {
        (0..p).map(|i| format!("V{i}")).collect()
    }

    #[test]
    fn rejects_small_samples() {
        let data = DMatrix::from_element(50, 6, 1.0);
        assert!(fit_factor_model(&data, names(6), 2).is_err());
    }

    #[test]
    fn two_factor_recovery() {
        let p = 8;
        let l = DMatrix::from_fn(p, 2, |i, j| if i % 2 == j { 0.8 } else { 0.0 });
        let data = simulate(&l, 2000, 7);
        let m = fit_factor_model(&data, names(p), 2).unwrap();
        assert!(m.converged);
        for j in 0..2 {
            let best = (0..2)
                .map(|c| tucker_congruence(l.column(c).as_slice(), m.loadings.column(j).as_slice()).abs())
                .fold(0.0, f64::max);
            assert!(best > 0.98, "congruence {best}");
        }
        assert!(m.cumulative_var.windows(2).all(|w| w[1] >= w[0]));
        assert!(m.ss_loadings[0] >= m.ss_loadings[1]);
        let rt = &m.rotation.transpose() * &m.rotation;
        assert!((rt - DMatrix::<f64>::identity(2, 2)).amax() < 1e-10);
    }

    #[test]
    fn duplicated_columns_single_factor() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 300;
        let x: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let data = DMatrix::from_fn(n, 4, |i, j| x[i] * (j + 1) as f64 + j as f64);
        let m = fit_factor_model(&data, names(4), 1).unwrap();
        assert!(m.heywood);
        for i in 0..4 {
            assert!((m.loadings[(i, 0)] - 1.0).abs() < 0.01, "{}", m.loadings[(i, 0)]);
        }
        assert!((m.cumulative_var[0] - 1.0).abs() < 0.01);
    }

    #[test]
    fn scores_centered_and_zero_at_means() {
        let p = 6;
        let l = DMatrix::from_fn(p, 2, |i, j| if i < 3 { [0.7, 0.1][j] } else { [0.1, 0.7][j] });
        let data = simulate(&l, 500, 11);
        let m = fit_factor_model(&data, names(p), 2).unwrap();
        assert_eq!(m.score(&m.means), vec![0.0, 0.0]);
        let mut mean = [0.0; 2];
        for i in 0..data.nrows() {
            let s = m.score(data.row(i).transpose().as_slice());
            mean[0] += s[0] / 500.0;
            mean[1] += s[1] / 500.0;
        }
        assert!(mean.iter().all(|v| v.abs() < 1e-8));
        let row: Vec<f64> = data.row(0).iter().copied().collect();
        assert_eq!(m.score(&row), m.score(&row));
    }

    #[test]
    fn render_has_summary_rows() {
        let p = 6;
        let l = DMatrix::from_fn(p, 2, |i, j| if (i < 3) == (j == 0) { 0.8 } else { 0.0 });
        let m = fit_factor_model(&simulate(&l, 400, 5), names(p), 2).unwrap();
        let table = m.render(DISPLAY_THRESHOLD);
        for label in ["SS loadings", "Proportion Var", "Cumulative Var", "Factor1", "Factor2"] {
            assert!(table.contains(label));
        }
        // Each variable loads on one factor, the other entry is blanked.
        let v0 = table.lines().find(|l| l.starts_with("V0")).unwrap();
        assert_eq!(v0.split_whitespace().count(), 2);
    }
}
