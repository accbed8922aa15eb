//! Moment constraints: raw means, interactions, polynomial terms and second
//! moments of named covariate columns.

use std::collections::BTreeMap;

use log::info;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which moments of the treated stratum the comparison weights must match.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConstraintSpec {
    pub base: Vec<String>,
    pub interactions: Vec<(String, String)>,
    /// Covariate and highest power; powers `2..=degree` are added.
    pub polynomials: Vec<(String, u32)>,
    /// Covariates whose raw second moment is matched as well as the mean.
    pub variance: Vec<String>,
    /// Default tolerance on the standardized constraint violation.
    pub tolerance: f64,
    /// Per-constraint tolerance keyed by constraint label (`A`, `A*B`, `A^2`).
    pub tolerances: BTreeMap<String, f64>,
}

fn names(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

impl Default for ConstraintSpec {
    fn default() -> Self {
        ConstraintSpec {
            base: names(&[
                "ALDER",
                "VISITS_BFD_1",
                "VISITS_BFD_6",
                "VISITS_BFD_12",
                "VISITS_BFD_60",
                "ELIX_DX_1_4",
                "ELIX_DX_5",
                "ELIX_12M_1_4",
                "ELIX_12M_5",
                "UTBNFORGYMN",
                "UTBNGYMN",
                "CIVIL",
                "NORDIC",
                "FACTOR1",
                "FACTOR2",
                "FACTOR3",
                "FACTOR4",
                "FACTOR5",
                "ELIX_DX",
                "SCORE_LAST",
                "VISITS_LAST",
                "VISITS_MID",
                "METAS_LAST",
                "SUM_SK_METAS_LAST",
                "SUM_VIS_METAS_LAST",
                "MEDS_DAYS_LAST",
                "BIKA_ONLY_LAST",
                "BIKA_GNRH_LAST",
                "SUM_DAYS_LAST",
            ]),
            interactions: vec![
                ("ALDER".into(), "ELIX_DX_1_4".into()),
                ("VISITS_LAST".into(), "METAS_LAST".into()),
            ],
            polynomials: vec![("ALDER".into(), 2), ("VISITS_LAST".into(), 2)],
            variance: names(&["ALDER", "VISITS_LAST", "MEDS_DAYS_LAST"]),
            tolerance: 1e-8,
            tolerances: BTreeMap::new(),
        }
    }
}

impl ConstraintSpec {
    /// Means of the base covariates only.
    pub fn means_only(&self) -> ConstraintSpec {
        ConstraintSpec {
            base: self.base.clone(),
            interactions: Vec::new(),
            polynomials: Vec::new(),
            variance: Vec::new(),
            tolerance: self.tolerance,
            tolerances: self.tolerances.clone(),
        }
    }

    /// Distinct covariate names referenced anywhere in the spec, in first-use order.
    pub fn columns(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        let mut push = |s: &String| {
            if !out.contains(s) {
                out.push(s.clone());
            }
        };
        self.base.iter().for_each(&mut push);
        for (a, b) in &self.interactions {
            push(a);
            push(b);
        }
        self.polynomials.iter().for_each(|(a, _)| push(a));
        self.variance.iter().for_each(&mut push);
        out
    }

    /// Canonical monomials over `columns()`, duplicates removed. A monomial
    /// is the sorted list of column indices multiplied together.
    pub fn monomials(&self) -> Result<Vec<Monomial>> {
        let cols = self.columns();
        let idx = |n: &String| cols.iter().position(|c| c == n).expect("column listed");
        let mut out: Vec<Monomial> = Vec::new();
        let mut add = |mut factors: Vec<usize>| {
            factors.sort_unstable();
            if !out.iter().any(|m| m.factors == factors) {
                let label = label(&factors, &cols);
                out.push(Monomial { factors, label });
            }
        };
        for b in &self.base {
            add(vec![idx(b)]);
        }
        for (a, b) in &self.interactions {
            add(vec![idx(a), idx(b)]);
        }
        for (a, d) in &self.polynomials {
            if *d > 8 {
                return Err(Error::Config(format!("polynomial degree {d} for {a} exceeds 8")));
            }
            for p in 2..=*d {
                add(vec![idx(a); p as usize]);
            }
        }
        for v in &self.variance {
            add(vec![idx(v); 2]);
        }
        if out.is_empty() {
            return Err(Error::Config("constraint spec has no constraints".into()));
        }
        Ok(out)
    }

    pub fn tolerance_for(&self, label: &str) -> f64 {
        self.tolerances.get(label).copied().unwrap_or(self.tolerance)
    }
}

fn label(factors: &[usize], cols: &[String]) -> String {
    let mut parts: Vec<String> = Vec::new();
    let mut i = 0;
    while i < factors.len() {
        let j = factors[i..].iter().take_while(|&&f| f == factors[i]).count();
        let name = &cols[factors[i]];
        parts.push(if j > 1 { format!("{name}^{j}") } else { name.clone() });
        i += j;
    }
    parts.join("*")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Monomial {
    pub factors: Vec<usize>,
    pub label: String,
}

impl Monomial {
    pub fn eval(&self, row: &[f64]) -> f64 {
        self.factors.iter().map(|&f| row[f]).product()
    }
}

/// Constraint functions evaluated on both arms of a stratum.
#[derive(Debug, Clone)]
pub struct ConstraintSet {
    pub labels: Vec<String>,
    /// Treated means of each constraint function.
    pub targets: Vec<f64>,
    pub tolerances: Vec<f64>,
    /// Comparison rows, one entry per constraint.
    pub features: Vec<Vec<f64>>,
    pub dropped: Vec<DroppedConstraint>,
    /// Target and comparison values of constraints dropped as collinear, kept
    /// to verify that the implied moment is still matched.
    pub implied: Vec<(String, f64, Vec<f64>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedConstraint {
    pub label: String,
    pub reason: DropReason,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    Constant,
    Collinear,
}

/// Evaluates the spec's monomials on raw covariate rows (columns ordered as
/// `spec.columns()`), sets targets to treated means, drops constraints that
/// are constant in both arms and those linearly dependent on earlier ones.
pub fn build_constraints(
    treated: &[Vec<f64>],
    comparison: &[Vec<f64>],
    spec: &ConstraintSpec,
) -> Result<ConstraintSet> {
    if treated.is_empty() {
        return Err(Error::InvalidInput("no treated rows".into()));
    }
    if treated.iter().chain(comparison).flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite covariate value".into()));
    }
    let monomials = spec.monomials()?;
    let n_t = treated.len() as f64;

    let mut set = ConstraintSet {
        labels: Vec::new(),
        targets: Vec::new(),
        tolerances: Vec::new(),
        features: Vec::new(),
        dropped: Vec::new(),
        implied: Vec::new(),
    };
    let mut columns: Vec<Vec<f64>> = Vec::new();
    for m in &monomials {
        let t: Vec<f64> = treated.iter().map(|r| m.eval(r)).collect();
        let c: Vec<f64> = comparison.iter().map(|r| m.eval(r)).collect();
        let target = t.iter().sum::<f64>() / n_t;
        let all_equal = c.iter().chain(&t).all(|&v| v == t[0]);
        if all_equal {
            info!("constraint {} is constant in the stratum; dropped", m.label);
            set.dropped.push(DroppedConstraint {
                label: m.label.clone(),
                reason: DropReason::Constant,
            });
            continue;
        }
        set.labels.push(m.label.clone());
        set.targets.push(target);
        set.tolerances.push(spec.tolerance_for(&m.label));
        columns.push(c);
    }

    let keep = independent_columns(&columns, &set.targets, comparison.len());
    let mut k = 0;
    let mut out = ConstraintSet {
        labels: Vec::new(),
        targets: Vec::new(),
        tolerances: Vec::new(),
        features: vec![Vec::new(); comparison.len()],
        dropped: set.dropped,
        implied: Vec::new(),
    };
    for (j, col) in columns.into_iter().enumerate() {
        if !keep[j] {
            info!("constraint {} is collinear with earlier constraints; dropped", set.labels[j]);
            out.dropped.push(DroppedConstraint {
                label: set.labels[j].clone(),
                reason: DropReason::Collinear,
            });
            out.implied.push((set.labels[j].clone(), set.targets[j], col));
            continue;
        }
        out.labels.push(set.labels[j].clone());
        out.targets.push(set.targets[j]);
        out.tolerances.push(set.tolerances[j]);
        for (row, v) in out.features.iter_mut().zip(col) {
            row.push(v);
        }
        k += 1;
    }
    debug_assert_eq!(k, out.labels.len());
    Ok(out)
}

/// Greedy modified Gram-Schmidt on centered columns: a column is kept when
/// its residual after projecting out the constant and the kept columns has
/// relative norm above `1e-9`. A column constant among comparisons is kept
/// when its target differs from that constant, so the solver reports the
/// missing support instead of silently ignoring it.
fn independent_columns(columns: &[Vec<f64>], targets: &[f64], n: usize) -> Vec<bool> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut keep = Vec::with_capacity(columns.len());
    for (col, &target) in columns.iter().zip(targets) {
        if n == 0 {
            keep.push(true);
            continue;
        }
        let mean = col.iter().sum::<f64>() / n as f64;
        let mut r: Vec<f64> = col.iter().map(|v| v - mean).collect();
        let norm0 = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm0 == 0.0 {
            keep.push(target != col[0]);
            continue;
        }
        for _ in 0..2 {
            for q in &basis {
                let d: f64 = r.iter().zip(q).map(|(a, b)| a * b).sum();
                r.iter_mut().zip(q).for_each(|(a, b)| *a -= d * b);
            }
        }
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-9 * norm0 {
            r.iter_mut().for_each(|v| *v /= norm);
            basis.push(r);
            keep.push(true);
        } else {
            keep.push(false);
        }
    }
    keep
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(base: &[&str]) -> ConstraintSpec {
        ConstraintSpec {
            base: names(base),
            interactions: vec![],
            polynomials: vec![],
            variance: vec![],
            tolerance: 1e-8,
            tolerances: BTreeMap::new(),
        }
    }

    #[test]
    fn single_covariate_targets_treated_mean() {
        let s = spec(&["A"]);
        let set = build_constraints(&[vec![1.0], vec![3.0]], &[vec![0.0], vec![5.0]], &s).unwrap();
        assert_eq!(set.labels, ["A"]);
        assert_eq!(set.targets, [2.0]);
    }

    #[test]
    fn variance_adds_second_moment() {
        let mut s = spec(&["A"]);
        s.variance = names(&["A"]);
        let set = build_constraints(&[vec![1.0], vec![3.0]], &[vec![0.0], vec![5.0], vec![2.0]], &s).unwrap();
        assert_eq!(set.labels, ["A", "A^2"]);
        assert_eq!(set.targets, [2.0, 5.0]);
    }

    #[test]
    fn interaction_target_recomputed() {
        let mut s = spec(&["A", "B"]);
        s.interactions = vec![("B".into(), "A".into())];
        let treated = vec![vec![1.0, 2.0], vec![3.0, -1.0], vec![0.5, 4.0]];
        let comparison = vec![vec![0.0, 1.0], vec![2.0, 2.0], vec![1.0, -3.0], vec![4.0, 0.5], vec![-1.0, 1.5]];
        let set = build_constraints(&treated, &comparison, &s).unwrap();
        let brute = treated.iter().map(|r| r[0] * r[1]).sum::<f64>() / 3.0;
        assert_eq!(set.labels[2], "A*B");
        assert!((set.targets[2] - brute).abs() < 1e-15);
        assert_eq!(set.features[3][2], 2.0);
    }

    #[test]
    fn duplicates_removed_after_canonicalization() {
        let mut s = spec(&["A", "A"]);
        s.polynomials = vec![("A".into(), 2)];
        s.variance = names(&["A"]);
        s.interactions = vec![("A".into(), "A".into())];
        let m = s.monomials().unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m[1].label, "A^2");
    }

    #[test]
    fn constant_and_collinear_dropped() {
        let s = spec(&["A", "B", "C", "D"]);
        // B constant in both arms, C = 2A + 1, D independent.
        let row = |a: f64, d: f64| vec![a, 7.0, 2.0 * a + 1.0, d];
        let treated = vec![row(1.0, 0.0), row(2.0, 1.0)];
        let comparison = vec![row(0.0, 1.0), row(1.0, 0.0), row(3.0, 1.0), row(2.0, 0.0)];
        let set = build_constraints(&treated, &comparison, &s).unwrap();
        assert_eq!(set.labels, ["A", "D"]);
        let reasons: Vec<_> = set.dropped.iter().map(|d| (d.label.as_str(), d.reason)).collect();
        assert_eq!(reasons, [("B", DropReason::Constant), ("C", DropReason::Collinear)]);
    }

    #[test]
    fn default_spec_is_consistent() {
        let s = ConstraintSpec::default();
        let m = s.monomials().unwrap();
        // VISITS_LAST^2 appears as polynomial and as variance term.
        assert_eq!(m.len(), s.base.len() + 2 + 2 + 1);
    }
}
