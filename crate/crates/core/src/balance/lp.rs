//! Feasibility of `A x = b, x >= 0`, measured as the least total absolute
//! residual over nonnegative `x`.

use microlp::{ComparisonOp, LinearExpr, OptimizationDirection, Problem};

/// Minimal `sum_i |(A x - b)_i|` over `x >= 0`; zero (up to rounding) means
/// `b` lies in the cone spanned by the columns of `A`.
pub fn phase_one(a: &[Vec<f64>], b: &[f64]) -> f64 {
    let m = a.len();
    if m == 0 {
        return 0.0;
    }
    let n = a[0].len();
    let mut p = Problem::new(OptimizationDirection::Minimize);
    let x: Vec<_> = (0..n).map(|_| p.add_var(0.0, (0.0, f64::INFINITY))).collect();
    for (row, &rhs) in a.iter().zip(b) {
        let plus = p.add_var(1.0, (0.0, f64::INFINITY));
        let minus = p.add_var(1.0, (0.0, f64::INFINITY));
        let mut e = LinearExpr::empty();
        for (j, &v) in row.iter().enumerate() {
            if v != 0.0 {
                e.add(x[j], v);
            }
        }
        e.add(plus, 1.0);
        e.add(minus, -1.0);
        p.add_constraint(e, ComparisonOp::Eq, rhs);
    }
    match p.solve() {
        Ok(out) => out.solution().map_or(f64::INFINITY, |s| s.objective().max(0.0)),
        Err(_) => f64::INFINITY,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feasible_mixture() {
        // x1 + x2 + x3 = 1, 0 x1 + 1 x2 + 2 x3 = 1.5
        let a = vec![vec![1.0, 1.0, 1.0], vec![0.0, 1.0, 2.0]];
        assert!(phase_one(&a, &[1.0, 1.5]).abs() < 1e-12);
    }

    #[test]
    fn infeasible_outside_hull() {
        let a = vec![vec![1.0, 1.0, 1.0], vec![0.0, 1.0, 2.0]];
        assert!(phase_one(&a, &[1.0, 2.5]) > 0.1);
        assert!(phase_one(&a, &[1.0, -0.5]) > 0.1);
    }
}
