use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use histctl::balance::{kl_divergence, solve_dual, SolverConfig, WeightSolution};

/// Comparison features with a target strictly inside their hull.
fn instance() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>)> {
    (4usize..12, 1usize..3).prop_flat_map(|(n, r)| {
        (
            prop::collection::vec(prop::collection::vec(-3.0f64..3.0, r), n),
            prop::collection::vec(0.1f64..1.0, n),
        )
            .prop_map(move |(rows, mix)| {
                let s: f64 = mix.iter().sum();
                let target = (0..r)
                    .map(|j| rows.iter().zip(&mix).map(|(x, m)| x[j] * m).sum::<f64>() / s)
                    .collect();
                (rows, target)
            })
    })
}

fn solve(rows: &[Vec<f64>], target: &[f64], total: f64) -> WeightSolution {
    let tol = vec![1e-10; target.len()];
    solve_dual(rows, target, None, total, &tol, &SolverConfig::default()).expect("interior target is feasible")
}

fn weighted_mean(rows: &[Vec<f64>], w: &[f64], j: usize) -> f64 {
    rows.iter().zip(w).map(|(x, wi)| x[j] * wi).sum::<f64>() / w.iter().sum::<f64>()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn weights_are_positive_sum_to_total_and_match_targets((rows, target) in instance(), total in 1.0f64..50.0) {
        let s = solve(&rows, &target, total);
        prop_assert!(s.converged);
        prop_assert!(s.weights.iter().all(|w| *w >= 0.0));
        let sum: f64 = s.weights.iter().sum();
        prop_assert!((sum - total).abs() <= 1e-10 * total);
        for (j, t) in target.iter().enumerate() {
            prop_assert!((weighted_mean(&rows, &s.weights, j) - t).abs() < 1e-6);
        }
    }

    /// No feasible move along the constraint null space lowers the divergence.
    #[test]
    fn kl_is_locally_minimal((rows, target) in instance(), seed in any::<u64>()) {
        let s = solve(&rows, &target, 1.0);
        let n = rows.len();
        let r = target.len();
        let a = DMatrix::from_fn(r + 1, n, |i, k| if i == 0 { 1.0 } else { rows[k][i - 1] });
        let w = DVector::from_column_slice(&s.weights);
        let base = vec![1.0; n];
        let kl0 = kl_divergence(&s.weights, &base);
        let proj = DMatrix::<f64>::identity(n, n)
            - a.transpose() * (&a * a.transpose()).try_inverse().unwrap() * &a;
        let mut state = seed | 1;
        for _ in 0..10 {
            let d = DVector::from_fn(n, |_, _| {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                (state % 2001) as f64 / 1000.0 - 1.0
            });
            let d = &proj * d;
            if d.norm() < 1e-9 {
                continue;
            }
            let step = 1e-3 * w.min() / d.amax().max(1e-12);
            for sign in [-1.0, 1.0] {
                let moved = &w + &d * (sign * step);
                if moved.iter().all(|v| *v > 0.0) {
                    prop_assert!(kl_divergence(moved.as_slice(), &base) >= kl0 - 1e-12);
                }
            }
        }
    }

    /// Rescaling and shifting a feature (with its target) leaves the weights unchanged.
    #[test]
    fn affine_invariance((rows, target) in instance(), scale in prop::sample::select(vec![-4.0, -0.5, 0.01, 3.0, 250.0]), shift in -100.0f64..100.0) {
        let a = solve(&rows, &target, 10.0);
        let rows2: Vec<Vec<f64>> = rows.iter().map(|x| { let mut y = x.clone(); y[0] = scale * y[0] + shift; y }).collect();
        let mut target2 = target.clone();
        target2[0] = scale * target2[0] + shift;
        let b = solve(&rows2, &target2, 10.0);
        for (x, y) in a.weights.iter().zip(&b.weights) {
            prop_assert!((x - y).abs() < 1e-7 * 10.0);
        }
    }

    #[test]
    fn row_order_does_not_matter((rows, target) in instance()) {
        let a = solve(&rows, &target, 5.0);
        let rev: Vec<Vec<f64>> = rows.iter().rev().cloned().collect();
        let b = solve(&rev, &target, 5.0);
        for (x, y) in a.weights.iter().zip(b.weights.iter().rev()) {
            prop_assert!((x - y).abs() < 1e-8);
        }
    }

    #[test]
    fn solver_is_deterministic((rows, target) in instance()) {
        let a = solve(&rows, &target, 3.0);
        let b = solve(&rows, &target, 3.0);
        prop_assert_eq!(a, b);
    }
}

#[test]
fn target_outside_hull_is_rejected() {
    let rows = vec![vec![0.0], vec![1.0], vec![2.0]];
    assert!(solve_dual(&rows, &[2.5], None, 1.0, &[1e-10], &SolverConfig::default()).is_err());
}

/// Near the optimum the dual decrease is below rounding; the line search must
/// still reach a tight tolerance.
#[test]
fn tight_tolerance_converges() {
    let rows = vec![
        vec![2.9696005227730993],
        vec![-1.276416870814851],
        vec![0.2952090169386747],
        vec![0.46458450222735875],
        vec![-0.9544301613048211],
    ];
    let s = solve(&rows, &[0.09913144990420537], 1.0);
    assert!(s.converged, "{s:?}");
    assert!(s.max_constraint_violation <= 1e-10);
}
