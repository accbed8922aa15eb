use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use histctl::estimate::{bonferroni, fit_stratified, wls_hc0, Covariance, Obs};

/// Strata of (treated outcomes, comparison (weight, outcome)) pairs.
type Strata = Vec<(Vec<f64>, Vec<(f64, f64)>)>;

fn strata() -> impl Strategy<Value = Strata> {
    prop::collection::vec(
        (
            prop::collection::vec(-5.0f64..5.0, 1..6),
            prop::collection::vec((0.05f64..3.0, -5.0f64..5.0), 1..10),
        ),
        1..6,
    )
    .prop_filter("outcome varies", |s| {
        let ys: Vec<f64> = s.iter().flat_map(|(t, c)| t.iter().copied().chain(c.iter().map(|x| x.1))).collect();
        ys.iter().any(|y| (y - ys[0]).abs() > 1e-6)
    })
}

/// Rows with unit treated weights and comparison weights rescaled to the
/// stratum's treated count.
fn balanced_obs(s: &Strata, scale: f64) -> Vec<Obs> {
    let mut obs = Vec::new();
    for (k, (t, c)) in s.iter().enumerate() {
        let stratum = 4 + k as u32;
        for &y in t {
            obs.push(Obs { stratum, treated: true, weight: scale, y, cluster: obs.len() });
        }
        let cw: f64 = c.iter().map(|x| x.0).sum();
        for &(w, y) in c {
            let weight = scale * w * t.len() as f64 / cw;
            obs.push(Obs { stratum, treated: false, weight, y, cluster: obs.len() });
        }
    }
    obs
}

/// Treated-count-weighted average of within-stratum weighted mean differences.
fn atet_oracle(s: &Strata) -> f64 {
    let n_t: usize = s.iter().map(|(t, _)| t.len()).sum();
    s.iter()
        .map(|(t, c)| {
            let mt = t.iter().sum::<f64>() / t.len() as f64;
            let cw: f64 = c.iter().map(|x| x.0).sum();
            let mc = c.iter().map(|(w, y)| w * y).sum::<f64>() / cw;
            t.len() as f64 * (mt - mc)
        })
        .sum::<f64>()
        / n_t as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn balanced_fit_equals_weighted_mean_difference(s in strata()) {
        let fit = fit_stratified(&balanced_obs(&s, 1.0), Covariance::Hc0).unwrap();
        prop_assert!((fit.beta - atet_oracle(&s)).abs() < 1e-9);
        prop_assert!(fit.se >= 0.0);
    }

    /// A common rescaling of all weights cancels in both the estimate and the sandwich.
    #[test]
    fn fit_is_weight_scale_invariant(s in strata(), c in 0.01f64..100.0) {
        let a = fit_stratified(&balanced_obs(&s, 1.0), Covariance::Hc0).unwrap();
        let b = fit_stratified(&balanced_obs(&s, c), Covariance::Hc0).unwrap();
        prop_assert!((a.beta - b.beta).abs() < 1e-9 * (1.0 + a.beta.abs()));
        prop_assert!((a.se - b.se).abs() < 1e-8 * (1.0 + a.se));
    }

    #[test]
    fn fit_ignores_row_order(s in strata()) {
        let obs = balanced_obs(&s, 1.0);
        let mut rev = obs.clone();
        rev.reverse();
        let a = fit_stratified(&obs, Covariance::Hc0).unwrap();
        let b = fit_stratified(&rev, Covariance::Hc0).unwrap();
        prop_assert!((a.beta - b.beta).abs() < 1e-12);
        prop_assert!((a.se - b.se).abs() < 1e-12);
    }

    #[test]
    fn sandwich_is_symmetric_psd(
        rows in prop::collection::vec((prop::collection::vec(-3.0f64..3.0, 2), 0.1f64..4.0, -10.0f64..10.0), 6..30)
    ) {
        let n = rows.len();
        let x = DMatrix::from_fn(n, 3, |i, j| if j == 0 { 1.0 } else { rows[i].0[j - 1] });
        let y = DVector::from_fn(n, |i, _| rows[i].2);
        let w = DVector::from_fn(n, |i, _| rows[i].1);
        prop_assume!((x.transpose() * &x).determinant().abs() > 1e-6);
        let (_, cov) = wls_hc0(&x, &y, &w).unwrap();
        prop_assert!((&cov - cov.transpose()).amax() <= 1e-12 * (1.0 + cov.amax()));
        let eig = cov.clone().symmetric_eigen();
        prop_assert!(eig.eigenvalues.iter().all(|&l| l >= -1e-10 * (1.0 + cov.amax())));
    }

    #[test]
    fn bonferroni_decisions_follow_their_p_values(mut ps in prop::collection::vec(0.0f64..1.0, 1..20), extra in 0usize..5) {
        let family = ps.len() + extra;
        let (t, a) = bonferroni(&ps, family, 0.05).unwrap();
        prop_assert!((t - 0.05 / family as f64).abs() < 1e-15);
        let mut pairs: Vec<(f64, bool)> = ps.iter().copied().zip(a).collect();
        ps.reverse();
        let (_, b) = bonferroni(&ps, family, 0.05).unwrap();
        let mut rev: Vec<(f64, bool)> = ps.iter().copied().zip(b).collect();
        pairs.sort_by(|x, y| x.0.total_cmp(&y.0));
        rev.sort_by(|x, y| x.0.total_cmp(&y.0));
        prop_assert_eq!(pairs, rev);
    }
}

#[test]
fn single_arm_strata_are_dropped() {
    let mut obs = balanced_obs(&vec![(vec![1.0, 2.0], vec![(1.0, 0.0), (1.0, 1.0)])], 1.0);
    obs.push(Obs { stratum: 30, treated: true, weight: 1.0, y: 9.0, cluster: 99 });
    let fit = fit_stratified(&obs, Covariance::Hc0).unwrap();
    assert_eq!(fit.strata, vec![4]);
    assert_eq!(fit.dropped_strata, vec![30]);
    assert!((fit.beta - 1.0).abs() < 1e-12);
}

#[test]
fn empty_family_is_an_error() {
    assert!(bonferroni(&[], 0, 0.05).is_err());
}
