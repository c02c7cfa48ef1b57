//! Property-based invariants on randomly generated instances.

use nalgebra::DVector;
use proptest::prelude::*;

use amip_core::data::RegressionProblem;
use amip_core::influence::{influence_scores, make_qoi, InfluenceVector, QoiKind};
use amip_core::metrics::{amis, apip};
use amip_core::sandwich::SandwichOptions;
use amip_core::solve::{fit_ols, WeightVector};

fn xy_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (4usize..20).prop_flat_map(|n| {
        (
            proptest::collection::vec(-10.0..10.0f64, n),
            proptest::collection::vec(-10.0..10.0f64, n),
        )
    })
}

fn nondegenerate(x: &[f64]) -> bool {
    x.iter().map(|v| v * v).sum::<f64>() > 1e-6
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cumulative_path_is_concave((x, y) in xy_strategy()) {
        prop_assume!(nondegenerate(&x));
        let n = x.len();
        let problem = RegressionProblem::univariate(x, y);
        let fit = fit_ols(&problem, &WeightVector::ones(n)).unwrap();
        let qoi = make_qoi(QoiKind::Parameter, &fit, &problem, 0, 1.96,
            SandwichOptions::default()).unwrap();
        let inf = influence_scores(&fit, &problem, &qoi).unwrap();
        let path = apip(&inf, f64::INFINITY).cumulative_path;
        // Increments are the sorted -psi values, so they must be
        // nonincreasing (second differences of the path <= 0).
        for w in path.windows(2) {
            let inc_prev = w[0];
            let inc_next = w[1] - w[0];
            prop_assert!(inc_next <= inc_prev + 1e-12);
        }
    }

    #[test]
    fn amip_monotone_in_alpha((x, y) in xy_strategy()) {
        prop_assume!(nondegenerate(&x));
        let n = x.len();
        let problem = RegressionProblem::univariate(x, y);
        let fit = fit_ols(&problem, &WeightVector::ones(n)).unwrap();
        let qoi = make_qoi(QoiKind::SignChange, &fit, &problem, 0, 1.96,
            SandwichOptions::default()).unwrap();
        let inf = influence_scores(&fit, &problem, &qoi).unwrap();
        let mut prev = 0.0;
        for k in 1..=n {
            let r = amis(&inf, k as f64 / n as f64).unwrap();
            prop_assert!(r.amip >= prev - 1e-12);
            prop_assert!(r.amip >= 0.0);
            prev = r.amip;
        }
    }

    #[test]
    fn seminorm_homogeneity_and_subadditivity(
        psi1 in proptest::collection::vec(-5.0..5.0f64, 8),
        psi2 in proptest::collection::vec(-5.0..5.0f64, 8),
        c in 0.0..7.0f64,
    ) {
        let alpha = 0.5;
        let a1 = amis(&InfluenceVector::from_psi(DVector::from_vec(psi1.clone())), alpha)
            .unwrap();
        // Homogeneity: scaling phi scales psi, leaving the drop set unchanged.
        let scaled: Vec<f64> = psi1.iter().map(|v| c * v).collect();
        let a_scaled = amis(&InfluenceVector::from_psi(DVector::from_vec(scaled)), alpha)
            .unwrap();
        prop_assert!((a_scaled.amip - c * a1.amip).abs() <= 1e-9 * (1.0 + c * a1.amip));
        if c > 0.0 {
            prop_assert_eq!(&a_scaled.dropped_indices, &a1.dropped_indices);
        }
        // Subadditivity: amip(phi1 + phi2) <= amip(phi1) + amip(phi2).
        let sum: Vec<f64> = psi1.iter().zip(&psi2).map(|(a, b)| a + b).collect();
        let a2 = amis(&InfluenceVector::from_psi(DVector::from_vec(psi2)), alpha).unwrap();
        let a12 = amis(&InfluenceVector::from_psi(DVector::from_vec(sum)), alpha).unwrap();
        prop_assert!(a12.amip <= a1.amip + a2.amip + 1e-9);
    }

    #[test]
    fn influence_is_linear_in_the_qoi((x, y) in xy_strategy()) {
        prop_assume!(nondegenerate(&x));
        let n = x.len();
        let problem = RegressionProblem::univariate(x, y);
        let fit = fit_ols(&problem, &WeightVector::ones(n)).unwrap();
        let param = make_qoi(QoiKind::Parameter, &fit, &problem, 0, 1.96,
            SandwichOptions::default()).unwrap();
        let sign = make_qoi(QoiKind::SignChange, &fit, &problem, 0, 1.96,
            SandwichOptions::default()).unwrap();
        let pp = influence_scores(&fit, &problem, &param).unwrap();
        let ps = influence_scores(&fit, &problem, &sign).unwrap();
        // phi_sign = -s * phi_param, so the scores are exact negatives
        // (up to the sign s of the estimate).
        let s = if fit.theta[0] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            prop_assert!((ps.psi[i] + s * pp.psi[i]).abs() <= 1e-12 * (1.0 + pp.psi[i].abs()));
        }
    }

    #[test]
    fn apip_crossing_is_tight(
        psi in proptest::collection::vec(-5.0..5.0f64, 10),
        delta in 0.0..10.0f64,
    ) {
        let inf = InfluenceVector::from_psi(DVector::from_vec(psi));
        let r = apip(&inf, delta);
        if let Some(m) = r.m_removed {
            prop_assert!(r.cumulative_path[m - 1] > delta);
            if m >= 2 {
                prop_assert!(r.cumulative_path[m - 2] <= delta);
            }
        } else {
            prop_assert!(r.cumulative_path.last().map_or(true, |&c| c <= delta));
        }
    }

    #[test]
    fn weight_scaling_leaves_amis_unchanged((x, y) in xy_strategy(), scale in 0.1..10.0f64) {
        prop_assume!(nondegenerate(&x));
        let n = x.len();
        let mut problem = RegressionProblem::univariate(x, y);
        let fit1 = fit_ols(&problem, &WeightVector::ones(n)).unwrap();
        problem.base_weights = Some(DVector::repeat(n, scale));
        let fit2 = fit_ols(&problem, &WeightVector::ones(n)).unwrap();
        prop_assert!((fit1.theta[0] - fit2.theta[0]).abs() <= 1e-9 * (1.0 + fit1.theta[0].abs()));
    }
}
