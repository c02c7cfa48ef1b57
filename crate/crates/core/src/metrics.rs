//! The core robustness metrics: the Approximate Most Influential Set, the
//! Approximate Maximum Influence Perturbation, the Perturbation-Inducing
//! Proportion, the noise/shape decomposition, the exact refit lower bound,
//! and a brute-force enumeration oracle.

use itertools::Itertools;
use nalgebra::DVector;

use crate::data::RegressionProblem;
use crate::error::{Error, Result};
use crate::influence::{InfluenceVector, QuantityOfInterest};
use crate::parallel::pmap;
use crate::solve::{fit, FitResult, WeightVector};

/// The most influential set at drop budget floor(alpha * N).
#[derive(Debug, Clone)]
pub struct AmisResult {
    pub alpha: f64,
    /// Dropped indices, ascending by psi (most negative first).
    pub dropped_indices: Vec<usize>,
    pub w_star: WeightVector,
    /// Predicted change: sum of -psi over the dropped set. Always >= 0.
    pub amip: f64,
}

/// Selects up to floor(alpha * N) indices with the most negative influence
/// scores. Nonnegative scores are never dropped: removing them cannot
/// increase the predicted change.
pub fn amis(inf: &InfluenceVector, alpha: f64) -> Result<AmisResult> {
    let n = inf.n();
    let budget = (alpha * n as f64).floor() as usize;
    if budget == 0 {
        return Err(Error::AlphaTooSmall { alpha, n });
    }
    let mut dropped = Vec::new();
    let mut amip = 0.0;
    for &i in &inf.sorted_order {
        if dropped.len() == budget || inf.psi[i] >= 0.0 {
            break;
        }
        dropped.push(i);
        amip += -inf.psi[i];
    }
    Ok(AmisResult {
        alpha,
        w_star: WeightVector::dropping(n, &dropped),
        dropped_indices: dropped,
        amip,
    })
}

/// Smallest removal count whose predicted change exceeds delta.
#[derive(Debug, Clone)]
pub struct ApipResult {
    pub delta: f64,
    /// None encodes NA: the target change is unreachable by the linear
    /// approximation no matter how many points are dropped.
    pub m_removed: Option<usize>,
    pub alpha_star: Option<f64>,
    /// Running sums of -psi in drop order (strictly negative scores only).
    pub cumulative_path: Vec<f64>,
}

/// Walks the ascending-psi order accumulating -psi over strictly negative
/// scores; reports the first count where the cumulative change is strictly
/// greater than delta.
pub fn apip(inf: &InfluenceVector, delta: f64) -> ApipResult {
    let n = inf.n();
    let mut path = Vec::new();
    let mut cum = 0.0;
    let mut m_removed = None;
    for &i in &inf.sorted_order {
        if inf.psi[i] >= 0.0 {
            break;
        }
        cum += -inf.psi[i];
        path.push(cum);
        if m_removed.is_none() && cum > delta {
            m_removed = Some(path.len());
        }
    }
    ApipResult {
        delta,
        m_removed,
        alpha_star: m_removed.map(|m| m as f64 / n as f64),
        cumulative_path: path,
    }
}

/// Result of actually re-running the estimator without the AMIS.
pub struct RefitCheck {
    pub phi_before: f64,
    pub phi_after: f64,
    /// phi(w*) - phi(1): an exact lower bound on the Maximum Influence
    /// Perturbation.
    pub exact_change: f64,
    /// Whether the exact change reaches the QOI's Delta; this is the
    /// conclusive non-robustness verdict.
    pub achieved: bool,
    pub refit: FitResult,
}

/// Re-runs the estimator with w* and recomputes phi exactly, including the
/// refit standard errors for significance QOIs.
pub fn refit_lower_bound(
    problem: &RegressionProblem,
    fit_base: &FitResult,
    qoi: &QuantityOfInterest,
    amis_result: &AmisResult,
) -> Result<RefitCheck> {
    let ones = WeightVector::ones(problem.n());
    let phi_before = qoi.phi_value(fit_base, problem, &ones)?;
    let refit = fit(problem, &amis_result.w_star)?;
    let phi_after = qoi.phi_value(&refit, problem, &amis_result.w_star)?;
    let exact_change = phi_after - phi_before;
    Ok(RefitCheck {
        phi_before,
        phi_after,
        exact_change,
        achieved: exact_change >= qoi.delta,
        refit,
    })
}

/// AMIP split into noise (scale) and shape factors.
#[derive(Debug, Clone)]
pub struct Decomposition {
    pub sigma_psi: f64,
    /// None when sigma_psi = 0 (perfect fit): the shape is undefined.
    pub gamma_alpha: Option<f64>,
    /// sqrt(a (1 - a)) with a the realized dropped fraction.
    pub gamma_bound: f64,
    /// Standardized scores N psi_n / sigma_psi (empty when undefined).
    pub gamma_n: Option<DVector<f64>>,
}

/// Gamma_alpha = -(1/N) sum over dropped of N psi_n / sigma_psi, so that
/// amip = sigma_psi * Gamma_alpha exactly.
pub fn decompose(
    inf: &InfluenceVector,
    amis_result: &AmisResult,
    sigma_psi: f64,
) -> Decomposition {
    let n = inf.n() as f64;
    let a = amis_result.dropped_indices.len() as f64 / n;
    let gamma_bound = (a * (1.0 - a)).max(0.0).sqrt();
    if sigma_psi <= 0.0 {
        return Decomposition {
            sigma_psi,
            gamma_alpha: None,
            gamma_bound,
            gamma_n: None,
        };
    }
    let gamma_n = &inf.psi * (n / sigma_psi);
    let gamma_alpha = -amis_result
        .dropped_indices
        .iter()
        .map(|&i| gamma_n[i])
        .sum::<f64>()
        / n;
    Decomposition {
        sigma_psi,
        gamma_alpha: Some(gamma_alpha),
        gamma_bound,
        gamma_n: Some(gamma_n),
    }
}

#[derive(Debug, Clone)]
pub struct BruteForceResult {
    /// The exactly-worst drop set (lexicographically smallest among ties).
    pub exact_mis: Vec<usize>,
    pub exact_mip: f64,
    pub refits: usize,
}

/// Maximum number of refits the enumeration oracle will attempt.
pub const BRUTE_FORCE_LIMIT: usize = 2_000_000;

fn binomial(n: usize, k: usize) -> usize {
    let mut acc: usize = 1;
    for i in 0..k {
        acc = acc.saturating_mul(n - i) / (i + 1);
    }
    acc
}

/// Enumerates every drop set of size <= max_drop, refits each, and returns
/// the set maximizing phi(w) - phi(1). Intended as a test oracle; refuses
/// enumerations above BRUTE_FORCE_LIMIT refits.
pub fn brute_force_mip(
    problem: &RegressionProblem,
    qoi: &QuantityOfInterest,
    max_drop: usize,
) -> Result<BruteForceResult> {
    let n = problem.n();
    let required: usize = (1..=max_drop).map(|k| binomial(n, k)).sum();
    if required > BRUTE_FORCE_LIMIT {
        return Err(Error::EnumerationTooLarge {
            required,
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    let ones = WeightVector::ones(n);
    let base_fit = fit(problem, &ones)?;
    let phi_base = qoi.phi_value(&base_fit, problem, &ones)?;

    let subsets: Vec<Vec<usize>> = (1..=max_drop)
        .flat_map(|k| (0..n).combinations(k))
        .collect();
    let refits = subsets.len();
    // Degenerate subsets (drops that destroy identifiability) are skipped.
    let changes: Vec<Option<f64>> = pmap(&subsets, |set| {
        let w = WeightVector::dropping(n, set);
        let refit = fit(problem, &w).ok()?;
        let phi = qoi.phi_value(&refit, problem, &w).ok()?;
        Some(phi - phi_base)
    });

    let mut exact_mis: Vec<usize> = Vec::new();
    let mut exact_mip = 0.0;
    for (set, change) in subsets.iter().zip(&changes) {
        let Some(change) = change else { continue };
        let better = *change > exact_mip
            || (*change == exact_mip && !exact_mis.is_empty() && set < &exact_mis);
        if better {
            exact_mip = *change;
            exact_mis = set.clone();
        }
    }
    Ok(BruteForceResult {
        exact_mis,
        exact_mip,
        refits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::influence::{influence_scores, make_qoi, QoiKind};
    use crate::sandwich::SandwichOptions;
    use crate::solve::fit_ols;
    use approx::assert_relative_eq;

    fn toy() -> (RegressionProblem, FitResult, InfluenceVector, QuantityOfInterest) {
        let problem = RegressionProblem::univariate(vec![1.0, 2.0], vec![1.0, 4.0]);
        let fit = fit_ols(&problem, &WeightVector::ones(2)).unwrap();
        let qoi = make_qoi(
            QoiKind::Parameter,
            &fit,
            &problem,
            0,
            1.96,
            SandwichOptions::default(),
        )
        .unwrap();
        let inf = influence_scores(&fit, &problem, &qoi).unwrap();
        (problem, fit, inf, qoi)
    }

    #[test]
    fn toy_amis() {
        let (_, _, inf, _) = toy();
        let r = amis(&inf, 0.5).unwrap();
        assert_eq!(r.dropped_indices, vec![0]);
        assert_relative_eq!(r.amip, 0.16, epsilon = 1e-12);
    }

    #[test]
    fn nonnegative_scores_never_dropped() {
        let inf = InfluenceVector::from_psi(DVector::from_vec(vec![0.5, 0.2, 0.0]));
        let r = amis(&inf, 1.0).unwrap();
        assert!(r.dropped_indices.is_empty());
        assert_eq!(r.amip, 0.0);
    }

    #[test]
    fn greedy_two_drops() {
        let inf = InfluenceVector::from_psi(DVector::from_vec(vec![-3.0, -2.0, -1.0, 1.0]));
        let r = amis(&inf, 0.5).unwrap();
        assert_eq!(r.dropped_indices, vec![0, 1]);
        assert_relative_eq!(r.amip, 5.0, epsilon = 1e-12);
    }

    #[test]
    fn alpha_too_small() {
        let inf = InfluenceVector::from_psi(DVector::from_vec(vec![-1.0, 1.0]));
        assert!(matches!(
            amis(&inf, 0.1),
            Err(Error::AlphaTooSmall { .. })
        ));
    }

    #[test]
    fn apip_basic_cases() {
        let inf = InfluenceVector::from_psi(DVector::from_vec(vec![-0.16, 0.16]));
        assert_eq!(apip(&inf, 0.0).m_removed, Some(1));
        let na = apip(&inf, 1.8);
        assert_eq!(na.m_removed, None);
        assert_eq!(na.alpha_star, None);

        let inf = InfluenceVector::from_psi(DVector::from_vec(vec![-3.0, -2.0, -1.0, 1.0]));
        let r = apip(&inf, 4.5);
        assert_eq!(r.m_removed, Some(2));
        assert_eq!(r.cumulative_path, vec![3.0, 5.0, 6.0]);
    }

    #[test]
    fn apip_strict_inequality() {
        let inf = InfluenceVector::from_psi(DVector::from_vec(vec![-1.0, -1.0, 2.0]));
        // Cumulative path is [1, 2]; delta = 1 requires strictly more than 1.
        assert_eq!(apip(&inf, 1.0).m_removed, Some(2));
    }

    #[test]
    fn toy_refit_lower_bound() {
        let (problem, fit, inf, qoi) = toy();
        let a = amis(&inf, 0.5).unwrap();
        let check = refit_lower_bound(&problem, &fit, &qoi, &a).unwrap();
        assert_relative_eq!(check.phi_after, 2.0, epsilon = 1e-12);
        assert_relative_eq!(check.exact_change, 0.2, epsilon = 1e-12);
        assert!(check.exact_change >= a.amip);
    }

    #[test]
    fn decomposition_identity() {
        let (_, _, inf, _) = toy();
        let a = amis(&inf, 0.5).unwrap();
        let sigma = (2.0 * inf.psi.iter().map(|p| p * p).sum::<f64>()).sqrt();
        assert_relative_eq!(sigma, 0.32, epsilon = 1e-12);
        let d = decompose(&inf, &a, sigma);
        let gamma = d.gamma_alpha.unwrap();
        assert_relative_eq!(sigma * gamma, a.amip, epsilon = 1e-12);
        assert!(gamma.abs() <= d.gamma_bound + 1e-12);
    }

    #[test]
    fn decomposition_degenerate() {
        let inf = InfluenceVector::from_psi(DVector::zeros(3));
        let a = AmisResult {
            alpha: 0.5,
            dropped_indices: vec![],
            w_star: WeightVector::ones(3),
            amip: 0.0,
        };
        let d = decompose(&inf, &a, 0.0);
        assert!(d.gamma_alpha.is_none());
    }

    #[test]
    fn brute_force_toy() {
        let (problem, fit, inf, qoi) = toy();
        let exact = brute_force_mip(&problem, &qoi, 1).unwrap();
        assert_eq!(exact.exact_mis, vec![0]);
        assert_relative_eq!(exact.exact_mip, 0.2, epsilon = 1e-12);
        let a = amis(&inf, 0.5).unwrap();
        let check = refit_lower_bound(&problem, &fit, &qoi, &a).unwrap();
        assert!(check.exact_change <= exact.exact_mip + 1e-12);
    }

    #[test]
    fn brute_force_guard() {
        let n = 300;
        let x: Vec<f64> = (0..n).map(|i| i as f64 + 1.0).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let problem = RegressionProblem::univariate(x, y);
        let fit = fit_ols(&problem, &WeightVector::ones(n)).unwrap();
        let qoi = make_qoi(
            QoiKind::Parameter,
            &fit,
            &problem,
            0,
            1.96,
            SandwichOptions::default(),
        )
        .unwrap();
        assert!(matches!(
            brute_force_mip(&problem, &qoi, 4),
            Err(Error::EnumerationTooLarge { .. })
        ));
    }
}
