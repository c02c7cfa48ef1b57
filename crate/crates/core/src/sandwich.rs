//! Sandwich covariance estimation (robust, clustered, weighted) and the
//! delta-method noise.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::RegressionProblem;
use crate::error::{Error, Result};
use crate::solve::{FitResult, WeightVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ClusterMode {
    #[default]
    None,
    ByLabel,
}

/// Whether the sandwich is scaled by N or by the sum of effective weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Normalization {
    #[default]
    DivideByN,
    DivideBySumW,
}

/// Whether per-row scores enter the meat weighted by w or by w^2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ScoreWeighting {
    #[default]
    W,
    WSquared,
}

/// Native is the robust sandwich; LmCompatible reproduces the classical
/// homoskedastic standard errors reported by common regression software.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum SeCompat {
    #[default]
    Native,
    LmCompatible,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SandwichOptions {
    pub cluster_mode: ClusterMode,
    pub normalization: Normalization,
    pub score_weighting: ScoreWeighting,
    pub se_compat: SeCompat,
}

impl SandwichOptions {
    pub fn lm_compatible() -> Self {
        SandwichOptions {
            se_compat: SeCompat::LmCompatible,
            ..Default::default()
        }
    }
}

/// Scaled covariance of sqrt(N) (theta_hat - theta_0) and the implied
/// standard errors SE_p = sqrt(Sigma_pp / N).
#[derive(Debug, Clone)]
pub struct CovarianceEstimate {
    pub sigma_theta: DMatrix<f64>,
    pub standard_errors: DVector<f64>,
    /// Smallest eigenvalue of the symmetrized matrix. Negative values are
    /// reported, not clipped; they signal numerical trouble.
    pub min_eigenvalue: f64,
}

fn cluster_labels<'a>(
    problem: &'a RegressionProblem,
    opts: &SandwichOptions,
) -> Result<Option<&'a [usize]>> {
    match opts.cluster_mode {
        ClusterMode::None => Ok(None),
        ClusterMode::ByLabel => problem
            .clusters
            .as_deref()
            .map(Some)
            .ok_or_else(|| Error::Config("cluster mode requested but no cluster labels".into())),
    }
}

/// The meat S(w): per-row (or per-cluster) outer products of weighted scores
/// g_n = z_n eps_n.
fn meat(
    problem: &RegressionProblem,
    fit: &FitResult,
    weights: &DVector<f64>,
    opts: &SandwichOptions,
) -> Result<DMatrix<f64>> {
    let z = problem.instruments();
    let p = problem.p();
    let mut s = DMatrix::zeros(p, p);
    match cluster_labels(problem, opts)? {
        None => {
            for i in 0..problem.n() {
                let m = match opts.score_weighting {
                    ScoreWeighting::W => weights[i],
                    ScoreWeighting::WSquared => weights[i] * weights[i],
                };
                if m == 0.0 {
                    continue;
                }
                let g = z.row(i).transpose() * fit.residuals[i];
                s += &g * g.transpose() * m;
            }
        }
        Some(labels) => {
            for t in cluster_scores(problem, fit, weights, labels) {
                s += &t * t.transpose();
            }
        }
    }
    Ok(s)
}

/// Within-cluster sums of weighted scores.
fn cluster_scores(
    problem: &RegressionProblem,
    fit: &FitResult,
    weights: &DVector<f64>,
    labels: &[usize],
) -> Vec<DVector<f64>> {
    let z = problem.instruments();
    let n_clusters = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut sums = vec![DVector::zeros(problem.p()); n_clusters];
    for i in 0..problem.n() {
        if weights[i] == 0.0 {
            continue;
        }
        sums[labels[i]] += z.row(i).transpose() * (weights[i] * fit.residuals[i]);
    }
    sums
}

fn normalization_constant(
    problem: &RegressionProblem,
    weights: &DVector<f64>,
    opts: &SandwichOptions,
) -> f64 {
    match opts.normalization {
        Normalization::DivideByN => problem.n() as f64,
        Normalization::DivideBySumW => weights.sum(),
    }
}

/// Sigma_theta(w) = c(w) H(w)^{-1} S(w) H(w)^{-T}, symmetrized.
pub fn sandwich_covariance(
    fit: &FitResult,
    problem: &RegressionProblem,
    w: &WeightVector,
    opts: &SandwichOptions,
) -> Result<CovarianceEstimate> {
    let n = problem.n() as f64;
    let p = problem.p();
    let weights = w.effective(problem);
    let c = normalization_constant(problem, &weights, opts);

    let s = match opts.se_compat {
        SeCompat::Native => meat(problem, fit, &weights, opts)?,
        SeCompat::LmCompatible => {
            // Classical homoskedastic covariance: sigma2 * sum w z z' with
            // sigma2 = sum w eps^2 / (N - P).
            let df = problem.n().saturating_sub(p).max(1) as f64;
            let sigma2 = (0..problem.n())
                .map(|i| weights[i] * fit.residuals[i] * fit.residuals[i])
                .sum::<f64>()
                / df;
            let z = problem.instruments();
            let mut q = DMatrix::zeros(p, p);
            for i in 0..problem.n() {
                if weights[i] == 0.0 {
                    continue;
                }
                let zi = z.row(i).transpose();
                q += &zi * zi.transpose() * weights[i];
            }
            q * sigma2
        }
    };

    // H^{-1} S H^{-T} via cached LU solves: with C = H^{-1} S and S
    // symmetric, Sigma = H^{-1} C^T, so both passes use the same factors.
    let mut hinv_s = DMatrix::zeros(p, p);
    for j in 0..p {
        let col = fit.solve_jacobian(&s.column(j).into_owned())?;
        hinv_s.set_column(j, &col);
    }
    let mut sigma = DMatrix::zeros(p, p);
    for j in 0..p {
        let col = fit.solve_jacobian(&hinv_s.row(j).transpose())?;
        sigma.set_column(j, &col);
    }
    sigma *= c;
    let sigma = (&sigma + sigma.transpose()) * 0.5;

    let min_eigenvalue = sigma
        .clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |a, &b| a.min(b));
    let standard_errors = DVector::from_fn(p, |j, _| (sigma[(j, j)] / n).max(0.0).sqrt());
    Ok(CovarianceEstimate {
        sigma_theta: sigma,
        standard_errors,
        min_eigenvalue,
    })
}

/// Delta-method noise: sigma_psi = sqrt(grad' Sigma_theta grad).
pub fn noise_sigma(grad_theta: &DVector<f64>, cov: &CovarianceEstimate) -> f64 {
    (grad_theta.transpose() * &cov.sigma_theta * grad_theta)[(0, 0)]
        .max(0.0)
        .sqrt()
}

/// SE_p(theta, w) together with its analytic derivatives in theta and in the
/// removal weights, all evaluated at the supplied fit.
pub struct SeDerivatives {
    pub se: f64,
    pub d_theta: DVector<f64>,
    pub d_w: DVector<f64>,
}

/// Differentiates SE_p = sqrt(Sigma_pp(theta, w) / N) under the selected
/// sandwich conventions; used for the explicit weight dependence of the
/// significance quantities of interest.
pub fn se_derivatives(
    fit: &FitResult,
    problem: &RegressionProblem,
    w: &WeightVector,
    opts: &SandwichOptions,
    target: usize,
) -> Result<SeDerivatives> {
    let n = problem.n();
    let p = problem.p();
    if target >= p {
        return Err(Error::TargetOutOfBounds { index: target, p });
    }
    let nf = n as f64;
    let weights = w.effective(problem);
    let base: Vec<f64> = match &problem.base_weights {
        None => vec![1.0; n],
        Some(b) => b.iter().copied().collect(),
    };
    let z = problem.instruments();
    let x = &problem.x;
    let c = normalization_constant(problem, &weights, opts);
    let dc: Vec<f64> = match opts.normalization {
        Normalization::DivideByN => vec![0.0; n],
        Normalization::DivideBySumW => base.clone(),
    };

    // u = A^{-T} e_p with A = -H, so u = -(H^T)^{-1} e_p.
    let mut e_p = DVector::zeros(p);
    e_p[target] = 1.0;
    let u = -fit.solve_jacobian_t(&e_p)?;
    let zu: Vec<f64> = (0..n).map(|i| z.row(i).transpose().dot(&u)).collect();

    match opts.se_compat {
        SeCompat::Native => {
            let labels = cluster_labels(problem, opts)?;
            let s = meat(problem, fit, &weights, opts)?;
            let suu = (u.transpose() * &s * &u)[(0, 0)];
            let sigma_pp = c * suu;
            let se = (sigma_pp / nf).max(0.0).sqrt();
            if se == 0.0 {
                return Err(Error::DegenerateScale);
            }

            // v = A^{-1} S u = -H^{-1} (S u).
            let v = -fit.solve_jacobian(&(&s * &u))?;
            let xv: Vec<f64> = (0..n).map(|i| x.row(i).transpose().dot(&v)).collect();

            let mut d_sigma_theta = DVector::zeros(p);
            let mut d_sigma_w = DVector::zeros(n);
            match labels {
                None => {
                    for i in 0..n {
                        let m = match opts.score_weighting {
                            ScoreWeighting::W => weights[i],
                            ScoreWeighting::WSquared => weights[i] * weights[i],
                        };
                        let ug = zu[i] * fit.residuals[i];
                        if m != 0.0 {
                            // dS/dtheta term: -2 m (u'z)^2 eps x.
                            d_sigma_theta +=
                                x.row(i).transpose() * (-2.0 * c * m * zu[i] * zu[i] * fit.residuals[i]);
                        }
                        let dm = match opts.score_weighting {
                            ScoreWeighting::W => base[i],
                            ScoreWeighting::WSquared => 2.0 * weights[i] * base[i],
                        };
                        d_sigma_w[i] = dc[i] * suu
                            + c * (-2.0 * base[i] * zu[i] * xv[i] + dm * ug * ug);
                    }
                }
                Some(labels) => {
                    let t = cluster_scores(problem, fit, &weights, labels);
                    let ut: Vec<f64> = t.iter().map(|tc| tc.dot(&u)).collect();
                    for i in 0..n {
                        let utc = ut[labels[i]];
                        d_sigma_theta += x.row(i).transpose()
                            * (-2.0 * c * weights[i] * zu[i] * utc);
                        let ug = zu[i] * fit.residuals[i];
                        d_sigma_w[i] = dc[i] * suu
                            + c * (-2.0 * base[i] * zu[i] * xv[i] + 2.0 * base[i] * ug * utc);
                    }
                }
            }
            let scale = 1.0 / (2.0 * nf * se);
            Ok(SeDerivatives {
                se,
                d_theta: d_sigma_theta * scale,
                d_w: d_sigma_w * scale,
            })
        }
        SeCompat::LmCompatible => {
            let df = n.saturating_sub(p).max(1) as f64;
            let sigma2 = (0..n)
                .map(|i| weights[i] * fit.residuals[i] * fit.residuals[i])
                .sum::<f64>()
                / df;
            let mut q = DMatrix::zeros(p, p);
            for i in 0..n {
                if weights[i] == 0.0 {
                    continue;
                }
                let zi = z.row(i).transpose();
                q += &zi * zi.transpose() * weights[i];
            }
            let quu = (u.transpose() * &q * &u)[(0, 0)];
            let sigma_pp = c * sigma2 * quu;
            let se = (sigma_pp / nf).max(0.0).sqrt();
            if se == 0.0 {
                return Err(Error::DegenerateScale);
            }
            let v = -fit.solve_jacobian(&(&q * &u))?;
            let xv: Vec<f64> = (0..n).map(|i| x.row(i).transpose().dot(&v)).collect();

            let mut d_sigma_theta = DVector::zeros(p);
            for i in 0..n {
                d_sigma_theta +=
                    x.row(i).transpose() * (-2.0 * c * quu / df * weights[i] * fit.residuals[i]);
            }
            let mut d_sigma_w = DVector::zeros(n);
            for i in 0..n {
                let d_sigma2 = base[i] * fit.residuals[i] * fit.residuals[i] / df;
                d_sigma_w[i] = dc[i] * sigma2 * quu
                    + c * (d_sigma2 * quu
                        + sigma2 * (-2.0 * base[i] * zu[i] * xv[i] + base[i] * zu[i] * zu[i]));
            }
            let scale = 1.0 / (2.0 * nf * se);
            Ok(SeDerivatives {
                se,
                d_theta: d_sigma_theta * scale,
                d_w: d_sigma_w * scale,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::RegressionProblem;
    use crate::solve::fit_ols;
    use approx::assert_relative_eq;

    fn toy_fit() -> (RegressionProblem, FitResult) {
        let problem = RegressionProblem::univariate(vec![1.0, 2.0], vec![1.0, 4.0]);
        let fit = fit_ols(&problem, &WeightVector::ones(2)).unwrap();
        (problem, fit)
    }

    #[test]
    fn hand_computed_sandwich() {
        let (problem, fit) = toy_fit();
        let cov = sandwich_covariance(
            &fit,
            &problem,
            &WeightVector::ones(2),
            &SandwichOptions::default(),
        )
        .unwrap();
        assert_relative_eq!(cov.sigma_theta[(0, 0)], 0.1024, epsilon = 1e-12);
        assert_relative_eq!(cov.standard_errors[0], (0.1024f64 / 2.0).sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn perfect_fit_zero_covariance() {
        let x = vec![1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|v| 3.0 * v).collect();
        let problem = RegressionProblem::univariate(x, y);
        let fit = fit_ols(&problem, &WeightVector::ones(3)).unwrap();
        let cov = sandwich_covariance(
            &fit,
            &problem,
            &WeightVector::ones(3),
            &SandwichOptions::default(),
        )
        .unwrap();
        assert!(cov.sigma_theta.amax() < 1e-20);
    }

    #[test]
    fn singleton_clusters_match_unclustered() {
        let mut problem =
            RegressionProblem::univariate(vec![1.0, 2.0, -1.0], vec![1.0, 4.0, 0.5]);
        problem.clusters = Some(vec![0, 1, 2]);
        let w = WeightVector::ones(3);
        let fit = fit_ols(&problem, &w).unwrap();
        let plain = sandwich_covariance(&fit, &problem, &w, &SandwichOptions::default()).unwrap();
        let clustered = sandwich_covariance(
            &fit,
            &problem,
            &w,
            &SandwichOptions {
                cluster_mode: ClusterMode::ByLabel,
                ..Default::default()
            },
        )
        .unwrap();
        assert_relative_eq!(
            plain.sigma_theta[(0, 0)],
            clustered.sigma_theta[(0, 0)],
            epsilon = 1e-14
        );
    }

    #[test]
    fn missing_cluster_labels_is_config_error() {
        let (problem, fit) = toy_fit();
        let err = sandwich_covariance(
            &fit,
            &problem,
            &WeightVector::ones(2),
            &SandwichOptions {
                cluster_mode: ClusterMode::ByLabel,
                ..Default::default()
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
