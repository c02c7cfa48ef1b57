//! Finite-sample error certificates for the linear approximation: computable
//! bounds on the gap between the re-weighted estimate and its first-order
//! prediction, valid for OLS/IV whenever alpha * C_op * xi1 <= 1/3.

use nalgebra::{DMatrix, DVector};

use crate::data::RegressionProblem;
use crate::error::{Error, Result};
use crate::influence::{QoiKind, QuantityOfInterest};
use crate::solve::{FitResult, WeightVector};

/// Condition threshold: the certificate applies when alpha * C_op * xi1 is at
/// most this value.
pub const CONDITION_THRESHOLD: f64 = 1.0 / 3.0;

const POWER_TOLERANCE: f64 = 1e-10;
const POWER_MAX_ITERATIONS: usize = 1000;

#[derive(Debug, Clone)]
pub struct CertificateConstants {
    pub alpha: f64,
    /// Operator norm of (N^-1 sum z x')^-1.
    pub c_op: f64,
    /// (3/2) C_op.
    pub c_op_scaled: f64,
    /// Spectral norm of the dropped-set average of z x'.
    pub xi1: f64,
    /// 2-norm of the dropped-set average of z eps.
    pub xi2: f64,
    pub c_ball: f64,
    /// ||theta_lin(w) - theta_hat||_2, the first-order parameter change.
    pub lin_change_norm: f64,
    /// alpha * C_op * xi1; must be <= 1/3 for the bounds to apply.
    pub condition_value: f64,
}

#[derive(Debug, Clone)]
pub struct ErrorCertificate {
    pub constants: CertificateConstants,
    pub valid: bool,
    pub reason: Option<String>,
    /// Bound on ||theta_hat(w) - theta_lin(w)||_2.
    pub bound_lin: Option<f64>,
    /// Bound on ||theta_hat(w) - theta_hat(1)||_2.
    pub bound_diff: Option<f64>,
    /// Bound on |phi(w) - phi_lin(w)|.
    pub qoi_bound_lin: Option<f64>,
    /// Bound on |phi(w) - phi(1)|.
    pub qoi_bound_diff: Option<f64>,
    /// C_ball recomputed with the QOI-level linear change in place of the
    /// parameter-level one, reported when the two readings differ.
    pub c_ball_alt: Option<f64>,
}

/// Lipschitz data for nonlinear quantities of interest (Lemma 1).
#[derive(Debug, Clone, Copy)]
pub struct LipschitzData {
    pub l_theta: f64,
    pub l_omega: f64,
    pub c_theta: f64,
    pub c_omega: f64,
}

/// ||A^-1||_2 via power iteration on A^-T A^-1, using the cached Jacobian
/// factorization (H = -A, and the sign cancels in the pair of solves).
fn inverse_operator_norm(fit: &FitResult) -> Result<f64> {
    let p = fit.p();
    let mut v = DVector::from_element(p, 1.0 / (p as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..POWER_MAX_ITERATIONS {
        let bv = fit.solve_jacobian_t(&fit.solve_jacobian(&v)?)?;
        let norm = bv.norm();
        if norm == 0.0 {
            return Ok(0.0);
        }
        let next = bv / norm;
        let converged = (norm - lambda).abs() <= POWER_TOLERANCE * norm.max(1.0);
        lambda = norm;
        v = next;
        if converged {
            break;
        }
    }
    Ok(lambda.sqrt())
}

fn dropped_set(w: &WeightVector) -> Result<Vec<usize>> {
    if !w.is_binary() {
        return Err(Error::Config(
            "certificates require a 0/1 drop-weight vector".into(),
        ));
    }
    Ok(w.dropped_indices())
}

fn trivial_constants() -> CertificateConstants {
    CertificateConstants {
        alpha: 0.0,
        c_op: 0.0,
        c_op_scaled: 0.0,
        xi1: 0.0,
        xi2: 0.0,
        c_ball: 0.0,
        lin_change_norm: 0.0,
        condition_value: 0.0,
    }
}

/// All Theorem-1 constants, computed from the original fit only (no refits).
pub fn compute_constants(
    problem: &RegressionProblem,
    fit: &FitResult,
    w: &WeightVector,
) -> Result<CertificateConstants> {
    let dropped = dropped_set(w)?;
    if dropped.is_empty() {
        return Ok(trivial_constants());
    }
    let n = problem.n();
    let p = problem.p();
    let alpha = dropped.len() as f64 / n as f64;
    let c_op = n as f64 * inverse_operator_norm(fit)?;
    let c_op_scaled = 1.5 * c_op;

    // Base weights are folded into the instruments (z_tilde = b z) so the
    // constants refer to the same cross-product as the cached Jacobian.
    let z = problem.instruments();
    let x = &problem.x;
    let m = dropped.len() as f64;
    let mut zx = DMatrix::zeros(p, p);
    let mut zeps = DVector::zeros(p);
    for &i in &dropped {
        let b = problem.base_weights.as_ref().map_or(1.0, |bw| bw[i]);
        let zi = z.row(i).transpose() * b;
        zx += &zi * x.row(i);
        zeps += zi * fit.residuals[i];
    }
    zx /= m;
    zeps /= m;
    let xi1 = zx.svd(false, false).singular_values[0];
    let xi2 = zeps.norm();

    // theta_lin(w) - theta_hat = -A^-1 sum_dropped b z eps = H^-1 (sum ...).
    let lin_change = fit.solve_jacobian(&(zeps * m))?;
    let lin_change_norm = lin_change.norm();

    let condition_value = alpha * c_op * xi1;
    let q = 2.0 * alpha * alpha * c_op_scaled * c_op_scaled * xi1;
    let denom = 1.0 - q * xi1;
    let c_ball = if denom > 0.0 {
        (lin_change_norm + q * xi2) / denom
    } else {
        f64::INFINITY
    };
    Ok(CertificateConstants {
        alpha,
        c_op,
        c_op_scaled,
        xi1,
        xi2,
        c_ball,
        lin_change_norm,
        condition_value,
    })
}

fn theta_bounds(c: &CertificateConstants) -> (f64, f64) {
    let q = 2.0 * c.alpha * c.alpha * c.c_op_scaled * c.c_op_scaled * c.xi1;
    let bound_lin = q * (c.xi2 + c.c_ball * c.xi1);
    let bound_diff = c.alpha * c.c_op * (c.xi2 + c.c_ball * c.xi1);
    (bound_lin, bound_diff)
}

/// Theorem-1 certificate for the parameter vector.
pub fn certify_theta(
    problem: &RegressionProblem,
    fit: &FitResult,
    w: &WeightVector,
) -> Result<ErrorCertificate> {
    let constants = compute_constants(problem, fit, w)?;
    if constants.condition_value > CONDITION_THRESHOLD {
        return Ok(ErrorCertificate {
            constants,
            valid: false,
            reason: Some("condition violated: alpha * C_op * xi1 > 1/3".into()),
            bound_lin: None,
            bound_diff: None,
            qoi_bound_lin: None,
            qoi_bound_diff: None,
            c_ball_alt: None,
        });
    }
    let (bound_lin, bound_diff) = theta_bounds(&constants);
    Ok(ErrorCertificate {
        constants,
        valid: true,
        reason: None,
        bound_lin: Some(bound_lin),
        bound_diff: Some(bound_diff),
        qoi_bound_lin: None,
        qoi_bound_diff: None,
        c_ball_alt: None,
    })
}

/// Lemma-1 certificate for a scalar QOI. Linear parameter-level QOIs need no
/// extra data; anything with curvature or explicit weight dependence requires
/// the caller to supply Lipschitz constants.
pub fn certify_qoi(
    problem: &RegressionProblem,
    fit: &FitResult,
    w: &WeightVector,
    qoi: &QuantityOfInterest,
    lipschitz: Option<LipschitzData>,
) -> Result<ErrorCertificate> {
    let mut cert = certify_theta(problem, fit, w)?;
    if !cert.valid {
        return Ok(cert);
    }
    let lip = match lipschitz {
        Some(l) => l,
        None => match qoi.kind {
            QoiKind::Parameter | QoiKind::SignChange => LipschitzData {
                l_theta: 0.0,
                l_omega: 0.0,
                c_theta: qoi
                    .grad_theta(fit, problem, &WeightVector::ones(problem.n()))?
                    .norm(),
                c_omega: 0.0,
            },
            _ => {
                return Err(Error::InsufficientSmoothness(
                    "nonlinear QOI requires Lipschitz constants".into(),
                ))
            }
        },
    };
    let alpha = cert.constants.alpha;
    let (bound_lin, bound_diff) = (cert.bound_lin.unwrap(), cert.bound_diff.unwrap());
    if alpha == 0.0 {
        cert.qoi_bound_lin = Some(0.0);
        cert.qoi_bound_diff = Some(0.0);
        return Ok(cert);
    }
    let c_diff = bound_diff / alpha;
    let c_lin = bound_lin / (alpha * alpha);
    cert.qoi_bound_lin = Some(
        (lip.l_theta * (c_diff + 1.0) * c_diff + lip.c_theta * c_lin
            + lip.l_omega * (c_diff + 1.0))
            * alpha
            * alpha,
    );
    cert.qoi_bound_diff = Some((lip.c_theta * c_diff + lip.c_omega) * alpha);

    // Alternative C_ball reading: QOI-level linear change in place of the
    // parameter-level norm.
    let grad = qoi.grad_theta(fit, problem, &WeightVector::ones(problem.n()))?;
    let qoi_lin_change = {
        let z = problem.instruments();
        let mut zeps = DVector::zeros(problem.p());
        for &i in &dropped_set(w)? {
            let b = problem.base_weights.as_ref().map_or(1.0, |bw| bw[i]);
            zeps += z.row(i).transpose() * (b * fit.residuals[i]);
        }
        grad.dot(&fit.solve_jacobian(&zeps)?).abs()
    };
    if (qoi_lin_change - cert.constants.lin_change_norm).abs()
        > 1e-12 * cert.constants.lin_change_norm.max(1.0)
    {
        let c = &cert.constants;
        let q = 2.0 * c.alpha * c.alpha * c.c_op_scaled * c.c_op_scaled * c.xi1;
        let denom = 1.0 - q * c.xi1;
        if denom > 0.0 {
            cert.c_ball_alt = Some((qoi_lin_change + q * c.xi2) / denom);
        }
    }
    Ok(cert)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::RegressionProblem;
    use crate::influence::make_qoi;
    use crate::sandwich::SandwichOptions;
    use crate::solve::{fit_ols, WeightVector};
    use approx::assert_relative_eq;

    fn toy() -> (RegressionProblem, FitResult) {
        let problem = RegressionProblem::univariate(vec![1.0, 2.0], vec![1.0, 4.0]);
        let fit = fit_ols(&problem, &WeightVector::ones(2)).unwrap();
        (problem, fit)
    }

    #[test]
    fn toy_constants() {
        let (problem, fit) = toy();
        let w = WeightVector::dropping(2, &[0]);
        let c = compute_constants(&problem, &fit, &w).unwrap();
        assert_relative_eq!(c.alpha, 0.5, epsilon = 1e-15);
        assert_relative_eq!(c.c_op, 0.4, epsilon = 1e-10);
        assert_relative_eq!(c.xi1, 1.0, epsilon = 1e-10);
        assert_relative_eq!(c.xi2, 0.8, epsilon = 1e-10);
        assert_relative_eq!(c.condition_value, 0.2, epsilon = 1e-10);
        assert_relative_eq!(c.lin_change_norm, 0.16, epsilon = 1e-10);
        assert_relative_eq!(c.c_ball, 0.304 / 0.82, epsilon = 1e-10);
    }

    #[test]
    fn toy_certificate() {
        let (problem, fit) = toy();
        let w = WeightVector::dropping(2, &[0]);
        let cert = certify_theta(&problem, &fit, &w).unwrap();
        assert!(cert.valid);
        let bound_lin = cert.bound_lin.unwrap();
        assert_relative_eq!(bound_lin, 0.18 * (0.8 + 0.304 / 0.82), epsilon = 1e-10);
        // Actual linearization error: refit theta = 2.0, linear prediction 1.96.
        let actual = (2.0f64 - 1.96).abs();
        assert!(actual <= bound_lin);
        let bound_diff = cert.bound_diff.unwrap();
        assert!((2.0f64 - 1.8).abs() <= bound_diff);
    }

    #[test]
    fn empty_drop_set_trivial() {
        let (problem, fit) = toy();
        let cert = certify_theta(&problem, &fit, &WeightVector::ones(2)).unwrap();
        assert!(cert.valid);
        assert_eq!(cert.bound_lin, Some(0.0));
        assert_eq!(cert.bound_diff, Some(0.0));
    }

    #[test]
    fn condition_violation_refuses() {
        // Dropping half the mass of a 2-point design with a huge regressor
        // pushes alpha * C_op * xi1 past 1/3.
        let problem = RegressionProblem::univariate(vec![1.0, 100.0], vec![1.0, 4.0]);
        let fit = fit_ols(&problem, &WeightVector::ones(2)).unwrap();
        let w = WeightVector::dropping(2, &[1]);
        let cert = certify_theta(&problem, &fit, &w).unwrap();
        assert!(!cert.valid);
        assert!(cert.bound_lin.is_none());
    }

    #[test]
    fn linear_qoi_bound() {
        let (problem, fit) = toy();
        let w = WeightVector::dropping(2, &[0]);
        let qoi = make_qoi(
            crate::influence::QoiKind::Parameter,
            &fit,
            &problem,
            0,
            1.96,
            SandwichOptions::default(),
        )
        .unwrap();
        let cert = certify_qoi(&problem, &fit, &w, &qoi, None).unwrap();
        // C_theta = 1, so the QOI bound equals the parameter bound.
        assert_relative_eq!(
            cert.qoi_bound_lin.unwrap(),
            cert.bound_lin.unwrap(),
            epsilon = 1e-12
        );
        assert!(0.04 <= cert.qoi_bound_lin.unwrap());
    }

    #[test]
    fn significance_qoi_needs_lipschitz() {
        let (problem, fit) = toy();
        let w = WeightVector::dropping(2, &[0]);
        let qoi = make_qoi(
            crate::influence::QoiKind::SignAndSignificance,
            &fit,
            &problem,
            0,
            1.96,
            SandwichOptions::default(),
        )
        .unwrap();
        let err = certify_qoi(&problem, &fit, &w, &qoi, None).unwrap_err();
        assert!(matches!(err, Error::InsufficientSmoothness(_)));
    }

    #[test]
    fn non_binary_weights_rejected() {
        let (problem, fit) = toy();
        let w = WeightVector::from_values(vec![1.0, 0.5]).unwrap();
        assert!(compute_constants(&problem, &fit, &w).is_err());
    }
}
