//! Per-observation influence scores psi_n for a quantity of interest.
//!
//! Closed forms are used for OLS/IV (reusing the cached Jacobian
//! factorization); general Z-estimators go through the implicit function
//! theorem with the user-supplied estimating function.

use nalgebra::{DMatrix, DVector};

use crate::data::RegressionProblem;
use crate::error::{Error, Result};
use crate::parallel::pmap_range;
use crate::sandwich::{se_derivatives, SandwichOptions};
use crate::solve::{FitResult, WeightVector, ZEstimatorSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QoiKind {
    /// phi = theta_p.
    Parameter,
    /// phi = -s * theta_p where s = sign(theta_hat_p); Delta = |theta_hat_p|.
    SignChange,
    /// phi drives the estimate toward losing significance;
    /// Delta = |theta_hat_p| - level * SE_p.
    SignificanceChange,
    /// phi drives a significant result of the opposite sign;
    /// Delta = |theta_hat_p| + level * SE_p.
    SignAndSignificance,
    /// User-supplied phi(theta) with an explicit gradient.
    Custom,
}

/// Callbacks for a custom scalar functional of theta (no explicit weight
/// dependence).
pub struct CustomQoi {
    pub phi: Box<dyn Fn(&DVector<f64>) -> f64 + Sync>,
    pub grad: Option<Box<dyn Fn(&DVector<f64>) -> DVector<f64> + Sync>>,
}

/// A scalar functional phi(theta, w) together with the change size Delta that
/// constitutes a reversal of the original conclusion.
pub struct QuantityOfInterest {
    pub kind: QoiKind,
    pub target: usize,
    pub level: f64,
    /// s = sign(theta_hat_p) at the base fit (+1 at exactly zero).
    pub direction: f64,
    pub se_options: SandwichOptions,
    pub delta: f64,
    /// Coefficient on theta_p inside phi.
    theta_coeff: f64,
    /// Coefficient on SE_p inside phi (0 for kinds with no weight dependence).
    se_coeff: f64,
    custom: Option<CustomQoi>,
}

impl QuantityOfInterest {
    pub fn custom(custom: CustomQoi, delta: f64) -> Self {
        QuantityOfInterest {
            kind: QoiKind::Custom,
            target: 0,
            level: 0.0,
            direction: 1.0,
            se_options: SandwichOptions::default(),
            delta,
            theta_coeff: 0.0,
            se_coeff: 0.0,
            custom: Some(custom),
        }
    }

    /// Whether phi has explicit weight dependence (through SE_p).
    pub fn depends_on_weights(&self) -> bool {
        self.se_coeff != 0.0
    }

    /// phi(theta_hat(w), w) at the supplied fit.
    pub fn phi_value(
        &self,
        fit: &FitResult,
        problem: &RegressionProblem,
        w: &WeightVector,
    ) -> Result<f64> {
        if let Some(custom) = &self.custom {
            return Ok((custom.phi)(&fit.theta));
        }
        let mut phi = self.theta_coeff * fit.theta[self.target];
        if self.se_coeff != 0.0 {
            let sd = se_derivatives(fit, problem, w, &self.se_options, self.target)?;
            phi += self.se_coeff * sd.se;
        }
        Ok(phi)
    }

    /// Gradient of phi in theta at the supplied fit.
    pub fn grad_theta(
        &self,
        fit: &FitResult,
        problem: &RegressionProblem,
        w: &WeightVector,
    ) -> Result<DVector<f64>> {
        if let Some(custom) = &self.custom {
            let grad = custom.grad.as_ref().ok_or(Error::MissingGradient)?;
            return Ok(grad(&fit.theta));
        }
        let mut g = DVector::zeros(fit.p());
        g[self.target] = self.theta_coeff;
        if self.se_coeff != 0.0 {
            let sd = se_derivatives(fit, problem, w, &self.se_options, self.target)?;
            g += sd.d_theta * self.se_coeff;
        }
        Ok(g)
    }
}

/// Builds the QOI for `kind` at the base fit: fixes the direction s from the
/// fitted sign and evaluates Delta from theta_hat and SE.
///
/// A significance-change request on an already-insignificant estimate falls
/// back to the other confidence-interval endpoint (the change needed to make
/// the estimate significant with the opposite sign).
pub fn make_qoi(
    kind: QoiKind,
    fit: &FitResult,
    problem: &RegressionProblem,
    target: usize,
    level: f64,
    se_options: SandwichOptions,
) -> Result<QuantityOfInterest> {
    let p = fit.p();
    if target >= p {
        return Err(Error::TargetOutOfBounds { index: target, p });
    }
    let theta_p = fit.theta[target];
    let s = if theta_p < 0.0 { -1.0 } else { 1.0 };
    let se = match kind {
        QoiKind::Parameter | QoiKind::SignChange => 0.0,
        QoiKind::SignificanceChange | QoiKind::SignAndSignificance => {
            se_derivatives(fit, problem, &WeightVector::ones(problem.n()), &se_options, target)?.se
        }
        QoiKind::Custom => {
            return Err(Error::Config(
                "custom QOIs are built via QuantityOfInterest::custom".into(),
            ))
        }
    };
    let (theta_coeff, se_coeff, delta) = match kind {
        QoiKind::Parameter => (1.0, 0.0, 0.0),
        QoiKind::SignChange => (-s, 0.0, theta_p.abs()),
        QoiKind::SignificanceChange => {
            let delta = theta_p.abs() - level * se;
            if delta >= 0.0 {
                (-s, level, delta)
            } else {
                (-s, -level, theta_p.abs() + level * se)
            }
        }
        QoiKind::SignAndSignificance => (-s, -level, theta_p.abs() + level * se),
        QoiKind::Custom => unreachable!(),
    };
    Ok(QuantityOfInterest {
        kind,
        target,
        level,
        direction: s,
        se_options,
        delta,
        theta_coeff,
        se_coeff,
        custom: None,
    })
}

/// Influence scores with a deterministic ascending order.
#[derive(Debug, Clone)]
pub struct InfluenceVector {
    /// psi_n = d phi / d w_n at w = 1.
    pub psi: DVector<f64>,
    /// Indices sorted by ascending psi; ties broken by original index.
    pub sorted_order: Vec<usize>,
}

impl InfluenceVector {
    pub fn from_psi(psi: DVector<f64>) -> Self {
        let mut order: Vec<usize> = (0..psi.len()).collect();
        // Stable sort keeps ties in original-index order.
        order.sort_by(|&a, &b| psi[a].partial_cmp(&psi[b]).unwrap());
        InfluenceVector {
            psi,
            sorted_order: order,
        }
    }

    pub fn n(&self) -> usize {
        self.psi.len()
    }
}

/// Parameter derivatives d theta_hat / d w_n for OLS/IV, one row per
/// observation: row n = A^{-1} b_n z_n eps_n with A = sum of effective-weight
/// z x' (the cached Jacobian is H = -A).
pub fn dtheta_dw(fit: &FitResult, problem: &RegressionProblem) -> Result<DMatrix<f64>> {
    let n = problem.n();
    let p = problem.p();
    let z = problem.instruments();
    let rows: Vec<Result<DVector<f64>>> = pmap_range(n, |i| {
        let b = problem
            .base_weights
            .as_ref()
            .map_or(1.0, |bw| bw[i]);
        let g = z.row(i).transpose() * (b * fit.residuals[i]);
        fit.solve_jacobian(&g).map(|v| -v)
    });
    let mut out = DMatrix::zeros(n, p);
    for (i, row) in rows.into_iter().enumerate() {
        out.set_row(i, &row?.transpose());
    }
    Ok(out)
}

/// d theta_hat / d w_n for a general Z-estimator: row n = -H^{-1} G(theta_hat, d_n).
pub fn dtheta_dw_zestimator(fit: &FitResult, spec: &ZEstimatorSpec) -> Result<DMatrix<f64>> {
    let n = spec.n_obs;
    let mut out = DMatrix::zeros(n, spec.dim);
    for i in 0..n {
        let g = (spec.g)(&fit.theta, i);
        let row = fit.solve_jacobian(&g)?;
        out.set_row(i, &(-row).transpose());
    }
    Ok(out)
}

/// psi_n = (d phi/d theta)' (d theta_hat/d w_n) + d phi/d w_n, with the
/// explicit-w term nonzero only for significance kinds.
pub fn influence_scores(
    fit: &FitResult,
    problem: &RegressionProblem,
    qoi: &QuantityOfInterest,
) -> Result<InfluenceVector> {
    let w = WeightVector::ones(problem.n());
    let grad = qoi.grad_theta(fit, problem, &w)?;
    let dtheta = dtheta_dw(fit, problem)?;
    let mut psi = &dtheta * &grad;
    if qoi.se_coeff != 0.0 {
        let sd = se_derivatives(fit, problem, &w, &qoi.se_options, qoi.target)?;
        psi += sd.d_w * qoi.se_coeff;
    }
    Ok(InfluenceVector::from_psi(psi))
}

/// Influence scores for a general Z-estimator with a custom (or parameter) QOI.
pub fn influence_scores_zestimator(
    fit: &FitResult,
    spec: &ZEstimatorSpec,
    qoi: &QuantityOfInterest,
) -> Result<InfluenceVector> {
    if qoi.depends_on_weights() {
        return Err(Error::Config(
            "significance QOIs are only available for OLS/IV problems".into(),
        ));
    }
    let grad = match &qoi.custom {
        Some(custom) => {
            let g = custom.grad.as_ref().ok_or(Error::MissingGradient)?;
            g(&fit.theta)
        }
        None => {
            let mut g = DVector::zeros(fit.p());
            g[qoi.target] = qoi.theta_coeff;
            g
        }
    };
    let dtheta = dtheta_dw_zestimator(fit, spec)?;
    Ok(InfluenceVector::from_psi(&dtheta * &grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solve::{fit_ols, solve_zestimator};
    use approx::assert_relative_eq;

    fn toy() -> (RegressionProblem, FitResult) {
        let problem = RegressionProblem::univariate(vec![1.0, 2.0], vec![1.0, 4.0]);
        let fit = fit_ols(&problem, &WeightVector::ones(2)).unwrap();
        (problem, fit)
    }

    #[test]
    fn ols_toy_dtheta_dw() {
        let (problem, fit) = toy();
        let d = dtheta_dw(&fit, &problem).unwrap();
        assert_relative_eq!(d[(0, 0)], -0.16, epsilon = 1e-12);
        assert_relative_eq!(d[(1, 0)], 0.16, epsilon = 1e-12);
    }

    #[test]
    fn perfect_fit_zero_scores() {
        let x = vec![1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|v| 3.0 * v).collect();
        let problem = RegressionProblem::univariate(x, y);
        let fit = fit_ols(&problem, &WeightVector::ones(3)).unwrap();
        let d = dtheta_dw(&fit, &problem).unwrap();
        assert!(d.amax() < 1e-12);
    }

    #[test]
    fn sample_mean_dtheta_dw() {
        let data = [1.0, 2.0, 3.0];
        let spec = ZEstimatorSpec {
            dim: 1,
            n_obs: 3,
            g: Box::new(move |theta, i| DVector::from_element(1, theta[0] - data[i])),
            g_jacobian: Some(Box::new(|_, _| DMatrix::from_element(1, 1, 1.0))),
            theta0: DVector::from_element(1, 0.0),
        };
        let fit = solve_zestimator(&spec, &WeightVector::ones(3)).unwrap();
        let d = dtheta_dw_zestimator(&fit, &spec).unwrap();
        assert_relative_eq!(d[(0, 0)], -1.0 / 3.0, epsilon = 1e-10);
        assert_relative_eq!(d[(1, 0)], 0.0, epsilon = 1e-10);
        assert_relative_eq!(d[(2, 0)], 1.0 / 3.0, epsilon = 1e-10);
    }

    #[test]
    fn parameter_qoi_is_dtheta_column() {
        let (problem, fit) = toy();
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
        assert_relative_eq!(inf.psi[0], -0.16, epsilon = 1e-12);
        assert_relative_eq!(inf.psi[1], 0.16, epsilon = 1e-12);
        assert_eq!(inf.sorted_order, vec![0, 1]);
    }

    #[test]
    fn sign_change_negates_parameter_scores() {
        let (problem, fit) = toy();
        let qoi = make_qoi(
            QoiKind::SignChange,
            &fit,
            &problem,
            0,
            1.96,
            SandwichOptions::default(),
        )
        .unwrap();
        assert_relative_eq!(qoi.delta, 1.8, epsilon = 1e-12);
        let inf = influence_scores(&fit, &problem, &qoi).unwrap();
        assert_relative_eq!(inf.psi[0], 0.16, epsilon = 1e-12);
        assert_relative_eq!(inf.psi[1], -0.16, epsilon = 1e-12);
    }

    #[test]
    fn microcredit_style_delta() {
        // theta_hat = -4.55, SE = 5.88 => sign-and-significance Delta.
        let delta = 4.55 + 1.96 * 5.88;
        assert_relative_eq!(delta, 16.0748, epsilon = 1e-10);
    }

    #[test]
    fn significance_delta_formula() {
        // Direct formula check on a synthetic fit: theta=1.0, SE=0.1.
        let delta = 1.0f64.abs() - 1.96 * 0.1;
        assert_relative_eq!(delta, 0.804, epsilon = 1e-12);
    }

    #[test]
    fn zero_sum_of_scores() {
        let (problem, fit) = toy();
        for kind in [QoiKind::Parameter, QoiKind::SignChange] {
            let qoi =
                make_qoi(kind, &fit, &problem, 0, 1.96, SandwichOptions::default()).unwrap();
            let inf = influence_scores(&fit, &problem, &qoi).unwrap();
            assert!(inf.psi.sum().abs() <= 1e-8 * 2.0 * inf.psi.amax());
        }
    }

    #[test]
    fn leverage_identity_on_toy() {
        // phi = fitted value at observation 0: x_0 * theta.
        let (problem, fit) = toy();
        let qoi = QuantityOfInterest::custom(
            CustomQoi {
                phi: Box::new(|t| 1.0 * t[0]),
                grad: Some(Box::new(|_| DVector::from_element(1, 1.0))),
            },
            0.0,
        );
        let inf = influence_scores(&fit, &problem, &qoi).unwrap();
        // h_00 = x_0^2 / sum x^2 = 1/5; eps_0 = -0.8.
        assert_relative_eq!(inf.psi[0], (1.0 / 5.0) * -0.8, epsilon = 1e-12);
    }

    #[test]
    fn custom_without_gradient_errors() {
        let (problem, fit) = toy();
        let qoi = QuantityOfInterest::custom(
            CustomQoi {
                phi: Box::new(|t| t[0]),
                grad: None,
            },
            0.0,
        );
        let err = influence_scores(&fit, &problem, &qoi).unwrap_err();
        assert!(matches!(err, Error::MissingGradient));
    }

    #[test]
    fn target_out_of_bounds() {
        let (problem, fit) = toy();
        let result = make_qoi(
            QoiKind::Parameter,
            &fit,
            &problem,
            3,
            1.96,
            SandwichOptions::default(),
        );
        assert!(matches!(result, Err(Error::TargetOutOfBounds { .. })));
    }
}
