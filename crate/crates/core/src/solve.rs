//! Weighted estimating-equation solvers: closed-form OLS/IV and a Newton
//! iteration for user-supplied Z-estimators.

use nalgebra::{DMatrix, DVector, Dyn, LU};

use crate::data::{RegressionProblem, RANK_TOLERANCE};
use crate::error::{Error, Result};

/// Per-observation weights, composed multiplicatively with the problem's
/// base weights. Drop-analysis vectors contain only 0s and 1s.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    values: DVector<f64>,
}

impl WeightVector {
    pub fn ones(n: usize) -> Self {
        WeightVector {
            values: DVector::repeat(n, 1.0),
        }
    }

    /// All ones except zeros at `dropped`.
    pub fn dropping(n: usize, dropped: &[usize]) -> Self {
        let mut values = DVector::repeat(n, 1.0);
        for &i in dropped {
            values[i] = 0.0;
        }
        WeightVector { values }
    }

    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!(
                "weight at index {i} is negative or non-finite"
            )));
        }
        Ok(WeightVector {
            values: DVector::from_vec(values),
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.len() == 0
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn get(&self, i: usize) -> f64 {
        self.values[i]
    }

    /// Indices with zero weight.
    pub fn dropped_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.values[i] == 0.0).collect()
    }

    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|&w| w == 0.0 || w == 1.0)
    }

    /// Removal weights times base weights.
    pub fn effective(&self, problem: &RegressionProblem) -> DVector<f64> {
        match &problem.base_weights {
            None => self.values.clone(),
            Some(b) => self.values.component_mul(b),
        }
    }
}

/// A solved estimating equation with its factorized Jacobian.
///
/// `jacobian` holds H(w) = sum_n w_n dG/dtheta at the solution; for OLS and
/// IV this is -sum_n w_n z_n x_n'. The LU factors are cached for reuse by the
/// influence, sandwich, and certificate computations.
pub struct FitResult {
    pub theta: DVector<f64>,
    /// y - X theta for regression fits; empty for custom Z-estimators.
    pub residuals: DVector<f64>,
    jacobian: DMatrix<f64>,
    jac_lu: LU<f64, Dyn, Dyn>,
    jac_t_lu: LU<f64, Dyn, Dyn>,
    pub converged: bool,
    pub iterations: usize,
}

impl FitResult {
    fn new(
        theta: DVector<f64>,
        residuals: DVector<f64>,
        jacobian: DMatrix<f64>,
        converged: bool,
        iterations: usize,
    ) -> Result<Self> {
        let jac_lu = jacobian.clone().lu();
        let jac_t_lu = jacobian.transpose().lu();
        if jac_lu.determinant().abs() == 0.0 {
            return Err(Error::SingularJacobian);
        }
        Ok(FitResult {
            theta,
            residuals,
            jacobian,
            jac_lu,
            jac_t_lu,
            converged,
            iterations,
        })
    }

    pub fn p(&self) -> usize {
        self.theta.len()
    }

    pub fn jacobian(&self) -> &DMatrix<f64> {
        &self.jacobian
    }

    /// Solve H v = rhs using the cached factorization.
    pub fn solve_jacobian(&self, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        self.jac_lu.solve(rhs).ok_or(Error::SingularJacobian)
    }

    /// Solve H' v = rhs using the cached factorization.
    pub fn solve_jacobian_t(&self, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        self.jac_t_lu.solve(rhs).ok_or(Error::SingularJacobian)
    }
}

fn check_weights(w: &WeightVector, n: usize) -> Result<()> {
    if w.len() != n {
        return Err(Error::Config(format!(
            "weight vector length {} does not match N = {n}",
            w.len()
        )));
    }
    Ok(())
}

/// Weighted OLS via a singular value decomposition of the scaled design.
pub fn fit_ols(problem: &RegressionProblem, w: &WeightVector) -> Result<FitResult> {
    let (n, p) = (problem.n(), problem.p());
    check_weights(w, n)?;
    let weights = w.effective(problem);
    if weights.iter().all(|&v| v == 0.0) {
        return Err(Error::DegenerateSubset("all weights are zero".into()));
    }

    // Scale rows by sqrt(w) and solve the least-squares problem directly
    // rather than inverting the normal equations.
    let sqrt_w: Vec<f64> = weights.iter().map(|&v| v.sqrt()).collect();
    let design = DMatrix::from_fn(n, p, |i, j| sqrt_w[i] * problem.x[(i, j)]);
    let target = DVector::from_fn(n, |i, _| sqrt_w[i] * problem.y[i]);

    let svd = design.svd(true, true);
    let s_max = svd.singular_values.max();
    let s_min = svd.singular_values.min();
    if !(s_max > 0.0) || s_min / s_max <= RANK_TOLERANCE {
        return Err(Error::DegenerateSubset(
            "weighted design is rank deficient".into(),
        ));
    }
    let theta = svd
        .solve(&target, 0.0)
        .map_err(|e| Error::DegenerateSubset(e.to_string()))?;

    let residuals = &problem.y - &problem.x * &theta;
    let jacobian = weighted_cross_product(&problem.x, &problem.x, &weights).map(|v| -v);
    FitResult::new(theta, residuals, jacobian, true, 1)
}

/// Just-identified IV: solve sum_n w_n z_n (y_n - theta' x_n) = 0.
pub fn fit_iv(problem: &RegressionProblem, w: &WeightVector) -> Result<FitResult> {
    let n = problem.n();
    check_weights(w, n)?;
    if problem.z.is_none() {
        return Err(Error::Config("problem has no instruments".into()));
    }
    let weights = w.effective(problem);
    if weights.iter().all(|&v| v == 0.0) {
        return Err(Error::DegenerateSubset("all weights are zero".into()));
    }
    let z = problem.instruments();
    let a = weighted_cross_product(z, &problem.x, &weights);
    let svd = a.clone().svd(false, false);
    let s_max = svd.singular_values.max();
    let s_min = svd.singular_values.min();
    if !(s_max > 0.0) || s_min / s_max <= RANK_TOLERANCE {
        return Err(Error::WeakInstruments(
            "weighted instrument cross-product is singular".into(),
        ));
    }
    let b = DVector::from_fn(problem.p(), |j, _| {
        (0..n).map(|i| weights[i] * z[(i, j)] * problem.y[i]).sum()
    });
    let theta = a
        .clone()
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::WeakInstruments("singular cross-product".into()))?;
    let residuals = &problem.y - &problem.x * &theta;
    FitResult::new(theta, residuals, -a, true, 1)
}

/// Fit the problem with its natural estimator (IV when instruments are
/// present, OLS otherwise).
pub fn fit(problem: &RegressionProblem, w: &WeightVector) -> Result<FitResult> {
    if problem.is_iv() {
        fit_iv(problem, w)
    } else {
        fit_ols(problem, w)
    }
}

/// sum_n w_n z_n x_n' as a P x P matrix.
fn weighted_cross_product(z: &DMatrix<f64>, x: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    let p = x.ncols();
    let mut out = DMatrix::zeros(p, p);
    for i in 0..x.nrows() {
        let wi = w[i];
        if wi == 0.0 {
            continue;
        }
        for a in 0..p {
            let za = wi * z[(i, a)];
            for b in 0..p {
                out[(a, b)] += za * x[(i, b)];
            }
        }
    }
    out
}

/// A user-supplied estimating equation G(theta, d_n).
pub struct ZEstimatorSpec<'a> {
    pub dim: usize,
    pub n_obs: usize,
    /// G(theta, d_n) for observation n; must return a vector of length `dim`.
    pub g: Box<dyn Fn(&DVector<f64>, usize) -> DVector<f64> + Sync + 'a>,
    /// dG/dtheta for observation n; numeric differencing is used when absent.
    pub g_jacobian: Option<Box<dyn Fn(&DVector<f64>, usize) -> DMatrix<f64> + Sync + 'a>>,
    pub theta0: DVector<f64>,
}

pub const NEWTON_RELATIVE_TOLERANCE: f64 = 1e-10;
pub const NEWTON_MAX_ITERATIONS: usize = 100;

fn weighted_g_sum(spec: &ZEstimatorSpec, theta: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(spec.dim);
    for n in 0..spec.n_obs {
        if w[n] == 0.0 {
            continue;
        }
        out += (spec.g)(theta, n) * w[n];
    }
    out
}

fn weighted_jacobian(spec: &ZEstimatorSpec, theta: &DVector<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    if let Some(jac) = &spec.g_jacobian {
        let mut out = DMatrix::zeros(spec.dim, spec.dim);
        for n in 0..spec.n_obs {
            if w[n] == 0.0 {
                continue;
            }
            out += jac(theta, n) * w[n];
        }
        return out;
    }
    // Central differences, step cbrt(eps) * max(1, |theta_j|) per coordinate.
    let h0 = f64::EPSILON.cbrt();
    let mut out = DMatrix::zeros(spec.dim, spec.dim);
    for j in 0..spec.dim {
        let h = h0 * theta[j].abs().max(1.0);
        let mut plus = theta.clone();
        plus[j] += h;
        let mut minus = theta.clone();
        minus[j] -= h;
        let diff = (weighted_g_sum(spec, &plus, w) - weighted_g_sum(spec, &minus, w)) / (2.0 * h);
        out.set_column(j, &diff);
    }
    out
}

/// Newton iteration on F(theta) = sum_n w_n G(theta, d_n).
pub fn solve_zestimator(spec: &ZEstimatorSpec, w: &WeightVector) -> Result<FitResult> {
    check_weights(w, spec.n_obs)?;
    if !spec.theta0.iter().all(|v| v.is_finite()) {
        return Err(Error::Config("theta0 contains non-finite values".into()));
    }
    let weights = w.values().clone();
    let mut theta = spec.theta0.clone();
    let f0 = weighted_g_sum(spec, &theta, &weights);
    if f0.len() != spec.dim {
        return Err(Error::Config(format!(
            "g_eval returned length {}, expected {}",
            f0.len(),
            spec.dim
        )));
    }
    let tol = NEWTON_RELATIVE_TOLERANCE * f0.amax().max(1.0);
    let mut f = f0;
    let mut iterations = 0;
    let mut converged = f.amax() <= tol;
    while !converged && iterations < NEWTON_MAX_ITERATIONS {
        let jac = weighted_jacobian(spec, &theta, &weights);
        let step = jac
            .clone()
            .lu()
            .solve(&f)
            .ok_or(Error::SingularJacobian)?;
        theta -= step;
        f = weighted_g_sum(spec, &theta, &weights);
        iterations += 1;
        converged = f.amax() <= tol;
    }
    if !converged {
        return Err(Error::NoConvergence {
            iterations,
            residual: f.amax(),
        });
    }
    let jacobian = weighted_jacobian(spec, &theta, &weights);
    FitResult::new(theta, DVector::zeros(0), jacobian, converged, iterations)
}

/// An OLS problem expressed through the generic Z-estimator interface.
pub fn ols_as_zestimator<'a>(problem: &'a RegressionProblem) -> ZEstimatorSpec<'a> {
    let p = problem.p();
    ZEstimatorSpec {
        dim: p,
        n_obs: problem.n(),
        g: Box::new(move |theta, n| {
            let x_n = problem.x.row(n).transpose();
            let resid = problem.y[n] - theta.dot(&x_n);
            x_n * resid
        }),
        g_jacobian: Some(Box::new(move |_theta, n| {
            let x_n = problem.x.row(n).transpose();
            -&x_n * x_n.transpose()
        })),
        theta0: DVector::zeros(p),
    }
}

/// Max-norm of the weighted estimating-equation residual at the solution.
pub fn estimating_equation_residual(problem: &RegressionProblem, fit: &FitResult, w: &WeightVector) -> f64 {
    let weights = w.effective(problem);
    let z = problem.instruments();
    let mut sum = DVector::zeros(problem.p());
    for i in 0..problem.n() {
        if weights[i] == 0.0 {
            continue;
        }
        let row = z.row(i).transpose() * (weights[i] * fit.residuals[i]);
        sum += row;
    }
    sum.amax()
}
