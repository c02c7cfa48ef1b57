//! Simulation studies: the robust-case signal-to-noise experiment, the
//! sigma_X x sigma_eps robustness grid, and the Gamma_alpha distribution
//! table.

use rand::distributions::Distribution as RandDistribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Cauchy, Exp, StandardNormal, StudentT, Uniform};

use crate::data::RegressionProblem;
use crate::error::{Error, Result};
use crate::influence::{influence_scores, make_qoi, QoiKind};
use crate::metrics::{amis, apip, refit_lower_bound};
use crate::parallel::pmap;
use crate::sandwich::{sandwich_covariance, SandwichOptions};
use crate::solve::{fit_ols, WeightVector};

/// Configuration for a single y = beta x + eps simulation.
#[derive(Debug, Clone, Copy)]
pub struct SimConfig {
    pub n: usize,
    pub sigma_x: f64,
    pub sigma_eps: f64,
    pub beta: f64,
    pub seed: u64,
    pub alpha: f64,
}

impl SimConfig {
    fn validate(&self) -> Result<()> {
        if self.n < 10 {
            return Err(Error::Config("simulation requires n >= 10".into()));
        }
        if self.sigma_x <= 0.0 || self.sigma_eps < 0.0 {
            return Err(Error::Config(
                "sigma_x must be positive and sigma_eps nonnegative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PathPoint {
    pub alpha: f64,
    pub amip: f64,
    pub refit_change: f64,
}

#[derive(Debug, Clone)]
pub struct SimResult {
    pub theta_hat: f64,
    pub se: f64,
    /// AMIP predictions and exact refit changes over the requested alphas,
    /// for the sign-change direction.
    pub removal_path: Vec<PathPoint>,
    /// Sign-change APIP (None = NA: unreachable by the approximation).
    pub sign_apip: Option<f64>,
}

fn simulate_problem(cfg: &SimConfig) -> RegressionProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut x = Vec::with_capacity(cfg.n);
    let mut y = Vec::with_capacity(cfg.n);
    for _ in 0..cfg.n {
        let xi: f64 = rng.sample::<f64, _>(StandardNormal) * cfg.sigma_x;
        let eps: f64 = rng.sample::<f64, _>(StandardNormal) * cfg.sigma_eps;
        x.push(xi);
        y.push(cfg.beta * xi + eps);
    }
    RegressionProblem::univariate(x, y)
}

/// Simulates, fits OLS, and traces the AMIP/refit path over the supplied
/// alpha grid (cfg.alpha is appended if absent).
pub fn run_single_sim(cfg: &SimConfig, alphas: &[f64]) -> Result<SimResult> {
    cfg.validate()?;
    let problem = simulate_problem(cfg);
    let ones = WeightVector::ones(cfg.n);
    let fit = fit_ols(&problem, &ones)?;
    let opts = SandwichOptions::default();
    let cov = sandwich_covariance(&fit, &problem, &ones, &opts)?;
    let qoi = make_qoi(QoiKind::SignChange, &fit, &problem, 0, 1.96, opts)?;
    let inf = influence_scores(&fit, &problem, &qoi)?;

    let mut grid: Vec<f64> = alphas.to_vec();
    if !grid.iter().any(|a| (a - cfg.alpha).abs() < 1e-12) {
        grid.push(cfg.alpha);
    }
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let mut removal_path = Vec::with_capacity(grid.len());
    for &a in &grid {
        if a == 0.0 {
            removal_path.push(PathPoint {
                alpha: 0.0,
                amip: 0.0,
                refit_change: 0.0,
            });
            continue;
        }
        let selection = amis(&inf, a)?;
        let check = refit_lower_bound(&problem, &fit, &qoi, &selection)?;
        removal_path.push(PathPoint {
            alpha: a,
            amip: selection.amip,
            refit_change: check.exact_change,
        });
    }
    let sign_apip = apip(&inf, qoi.delta).alpha_star;
    Ok(SimResult {
        theta_hat: fit.theta[0],
        se: cov.standard_errors[0],
        removal_path,
        sign_apip,
    })
}

#[derive(Debug, Clone)]
pub struct GridSpec {
    pub sigma_x_values: Vec<f64>,
    pub sigma_eps_values: Vec<f64>,
    pub n: usize,
    pub beta: f64,
    pub base_seed: u64,
    /// Replicates per cell; APIPs are averaged (NA if any replicate is NA).
    pub replicates: usize,
}

impl GridSpec {
    /// The 10x10 default grid over sigma_X in (0, 4] and sigma_eps in
    /// (0, 12.5] at N = 10,000.
    pub fn default_grid(base_seed: u64) -> Self {
        let sigma_x_values = (0..10)
            .map(|i| 0.1 + (4.0 - 0.1) * i as f64 / 9.0)
            .collect();
        let sigma_eps_values = (0..10)
            .map(|i| 0.125 + (12.5 - 0.125) * i as f64 / 9.0)
            .collect();
        GridSpec {
            sigma_x_values,
            sigma_eps_values,
            n: 10_000,
            beta: 1.0,
            base_seed,
            replicates: 1,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GridCell {
    pub sigma_x: f64,
    pub sigma_eps: f64,
    pub apip_sign: Option<f64>,
    pub apip_significance: Option<f64>,
    pub apip_both: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct GridResult {
    pub sigma_x_values: Vec<f64>,
    pub sigma_eps_values: Vec<f64>,
    /// Row-major: cells[i * n_eps + j] has sigma_x_values[i], sigma_eps_values[j].
    pub cells: Vec<GridCell>,
}

/// Deterministic per-cell seed derivation (splitmix64 over the coordinates),
/// so parallel execution cannot change results.
pub fn derive_seed(base_seed: u64, i: u64, j: u64) -> u64 {
    let mut z = base_seed
        .wrapping_add(i.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(j.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn cell_apips(cfg: &SimConfig) -> Result<(Option<f64>, Option<f64>, Option<f64>)> {
    let problem = simulate_problem(cfg);
    let ones = WeightVector::ones(cfg.n);
    let fit = fit_ols(&problem, &ones)?;
    let opts = SandwichOptions::default();
    let mut out = [None, None, None];
    for (slot, kind) in [
        QoiKind::SignChange,
        QoiKind::SignificanceChange,
        QoiKind::SignAndSignificance,
    ]
    .into_iter()
    .enumerate()
    {
        let qoi = make_qoi(kind, &fit, &problem, 0, 1.96, opts)?;
        let inf = influence_scores(&fit, &problem, &qoi)?;
        out[slot] = apip(&inf, qoi.delta).alpha_star;
    }
    Ok((out[0], out[1], out[2]))
}

/// Runs every grid cell (in parallel) and reports the three reversal APIPs.
pub fn run_grid(spec: &GridSpec) -> Result<GridResult> {
    if spec.sigma_x_values.is_empty() || spec.sigma_eps_values.is_empty() {
        return Err(Error::Config("grid axes must be nonempty".into()));
    }
    let coords: Vec<(usize, usize)> = (0..spec.sigma_x_values.len())
        .flat_map(|i| (0..spec.sigma_eps_values.len()).map(move |j| (i, j)))
        .collect();
    let cells: Vec<Result<GridCell>> = pmap(&coords, |&(i, j)| {
        let sigma_x = spec.sigma_x_values[i];
        let sigma_eps = spec.sigma_eps_values[j];
        let mut sums = [Some(0.0); 3];
        for r in 0..spec.replicates.max(1) {
            let cfg = SimConfig {
                n: spec.n,
                sigma_x,
                sigma_eps,
                beta: spec.beta,
                seed: derive_seed(spec.base_seed.wrapping_add(r as u64), i as u64, j as u64),
                alpha: 0.01,
            };
            let (a, b, c) = cell_apips(&cfg)?;
            for (sum, v) in sums.iter_mut().zip([a, b, c]) {
                *sum = match (*sum, v) {
                    (Some(s), Some(v)) => Some(s + v),
                    _ => None,
                };
            }
        }
        let reps = spec.replicates.max(1) as f64;
        Ok(GridCell {
            sigma_x,
            sigma_eps,
            apip_sign: sums[0].map(|s| s / reps),
            apip_significance: sums[1].map(|s| s / reps),
            apip_both: sums[2].map(|s| s / reps),
        })
    });
    Ok(GridResult {
        sigma_x_values: spec.sigma_x_values.clone(),
        sigma_eps_values: spec.sigma_eps_values.clone(),
        cells: cells.into_iter().collect::<Result<Vec<_>>>()?,
    })
}

/// Samplers for the Gamma_alpha table. `Exponential` is the heavy-left-tail
/// (negated) exponential; `FlippedExp` is the plain one with its heavy tail
/// on the right.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GammaDistribution {
    WorstCase,
    Normal,
    Exponential,
    FlippedExp,
    StudentT(f64),
    Cauchy,
    Uniform,
    Binary(f64),
}

impl GammaDistribution {
    pub fn by_name(name: &str) -> Result<Self> {
        Ok(match name.to_ascii_lowercase().as_str() {
            "worst case" | "worst-case" | "worst" => GammaDistribution::WorstCase,
            "normal" => GammaDistribution::Normal,
            "exponential" | "exp" => GammaDistribution::Exponential,
            "flipped exp" | "flipped-exp" => GammaDistribution::FlippedExp,
            "t(10)" => GammaDistribution::StudentT(10.0),
            "t(3)" => GammaDistribution::StudentT(3.0),
            "t(2)" => GammaDistribution::StudentT(2.0),
            "cauchy" => GammaDistribution::Cauchy,
            "uniform" => GammaDistribution::Uniform,
            "binary(0.01)" => GammaDistribution::Binary(0.01),
            "binary(0.1)" => GammaDistribution::Binary(0.1),
            "binary(0.5)" => GammaDistribution::Binary(0.5),
            other => {
                return Err(Error::Config(format!("unknown distribution '{other}'")))
            }
        })
    }

    fn sample(&self, rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        match self {
            GammaDistribution::WorstCase => unreachable!("analytic row"),
            GammaDistribution::Normal => {
                (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
            }
            GammaDistribution::Exponential => {
                let d = Exp::new(1.0).unwrap();
                (0..n).map(|_| -d.sample(rng)).collect()
            }
            GammaDistribution::FlippedExp => {
                let d = Exp::new(1.0).unwrap();
                (0..n).map(|_| d.sample(rng)).collect()
            }
            GammaDistribution::StudentT(df) => {
                let d = StudentT::new(*df).unwrap();
                (0..n).map(|_| d.sample(rng)).collect()
            }
            GammaDistribution::Cauchy => {
                let d = Cauchy::new(0.0, 1.0).unwrap();
                (0..n).map(|_| d.sample(rng)).collect()
            }
            GammaDistribution::Uniform => {
                let d = Uniform::new(-1.0, 1.0);
                (0..n).map(|_| d.sample(rng)).collect()
            }
            GammaDistribution::Binary(p) => {
                let d = Bernoulli::new(*p).unwrap();
                (0..n)
                    .map(|_| if d.sample(rng) { 1.0 } else { 0.0 })
                    .collect()
            }
        }
    }
}

/// The 12 rows of the default table.
pub fn default_distributions() -> Vec<(String, GammaDistribution)> {
    vec![
        ("Worst case".into(), GammaDistribution::WorstCase),
        ("Normal".into(), GammaDistribution::Normal),
        ("Exponential".into(), GammaDistribution::Exponential),
        ("Flipped exp".into(), GammaDistribution::FlippedExp),
        ("T(10)".into(), GammaDistribution::StudentT(10.0)),
        ("T(3)".into(), GammaDistribution::StudentT(3.0)),
        ("T(2)".into(), GammaDistribution::StudentT(2.0)),
        ("Cauchy".into(), GammaDistribution::Cauchy),
        ("Uniform".into(), GammaDistribution::Uniform),
        ("Binary(0.01)".into(), GammaDistribution::Binary(0.01)),
        ("Binary(0.1)".into(), GammaDistribution::Binary(0.1)),
        ("Binary(0.5)".into(), GammaDistribution::Binary(0.5)),
    ]
}

#[derive(Debug, Clone)]
pub struct GammaRow {
    pub name: String,
    pub gamma_alpha: f64,
    pub analytic: bool,
}

/// Standardizes `values` to sample mean 0 / variance 1 and returns
/// Gamma_alpha over the floor(alpha * n) most negative entries.
pub fn gamma_from_draws(values: &mut [f64], alpha: f64) -> f64 {
    let n = values.len();
    let nf = n as f64;
    let mean = values.iter().sum::<f64>() / nf;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
    let sd = var.sqrt();
    let m = (alpha * nf).floor() as usize;
    if sd == 0.0 || m == 0 {
        return 0.0;
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    -values[..m]
        .iter()
        .map(|v| (v - mean) / sd)
        .sum::<f64>()
        / nf
}

/// One Gamma_alpha per named distribution; the worst case is analytic, all
/// sampled rows standardize by sample moments (the only convention that
/// yields a finite value for Cauchy).
pub fn gamma_table(
    distributions: &[(String, GammaDistribution)],
    n: usize,
    alpha: f64,
    seed: u64,
) -> Vec<GammaRow> {
    pmap(distributions, |(name, dist)| {
        if *dist == GammaDistribution::WorstCase {
            return GammaRow {
                name: name.clone(),
                gamma_alpha: (alpha * (1.0 - alpha)).sqrt(),
                analytic: true,
            };
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            seed,
            0x6761_6d6d_61,
            name.bytes().fold(0u64, |a, b| a.wrapping_mul(31).wrapping_add(b as u64)),
        ));
        let mut draws = dist.sample(&mut rng, n);
        GammaRow {
            name: name.clone(),
            gamma_alpha: gamma_from_draws(&mut draws, alpha),
            analytic: false,
        }
    })
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let rx = ranks(xs);
    let ry = ranks(ys);
    pearson(&rx, &ry)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let n = v.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
    let mut out = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}
