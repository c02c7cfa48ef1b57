//! `amip`: drop-a-few-observations sensitivity analysis from the command
//! line.

mod report;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;

use amip_core::certify::certify_qoi;
use amip_core::data::{
    build_problem, load_csv, ColumnKind, ColumnSchema, MissingPolicy, ModelSpec,
    RegressionProblem,
};
use amip_core::influence::{
    dtheta_dw, influence_scores, make_qoi, InfluenceVector, QoiKind, QuantityOfInterest,
};
use amip_core::metrics::{amis, apip, decompose, refit_lower_bound};
use amip_core::sandwich::{
    noise_sigma, sandwich_covariance, ClusterMode, SandwichOptions, SeCompat,
};
use amip_core::simlab::{
    default_distributions, gamma_table, run_single_sim, SimConfig,
};
use amip_core::solve::{fit, FitResult, WeightVector};
use amip_core::Error as CoreError;

use report::*;

#[derive(Parser)]
#[command(name = "amip", version, about = "Sensitivity of estimates to dropping a small fraction of the data")]
struct Cli {
    /// Emit errors as machine-readable JSON on stdout.
    #[arg(long, global = true)]
    error_json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit, score influence, and report AMIP/APIP for the reversal targets.
    Analyze(AnalyzeArgs),
    /// Compare predicted vs exact refit changes across an alpha grid.
    RerunCheck(RerunArgs),
    /// Emit a finite-sample error certificate for the AMIS drop set.
    Certify(CertifyArgs),
    /// Run the y = beta x + eps robustness simulation.
    Simulate(SimulateArgs),
    /// Tabulate Gamma_alpha across reference distributions.
    GammaTable(GammaArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum QoiArg {
    Sign,
    Sig,
    Both,
    Param,
}

impl QoiArg {
    fn kind(self) -> QoiKind {
        match self {
            QoiArg::Sign => QoiKind::SignChange,
            QoiArg::Sig => QoiKind::SignificanceChange,
            QoiArg::Both => QoiKind::SignAndSignificance,
            QoiArg::Param => QoiKind::Parameter,
        }
    }

    fn name(self) -> &'static str {
        match self {
            QoiArg::Sign => "sign",
            QoiArg::Sig => "sig",
            QoiArg::Both => "both",
            QoiArg::Param => "param",
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SeArg {
    Native,
    LmCompat,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OutFormat {
    Json,
    Csv,
    Table,
}

/// Model/data flags shared by the dataset-driven subcommands. Every flag can
/// also be supplied through --config (a JSON file with the same names in
/// snake_case); explicit flags win.
#[derive(Args, Clone, Default)]
struct ModelArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// CSV input with a header row.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    outcome: Option<String>,
    /// Regressor whose conclusion is under scrutiny.
    #[arg(long)]
    target: Option<String>,
    /// Additional regressors (comma-separated).
    #[arg(long, value_delimiter = ',')]
    controls: Vec<String>,
    /// Instrument columns for just-identified IV (comma-separated).
    #[arg(long, value_delimiter = ',')]
    instruments: Vec<String>,
    #[arg(long)]
    intercept: bool,
    #[arg(long)]
    weights_col: Option<String>,
    #[arg(long)]
    cluster_col: Option<String>,
    /// Columns to expand into dummy indicators (comma-separated).
    #[arg(long, value_delimiter = ',')]
    categorical: Vec<String>,
    /// Drop rows with unparseable or non-finite cells instead of failing.
    #[arg(long)]
    drop_missing: bool,
    #[arg(long, value_enum)]
    se: Option<SeArg>,
}

#[derive(serde::Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    data: Option<PathBuf>,
    outcome: Option<String>,
    target: Option<String>,
    #[serde(default)]
    controls: Vec<String>,
    #[serde(default)]
    instruments: Vec<String>,
    intercept: Option<bool>,
    weights_col: Option<String>,
    cluster_col: Option<String>,
    #[serde(default)]
    categorical: Vec<String>,
    drop_missing: Option<bool>,
    se: Option<String>,
    alpha: Option<f64>,
    delta: Option<f64>,
    qoi: Option<String>,
    level: Option<f64>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Drop budget as a proportion of the sample.
    #[arg(long)]
    alpha: Option<f64>,
    /// Override the change size Delta (defaults to the QOI's own).
    #[arg(long)]
    delta: Option<f64>,
    /// Restrict to one quantity of interest (default: sign, sig, and both).
    #[arg(long, value_enum)]
    qoi: Option<QoiArg>,
    /// Critical value for significance targets.
    #[arg(long, default_value_t = 1.96)]
    level: f64,
    /// Verify the prediction with an exact refit.
    #[arg(long)]
    rerun: bool,
    /// Attach a finite-sample error certificate.
    #[arg(long)]
    certify: bool,
    /// How many influential rows to list.
    #[arg(long, default_value_t = 10)]
    top_k: usize,
    #[arg(long, value_enum, default_value_t = OutFormat::Table)]
    out: OutFormat,
    /// Write to this file (atomically) instead of stdout.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct RerunArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_enum, default_value_t = QoiArg::Sign)]
    qoi: QoiArg,
    #[arg(long, default_value_t = 1.96)]
    level: f64,
    /// Alpha grid (comma-separated).
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.002, 0.005, 0.01, 0.02, 0.05])]
    alphas: Vec<f64>,
    #[arg(long, value_enum, default_value_t = OutFormat::Table)]
    out: OutFormat,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct CertifyArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, value_enum, default_value_t = QoiArg::Param)]
    qoi: QoiArg,
    #[arg(long, default_value_t = 1.96)]
    level: f64,
    /// Exit nonzero when the certificate is refused.
    #[arg(long)]
    strict: bool,
    #[arg(long, value_enum, default_value_t = OutFormat::Json)]
    out: OutFormat,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    #[arg(long, default_value_t = 12.3)]
    sigma_x: f64,
    #[arg(long, default_value_t = 1.2)]
    sigma_eps: f64,
    #[arg(long, default_value_t = -1.0)]
    beta: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.01)]
    alpha: f64,
    /// Alpha grid for the removal path.
    #[arg(long, value_delimiter = ',', default_values_t = [0.001, 0.002, 0.005, 0.01, 0.02, 0.05])]
    alphas: Vec<f64>,
    #[arg(long, value_enum, default_value_t = OutFormat::Csv)]
    out: OutFormat,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct GammaArgs {
    #[arg(long, default_value_t = 1_000_000)]
    n: usize,
    #[arg(long, default_value_t = 0.01)]
    alpha: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = OutFormat::Table)]
    out: OutFormat,
    #[arg(long)]
    output: Option<PathBuf>,
}

fn main() -> ExitCode {
    // AMIP_THREADS caps internal parallelism; rayon reads its own variable
    // when the global pool is first touched.
    if let Ok(t) = std::env::var("AMIP_THREADS") {
        std::env::set_var("RAYON_NUM_THREADS", t);
    }
    let cli = Cli::parse();
    let error_json = cli.error_json;
    let result = match cli.command {
        Command::Analyze(args) => cmd_analyze(args),
        Command::RerunCheck(args) => cmd_rerun_check(args),
        Command::Certify(args) => cmd_certify(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::GammaTable(args) => cmd_gamma_table(args),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            let code = exit_code_for(&err);
            if error_json {
                println!(
                    "{}",
                    serde_json::json!({ "error": err.to_string(), "exit_code": code })
                );
            } else {
                eprintln!("error: {err}");
            }
            ExitCode::from(code)
        }
    }
}

/// 2 = usage/schema problems, 1 = runtime/numerical failures.
fn exit_code_for(err: &CoreError) -> u8 {
    match err {
        CoreError::MissingColumn(_)
        | CoreError::Parse { .. }
        | CoreError::Config(_)
        | CoreError::TargetOutOfBounds { .. } => 2,
        _ => 1,
    }
}

struct LoadedModel {
    problem: RegressionProblem,
    fit: FitResult,
    target_index: usize,
    target_name: String,
    se_options: SandwichOptions,
    dropped_rows: usize,
}

fn merged_model(mut args: ModelArgs) -> Result<(ModelArgs, FileConfig), CoreError> {
    let mut file = FileConfig::default();
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).map_err(|source| CoreError::Io {
            path: path.display().to_string(),
            source,
        })?;
        file = serde_json::from_str(&text)
            .map_err(|e| CoreError::Config(format!("bad config file: {e}")))?;
    }
    args.data = args.data.or(file.data.clone());
    args.outcome = args.outcome.clone().or(file.outcome.clone());
    args.target = args.target.clone().or(file.target.clone());
    if args.controls.is_empty() {
        args.controls = file.controls.clone();
    }
    if args.instruments.is_empty() {
        args.instruments = file.instruments.clone();
    }
    if args.categorical.is_empty() {
        args.categorical = file.categorical.clone();
    }
    args.intercept |= file.intercept.unwrap_or(false);
    args.drop_missing |= file.drop_missing.unwrap_or(false);
    args.weights_col = args.weights_col.clone().or(file.weights_col.clone());
    args.cluster_col = args.cluster_col.clone().or(file.cluster_col.clone());
    if args.se.is_none() {
        args.se = match file.se.as_deref() {
            Some("native") => Some(SeArg::Native),
            Some("lm-compat") => Some(SeArg::LmCompat),
            Some(other) => {
                return Err(CoreError::Config(format!("unknown se preset {other:?}")))
            }
            None => None,
        };
    }
    Ok((args, file))
}

fn load_model(args: &ModelArgs) -> Result<LoadedModel, CoreError> {
    let data = args
        .data
        .as_ref()
        .ok_or_else(|| CoreError::Config("--data is required".into()))?;
    let outcome = args
        .outcome
        .as_ref()
        .ok_or_else(|| CoreError::Config("--outcome is required".into()))?;
    let target = args
        .target
        .as_ref()
        .ok_or_else(|| CoreError::Config("--target is required".into()))?;

    let mut schema = ColumnSchema::numeric(&[]);
    schema.push(outcome, ColumnKind::Numeric);
    let target_kind = if args.categorical.contains(target) {
        ColumnKind::Categorical
    } else {
        ColumnKind::Numeric
    };
    schema.push(target, target_kind);
    for c in &args.controls {
        let kind = if args.categorical.contains(c) {
            ColumnKind::Categorical
        } else {
            ColumnKind::Numeric
        };
        schema.push(c, kind);
    }
    for z in &args.instruments {
        schema.push(z, ColumnKind::Numeric);
    }
    if let Some(w) = &args.weights_col {
        schema.push(w, ColumnKind::Numeric);
    }
    if let Some(cl) = &args.cluster_col {
        schema.push(cl, ColumnKind::Categorical);
    }
    if args.drop_missing {
        schema = schema.with_missing(MissingPolicy::DropRows);
    }
    let (dataset, load_report) = load_csv(data, &schema)?;

    let mut regressors = vec![target.clone()];
    regressors.extend(args.controls.iter().cloned());
    let spec = ModelSpec {
        outcome: outcome.clone(),
        regressors,
        instruments: args.instruments.clone(),
        intercept: args.intercept,
        weights: args.weights_col.clone(),
        clusters: args.cluster_col.clone(),
    };
    let problem = build_problem(&dataset, &spec)?;
    let target_index = problem
        .regressor_names
        .iter()
        .position(|n| n == target)
        .ok_or_else(|| CoreError::MissingColumn(target.clone()))?;
    let fit = fit(&problem, &WeightVector::ones(problem.n()))?;
    let se_options = SandwichOptions {
        cluster_mode: if args.cluster_col.is_some() {
            ClusterMode::ByLabel
        } else {
            ClusterMode::None
        },
        se_compat: match args.se.unwrap_or(SeArg::Native) {
            SeArg::Native => SeCompat::Native,
            SeArg::LmCompat => SeCompat::LmCompatible,
        },
        ..Default::default()
    };
    Ok(LoadedModel {
        problem,
        fit,
        target_index,
        target_name: target.clone(),
        se_options,
        dropped_rows: load_report.dropped_rows,
    })
}

fn model_summary(m: &LoadedModel) -> Result<ModelSummary, CoreError> {
    let ones = WeightVector::ones(m.problem.n());
    let cov = sandwich_covariance(&m.fit, &m.problem, &ones, &m.se_options)?;
    Ok(ModelSummary {
        n: m.problem.n(),
        p: m.problem.p(),
        target: m.target_name.clone(),
        target_index: m.target_index,
        regressors: m.problem.regressor_names.clone(),
        estimates: m.fit.theta.iter().copied().collect(),
        standard_errors: cov.standard_errors.iter().copied().collect(),
        dropped_rows: m.dropped_rows,
    })
}

fn target_block(
    m: &LoadedModel,
    qoi: &QuantityOfInterest,
    name: &str,
    inf: &InfluenceVector,
    alpha: f64,
    delta_override: Option<f64>,
    rerun: bool,
) -> Result<TargetBlock, CoreError> {
    let delta = delta_override.unwrap_or(qoi.delta);
    let selection = amis(inf, alpha)?;
    let ap = apip(inf, delta);
    let refit = if rerun {
        match refit_lower_bound(&m.problem, &m.fit, qoi, &selection) {
            Ok(check) => {
                let w = &selection.w_star;
                let cov = sandwich_covariance(&check.refit, &m.problem, w, &m.se_options)?;
                Some(RefitBlock {
                    estimate: check.refit.theta[m.target_index],
                    se: cov.standard_errors[m.target_index],
                    change: check.exact_change,
                    achieved: check.exact_change >= delta,
                })
            }
            // A subset too small or collinear to refit, or one whose refit
            // standard error collapses to zero, cannot be verified exactly.
            Err(CoreError::DegenerateSubset(_)) | Err(CoreError::DegenerateScale) => None,
            Err(e) => return Err(e),
        }
    } else {
        None
    };
    Ok(TargetBlock {
        qoi: name.to_string(),
        delta,
        amip: selection.amip,
        n_removed: ap.m_removed,
        alpha_star: ap.alpha_star,
        refit,
    })
}

fn certificate_block(
    m: &LoadedModel,
    qoi: &QuantityOfInterest,
    inf: &InfluenceVector,
    alpha: f64,
    with_actual: bool,
) -> Result<CertificateBlock, CoreError> {
    let selection = amis(inf, alpha)?;
    let cert = match certify_qoi(&m.problem, &m.fit, &selection.w_star, qoi, None) {
        Ok(c) => c,
        // Nonlinear QOI without Lipschitz data: fall back to the
        // parameter-level certificate.
        Err(CoreError::InsufficientSmoothness(_)) => {
            amip_core::certify::certify_theta(&m.problem, &m.fit, &selection.w_star)?
        }
        Err(e) => return Err(e),
    };
    let actual_lin_error = if with_actual && cert.valid {
        let refit = fit(&m.problem, &selection.w_star)?;
        let dtheta = dtheta_dw(&m.fit, &m.problem)?;
        let mut lin = DVector::zeros(m.problem.p());
        for &i in &selection.dropped_indices {
            lin -= dtheta.row(i).transpose();
        }
        Some((&refit.theta - &m.fit.theta - lin).norm())
    } else {
        None
    };
    let c = &cert.constants;
    Ok(CertificateBlock {
        alpha: c.alpha,
        c_op: c.c_op,
        xi1: c.xi1,
        xi2: c.xi2,
        c_ball: c.c_ball,
        c_ball_alt: cert.c_ball_alt,
        condition_value: c.condition_value,
        valid: cert.valid,
        reason: cert.reason.clone(),
        bound_lin: cert.bound_lin,
        bound_diff: cert.bound_diff,
        qoi_bound_lin: cert.qoi_bound_lin,
        qoi_bound_diff: cert.qoi_bound_diff,
        actual_lin_error,
    })
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<ExitCode, CoreError> {
    let (model_args, file) = merged_model(args.model.clone())?;
    let m = load_model(&model_args)?;
    let alpha = args.alpha.or(file.alpha).unwrap_or(0.01);
    let delta_override = args.delta.or(file.delta);
    let level = file.level.unwrap_or(args.level);
    let qoi_args: Vec<QoiArg> = match args.qoi {
        Some(q) => vec![q],
        None => match file.qoi.as_deref() {
            Some("sign") => vec![QoiArg::Sign],
            Some("sig") => vec![QoiArg::Sig],
            Some("both") => vec![QoiArg::Both],
            Some("param") => vec![QoiArg::Param],
            Some(other) => return Err(CoreError::Config(format!("unknown qoi {other:?}"))),
            None => vec![QoiArg::Sign, QoiArg::Sig, QoiArg::Both],
        },
    };

    let mut targets = Vec::new();
    let mut primary: Option<(QuantityOfInterest, InfluenceVector)> = None;
    for qa in &qoi_args {
        let qoi = make_qoi(qa.kind(), &m.fit, &m.problem, m.target_index, level, m.se_options)?;
        let inf = influence_scores(&m.fit, &m.problem, &qoi)?;
        targets.push(target_block(&m, &qoi, qa.name(), &inf, alpha, delta_override, args.rerun)?);
        if primary.is_none() {
            primary = Some((qoi, inf));
        }
    }
    let (primary_qoi, primary_inf) = primary.unwrap();

    let ones = WeightVector::ones(m.problem.n());
    let cov = sandwich_covariance(&m.fit, &m.problem, &ones, &m.se_options)?;
    let grad = primary_qoi.grad_theta(&m.fit, &m.problem, &ones)?;
    let sigma_psi = noise_sigma(&grad, &cov);
    let selection = amis(&primary_inf, alpha)?;
    let d = decompose(&primary_inf, &selection, sigma_psi);

    let certificate = if args.certify {
        Some(certificate_block(&m, &primary_qoi, &primary_inf, alpha, args.rerun)?)
    } else {
        None
    };

    let top_influential = primary_inf
        .sorted_order
        .iter()
        .take(args.top_k)
        .map(|&i| InfluentialRow {
            row: m.problem.source_rows[i],
            psi: primary_inf.psi[i],
        })
        .collect();

    let report = AnalysisReport {
        schema_version: SCHEMA_VERSION,
        alpha,
        model: model_summary(&m)?,
        targets,
        decomposition: DecompositionBlock {
            sigma_psi: d.sigma_psi,
            gamma_alpha: d.gamma_alpha,
            gamma_bound: d.gamma_bound,
        },
        certificate,
        top_influential,
    };

    let text = match args.out {
        OutFormat::Json => to_json(&report)?,
        OutFormat::Table => report.render_table(),
        OutFormat::Csv => {
            let mut s = String::from("qoi,delta,amip,n_removed,alpha_star,refit_change,achieved\n");
            for t in &report.targets {
                s.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    t.qoi,
                    t.delta,
                    t.amip,
                    t.n_removed.map_or("NA".into(), |v| v.to_string()),
                    t.alpha_star.map_or("NA".into(), |v| v.to_string()),
                    t.refit.as_ref().map_or("NA".into(), |r| r.change.to_string()),
                    t.refit.as_ref().map_or("NA".into(), |r| r.achieved.to_string()),
                ));
            }
            s
        }
    };
    emit(&text, args.output.as_deref())?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_rerun_check(args: RerunArgs) -> Result<ExitCode, CoreError> {
    let (model_args, file) = merged_model(args.model.clone())?;
    let m = load_model(&model_args)?;
    let level = file.level.unwrap_or(args.level);
    let qoi = make_qoi(args.qoi.kind(), &m.fit, &m.problem, m.target_index, level, m.se_options)?;
    let inf = influence_scores(&m.fit, &m.problem, &qoi)?;
    let mut rows = Vec::new();
    for &a in &args.alphas {
        if a == 0.0 {
            rows.push(RerunRow {
                alpha: 0.0,
                n_removed: 0,
                predicted: 0.0,
                actual: Some(0.0),
                flagged: false,
            });
            continue;
        }
        let selection = match amis(&inf, a) {
            Ok(s) => s,
            Err(CoreError::AlphaTooSmall { .. }) => continue,
            Err(e) => return Err(e),
        };
        match refit_lower_bound(&m.problem, &m.fit, &qoi, &selection) {
            Ok(check) => rows.push(RerunRow {
                alpha: a,
                n_removed: selection.dropped_indices.len(),
                predicted: selection.amip,
                actual: Some(check.exact_change),
                flagged: false,
            }),
            Err(CoreError::DegenerateSubset(_)) => rows.push(RerunRow {
                alpha: a,
                n_removed: selection.dropped_indices.len(),
                predicted: selection.amip,
                actual: None,
                flagged: true,
            }),
            Err(e) => return Err(e),
        }
    }
    let report = RerunReport {
        schema_version: SCHEMA_VERSION,
        qoi: args.qoi.name().to_string(),
        rows,
    };
    let text = match args.out {
        OutFormat::Json => to_json(&report)?,
        OutFormat::Table => render_rerun_table(&report),
        OutFormat::Csv => {
            let mut s = String::from("alpha,n_removed,predicted,actual,flagged\n");
            for r in &report.rows {
                s.push_str(&format!(
                    "{},{},{},{},{}\n",
                    r.alpha,
                    r.n_removed,
                    r.predicted,
                    r.actual.map_or("NA".into(), |v| v.to_string()),
                    r.flagged
                ));
            }
            s
        }
    };
    emit(&text, args.output.as_deref())?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_certify(args: CertifyArgs) -> Result<ExitCode, CoreError> {
    let (model_args, file) = merged_model(args.model.clone())?;
    let m = load_model(&model_args)?;
    let alpha = args.alpha.or(file.alpha).unwrap_or(0.01);
    let qoi = make_qoi(args.qoi.kind(), &m.fit, &m.problem, m.target_index, args.level, m.se_options)?;
    let inf = influence_scores(&m.fit, &m.problem, &qoi)?;
    let block = certificate_block(&m, &qoi, &inf, alpha, true)?;
    let refused = !block.valid;
    let text = match args.out {
        OutFormat::Json => to_json(&block)?,
        _ => format!(
            "valid = {}, condition = {}, C_op = {}, xi1 = {}, xi2 = {}, C_ball = {}\nbound_lin = {}, bound_diff = {}, actual_lin_error = {}\n",
            block.valid,
            sig6(block.condition_value),
            sig6(block.c_op),
            sig6(block.xi1),
            sig6(block.xi2),
            sig6(block.c_ball),
            opt_sig6(block.bound_lin),
            opt_sig6(block.bound_diff),
            opt_sig6(block.actual_lin_error),
        ),
    };
    emit(&text, args.output.as_deref())?;
    if refused && args.strict {
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_simulate(args: SimulateArgs) -> Result<ExitCode, CoreError> {
    let cfg = SimConfig {
        n: args.n,
        sigma_x: args.sigma_x,
        sigma_eps: args.sigma_eps,
        beta: args.beta,
        seed: args.seed,
        alpha: args.alpha,
    };
    // Skip grid points whose drop budget rounds to zero observations.
    let alphas: Vec<f64> = args
        .alphas
        .iter()
        .copied()
        .filter(|a| (a * args.n as f64).floor() >= 1.0)
        .collect();
    let r = run_single_sim(&cfg, &alphas)?;
    let report = SimulateReport {
        schema_version: SCHEMA_VERSION,
        theta_hat: r.theta_hat,
        se: r.se,
        sign_apip: r.sign_apip,
        path: r
            .removal_path
            .iter()
            .map(|p| RerunRow {
                alpha: p.alpha,
                n_removed: (p.alpha * args.n as f64).floor() as usize,
                predicted: p.amip,
                actual: Some(p.refit_change),
                flagged: false,
            })
            .collect(),
    };
    let text = match args.out {
        OutFormat::Json => to_json(&report)?,
        OutFormat::Table => {
            let mut s = format!(
                "theta_hat = {}, se = {}, sign APIP = {}\n",
                sig6(report.theta_hat),
                sig6(report.se),
                opt_sig6(report.sign_apip)
            );
            s.push_str("  alpha     amip       refit_change\n");
            for p in &report.path {
                s.push_str(&format!(
                    "  {:<9} {:>9} {:>13}\n",
                    sig6(p.alpha),
                    sig6(p.predicted),
                    opt_sig6(p.actual)
                ));
            }
            s
        }
        OutFormat::Csv => {
            let mut s = String::from("alpha,amip,refit_change\n");
            for p in &report.path {
                s.push_str(&format!(
                    "{},{},{}\n",
                    p.alpha,
                    p.predicted,
                    p.actual.map_or("NA".into(), |v| v.to_string())
                ));
            }
            s
        }
    };
    emit(&text, args.output.as_deref())?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_gamma_table(args: GammaArgs) -> Result<ExitCode, CoreError> {
    let rows = gamma_table(&default_distributions(), args.n, args.alpha, args.seed);
    let report = GammaTableReport {
        schema_version: SCHEMA_VERSION,
        n: args.n,
        alpha: args.alpha,
        standardization: "sample mean 0, sample variance 1".into(),
        rows: rows
            .into_iter()
            .map(|r| GammaTableRow {
                distribution: r.name,
                gamma_alpha: r.gamma_alpha,
                analytic: r.analytic,
            })
            .collect(),
    };
    let text = match args.out {
        OutFormat::Json => to_json(&report)?,
        OutFormat::Table => render_gamma_table(&report),
        OutFormat::Csv => {
            let mut s = String::from("distribution,gamma_alpha,analytic\n");
            for r in &report.rows {
                s.push_str(&format!("{},{},{}\n", r.distribution, r.gamma_alpha, r.analytic));
            }
            s
        }
    };
    emit(&text, args.output.as_deref())?;
    Ok(ExitCode::SUCCESS)
}

fn to_json<T: serde::Serialize>(value: &T) -> Result<String, CoreError> {
    serde_json::to_string_pretty(value)
        .map_err(|e| CoreError::Config(format!("serialization failed: {e}")))
}

/// Writes to stdout, or atomically (temp file + rename) to `path`.
fn emit(text: &str, path: Option<&Path>) -> Result<(), CoreError> {
    match path {
        None => {
            print!("{text}");
            Ok(())
        }
        Some(path) => {
            let dir = path.parent().filter(|d| !d.as_os_str().is_empty());
            let mut tmp = tempfile::NamedTempFile::new_in(dir.unwrap_or(Path::new(".")))
                .map_err(|source| CoreError::Io {
                    path: path.display().to_string(),
                    source,
                })?;
            tmp.write_all(text.as_bytes()).map_err(|source| CoreError::Io {
                path: path.display().to_string(),
                source,
            })?;
            tmp.persist(path).map_err(|e| CoreError::Io {
                path: path.display().to_string(),
                source: e.error,
            })?;
            Ok(())
        }
    }
}
