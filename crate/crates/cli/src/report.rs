//! Serializable report structures and their table/CSV rendering.
//!
//! The JSON report is the single source of truth; the human-readable table
//! prints the same numbers rounded to six significant digits.

use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub n: usize,
    pub p: usize,
    pub target: String,
    pub target_index: usize,
    pub regressors: Vec<String>,
    pub estimates: Vec<f64>,
    pub standard_errors: Vec<f64>,
    pub dropped_rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefitBlock {
    pub estimate: f64,
    pub se: f64,
    pub change: f64,
    pub achieved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetBlock {
    pub qoi: String,
    pub delta: f64,
    pub amip: f64,
    pub n_removed: Option<usize>,
    pub alpha_star: Option<f64>,
    pub refit: Option<RefitBlock>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionBlock {
    pub sigma_psi: f64,
    pub gamma_alpha: Option<f64>,
    pub gamma_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateBlock {
    pub alpha: f64,
    pub c_op: f64,
    pub xi1: f64,
    pub xi2: f64,
    pub c_ball: f64,
    pub c_ball_alt: Option<f64>,
    pub condition_value: f64,
    pub valid: bool,
    pub reason: Option<String>,
    pub bound_lin: Option<f64>,
    pub bound_diff: Option<f64>,
    pub qoi_bound_lin: Option<f64>,
    pub qoi_bound_diff: Option<f64>,
    /// Measured |theta_hat(w) - theta_lin(w)| on the target coordinate,
    /// available when the refit was run.
    pub actual_lin_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluentialRow {
    /// Original CSV data-row index (0-based, after the header).
    pub row: usize,
    pub psi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub schema_version: u32,
    pub alpha: f64,
    pub model: ModelSummary,
    pub targets: Vec<TargetBlock>,
    pub decomposition: DecompositionBlock,
    pub certificate: Option<CertificateBlock>,
    pub top_influential: Vec<InfluentialRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerunRow {
    pub alpha: f64,
    pub n_removed: usize,
    pub predicted: f64,
    pub actual: Option<f64>,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerunReport {
    pub schema_version: u32,
    pub qoi: String,
    pub rows: Vec<RerunRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateReport {
    pub schema_version: u32,
    pub theta_hat: f64,
    pub se: f64,
    pub sign_apip: Option<f64>,
    pub path: Vec<RerunRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaTableReport {
    pub schema_version: u32,
    pub n: usize,
    pub alpha: f64,
    pub standardization: String,
    pub rows: Vec<GammaTableRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaTableRow {
    pub distribution: String,
    pub gamma_alpha: f64,
    pub analytic: bool,
}

/// Six significant digits for table output.
pub fn sig6(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let mag = v.abs().log10().floor() as i32;
    let decimals = (5 - mag).max(0) as usize;
    format!("{v:.decimals$}")
}

pub fn opt_sig6(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), sig6)
}

impl AnalysisReport {
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let m = &self.model;
        out.push_str(&format!(
            "Model: N = {}, P = {}, target = {} (index {})\n",
            m.n, m.p, m.target, m.target_index
        ));
        if m.dropped_rows > 0 {
            out.push_str(&format!("  dropped rows: {}\n", m.dropped_rows));
        }
        out.push_str("  coefficient        estimate      std.err\n");
        for (i, name) in m.regressors.iter().enumerate() {
            out.push_str(&format!(
                "  {:<16} {:>12} {:>12}\n",
                name,
                sig6(m.estimates[i]),
                sig6(m.standard_errors[i])
            ));
        }
        out.push_str(&format!(
            "\nNoise sigma_psi = {}, Gamma_alpha = {} (bound {})\n",
            sig6(self.decomposition.sigma_psi),
            opt_sig6(self.decomposition.gamma_alpha),
            sig6(self.decomposition.gamma_bound)
        ));
        out.push_str(&format!("\nTargets (alpha = {}):\n", sig6(self.alpha)));
        out.push_str("  qoi        delta      amip     n_removed  alpha_star  refit_change  achieved\n");
        for t in &self.targets {
            let (change, achieved) = match &t.refit {
                Some(r) => (sig6(r.change), if r.achieved { "yes" } else { "no" }.into()),
                None => ("-".into(), String::from("-")),
            };
            out.push_str(&format!(
                "  {:<9} {:>9} {:>9} {:>10} {:>11} {:>13} {:>9}\n",
                t.qoi,
                sig6(t.delta),
                sig6(t.amip),
                t.n_removed.map_or("NA".into(), |v| v.to_string()),
                opt_sig6(t.alpha_star),
                change,
                achieved
            ));
        }
        if let Some(c) = &self.certificate {
            out.push_str(&format!(
                "\nCertificate: valid = {}, condition = {}, C_op = {}, xi1 = {}, xi2 = {}, C_ball = {}\n",
                c.valid,
                sig6(c.condition_value),
                sig6(c.c_op),
                sig6(c.xi1),
                sig6(c.xi2),
                sig6(c.c_ball)
            ));
            out.push_str(&format!(
                "  bound_lin = {}, bound_diff = {}, actual_lin_error = {}\n",
                opt_sig6(c.bound_lin),
                opt_sig6(c.bound_diff),
                opt_sig6(c.actual_lin_error)
            ));
            if let Some(reason) = &c.reason {
                out.push_str(&format!("  reason: {reason}\n"));
            }
        }
        if !self.top_influential.is_empty() {
            out.push_str("\nMost influential rows:\n  row        psi\n");
            for r in &self.top_influential {
                out.push_str(&format!("  {:<8} {:>12}\n", r.row, sig6(r.psi)));
            }
        }
        out
    }
}

pub fn render_rerun_table(report: &RerunReport) -> String {
    let mut out = format!("Rerun check for qoi = {}\n", report.qoi);
    out.push_str("  alpha     n_removed  predicted     actual      flagged\n");
    for r in &report.rows {
        out.push_str(&format!(
            "  {:<9} {:>9} {:>10} {:>10} {:>9}\n",
            sig6(r.alpha),
            r.n_removed,
            sig6(r.predicted),
            opt_sig6(r.actual),
            if r.flagged { "yes" } else { "" }
        ));
    }
    out
}

pub fn render_gamma_table(report: &GammaTableReport) -> String {
    let mut out = format!(
        "Gamma_alpha with alpha = {}, n = {} ({})\n",
        sig6(report.alpha),
        report.n,
        report.standardization
    );
    out.push_str("  distribution     gamma_alpha\n");
    for r in &report.rows {
        out.push_str(&format!(
            "  {:<16} {:>11}{}\n",
            r.distribution,
            sig6(r.gamma_alpha),
            if r.analytic { "  (analytic)" } else { "" }
        ));
    }
    out
}
