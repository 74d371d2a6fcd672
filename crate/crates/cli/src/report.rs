//! Machine-readable report documents and their text tables.

use std::fmt::Write as _;

use anyhow::{bail, Result};
use mixsur::em::{Convergence, FitResult, StartFailure};
use mixsur::inference::{BestByCount, CoefficientInterval, CrossTab, SearchCell};
use mixsur::model::IdentifiabilityReport;
use mixsur::simboot::BootstrapSummary;
use mixsur::Theta;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub const BIC_CONVENTION: &str = "BIC = 2*loglik - npar*ln(I); larger is better";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaDoc {
    pub pi: Vec<f64>,
    pub beta: Vec<f64>,
    pub lambda: Vec<Vec<f64>>,
    /// Full row-major matrices.
    pub sigma: Vec<Vec<Vec<f64>>>,
}

impl ThetaDoc {
    pub fn from_theta(t: &Theta) -> Self {
        Self {
            pi: t.pi.iter().copied().collect(),
            beta: t.beta.iter().copied().collect(),
            lambda: t.lambda.iter().map(|l| l.iter().copied().collect()).collect(),
            sigma: t
                .sigma
                .iter()
                .map(|s| (0..s.nrows()).map(|r| s.row(r).iter().copied().collect()).collect())
                .collect(),
        }
    }

    pub fn to_theta(&self) -> Result<Theta> {
        let d = self.lambda.first().map_or(0, Vec::len);
        let mut sigma = Vec::with_capacity(self.sigma.len());
        for s in &self.sigma {
            if s.len() != d || s.iter().any(|r| r.len() != d) {
                bail!("every covariance must be {d}x{d}");
            }
            sigma.push(DMatrix::from_fn(d, d, |r, c| s[r][c]));
        }
        if self.lambda.iter().any(|l| l.len() != d) {
            bail!("every intercept vector must have length {d}");
        }
        Ok(Theta::new(
            DVector::from_column_slice(&self.pi),
            DVector::from_column_slice(&self.beta),
            self.lambda.iter().map(|l| DVector::from_column_slice(l)).collect(),
            sigma,
        )?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoefficientDoc {
    pub name: String,
    pub response: String,
    pub regressor: String,
    pub estimate: f64,
    pub se: f64,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub k: usize,
    pub p: usize,
    pub loglik: Option<f64>,
    pub npar: usize,
    pub bic: Option<f64>,
    pub status: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ModelDoc {
    pub k: usize,
    pub n_obs: usize,
    pub responses: Vec<String>,
    pub regressors: Vec<Vec<String>>,
    pub loglik: f64,
    pub npar: usize,
    pub bic: f64,
    pub convergence: Convergence,
    pub iterations: usize,
    pub start_index: usize,
    pub start_failures: Vec<StartFailure>,
    pub warnings: Vec<String>,
    pub identifiability: IdentifiabilityReport,
    pub theta: ThetaDoc,
    pub level: f64,
    pub coefficients: Option<Vec<CoefficientDoc>>,
    pub inference_error: Option<String>,
    pub labels: Vec<usize>,
    pub crosstab: Option<CrossTab>,
    pub trace: Vec<f64>,
}

pub fn coefficient_name(response: &str, regressor: &str) -> String {
    format!("{response}~{regressor}")
}

/// Coefficient names in β order.
pub fn coefficient_names(responses: &[String], regressors: &[Vec<String>]) -> Vec<(String, String)> {
    responses
        .iter()
        .zip(regressors)
        .flat_map(|(r, regs)| regs.iter().map(move |x| (r.clone(), x.clone())))
        .collect()
}

pub struct ModelInputs<'a> {
    pub responses: &'a [String],
    pub regressors: &'a [Vec<String>],
    pub fit: &'a FitResult,
    pub identifiability: IdentifiabilityReport,
    pub intervals: std::result::Result<Vec<CoefficientInterval>, String>,
    pub labels: Vec<usize>,
    pub crosstab: Option<CrossTab>,
    pub level: f64,
}

impl ModelDoc {
    pub fn new(m: ModelInputs<'_>) -> Self {
        let names = coefficient_names(m.responses, m.regressors);
        let (coefficients, inference_error) = match m.intervals {
            Ok(ivs) => (
                Some(
                    ivs.iter()
                        .zip(&names)
                        .map(|(iv, (r, x))| CoefficientDoc {
                            name: coefficient_name(r, x),
                            response: r.clone(),
                            regressor: x.clone(),
                            estimate: iv.estimate.point,
                            se: iv.estimate.se,
                            lo: iv.estimate.lo,
                            hi: iv.estimate.hi,
                        })
                        .collect(),
                ),
                None,
            ),
            Err(e) => (None, Some(e)),
        };
        let f = m.fit;
        Self {
            k: f.theta.n_components(),
            n_obs: f.n_obs,
            responses: m.responses.to_vec(),
            regressors: m.regressors.to_vec(),
            loglik: f.loglik,
            npar: f.npar,
            bic: f.bic,
            convergence: f.convergence,
            iterations: f.iterations,
            start_index: f.start_index,
            start_failures: f.start_failures.clone(),
            warnings: f.warnings.clone(),
            identifiability: m.identifiability,
            theta: ThetaDoc::from_theta(&f.theta),
            level: m.level,
            coefficients,
            inference_error,
            labels: m.labels,
            crosstab: m.crosstab,
            trace: f.trace.clone(),
        }
    }
}

fn row(out: &mut String, cells: &[String], widths: &[usize]) {
    let line: Vec<String> = cells
        .iter()
        .zip(widths)
        .enumerate()
        .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
        .collect();
    let _ = writeln!(out, "{}", line.join("  ").trim_end());
}

fn table(out: &mut String, header: &[String], rows: &[Vec<String>]) {
    let n = header.len();
    let widths: Vec<usize> = (0..n)
        .map(|j| {
            rows.iter()
                .map(|r| r.get(j).map_or(0, |c| c.chars().count()))
                .chain(std::iter::once(header[j].chars().count()))
                .max()
                .unwrap_or(0)
        })
        .collect();
    row(out, header, &widths);
    let _ = writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (n.saturating_sub(1))));
    for r in rows {
        row(out, r, &widths);
    }
}

fn s(v: &str) -> String {
    v.to_string()
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.digits$}"))
}

pub fn comparison_text(rows: &[ComparisonRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Model comparison ({BIC_CONVENTION})");
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.k.to_string(),
                r.p.to_string(),
                opt(r.loglik, 3),
                r.npar.to_string(),
                opt(r.bic, 2),
                r.status.clone(),
            ]
        })
        .collect();
    table(&mut out, &[s("K"), s("P"), s("loglik"), s("npar"), s("BIC"), s("status")], &body);
    out
}

pub fn model_text(m: &ModelDoc) -> String {
    let mut out = String::new();
    let d = m.responses.len();
    let _ = writeln!(
        out,
        "K = {}, I = {}, loglik = {:.3}, npar = {}, BIC = {:.2}, stopped by {:?} after {} iterations (start {})",
        m.k, m.n_obs, m.loglik, m.npar, m.bic, m.convergence, m.iterations, m.start_index
    );
    for w in &m.warnings {
        let _ = writeln!(out, "warning: {w}");
    }
    for v in &m.identifiability.violations {
        let _ = writeln!(
            out,
            "warning: equation {} ({}) regressors have rank {} < {}",
            v.equation + 1,
            m.responses[v.equation],
            v.rank,
            v.required
        );
    }
    for f in &m.start_failures {
        let _ = writeln!(out, "start {} failed: {}", f.start, f.reason);
    }
    let _ = writeln!(out);
    let pis: Vec<String> = m.theta.pi.iter().map(|p| format!("{p:.3}")).collect();
    let _ = writeln!(out, "Mixture weights: {}", pis.join(", "));
    let _ = writeln!(out);

    let _ = writeln!(out, "Intercepts and covariances (correlations below the diagonal)");
    let mut header = vec![String::new()];
    header.extend(m.responses.iter().cloned());
    let mut body = Vec::new();
    for (k, l) in m.theta.lambda.iter().enumerate() {
        let mut r = vec![format!("lambda_{}", k + 1)];
        r.extend(l.iter().map(|v| format!("{v:.2}")));
        body.push(r);
    }
    for (k, sig) in m.theta.sigma.iter().enumerate() {
        for i in 0..d {
            let mut r = vec![if i == 0 { format!("Sigma_{}", k + 1) } else { String::new() }];
            for j in 0..d {
                r.push(if j >= i {
                    format!("{:.2}", sig[i][j])
                } else {
                    format!("({:.3})", sig[i][j] / (sig[i][i] * sig[j][j]).sqrt())
                });
            }
            body.push(r);
        }
    }
    table(&mut out, &header, &body);
    let _ = writeln!(out);

    match (&m.coefficients, &m.inference_error) {
        (Some(coefs), _) if !coefs.is_empty() => {
            let _ = writeln!(
                out,
                "Regression coefficients (r.c.), standard errors (s.e.) and {:.0}% intervals (c.i.)",
                m.level * 100.0
            );
            out.push_str(&coefficient_grid(m, |c| {
                [
                    format!("{:.3}", c.estimate),
                    format!("{:.3}", c.se),
                    format!("({:.3}, {:.3})", c.lo, c.hi),
                ]
            }, ["r.c.", "s.e.", "c.i."]));
        }
        (Some(_), _) => {
            let _ = writeln!(out, "No regression coefficients in this model.");
        }
        (None, Some(e)) => {
            let _ = writeln!(out, "Standard errors unavailable: {e}");
        }
        (None, None) => {}
    }
    if let Some(ct) = &m.crosstab {
        let _ = writeln!(out);
        out.push_str(&crosstab_text(ct));
    }
    out
}

/// Dependent-variable blocks with one column per regressor, three rows each.
fn coefficient_grid(m: &ModelDoc, cells: impl Fn(&CoefficientDoc) -> [String; 3], labels: [&str; 3]) -> String {
    let coefs = m.coefficients.as_deref().unwrap_or(&[]);
    let mut columns: Vec<String> = Vec::new();
    for regs in &m.regressors {
        for x in regs {
            if !columns.contains(x) {
                columns.push(x.clone());
            }
        }
    }
    let mut header = vec![s("Dependent variable"), String::new()];
    header.extend(columns.iter().cloned());
    let mut body = Vec::new();
    for resp in &m.responses {
        let mine: Vec<&CoefficientDoc> = coefs.iter().filter(|c| &c.response == resp).collect();
        if mine.is_empty() {
            continue;
        }
        for (li, label) in labels.iter().enumerate() {
            let mut r = vec![if li == 0 { resp.clone() } else { String::new() }, s(label)];
            for col in &columns {
                r.push(
                    mine.iter()
                        .find(|c| &c.regressor == col)
                        .map_or_else(|| s("-"), |c| cells(c)[li].clone()),
                );
            }
            body.push(r);
        }
    }
    let mut out = String::new();
    table(&mut out, &header, &body);
    out
}

pub fn crosstab_text(ct: &CrossTab) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Joint classification (cluster by factor)");
    let mut header = vec![s("Cluster")];
    header.extend(ct.col_levels.iter().cloned());
    header.push(s("total"));
    let mut body = Vec::new();
    let mut col_totals = vec![0u64; ct.col_levels.len()];
    for (label, counts) in ct.row_levels.iter().zip(&ct.counts) {
        let mut r = vec![label.to_string()];
        r.extend(counts.iter().map(u64::to_string));
        r.push(counts.iter().sum::<u64>().to_string());
        for (t, c) in col_totals.iter_mut().zip(counts) {
            *t += c;
        }
        body.push(r);
    }
    let mut total = vec![s("total")];
    total.extend(col_totals.iter().map(u64::to_string));
    total.push(col_totals.iter().sum::<u64>().to_string());
    body.push(total);
    table(&mut out, &header, &body);
    let _ = writeln!(
        out,
        "Pearson chi-square = {:.2}, df = {}, p-value = {:.3e}",
        ct.test.chi2, ct.test.df, ct.test.p_value
    );
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct GridRow {
    pub k: usize,
    pub p: usize,
    pub regressor_mask: String,
    pub loglik: Option<f64>,
    pub npar: usize,
    pub bic: Option<f64>,
    pub status: String,
}

impl GridRow {
    pub fn from_cell(c: &SearchCell, npar: usize) -> Self {
        use mixsur::inference::CellStatus;
        let (loglik, bic, status) = match &c.status {
            CellStatus::Fitted { loglik, bic, convergence, .. } => {
                (Some(*loglik), Some(*bic), format!("{convergence:?}").to_lowercase())
            }
            CellStatus::Failed(reason) => (None, None, format!("failed: {reason}")),
        };
        Self {
            k: c.n_components,
            p: c.n_coefficients,
            regressor_mask: c.mask.clone(),
            loglik,
            npar,
            bic,
            status,
        }
    }
}

pub fn best_by_count_text(rows: &[BestByCount]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Best BIC by number of components and regressors");
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.n_components.to_string(),
                r.n_coefficients.to_string(),
                r.mask.clone(),
                format!("{:.3}", r.loglik),
                r.npar.to_string(),
                format!("{:.2}", r.bic),
            ]
        })
        .collect();
    table(&mut out, &[s("K"), s("P"), s("mask"), s("loglik"), s("npar"), s("BIC")], &body);
    out
}

pub fn bootstrap_text(summary: &BootstrapSummary, m: &ModelDoc) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "Parametric bootstrap: {} of {} replicates succeeded",
        summary.succeeded, summary.requested
    );
    let _ = writeln!(
        out,
        "Means, standard deviations (s.d.) and {:.0}% percentile intervals (c.i.)",
        summary.level * 100.0
    );
    let mut boot = m.clone();
    if let Some(coefs) = boot.coefficients.as_mut() {
        for (c, b) in coefs.iter_mut().zip(&summary.coefficients) {
            c.estimate = b.mean;
            c.se = b.sd;
            c.lo = b.lo;
            c.hi = b.hi;
        }
    }
    out.push_str(&coefficient_grid(&boot, |c| {
        [
            format!("{:.3}", c.estimate),
            format!("{:.3}", c.se),
            format!("({:.3}, {:.3})", c.lo, c.hi),
        ]
    }, ["means", "s.d.", "c.i."]));
    let _ = writeln!(out);
    let names = coefficient_names(&m.responses, &m.regressors);
    let body: Vec<Vec<String>> = names
        .iter()
        .zip(&summary.coefficients)
        .map(|((r, x), c)| {
            vec![
                coefficient_name(r, x),
                format!("{:.4}", c.point),
                format!("{:.4}", c.bias),
                format!("{:.3}", c.bias_ratio),
            ]
        })
        .collect();
    table(&mut out, &[s("coefficient"), s("estimate"), s("bias"), s("|bias|/s.d.")], &body);
    out
}
