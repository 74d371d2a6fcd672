//! Weighted component densities, the mixture log-likelihood and posterior
//! responsibilities. All density work is done in log space through Cholesky
//! factors.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::linalg::{checked_cholesky, chol_log_det, log_sum_exp};
use crate::model::{Design, Theta};

/// Per-component factorizations of Σ_k.
#[derive(Debug, Clone)]
pub struct ComponentWorkspace {
    pub(crate) chol: Vec<Cholesky<f64, Dyn>>,
    pub(crate) log_det: Vec<f64>,
    pub(crate) precision: Vec<DMatrix<f64>>,
    pub(crate) log_weight: Vec<f64>,
}

impl ComponentWorkspace {
    pub fn new(theta: &Theta) -> Result<Self> {
        let k = theta.n_components();
        let mut chol = Vec::with_capacity(k);
        let mut log_det = Vec::with_capacity(k);
        let mut precision = Vec::with_capacity(k);
        let mut log_weight = Vec::with_capacity(k);
        for c in 0..k {
            let w = theta.pi[c];
            if !(w > 0.0) {
                return Err(Error::DegenerateWeight { component: c });
            }
            let f = checked_cholesky(&theta.sigma[c]).ok_or(Error::SingularCovariance { component: c })?;
            log_det.push(chol_log_det(&f));
            let inv = f.inverse();
            precision.push((&inv + inv.transpose()) * 0.5);
            chol.push(f);
            log_weight.push(w.ln());
        }
        Ok(Self {
            chol,
            log_det,
            precision,
            log_weight,
        })
    }

    /// Residual r_ki = y_i − λ_k − X_i'β.
    pub fn residual(theta: &Theta, design: &Design, i: usize, k: usize) -> DVector<f64> {
        design.y_row(i) - &theta.lambda[k] - design.linear_predictor(i, &theta.beta)
    }

    fn log_weighted_density(&self, k: usize, r: &DVector<f64>) -> f64 {
        let d = r.len() as f64;
        let z = self.chol[k].l_dirty().solve_lower_triangular(r).expect("triangular factor is nonsingular");
        self.log_weight[k] - 0.5 * d * (2.0 * PI).ln() - 0.5 * self.log_det[k] - 0.5 * z.norm_squared()
    }
}

fn check_shapes(theta: &Theta, design: &Design) -> Result<()> {
    if theta.n_components() != design.n_components()
        || theta.n_responses() != design.n_responses()
        || theta.beta.len() != design.n_coefficients()
    {
        return Err(Error::InvalidTheta("parameter shapes do not match the design".into()));
    }
    Ok(())
}

/// ln f_ki = ln π_k + ln φ_D(y_i; λ_k + X_i'β, Σ_k).
pub fn log_component_weight_density(theta: &Theta, design: &Design, i: usize, k: usize) -> Result<f64> {
    check_shapes(theta, design)?;
    if i >= design.n_obs() {
        return Err(Error::IndexOutOfRange {
            what: "observation",
            index: i,
            limit: design.n_obs(),
        });
    }
    if k >= design.n_components() {
        return Err(Error::IndexOutOfRange {
            what: "component",
            index: k,
            limit: design.n_components(),
        });
    }
    let ws = ComponentWorkspace::new(theta)?;
    Ok(ws.log_weighted_density(k, &ComponentWorkspace::residual(theta, design, i, k)))
}

/// `I × K` matrix of ln f_ki.
pub fn log_densities(theta: &Theta, design: &Design) -> Result<DMatrix<f64>> {
    check_shapes(theta, design)?;
    let ws = ComponentWorkspace::new(theta)?;
    Ok(log_densities_with(&ws, theta, design))
}

pub(crate) fn log_densities_with(ws: &ComponentWorkspace, theta: &Theta, design: &Design) -> DMatrix<f64> {
    let n = design.n_obs();
    let k = theta.n_components();
    let mut out = DMatrix::zeros(n, k);
    for i in 0..n {
        let base = design.y_row(i) - design.linear_predictor(i, &theta.beta);
        for c in 0..k {
            let r = &base - &theta.lambda[c];
            out[(i, c)] = ws.log_weighted_density(c, &r);
        }
    }
    out
}

/// Sum over rows of log-sum-exp, accumulated in index order.
pub(crate) fn loglik_from_log_densities(logf: &DMatrix<f64>) -> f64 {
    (0..logf.nrows())
        .map(|i| log_sum_exp(logf.row(i).iter().copied()))
        .fold(0.0, |acc, v| acc + v)
}

/// Observed-data log-likelihood l(θ).
pub fn log_likelihood(theta: &Theta, design: &Design) -> Result<f64> {
    Ok(loglik_from_log_densities(&log_densities(theta, design)?))
}

/// Posterior component probabilities, one row per observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Posteriors(pub DMatrix<f64>);

impl Posteriors {
    pub fn from_log_densities(logf: &DMatrix<f64>) -> Self {
        let mut p = logf.clone();
        for i in 0..p.nrows() {
            let lse = log_sum_exp(logf.row(i).iter().copied());
            for c in 0..p.ncols() {
                p[(i, c)] = (logf[(i, c)] - lse).exp();
            }
            // renormalize away exp rounding so rows sum to one
            let s: f64 = p.row(i).sum();
            for c in 0..p.ncols() {
                p[(i, c)] /= s;
            }
        }
        Self(p)
    }

    /// Hard 0/1 posteriors from zero-based labels.
    pub fn from_labels(labels: &[usize], n_components: usize) -> Result<Self> {
        let mut p = DMatrix::zeros(labels.len(), n_components);
        for (i, &l) in labels.iter().enumerate() {
            if l >= n_components {
                return Err(Error::IndexOutOfRange {
                    what: "component label",
                    index: l,
                    limit: n_components,
                });
            }
            p[(i, l)] = 1.0;
        }
        Ok(Self(p))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn n_obs(&self) -> usize {
        self.0.nrows()
    }

    pub fn n_components(&self) -> usize {
        self.0.ncols()
    }

    /// z_·k = Σ_i p_ik.
    pub fn component_sizes(&self) -> DVector<f64> {
        self.0.row_sum().transpose()
    }

    pub fn permuted(&self, order: &[usize]) -> Self {
        Self(DMatrix::from_fn(self.n_obs(), order.len(), |i, j| self.0[(i, order[j])]))
    }
}

pub fn responsibilities(theta: &Theta, design: &Design) -> Result<Posteriors> {
    Ok(Posteriors::from_log_densities(&log_densities(theta, design)?))
}

/// l_c(θ) = Σ_i Σ_k z_ik ln f_ki for zero-based hard labels.
pub fn complete_data_loglik(theta: &Theta, design: &Design, labels: &[usize]) -> Result<f64> {
    if labels.len() != design.n_obs() {
        return Err(Error::InvalidData("one label per observation is required".into()));
    }
    let z = Posteriors::from_labels(labels, theta.n_components())?;
    expected_complete_loglik(theta, design, &z)
}

/// Σ_i Σ_k p_ik ln f_ki for soft labels (the EM objective Q).
pub fn expected_complete_loglik(theta: &Theta, design: &Design, p: &Posteriors) -> Result<f64> {
    let logf = log_densities(theta, design)?;
    if p.0.shape() != logf.shape() {
        return Err(Error::InvalidData("posterior shape does not match the design".into()));
    }
    let mut total = 0.0;
    for i in 0..logf.nrows() {
        for c in 0..logf.ncols() {
            let w = p.0[(i, c)];
            if w != 0.0 {
                total += w * logf[(i, c)];
            }
        }
    }
    Ok(total)
}
