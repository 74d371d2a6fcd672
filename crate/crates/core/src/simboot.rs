//! Simulation from a fitted mixture SUR model and the parametric bootstrap.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::em::{fit, EmControls, FitResult};
use crate::error::{Error, Result};
use crate::linalg::checked_cholesky;
use crate::model::{Design, Theta};

/// Simulated responses with the latent component of each row (0-based).
#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub y: DMatrix<f64>,
    pub labels: Vec<usize>,
}

fn draw_component(pi: &DVector<f64>, u: f64) -> usize {
    let mut acc = 0.0;
    for (k, p) in pi.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    pi.len() - 1
}

/// Draws y_i ~ N_D(λ_k + X_i'β, Σ_k) with k ~ mult(π) over the regressor
/// rows of `design`, consuming randomness from `rng`.
pub fn simulate_with(theta: &Theta, design: &Design, rng: &mut ChaCha8Rng) -> Result<Simulation> {
    if theta.n_responses() != design.n_responses() || theta.beta.len() != design.n_coefficients() {
        return Err(Error::InvalidTheta("parameters do not match the design".into()));
    }
    let factors = theta
        .sigma
        .iter()
        .enumerate()
        .map(|(k, s)| {
            checked_cholesky(s)
                .map(|c| c.l())
                .ok_or(Error::SingularCovariance { component: k })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = design.n_obs();
    let d = design.n_responses();
    let mut y = DMatrix::zeros(n, d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = draw_component(&theta.pi, rng.random());
        let z = DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
        let row = &theta.lambda[k] + design.linear_predictor(i, &theta.beta) + &factors[k] * z;
        y.set_row(i, &row.transpose());
        labels.push(k);
    }
    Ok(Simulation { y, labels })
}

/// Seeded simulation; see [`simulate_with`].
pub fn simulate(theta: &Theta, design: &Design, seed: u64) -> Result<Simulation> {
    simulate_with(theta, design, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Replicate {
    pub index: usize,
    pub beta: Vec<f64>,
    pub loglik: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicateFailure {
    pub index: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BootstrapRun {
    pub requested: usize,
    pub seed: u64,
    /// Successful replicates in index order.
    pub replicates: Vec<Replicate>,
    pub failures: Vec<ReplicateFailure>,
    pub warnings: Vec<String>,
}

impl BootstrapRun {
    pub fn succeeded(&self) -> usize {
        self.replicates.len()
    }
}

/// Stream for replicate `index`, independent of every other replicate.
pub fn replicate_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn run_replicate(fit_hat: &FitResult, design: &Design, controls: &EmControls, seed: u64, index: usize) -> Result<Replicate> {
    let mut rng = replicate_rng(seed, index);
    let sim = simulate_with(&fit_hat.theta, design, &mut rng)?;
    let controls = EmControls {
        seed: rng.random(),
        ..controls.clone()
    };
    let refit = fit(&design.with_responses(sim.y), &controls)?;
    Ok(Replicate {
        index,
        beta: refit.theta.beta.iter().copied().collect(),
        loglik: refit.loglik,
    })
}

/// Parametric bootstrap: `b` data sets simulated at θ̂ over the observed
/// regressors, each refitted with `controls`. Failed refits are logged and
/// left out.
pub fn parametric_bootstrap(fit_hat: &FitResult, design: &Design, b: usize, controls: &EmControls, seed: u64) -> BootstrapRun {
    let outcomes: Vec<Result<Replicate>> = (0..b)
        .into_par_iter()
        .map(|r| run_replicate(fit_hat, design, controls, seed, r))
        .collect();
    let mut replicates = Vec::new();
    let mut failures = Vec::new();
    for (index, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(r) => replicates.push(r),
            Err(e) => failures.push(ReplicateFailure {
                index,
                reason: e.to_string(),
            }),
        }
    }
    let mut warnings = Vec::new();
    if b > 0 && replicates.is_empty() {
        warnings.push(format!("all {b} bootstrap replicates failed"));
    }
    BootstrapRun {
        requested: b,
        seed,
        replicates,
        failures,
        warnings,
    }
}

/// Sample quantile by linear interpolation between order statistics
/// (h = (n − 1)·p on the sorted sample).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile interval at the (1−level)/2 and (1+level)/2 quantiles.
pub fn percentile_ci(values: &[f64], level: f64) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::TooFewReplicates {
            needed: 2,
            got: values.len(),
        });
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidSpec(format!("confidence level {level} outside (0, 1)")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok((
        quantile_sorted(&sorted, 0.5 * (1.0 - level)),
        quantile_sorted(&sorted, 0.5 * (1.0 + level)),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoefficientSummary {
    pub point: f64,
    pub mean: f64,
    /// Standard deviation with denominator B − 1.
    pub sd: f64,
    pub lo: f64,
    pub hi: f64,
    pub bias: f64,
    pub bias_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BootstrapSummary {
    pub succeeded: usize,
    pub requested: usize,
    pub level: f64,
    pub coefficients: Vec<CoefficientSummary>,
}

/// Per-coefficient mean, sd, bias, |bias|/sd and percentile interval.
pub fn bootstrap_summary(run: &BootstrapRun, point: &DVector<f64>, level: f64) -> Result<BootstrapSummary> {
    let n = run.replicates.len();
    if n < 2 {
        return Err(Error::TooFewReplicates { needed: 2, got: n });
    }
    let coefficients = (0..point.len())
        .map(|j| {
            let draws: Vec<f64> = run.replicates.iter().map(|r| r.beta[j]).collect();
            let mean = draws.iter().sum::<f64>() / n as f64;
            let sd = (draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
            let (lo, hi) = percentile_ci(&draws, level)?;
            let bias = mean - point[j];
            let bias_ratio = if sd > 0.0 {
                bias.abs() / sd
            } else if bias == 0.0 {
                0.0
            } else {
                f64::INFINITY
            };
            Ok(CoefficientSummary {
                point: point[j],
                mean,
                sd,
                lo,
                hi,
                bias,
                bias_ratio,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BootstrapSummary {
        succeeded: n,
        requested: run.requested,
        level,
        coefficients,
    })
}
