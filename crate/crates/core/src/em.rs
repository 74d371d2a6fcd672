//! EM fitting: E-step, the M-step with its inner GLS/covariance alternation,
//! initialization strategies, Aitken stopping and multi-start orchestration.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::inference::bic;
use crate::likelihood::{loglik_from_log_densities, log_densities, responsibilities, Posteriors};
use crate::linalg::{checked_cholesky, mean_distance};
use crate::model::{count_parameters, half_vec, Dataset, Design, ModelSpec, Theta};

/// How the first start is initialized. Additional starts are always random.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum InitStrategy {
    /// Classical SUR fit, then a Gaussian mixture fitted to its residuals.
    #[default]
    SurResidualGmm,
    /// Random partition of the observations followed by one M-step.
    Random,
    /// Caller-supplied starting value.
    User(Theta),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmControls {
    pub max_iter: usize,
    pub tol: f64,
    pub inner_max_iter: usize,
    pub inner_tol: f64,
    /// Total number of starts; start 0 uses `init`, the rest are random.
    pub n_starts: usize,
    pub seed: u64,
    pub init: InitStrategy,
}

impl Default for EmControls {
    fn default() -> Self {
        Self {
            max_iter: 500,
            tol: 1e-8,
            inner_max_iter: 500,
            inner_tol: 1e-8,
            n_starts: 1,
            seed: 0,
            init: InitStrategy::SurResidualGmm,
        }
    }
}

impl EmControls {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 || self.inner_max_iter == 0 || self.n_starts == 0 {
            return Err(Error::InvalidSpec("iteration caps and start count must be positive".into()));
        }
        if !(self.tol > 0.0 && self.inner_tol > 0.0) {
            return Err(Error::InvalidSpec("tolerances must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Convergence {
    /// Aitken-accelerated log-likelihood criterion met.
    Aitken,
    /// Iteration cap reached first.
    MaxIter,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StartFailure {
    pub start: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub theta: Theta,
    pub loglik: f64,
    /// l(θ^(r)) for r = 0, 1, …; the last entry equals `loglik`.
    pub trace: Vec<f64>,
    pub posteriors: Posteriors,
    pub convergence: Convergence,
    /// Number of M-steps performed by the winning start.
    pub iterations: usize,
    pub npar: usize,
    pub n_obs: usize,
    pub bic: f64,
    pub start_index: usize,
    pub start_failures: Vec<StartFailure>,
    pub warnings: Vec<String>,
}

/// Result of a single M-step.
#[derive(Debug, Clone, PartialEq)]
pub struct MStep {
    pub theta: Theta,
    pub inner_iterations: usize,
    pub inner_converged: bool,
}

/// E-step: posterior probabilities at θ.
pub fn e_step(theta: &Theta, design: &Design) -> Result<Posteriors> {
    responsibilities(theta, design)
}

/// Solves an SPD system after symmetric diagonal equilibration.
fn solve_equilibrated(n: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    let dim = n.nrows();
    let scale: Vec<f64> = (0..dim).map(|j| n[(j, j)]).collect();
    if scale.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
        return None;
    }
    let scale: Vec<f64> = scale.iter().map(|v| v.sqrt()).collect();
    let scaled = DMatrix::from_fn(dim, dim, |r, c| n[(r, c)] / (scale[r] * scale[c]));
    let chol = checked_cholesky(&scaled)?;
    let b = DVector::from_fn(dim, |r, _| rhs[r] / scale[r]);
    let x = chol.solve(&b);
    Some(DVector::from_fn(dim, |r, _| x[r] / scale[r]))
}

/// γ maximizing the expected complete-data log-likelihood for fixed Σ_k.
fn gls_step(p: &Posteriors, design: &Design, precisions: &[DMatrix<f64>]) -> Result<DVector<f64>> {
    let k = precisions.len();
    let d = design.n_responses();
    let np = design.n_coefficients();
    let dim = d * k + np;
    let x = design.regressor_values();
    let eq = design.equation_of();
    let mut normal = DMatrix::zeros(dim, dim);
    let mut rhs = DVector::zeros(dim);
    let mut beta_block = DMatrix::zeros(np, np);
    for i in 0..design.n_obs() {
        let y = design.y_row(i);
        let mut w_mix = DMatrix::zeros(d, d);
        for c in 0..k {
            let w = p.0[(i, c)];
            if w == 0.0 {
                continue;
            }
            let s = &precisions[c];
            let sy = s * &y * w;
            rhs.rows_mut(c * d, d).add_assign_from(&sy);
            for a in 0..d {
                for b in 0..d {
                    normal[(c * d + a, c * d + b)] += w * s[(a, b)];
                }
                for q in 0..np {
                    normal[(c * d + a, d * k + q)] += w * s[(a, eq[q])] * x[(i, q)];
                }
            }
            w_mix += s * w;
        }
        if np > 0 {
            design.add_quadratic(i, &w_mix, 1.0, &mut beta_block);
            let v = &w_mix * &y;
            rhs.rows_mut(d * k, np).add_assign_from(&design.apply(i, &v));
        }
    }
    normal.view_mut((d * k, d * k), (np, np)).copy_from(&beta_block);
    for r in 0..dim {
        for c in (r + 1)..dim {
            let v = normal[(r, c)];
            normal[(c, r)] = v;
        }
    }
    solve_equilibrated(&normal, &rhs).ok_or(Error::SingularSystem)
}

trait AddAssignFrom {
    fn add_assign_from(&mut self, other: &DVector<f64>);
}

impl AddAssignFrom for nalgebra::DVectorViewMut<'_, f64> {
    fn add_assign_from(&mut self, other: &DVector<f64>) {
        for (a, b) in self.iter_mut().zip(other.iter()) {
            *a += b;
        }
    }
}

fn split_gamma(gamma: &DVector<f64>, k: usize, d: usize) -> (Vec<DVector<f64>>, DVector<f64>) {
    let lambda = (0..k).map(|c| gamma.rows(c * d, d).into_owned()).collect();
    let beta = gamma.rows(k * d, gamma.len() - k * d).into_owned();
    (lambda, beta)
}

/// Σ_k = S_k / z_·k for fixed γ.
fn covariance_step(
    p: &Posteriors,
    design: &Design,
    lambda: &[DVector<f64>],
    beta: &DVector<f64>,
    sizes: &DVector<f64>,
) -> Result<Vec<DMatrix<f64>>> {
    let d = design.n_responses();
    let mut out = vec![DMatrix::zeros(d, d); lambda.len()];
    for i in 0..design.n_obs() {
        let base = design.y_row(i) - design.linear_predictor(i, beta);
        for (c, l) in lambda.iter().enumerate() {
            let w = p.0[(i, c)];
            if w == 0.0 {
                continue;
            }
            let r = &base - l;
            out[c].ger(w, &r, &r, 1.0);
        }
    }
    for (c, s) in out.iter_mut().enumerate() {
        *s /= sizes[c];
        let sym = (&*s + s.transpose()) * 0.5;
        *s = sym;
        if checked_cholesky(s).is_none() {
            return Err(Error::SingularCovariance { component: c });
        }
    }
    Ok(out)
}

fn parameter_stack(gamma: &DVector<f64>, sigma: &[DMatrix<f64>]) -> DVector<f64> {
    let v: Vec<f64> = gamma
        .iter()
        .copied()
        .chain(sigma.iter().flat_map(|s| half_vec(s).iter().copied().collect::<Vec<_>>()))
        .collect();
    DVector::from_vec(v)
}

/// M-step from posteriors `p`, alternating the GLS solve for γ and the
/// covariance update until the stacked (γ, v(Σ_1..K)) moves less than
/// `inner_tol` in mean Euclidean distance or `inner_max_iter` is reached.
pub fn m_step(p: &Posteriors, design: &Design, sigma_init: &[DMatrix<f64>], controls: &EmControls) -> Result<MStep> {
    m_step_warm(p, design, sigma_init, None, controls)
}

fn m_step_warm(
    p: &Posteriors,
    design: &Design,
    sigma_init: &[DMatrix<f64>],
    gamma_init: Option<&DVector<f64>>,
    controls: &EmControls,
) -> Result<MStep> {
    let k = design.n_components();
    let d = design.n_responses();
    let n = design.n_obs();
    if p.n_obs() != n || p.n_components() != k || sigma_init.len() != k {
        return Err(Error::InvalidData("posterior or covariance shapes do not match the design".into()));
    }
    let sizes = p.component_sizes();
    for c in 0..k {
        if !(sizes[c] >= (d + 1) as f64) {
            return Err(Error::EmptyComponent {
                component: c,
                size: sizes[c],
                min: d + 1,
            });
        }
    }
    let pi = &sizes / n as f64;

    let mut sigma = sigma_init.to_vec();
    let mut previous = gamma_init.map(|g| parameter_stack(g, &sigma));
    let mut gamma = DVector::zeros(0);
    let mut inner_converged = false;
    let mut inner_iterations = 0;
    for _ in 0..controls.inner_max_iter {
        inner_iterations += 1;
        let precisions = sigma
            .iter()
            .enumerate()
            .map(|(c, s)| {
                let chol = checked_cholesky(s).ok_or(Error::SingularCovariance { component: c })?;
                let inv = chol.inverse();
                Ok((&inv + inv.transpose()) * 0.5)
            })
            .collect::<Result<Vec<_>>>()?;
        gamma = gls_step(p, design, &precisions)?;
        let (lambda, beta) = split_gamma(&gamma, k, d);
        sigma = covariance_step(p, design, &lambda, &beta, &sizes)?;
        let stack = parameter_stack(&gamma, &sigma);
        if let Some(prev) = &previous {
            if mean_distance(&stack, prev) < controls.inner_tol {
                inner_converged = true;
                break;
            }
        }
        previous = Some(stack);
    }
    let (lambda, beta) = split_gamma(&gamma, k, d);
    let theta = Theta::new(normalized_weights(pi), beta, lambda, sigma)?;
    Ok(MStep {
        theta,
        inner_iterations,
        inner_converged,
    })
}

/// Renormalizes weights so the sum-to-one invariant holds to rounding.
fn normalized_weights(pi: DVector<f64>) -> DVector<f64> {
    let s = pi.sum();
    pi / s
}

/// True if the trace satisfies the Aitken criterion (plain |Δl| for the first
/// two iterations, or when the acceleration estimate is degenerate).
pub fn aitken_converged(trace: &[f64], tol: f64) -> bool {
    let t = trace.len();
    if t < 2 {
        return false;
    }
    let delta = trace[t - 1] - trace[t - 2];
    if t <= 3 {
        return delta.abs() < tol;
    }
    let denom = trace[t - 2] - trace[t - 3];
    if denom.abs() < 1e-300 {
        return delta.abs() < tol;
    }
    let a = delta / denom;
    if a >= 1.0 {
        return delta.abs() < tol;
    }
    let l_inf = trace[t - 2] + delta / (1.0 - a);
    (l_inf - trace[t - 2]).abs() < tol
}

struct RunOutcome {
    theta: Theta,
    trace: Vec<f64>,
    posteriors: Posteriors,
    convergence: Convergence,
    iterations: usize,
}

fn run_em(design: &Design, theta0: Theta, controls: &EmControls) -> Result<RunOutcome> {
    let mut theta = theta0;
    let mut trace = Vec::new();
    let mut iterations = 0;
    loop {
        let logf = log_densities(&theta, design)?;
        let l = loglik_from_log_densities(&logf);
        if !l.is_finite() {
            return Err(Error::InvalidTheta("log-likelihood is not finite".into()));
        }
        trace.push(l);
        let posteriors = Posteriors::from_log_densities(&logf);
        let convergence = if aitken_converged(&trace, controls.tol) {
            Some(Convergence::Aitken)
        } else if iterations >= controls.max_iter {
            Some(Convergence::MaxIter)
        } else {
            None
        };
        if let Some(convergence) = convergence {
            return Ok(RunOutcome {
                theta,
                trace,
                posteriors,
                convergence,
                iterations,
            });
        }
        let gamma = theta.pack_gamma();
        theta = m_step_warm(&posteriors, design, &theta.sigma, Some(&gamma), controls)?.theta;
        iterations += 1;
    }
}

/// Order components by descending weight, ties by lexicographic intercepts.
pub fn canonical_order(theta: &Theta) -> Vec<usize> {
    let mut order: Vec<usize> = (0..theta.n_components()).collect();
    order.sort_by(|&a, &b| {
        theta.pi[b]
            .partial_cmp(&theta.pi[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| {
                theta.lambda[a]
                    .iter()
                    .zip(theta.lambda[b].iter())
                    .map(|(x, y)| x.partial_cmp(y).unwrap_or(std::cmp::Ordering::Equal))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
    });
    order
}

/// Classical SUR fit (K = 1) by iterated feasible GLS, started from OLS.
fn sur_fit(design: &Design, controls: &EmControls) -> Result<Theta> {
    let single = design.with_components(1)?;
    let ones = Posteriors(DMatrix::from_element(single.n_obs(), 1, 1.0));
    let d = single.n_responses();
    Ok(m_step(&ones, &single, &[DMatrix::identity(d, d)], controls)?.theta)
}

/// Seeded k-means++ partition followed by Lloyd iterations.
fn kmeans_labels(points: &DMatrix<f64>, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = points.nrows();
    let dist2 = |i: usize, c: &DVector<f64>| -> f64 { (points.row(i).transpose() - c).norm_squared() };
    let mut centers: Vec<DVector<f64>> = vec![points.row(rng.random_range(0..n)).transpose()];
    while centers.len() < k {
        let weights: Vec<f64> = (0..n)
            .map(|i| centers.iter().map(|c| dist2(i, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = weights.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, w) in weights.iter().enumerate() {
                if u < *w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers.push(points.row(next).transpose());
    }
    let mut labels = vec![0; n];
    for _ in 0..100 {
        let mut changed = false;
        for (i, label) in labels.iter_mut().enumerate() {
            let best = (0..k)
                .min_by(|&a, &b| dist2(i, &centers[a]).partial_cmp(&dist2(i, &centers[b])).unwrap())
                .unwrap_or(0);
            if best != *label {
                *label = best;
                changed = true;
            }
        }
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
            if !members.is_empty() {
                let mut m = DVector::zeros(points.ncols());
                for &i in &members {
                    m += points.row(i).transpose();
                }
                *center = m / members.len() as f64;
            }
        }
        if !changed {
            break;
        }
    }
    labels
}

const GMM_INIT_MAX_ITER: usize = 100;
const INIT_ATTEMPTS: usize = 10;

fn sur_residual_gmm(design: &Design, controls: &EmControls, rng: &mut ChaCha8Rng) -> Result<Theta> {
    let sur = sur_fit(design, controls)?;
    let k = design.n_components();
    if k == 1 {
        return Ok(sur);
    }
    let n = design.n_obs();
    let d = design.n_responses();
    let mut resid = DMatrix::zeros(n, d);
    for i in 0..n {
        let r = design.y_row(i) - &sur.lambda[0] - design.linear_predictor(i, &sur.beta);
        resid.set_row(i, &r.transpose());
    }
    let gmm_design = Design::new(
        &Dataset::new(resid.clone(), DMatrix::zeros(n, 0))?,
        &ModelSpec::new(k, vec![vec![]; d])?,
    )?;
    let short = EmControls {
        max_iter: GMM_INIT_MAX_ITER,
        ..controls.clone()
    };
    let mut last_err = Error::SingularSystem;
    for _ in 0..INIT_ATTEMPTS {
        let labels = kmeans_labels(&resid, k, rng);
        let attempt = Posteriors::from_labels(&labels, k)
            .and_then(|p| m_step(&p, &gmm_design, &vec![sur.sigma[0].clone(); k], &short))
            .and_then(|m| run_em(&gmm_design, m.theta, &short));
        match attempt {
            Ok(run) => {
                let g = run.theta;
                let lambda = g.lambda.iter().map(|m| &sur.lambda[0] + m).collect();
                return Theta::new(g.pi, sur.beta.clone(), lambda, g.sigma);
            }
            Err(e) => last_err = e,
        }
    }
    Err(last_err)
}

fn random_partition(design: &Design, controls: &EmControls, rng: &mut ChaCha8Rng) -> Result<Theta> {
    let k = design.n_components();
    let n = design.n_obs();
    let d = design.n_responses();
    if k == 1 {
        return sur_fit(design, controls);
    }
    let sigma0 = sur_fit(design, controls)?.sigma[0].clone();
    let mut last_err = Error::EmptyComponent {
        component: 0,
        size: 0.0,
        min: d + 1,
    };
    for _ in 0..INIT_ATTEMPTS {
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let p = Posteriors::from_labels(&labels, k)?;
        match m_step(&p, design, &vec![sigma0.clone(); k], controls) {
            Ok(m) => return Ok(m.theta),
            Err(e) => last_err = e,
        }
    }
    Err(last_err)
}

fn check_user_theta(theta: &Theta, design: &Design) -> Result<()> {
    if theta.n_components() != design.n_components()
        || theta.n_responses() != design.n_responses()
        || theta.beta.len() != design.n_coefficients()
    {
        return Err(Error::InvalidTheta("starting value does not match the model".into()));
    }
    Ok(())
}

/// Starting value Θ⁰ under the given strategy.
pub fn initialize(design: &Design, strategy: &InitStrategy, controls: &EmControls, rng: &mut ChaCha8Rng) -> Result<Theta> {
    match strategy {
        InitStrategy::SurResidualGmm => sur_residual_gmm(design, controls, rng),
        InitStrategy::Random => random_partition(design, controls, rng),
        InitStrategy::User(theta) => {
            check_user_theta(theta, design)?;
            Ok(theta.clone())
        }
    }
}

/// Independent stream for start `index` under the root seed.
pub fn start_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn run_start(design: &Design, controls: &EmControls, start: usize) -> Result<RunOutcome> {
    let mut rng = start_rng(controls.seed, start as u64);
    let strategy = if start == 0 { controls.init.clone() } else { InitStrategy::Random };
    let theta0 = initialize(design, &strategy, controls, &mut rng)?;
    run_em(design, theta0, controls)
}

/// Multi-start EM fit; the start with the highest final log-likelihood wins
/// (ties go to the lower start index).
pub fn fit(design: &Design, controls: &EmControls) -> Result<FitResult> {
    controls.validate()?;
    let npar = count_parameters(design.spec());
    let n = design.n_obs();
    let mut warnings = Vec::new();
    if n <= npar {
        warnings.push(format!("{n} observations for {npar} free parameters"));
    }
    let outcomes: Vec<Result<RunOutcome>> = (0..controls.n_starts)
        .into_par_iter()
        .map(|s| run_start(design, controls, s))
        .collect();

    let mut best: Option<(usize, RunOutcome)> = None;
    let mut start_failures = Vec::new();
    for (s, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(run) => {
                let l = *run.trace.last().expect("trace is never empty");
                let better = match &best {
                    None => true,
                    Some((_, b)) => l > *b.trace.last().expect("trace is never empty"),
                };
                if better {
                    best = Some((s, run));
                }
            }
            Err(e) => start_failures.push(StartFailure {
                start: s,
                reason: e.to_string(),
            }),
        }
    }
    let Some((start_index, run)) = best else {
        return Err(Error::AllStartsFailed(
            start_failures.into_iter().map(|f| format!("start {}: {}", f.start, f.reason)).collect(),
        ));
    };
    let order = canonical_order(&run.theta);
    let theta = run.theta.permuted(&order);
    let posteriors = run.posteriors.permuted(&order);
    let loglik = *run.trace.last().expect("trace is never empty");
    Ok(FitResult {
        theta,
        loglik,
        trace: run.trace,
        posteriors,
        convergence: run.convergence,
        iterations: run.iterations,
        npar,
        n_obs: n,
        bic: bic(loglik, npar, n),
        start_index,
        start_failures,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::likelihood::{expected_complete_loglik, log_likelihood};
    use rand_distr::{Distribution, StandardNormal};

    fn synthetic(seed: u64, n: usize, lambdas: &[Vec<f64>], weights: &[f64], regs: Vec<Vec<usize>>, beta: &[f64]) -> Design {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = regs.len();
        let spec = ModelSpec::new(lambdas.len(), regs).unwrap();
        let x = DMatrix::from_fn(n, 3, |_, _| rng.random_range(-2.0..2.0));
        let probe = Design::new(&Dataset::new(DMatrix::zeros(n, d), x.clone()).unwrap(), &spec).unwrap();
        let beta = DVector::from_column_slice(beta);
        let mut y = DMatrix::zeros(n, d);
        for i in 0..n {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut comp = weights.len() - 1;
            for (c, w) in weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    comp = c;
                    break;
                }
            }
            let mean = DVector::from_column_slice(&lambdas[comp]) + probe.linear_predictor(i, &beta);
            for j in 0..d {
                let z: f64 = StandardNormal.sample(&mut rng);
                y[(i, j)] = mean[j] + z * (0.5 + 0.3 * j as f64);
            }
        }
        Design::new(&Dataset::new(y, x).unwrap(), &spec).unwrap()
    }

    #[test]
    fn e_step_single_component_is_one() {
        let design = synthetic(1, 20, &[vec![0.0, 0.0]], &[1.0], vec![vec![0], vec![1]], &[1.0, -1.0]);
        let fit = fit(&design, &EmControls::default()).unwrap();
        assert!(e_step(&fit.theta, &design).unwrap().0.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn gaussian_mle_for_intercept_only() {
        let design = synthetic(2, 50, &[vec![1.0, 2.0]], &[1.0], vec![vec![], vec![]], &[]);
        let ones = Posteriors(DMatrix::from_element(50, 1, 1.0));
        let m = m_step(&ones, &design, &[DMatrix::identity(2, 2)], &EmControls::default()).unwrap();
        let y = design.y();
        let mean = y.row_mean().transpose();
        let mut cov = DMatrix::zeros(2, 2);
        for i in 0..50 {
            let r = y.row(i).transpose() - &mean;
            cov += &r * r.transpose();
        }
        cov /= 50.0;
        assert!((&m.theta.lambda[0] - mean).amax() < 1e-12);
        assert!((&m.theta.sigma[0] - cov).amax() < 1e-12);
    }

    #[test]
    fn single_equation_recovers_ols() {
        let design = synthetic(3, 40, &[vec![0.5]], &[1.0], vec![vec![0, 2]], &[2.0, -1.0]);
        let ones = Posteriors(DMatrix::from_element(40, 1, 1.0));
        let m = m_step(&ones, &design, &[DMatrix::identity(1, 1)], &EmControls::default()).unwrap();
        let mut xm = DMatrix::from_element(40, 3, 1.0);
        xm.view_mut((0, 1), (40, 2)).copy_from(design.regressor_values());
        let yv = design.y().column(0).into_owned();
        let ols = (xm.transpose() * &xm).lu().solve(&(xm.transpose() * yv)).unwrap();
        assert!((m.theta.lambda[0][0] - ols[0]).abs() < 1e-10);
        assert!((m.theta.beta[0] - ols[1]).abs() < 1e-10);
        assert!((m.theta.beta[1] - ols[2]).abs() < 1e-10);
    }

    #[test]
    fn hard_posteriors_match_weighted_gls() {
        let design = synthetic(4, 60, &[vec![-2.0, 0.0], vec![2.0, 1.0]], &[0.5, 0.5], vec![vec![0], vec![1, 2]], &[1.0, 0.5, -0.5]);
        let labels: Vec<usize> = (0..60).map(|i| i % 2).collect();
        let p = Posteriors::from_labels(&labels, 2).unwrap();
        let controls = EmControls::default();
        let m = m_step(&p, &design, &[DMatrix::identity(2, 2), DMatrix::identity(2, 2)], &controls).unwrap();
        // at the inner fixed point, γ solves the weighted GLS normal equations with the returned Σ_k
        let inv: Vec<DMatrix<f64>> = m.theta.sigma.iter().map(|s| s.clone().try_inverse().unwrap()).collect();
        let dim = 2 * 2 + 3;
        let mut lhs = DMatrix::zeros(dim, dim);
        let mut rhs = DVector::zeros(dim);
        for i in 0..60 {
            let xi = design.design_matrix(i).unwrap();
            let k = labels[i];
            let xki = crate::model::augmented_design(k, 2, &xi).unwrap();
            lhs += &xki * &inv[k] * xki.transpose();
            rhs += &xki * &inv[k] * design.y_row(i);
        }
        let oracle = lhs.lu().solve(&rhs).unwrap();
        assert!((m.theta.pack_gamma() - oracle).amax() < 1e-6);
        assert!(m.inner_converged);
    }

    #[test]
    fn m_step_does_not_decrease_q() {
        let design = synthetic(5, 80, &[vec![-1.0, 0.0], vec![1.5, 1.0]], &[0.4, 0.6], vec![vec![0], vec![1]], &[1.0, 0.5]);
        let controls = EmControls::default();
        let mut rng = start_rng(5, 1);
        let theta = initialize(&design, &InitStrategy::Random, &controls, &mut rng).unwrap();
        let p = e_step(&theta, &design).unwrap();
        let q0 = expected_complete_loglik(&theta, &design, &p).unwrap();
        let next = m_step_warm(&p, &design, &theta.sigma, Some(&theta.pack_gamma()), &controls).unwrap();
        let q1 = expected_complete_loglik(&next.theta, &design, &p).unwrap();
        assert!(q1 >= q0 - 1e-10);
    }

    #[test]
    fn empty_component_is_reported() {
        let design = synthetic(6, 10, &[vec![0.0, 0.0], vec![1.0, 1.0]], &[0.5, 0.5], vec![vec![], vec![]], &[]);
        let mut labels = vec![0; 10];
        labels[0] = 1;
        labels[1] = 1;
        let p = Posteriors::from_labels(&labels, 2).unwrap();
        let err = m_step(&p, &design, &[DMatrix::identity(2, 2), DMatrix::identity(2, 2)], &EmControls::default());
        assert!(matches!(err, Err(Error::EmptyComponent { component: 1, .. })));
    }

    #[test]
    fn collinear_regressors_give_singular_system() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = DMatrix::from_fn(20, 1, |_, _| rng.random_range(-1.0..1.0));
        let pool = DMatrix::from_fn(20, 2, |i, _| x[(i, 0)]);
        let y = DMatrix::from_fn(20, 1, |_, _| rng.random_range(-1.0..1.0));
        let design = Design::new(&Dataset::new(y, pool).unwrap(), &ModelSpec::new(1, vec![vec![0, 1]]).unwrap()).unwrap();
        assert!(matches!(fit(&design, &EmControls::default()), Err(Error::AllStartsFailed(_))));
    }

    #[test]
    fn aitken_rule_behaviour() {
        assert!(!aitken_converged(&[1.0], 1e-8));
        assert!(aitken_converged(&[1.0, 1.0], 1e-8));
        // geometric convergence with ratio 0.5: l_inf = limit exactly
        let trace: Vec<f64> = (0..6).map(|r| -10.0 - 0.5f64.powi(r)).collect();
        assert!(!aitken_converged(&trace, 1e-3));
        let long: Vec<f64> = (0..40).map(|r| -10.0 - 0.5f64.powi(r)).collect();
        assert!(aitken_converged(&long, 1e-8));
    }

    #[test]
    fn canonical_order_sorts_by_weight_then_intercept() {
        let theta = Theta::new(
            DVector::from_vec(vec![0.25, 0.5, 0.25]),
            DVector::zeros(0),
            vec![DVector::from_element(1, 3.0), DVector::from_element(1, 0.0), DVector::from_element(1, -1.0)],
            vec![DMatrix::identity(1, 1); 3],
        )
        .unwrap();
        assert_eq!(canonical_order(&theta), vec![1, 2, 0]);
    }

    #[test]
    fn fit_is_monotone_and_deterministic() {
        let design = synthetic(8, 150, &[vec![-2.0, 0.0], vec![2.0, 2.0]], &[0.6, 0.4], vec![vec![0], vec![1, 2]], &[1.0, 0.5, -0.5]);
        let controls = EmControls { n_starts: 3, seed: 42, ..EmControls::default() };
        let a = fit(&design, &controls).unwrap();
        let b = fit(&design, &controls).unwrap();
        assert_eq!(a, b);
        for w in a.trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-10);
        }
        assert_eq!(a.bic, 2.0 * a.loglik - a.npar as f64 * 150f64.ln());
        assert!((log_likelihood(&a.theta, &design).unwrap() - a.loglik).abs() < 1e-9);
        assert!(a.theta.pi[0] >= a.theta.pi[1]);
    }

    #[test]
    fn random_init_is_reproducible() {
        let design = synthetic(9, 60, &[vec![-2.0], vec![2.0]], &[0.5, 0.5], vec![vec![0]], &[1.0]);
        let controls = EmControls::default();
        let a = initialize(&design, &InitStrategy::Random, &controls, &mut start_rng(3, 2)).unwrap();
        let b = initialize(&design, &InitStrategy::Random, &controls, &mut start_rng(3, 2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn residual_gmm_init_straddles_intercepts() {
        let design = synthetic(10, 400, &[vec![-3.0, 0.0], vec![3.0, 2.0]], &[0.5, 0.5], vec![vec![0], vec![1]], &[1.0, -1.0]);
        let controls = EmControls::default();
        let theta = initialize(&design, &InitStrategy::SurResidualGmm, &controls, &mut start_rng(0, 0)).unwrap();
        let order = canonical_order(&theta);
        let mut lambdas: Vec<DVector<f64>> = order.iter().map(|&o| theta.lambda[o].clone()).collect();
        lambdas.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
        let sd = [0.5, 0.8];
        for (est, truth) in lambdas.iter().zip([[-3.0, 0.0], [3.0, 2.0]]) {
            for j in 0..2 {
                assert!((est[j] - truth[j]).abs() < 3.0 * sd[j], "{est} vs {truth:?}");
            }
        }
    }

    #[test]
    fn user_theta_shape_is_checked() {
        let design = synthetic(11, 30, &[vec![0.0]], &[1.0], vec![vec![0]], &[1.0]);
        let bad = Theta::new(
            DVector::from_element(1, 1.0),
            DVector::zeros(0),
            vec![DVector::zeros(1)],
            vec![DMatrix::identity(1, 1)],
        )
        .unwrap();
        let controls = EmControls { init: InitStrategy::User(bad), ..EmControls::default() };
        assert!(fit(&design, &controls).is_err());
    }
}
