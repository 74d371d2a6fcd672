//! Matrix-calculus layer: vec/v operators, the duplication matrix, and the
//! analytic score vector and Hessian of the mixture-SUR log-likelihood in the
//! packed parametrization (π_1..π_{K−1}, β, θ_1, …, θ_K).
//!
//! Kronecker products such as (b'⊗Σ⁻¹)G are evaluated entrywise from the
//! index pattern of the duplication matrix instead of being materialized.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::likelihood::{log_densities_with, log_likelihood, ComponentWorkspace, Posteriors};
use crate::linalg::{half_len, half_vec_index, lower_positions};
use crate::model::{count_parameters, pack, unpack, Design, ModelSpec, PackedTheta, Theta};

pub use crate::model::{from_half_vec, half_vec};

/// vec(A): columns stacked.
pub fn vec(a: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(a.as_slice())
}

/// The `D² × D(D+1)/2` zero/one matrix G with G·v(A) = vec(A) for symmetric A.
#[derive(Debug, Clone, PartialEq)]
pub struct DuplicationMatrix {
    pub g: DMatrix<f64>,
}

pub fn duplication_matrix(dim: usize) -> DuplicationMatrix {
    let mut g = DMatrix::zeros(dim * dim, half_len(dim));
    for c in 0..dim {
        for r in 0..dim {
            let (hi, lo) = if r >= c { (r, c) } else { (c, r) };
            g[(c * dim + r, half_vec_index(dim, hi, lo))] = 1.0;
        }
    }
    DuplicationMatrix { g }
}

/// G'vec(A) for symmetric A: diagonal entries once, off-diagonal entries twice.
pub(crate) fn dup_transpose_vec(a: &DMatrix<f64>) -> DVector<f64> {
    let d = a.nrows();
    DVector::from_iterator(
        half_len(d),
        lower_positions(d).map(|(r, c)| if r == c { a[(r, c)] } else { a[(r, c)] + a[(c, r)] }),
    )
}

/// Index pairs (a, b) with E_u = Σ e_a e_b' for half-vector position u.
fn unit_pairs(r: usize, c: usize) -> ([(usize, usize); 2], usize) {
    if r == c {
        ([(r, r), (r, r)], 1)
    } else {
        ([(r, c), (c, r)], 2)
    }
}

/// (b'⊗S)G as a `D × D(D+1)/2` matrix: column u is S·E_u·b.
fn kron_row_dup(b: &DVector<f64>, s: &DMatrix<f64>) -> DMatrix<f64> {
    let d = b.len();
    let mut out = DMatrix::zeros(d, half_len(d));
    for (u, (r, c)) in lower_positions(d).enumerate() {
        for row in 0..d {
            out[(row, u)] = if r == c {
                s[(row, r)] * b[r]
            } else {
                s[(row, r)] * b[c] + s[(row, c)] * b[r]
            };
        }
    }
    out
}

/// ½ G'[(M)⊗S]G with entry (u, w) = ½ tr(E_u S E_w M) for symmetric M, S.
fn dup_kron_dup(m: &DMatrix<f64>, s: &DMatrix<f64>) -> DMatrix<f64> {
    let d = m.nrows();
    let positions: Vec<(usize, usize)> = lower_positions(d).collect();
    let n = positions.len();
    let mut out = DMatrix::zeros(n, n);
    for (u, &(r1, c1)) in positions.iter().enumerate() {
        let (pu, nu) = unit_pairs(r1, c1);
        for (w, &(r2, c2)) in positions.iter().enumerate().skip(u) {
            let (pw, nw) = unit_pairs(r2, c2);
            let mut acc = 0.0;
            for &(a, b) in &pu[..nu] {
                for &(g, h) in &pw[..nw] {
                    acc += s[(b, g)] * m[(h, a)];
                }
            }
            out[(u, w)] = 0.5 * acc;
            out[(w, u)] = 0.5 * acc;
        }
    }
    out
}

/// Score vector split into its parameter blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreBlocks {
    pub d_pi: DVector<f64>,
    pub d_beta: DVector<f64>,
    pub d_theta: Vec<DVector<f64>>,
}

impl ScoreBlocks {
    /// Concatenation in packed order.
    pub fn to_packed(&self) -> DVector<f64> {
        let v: Vec<f64> = self
            .d_pi
            .iter()
            .chain(self.d_beta.iter())
            .chain(self.d_theta.iter().flat_map(|t| t.iter()))
            .copied()
            .collect();
        DVector::from_vec(v)
    }
}

/// Full symmetric Hessian in packed order.
#[derive(Debug, Clone, PartialEq)]
pub struct HessianBlocks {
    pub matrix: DMatrix<f64>,
    /// max |H − H'| before symmetrization, relative to max |H|.
    pub asymmetry: f64,
}

const HESSIAN_ASYMMETRY_TOL: f64 = 1e-10;

/// Per-observation, per-component ingredients b_ki, B_ki, c_ki.
struct Ingredients {
    alpha: DMatrix<f64>,
    b: Vec<Vec<DVector<f64>>>,
    c: Vec<Vec<DVector<f64>>>,
}

fn ingredients(theta: &Theta, design: &Design) -> Result<(ComponentWorkspace, Ingredients)> {
    for (c, &w) in theta.pi.iter().enumerate() {
        if !(w > 0.0 && w < 1.0) && theta.n_components() > 1 {
            return Err(Error::DegenerateWeight { component: c });
        }
    }
    if theta.n_components() != design.n_components()
        || theta.beta.len() != design.n_coefficients()
        || theta.n_responses() != design.n_responses()
    {
        return Err(Error::InvalidTheta("parameter shapes do not match the design".into()));
    }
    let ws = ComponentWorkspace::new(theta)?;
    let alpha = Posteriors::from_log_densities(&log_densities_with(&ws, theta, design)).0;
    let n = design.n_obs();
    let k = theta.n_components();
    let mut b = Vec::with_capacity(n);
    let mut c = Vec::with_capacity(n);
    for i in 0..n {
        let base = design.y_row(i) - design.linear_predictor(i, &theta.beta);
        let mut bi = Vec::with_capacity(k);
        let mut ci = Vec::with_capacity(k);
        for comp in 0..k {
            let s = &ws.precision[comp];
            let bk = s * (&base - &theta.lambda[comp]);
            let big_b = s - &bk * bk.transpose();
            let tail = dup_transpose_vec(&big_b) * -0.5;
            let mut ck = DVector::zeros(bk.len() + tail.len());
            ck.rows_mut(0, bk.len()).copy_from(&bk);
            ck.rows_mut(bk.len(), tail.len()).copy_from(&tail);
            bi.push(bk);
            ci.push(ck);
        }
        b.push(bi);
        c.push(ci);
    }
    Ok((ws, Ingredients { alpha, b, c }))
}

/// a_k: e_k/π_k for k < K−1, −(1/π_K)·1 for the last component.
fn weight_direction(pi: &DVector<f64>, k: usize) -> DVector<f64> {
    let free = pi.len() - 1;
    if k < free {
        let mut a = DVector::zeros(free);
        a[k] = 1.0 / pi[k];
        a
    } else {
        DVector::from_element(free, -1.0 / pi[free])
    }
}

/// Analytic score of l(θ).
pub fn score(theta: &Theta, design: &Design) -> Result<ScoreBlocks> {
    let (_, ing) = ingredients(theta, design)?;
    let k = theta.n_components();
    let directions: Vec<DVector<f64>> = (0..k).map(|c| weight_direction(&theta.pi, c)).collect();
    let mut d_pi = DVector::zeros(k - 1);
    let mut d_beta = DVector::zeros(design.n_coefficients());
    let mut d_theta = vec![DVector::zeros(design.spec().component_block_len()); k];
    for i in 0..design.n_obs() {
        let mut b_bar = DVector::zeros(design.n_responses());
        for c in 0..k {
            let a = ing.alpha[(i, c)];
            d_pi.axpy(a, &directions[c], 1.0);
            b_bar.axpy(a, &ing.b[i][c], 1.0);
            d_theta[c].axpy(a, &ing.c[i][c], 1.0);
        }
        d_beta += design.apply(i, &b_bar);
    }
    Ok(ScoreBlocks { d_pi, d_beta, d_theta })
}

/// Analytic Hessian of l(θ), assembled block by block.
pub fn hessian(theta: &Theta, design: &Design) -> Result<HessianBlocks> {
    let (ws, ing) = ingredients(theta, design)?;
    let k = theta.n_components();
    let d = design.n_responses();
    let p = design.n_coefficients();
    let free = k - 1;
    let block = design.spec().component_block_len();
    let npar = count_parameters(design.spec());
    let beta_off = free;
    let theta_off = |c: usize| free + p + c * block;
    let directions: Vec<DVector<f64>> = (0..k).map(|c| weight_direction(&theta.pi, c)).collect();

    let mut h = DMatrix::<f64>::zeros(npar, npar);
    for i in 0..design.n_obs() {
        let alpha: Vec<f64> = (0..k).map(|c| ing.alpha[(i, c)]).collect();
        let mut a_bar = DVector::zeros(free);
        let mut b_bar = DVector::zeros(d);
        let mut b_mix = DMatrix::zeros(d, d);
        let mut ab = DMatrix::zeros(free, d);
        for c in 0..k {
            a_bar.axpy(alpha[c], &directions[c], 1.0);
            b_bar.axpy(alpha[c], &ing.b[i][c], 1.0);
            let bk = &ing.b[i][c];
            b_mix += (&ws.precision[c] - bk * bk.transpose()) * alpha[c];
            ab += &directions[c] * bk.transpose() * alpha[c];
        }

        // ππ'
        if free > 0 {
            let pp = -(&a_bar * a_bar.transpose());
            let mut view = h.view_mut((0, 0), (free, free));
            view += pp;
        }

        // πβ'
        if free > 0 && p > 0 {
            let m = ab - &a_bar * b_bar.transpose();
            for j in 0..free {
                let row = design.apply(i, &m.row(j).transpose());
                for q in 0..p {
                    h[(j, beta_off + q)] += row[q];
                }
            }
        }

        // ββ'
        if p > 0 {
            let inner = &b_mix + &b_bar * b_bar.transpose();
            let mut acc = DMatrix::zeros(p, p);
            design.add_quadratic(i, &inner, -1.0, &mut acc);
            let mut view = h.view_mut((beta_off, beta_off), (p, p));
            view += acc;
        }

        for c in 0..k {
            let a = alpha[c];
            if a == 0.0 {
                continue;
            }
            let bk = &ing.b[i][c];
            let ck = &ing.c[i][c];
            let s = &ws.precision[c];
            let t = kron_row_dup(bk, s);
            let to = theta_off(c);

            // πθ_k'
            if free > 0 {
                let m = (&directions[c] - &a_bar) * ck.transpose() * a;
                let mut view = h.view_mut((0, to), (free, block));
                view += m;
            }

            // βθ_k': −α X_i [F − (b − b̄)c']
            if p > 0 {
                let mut f = DMatrix::zeros(d, block);
                f.view_mut((0, 0), (d, d)).copy_from(s);
                f.view_mut((0, d), (d, block - d)).copy_from(&t);
                f -= (bk - &b_bar) * ck.transpose();
                let x = design.regressor_values();
                let eq = design.equation_of();
                for q in 0..p {
                    let xq = -a * x[(i, q)];
                    for col in 0..block {
                        h[(beta_off + q, to + col)] += xq * f[(eq[q], col)];
                    }
                }
            }

            // θ_kθ_k': −α [C − (1 − α) c c']
            let m = s - (s - bk * bk.transpose()) * 2.0;
            let mut cmat = DMatrix::zeros(block, block);
            cmat.view_mut((0, 0), (d, d)).copy_from(s);
            cmat.view_mut((0, d), (d, block - d)).copy_from(&t);
            cmat.view_mut((d, 0), (block - d, d)).copy_from(&t.transpose());
            cmat.view_mut((d, d), (block - d, block - d)).copy_from(&dup_kron_dup(&m, s));
            cmat -= ck * ck.transpose() * (1.0 - a);
            {
                let mut view = h.view_mut((to, to), (block, block));
                view -= cmat * a;
            }

            // θ_kθ_h': −α_k α_h c_k c_h'
            for other in 0..k {
                if other == c {
                    continue;
                }
                let w = a * alpha[other];
                if w == 0.0 {
                    continue;
                }
                let m = ck * ing.c[i][other].transpose() * w;
                let mut view = h.view_mut((to, theta_off(other)), (block, block));
                view -= m;
            }
        }
    }

    // lower blocks for π and β rows from their transposes
    let upper_end = free + p;
    for r in 0..upper_end {
        for col in (r + 1)..npar {
            if col >= upper_end || r < free && col >= free {
                h[(col, r)] = h[(r, col)];
            }
        }
    }

    let scale = h.amax().max(f64::MIN_POSITIVE);
    let asymmetry = (&h - h.transpose()).amax() / scale;
    if asymmetry > HESSIAN_ASYMMETRY_TOL {
        return Err(Error::InvalidTheta(format!("Hessian asymmetry {asymmetry:e} exceeds tolerance")));
    }
    let matrix = (&h + h.transpose()) * 0.5;
    Ok(HessianBlocks { matrix, asymmetry })
}

/// −H.
pub fn observed_information(h: &HessianBlocks) -> DMatrix<f64> {
    -h.matrix.clone()
}

/// (−H)⁻¹ through an equilibrated Cholesky factorization.
pub fn covariance_of_estimates(h: &HessianBlocks) -> Result<DMatrix<f64>> {
    let info = observed_information(h);
    let n = info.nrows();
    let diag: Vec<f64> = (0..n).map(|j| info[(j, j)]).collect();
    if diag.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::NotPositiveDefinite);
    }
    let scale: Vec<f64> = diag.iter().map(|v| v.sqrt()).collect();
    let scaled = DMatrix::from_fn(n, n, |r, c| info[(r, c)] / (scale[r] * scale[c]));
    let chol = nalgebra::Cholesky::new(scaled).ok_or(Error::NotPositiveDefinite)?;
    let inv = chol.inverse();
    let cov = DMatrix::from_fn(n, n, |r, c| inv[(r, c)] / (scale[r] * scale[c]));
    Ok((&cov + cov.transpose()) * 0.5)
}

/// Finite-difference step for packed coordinate `j`.
///
/// The base step is `max(1, |θ_j|)·1e-5`; steps on free weights are shrunk so
/// that both the perturbed weight and π_K stay positive.
pub fn fd_step(packed: &PackedTheta, j: usize, n_components: usize) -> f64 {
    let v = packed.as_slice();
    let mut h = v[j].abs().max(1.0) * 1e-5;
    let free = n_components - 1;
    if j < free {
        let last = 1.0 - v[..free].iter().sum::<f64>();
        h = h.min(0.25 * v[j].min(last));
    }
    h
}

/// Central difference of `f` along packed coordinate `j` with step `h`.
fn central<T, F>(base: &PackedTheta, spec: &ModelSpec, j: usize, h: f64, f: &F) -> Result<T>
where
    T: std::ops::Sub<Output = T> + std::ops::Div<f64, Output = T>,
    F: Fn(&Theta) -> Result<T>,
{
    let mut up = base.clone();
    up.0[j] += h;
    let mut down = base.clone();
    down.0[j] -= h;
    Ok((f(&unpack(&up, spec)?)? - f(&unpack(&down, spec)?)?) / (2.0 * h))
}

/// Central difference at `h`, or its Richardson extrapolation from `h` and `h/2`.
fn derivative<T, F>(base: &PackedTheta, spec: &ModelSpec, j: usize, richardson: bool, f: &F) -> Result<T>
where
    T: std::ops::Sub<Output = T> + std::ops::Div<f64, Output = T> + std::ops::Mul<f64, Output = T>,
    F: Fn(&Theta) -> Result<T>,
{
    let h = fd_step(base, j, spec.n_components());
    let coarse = central(base, spec, j, h, f)?;
    if !richardson {
        return Ok(coarse);
    }
    let fine = central(base, spec, j, 0.5 * h, f)?;
    Ok((fine * 4.0 - coarse) / 3.0)
}

/// Central finite differences of l(θ) in the packed coordinates.
pub fn numerical_score(theta: &Theta, design: &Design) -> Result<DVector<f64>> {
    numerical_score_with(theta, design, false)
}

/// As [`numerical_score`], optionally Richardson-extrapolated.
pub fn numerical_score_with(theta: &Theta, design: &Design, richardson: bool) -> Result<DVector<f64>> {
    let spec = design.spec();
    let base = pack(theta);
    let ll = |t: &Theta| log_likelihood(t, design);
    let mut out = DVector::zeros(base.len());
    for j in 0..base.len() {
        out[j] = derivative(&base, spec, j, richardson, &ll)?;
    }
    Ok(out)
}

/// Central finite differences of the analytic score (column `j` = ∂score/∂θ_j).
pub fn numerical_hessian(theta: &Theta, design: &Design) -> Result<DMatrix<f64>> {
    numerical_hessian_with(theta, design, false)
}

/// As [`numerical_hessian`], optionally Richardson-extrapolated.
pub fn numerical_hessian_with(theta: &Theta, design: &Design, richardson: bool) -> Result<DMatrix<f64>> {
    let spec = design.spec();
    let base = pack(theta);
    let n = base.len();
    let sc = |t: &Theta| score(t, design).map(|s| s.to_packed());
    let mut out = DMatrix::zeros(n, n);
    for j in 0..n {
        out.set_column(j, &derivative(&base, spec, j, richardson, &sc)?);
    }
    Ok(out)
}

/// |a − b| / max(|a|, |b|, 1).
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

pub const SCORE_TOLERANCE: f64 = 1e-6;
pub const HESSIAN_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, Copy, Default)]
pub struct GradcheckOptions {
    /// Corrupts the analytic derivatives before comparison; used to confirm
    /// the harness detects a wrong formula.
    pub perturb_analytic: bool,
    /// Extrapolates each difference from steps h and h/2, which removes the
    /// leading truncation term on badly scaled coordinates.
    pub richardson: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub n_parameters: usize,
    pub score_max_rel_error: f64,
    pub score_worst_index: usize,
    pub hessian_max_rel_error: f64,
    pub hessian_worst_index: (usize, usize),
    pub score_tolerance: f64,
    pub hessian_tolerance: f64,
    pub richardson: bool,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.score_max_rel_error < self.score_tolerance && self.hessian_max_rel_error < self.hessian_tolerance
    }
}

/// Compares the analytic score and Hessian against central finite differences.
pub fn gradcheck(theta: &Theta, design: &Design, options: GradcheckOptions) -> Result<GradcheckReport> {
    let mut analytic_score = score(theta, design)?.to_packed();
    let mut analytic_hessian = hessian(theta, design)?.matrix;
    if options.perturb_analytic {
        for v in analytic_score.iter_mut().chain(analytic_hessian.iter_mut()) {
            *v *= 1.0 + 1e-3;
            *v += 1e-3;
        }
    }
    let fd_score = numerical_score_with(theta, design, options.richardson)?;
    let fd_hessian = numerical_hessian_with(theta, design, options.richardson)?;
    let mut report = GradcheckReport {
        n_parameters: fd_score.len(),
        score_max_rel_error: 0.0,
        score_worst_index: 0,
        hessian_max_rel_error: 0.0,
        hessian_worst_index: (0, 0),
        score_tolerance: SCORE_TOLERANCE,
        hessian_tolerance: HESSIAN_TOLERANCE,
        richardson: options.richardson,
    };
    for j in 0..fd_score.len() {
        let e = relative_error(analytic_score[j], fd_score[j]);
        if e > report.score_max_rel_error {
            report.score_max_rel_error = e;
            report.score_worst_index = j;
        }
        for r in 0..fd_score.len() {
            let e = relative_error(analytic_hessian[(r, j)], fd_hessian[(r, j)]);
            if e > report.hessian_max_rel_error {
                report.hessian_max_rel_error = e;
                report.hessian_worst_index = (r, j);
            }
        }
    }
    Ok(report)
}
