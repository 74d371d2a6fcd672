//! Domain types: model specification, parameter bundle, data and design
//! matrices, parameter packing and the identifiability check.
//!
//! Component and equation indices are zero-based throughout the library.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{checked_cholesky, half_len, half_vec_index, lower_positions};

/// Dimensions of a mixture-SUR model and the regressor columns used by each
/// equation.
///
/// `regressors[d]` lists pool column indices entering equation `d`. The same
/// pool column may appear in several equations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    n_components: usize,
    regressors: Vec<Vec<usize>>,
}

impl ModelSpec {
    pub fn new(n_components: usize, regressors: Vec<Vec<usize>>) -> Result<Self> {
        if regressors.is_empty() {
            return Err(Error::InvalidSpec("at least one response is required".into()));
        }
        if n_components == 0 {
            return Err(Error::InvalidSpec("at least one component is required".into()));
        }
        Ok(Self {
            n_components,
            regressors,
        })
    }

    /// Same regressor layout with a different number of components.
    pub fn with_components(&self, n_components: usize) -> Result<Self> {
        Self::new(n_components, self.regressors.clone())
    }

    /// D.
    pub fn n_responses(&self) -> usize {
        self.regressors.len()
    }

    /// K.
    pub fn n_components(&self) -> usize {
        self.n_components
    }

    pub fn regressors(&self) -> &[Vec<usize>] {
        &self.regressors
    }

    /// P, the total number of slope coefficients.
    pub fn n_coefficients(&self) -> usize {
        self.regressors.iter().map(Vec::len).sum()
    }

    /// Offset of equation `d` inside β.
    pub fn coefficient_offset(&self, d: usize) -> usize {
        self.regressors[..d].iter().map(Vec::len).sum()
    }

    /// Length of one component block θ_k = (λ_k, v(Σ_k)).
    pub fn component_block_len(&self) -> usize {
        let d = self.n_responses();
        d + half_len(d)
    }
}

/// Number of free parameters: (K−1) + P + K·D + K·D(D+1)/2.
pub fn count_parameters(spec: &ModelSpec) -> usize {
    (spec.n_components() - 1) + spec.n_coefficients() + spec.n_components() * spec.component_block_len()
}

/// Raw observations: responses plus a pool of candidate regressors.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: DMatrix<f64>,
    pool: DMatrix<f64>,
    response_names: Vec<String>,
    pool_names: Vec<String>,
}

impl Dataset {
    pub fn new(y: DMatrix<f64>, pool: DMatrix<f64>) -> Result<Self> {
        let response_names = (1..=y.ncols()).map(|d| format!("y{d}")).collect();
        let pool_names = (1..=pool.ncols()).map(|r| format!("x{r}")).collect();
        Self::with_names(y, pool, response_names, pool_names)
    }

    pub fn with_names(
        y: DMatrix<f64>,
        pool: DMatrix<f64>,
        response_names: Vec<String>,
        pool_names: Vec<String>,
    ) -> Result<Self> {
        if y.nrows() == 0 {
            return Err(Error::InvalidData("no observations".into()));
        }
        if y.ncols() == 0 {
            return Err(Error::InvalidData("no response columns".into()));
        }
        if pool.nrows() != y.nrows() {
            return Err(Error::InvalidData(format!(
                "response has {} rows but regressor pool has {}",
                y.nrows(),
                pool.nrows()
            )));
        }
        if response_names.len() != y.ncols() || pool_names.len() != pool.ncols() {
            return Err(Error::InvalidData("name count does not match column count".into()));
        }
        if y.iter().chain(pool.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite value".into()));
        }
        Ok(Self {
            y,
            pool,
            response_names,
            pool_names,
        })
    }

    pub fn n_obs(&self) -> usize {
        self.y.nrows()
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn pool(&self) -> &DMatrix<f64> {
        &self.pool
    }

    pub fn response_names(&self) -> &[String] {
        &self.response_names
    }

    pub fn pool_names(&self) -> &[String] {
        &self.pool_names
    }

    /// Copy of this dataset with a new response matrix (same regressors).
    pub fn with_responses(&self, y: DMatrix<f64>) -> Result<Self> {
        Self::with_names(
            y,
            self.pool.clone(),
            self.response_names.clone(),
            self.pool_names.clone(),
        )
    }
}

/// A dataset bound to a model specification.
///
/// Holds the per-equation regressor values concatenated into an `I × P`
/// matrix `x`, where column `p` belongs to equation `equation_of[p]`. Row `i`
/// of `x` together with `equation_of` is the sparse form of the block
/// diagonal `P × D` matrix X_i.
#[derive(Debug, Clone)]
pub struct Design {
    spec: ModelSpec,
    y: DMatrix<f64>,
    x: DMatrix<f64>,
    equation_of: Vec<usize>,
}

impl Design {
    pub fn new(data: &Dataset, spec: &ModelSpec) -> Result<Self> {
        if data.y.ncols() != spec.n_responses() {
            return Err(Error::InvalidSpec(format!(
                "spec has {} equations but data has {} responses",
                spec.n_responses(),
                data.y.ncols()
            )));
        }
        let n = data.n_obs();
        let p = spec.n_coefficients();
        let mut x = DMatrix::zeros(n, p);
        let mut equation_of = Vec::with_capacity(p);
        let mut col = 0;
        for (d, cols) in spec.regressors().iter().enumerate() {
            for &c in cols {
                if c >= data.pool.ncols() {
                    return Err(Error::IndexOutOfRange {
                        what: "regressor column",
                        index: c,
                        limit: data.pool.ncols(),
                    });
                }
                x.set_column(col, &data.pool.column(c));
                equation_of.push(d);
                col += 1;
            }
        }
        Ok(Self {
            spec: spec.clone(),
            y: data.y.clone(),
            x,
            equation_of,
        })
    }

    /// Design over a given response matrix, reusing this design's regressors.
    pub(crate) fn with_responses(&self, y: DMatrix<f64>) -> Self {
        debug_assert_eq!(y.shape(), self.y.shape());
        Self {
            spec: self.spec.clone(),
            y,
            x: self.x.clone(),
            equation_of: self.equation_of.clone(),
        }
    }

    /// Same observations under a different number of components.
    pub fn with_components(&self, n_components: usize) -> Result<Self> {
        Ok(Self {
            spec: self.spec.with_components(n_components)?,
            y: self.y.clone(),
            x: self.x.clone(),
            equation_of: self.equation_of.clone(),
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn n_obs(&self) -> usize {
        self.y.nrows()
    }

    pub fn n_responses(&self) -> usize {
        self.y.ncols()
    }

    pub fn n_components(&self) -> usize {
        self.spec.n_components()
    }

    pub fn n_coefficients(&self) -> usize {
        self.x.ncols()
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn y_row(&self, i: usize) -> DVector<f64> {
        self.y.row(i).transpose()
    }

    /// Concatenated regressor values (`I × P`).
    pub fn regressor_values(&self) -> &DMatrix<f64> {
        &self.x
    }

    /// Equation index of every coefficient in β.
    pub fn equation_of(&self) -> &[usize] {
        &self.equation_of
    }

    /// X_i'β: per-equation linear predictor without intercept.
    pub fn linear_predictor(&self, i: usize, beta: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.n_responses());
        for (p, &d) in self.equation_of.iter().enumerate() {
            out[d] += self.x[(i, p)] * beta[p];
        }
        out
    }

    /// X_i b for a D-vector b.
    pub fn apply(&self, i: usize, b: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.n_coefficients(),
            self.equation_of
                .iter()
                .enumerate()
                .map(|(p, &d)| self.x[(i, p)] * b[d]),
        )
    }

    /// Adds `weight · X_i M X_i'` into the `P × P` accumulator.
    pub(crate) fn add_quadratic(&self, i: usize, m: &DMatrix<f64>, weight: f64, acc: &mut DMatrix<f64>) {
        let p = self.n_coefficients();
        for a in 0..p {
            let xa = weight * self.x[(i, a)];
            let da = self.equation_of[a];
            for b in 0..p {
                acc[(a, b)] += xa * self.x[(i, b)] * m[(da, self.equation_of[b])];
            }
        }
    }

    /// Dense `P × D` block-diagonal matrix X_i.
    pub fn design_matrix(&self, i: usize) -> Result<DMatrix<f64>> {
        if i >= self.n_obs() {
            return Err(Error::IndexOutOfRange {
                what: "observation",
                index: i,
                limit: self.n_obs(),
            });
        }
        let mut m = DMatrix::zeros(self.n_coefficients(), self.n_responses());
        for (p, &d) in self.equation_of.iter().enumerate() {
            m[(p, d)] = self.x[(i, p)];
        }
        Ok(m)
    }
}

/// Augmented `(D·K + P) × D` matrix X_ki = [O_k; X_i], so that
/// X_ki'γ = λ_k + X_i'β for γ = (λ_1, …, λ_K, β).
pub fn augmented_design(k: usize, n_components: usize, x_i: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if k >= n_components {
        return Err(Error::IndexOutOfRange {
            what: "component",
            index: k,
            limit: n_components,
        });
    }
    let d = x_i.ncols();
    let p = x_i.nrows();
    let mut m = DMatrix::zeros(d * n_components + p, d);
    for j in 0..d {
        m[(k * d + j, j)] = 1.0;
    }
    m.view_mut((d * n_components, 0), (p, d)).copy_from(x_i);
    Ok(m)
}

/// Mixture weights, shared slopes, component intercepts and covariances.
#[derive(Debug, Clone, PartialEq)]
pub struct Theta {
    pub pi: DVector<f64>,
    pub beta: DVector<f64>,
    pub lambda: Vec<DVector<f64>>,
    pub sigma: Vec<DMatrix<f64>>,
}

const WEIGHT_SUM_TOL: f64 = 1e-12;
const SYMMETRY_TOL: f64 = 1e-12;

impl Theta {
    /// Validating constructor.
    pub fn new(
        pi: DVector<f64>,
        beta: DVector<f64>,
        lambda: Vec<DVector<f64>>,
        sigma: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        let theta = Self {
            pi,
            beta,
            lambda,
            sigma,
        };
        theta.validate()?;
        Ok(theta)
    }

    pub fn n_components(&self) -> usize {
        self.pi.len()
    }

    pub fn n_responses(&self) -> usize {
        self.lambda.first().map_or(0, |l| l.len())
    }

    fn validate(&self) -> Result<()> {
        let k = self.pi.len();
        if k == 0 || self.lambda.len() != k || self.sigma.len() != k {
            return Err(Error::InvalidTheta("component counts disagree".into()));
        }
        let d = self.lambda[0].len();
        if d == 0 {
            return Err(Error::InvalidTheta("zero-dimensional response".into()));
        }
        for (c, &w) in self.pi.iter().enumerate() {
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::DegenerateWeight { component: c });
            }
        }
        if (self.pi.sum() - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidTheta(format!("weights sum to {}", self.pi.sum())));
        }
        if self.beta.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidTheta("non-finite coefficient".into()));
        }
        for (c, (l, s)) in self.lambda.iter().zip(&self.sigma).enumerate() {
            if l.len() != d || s.nrows() != d || s.ncols() != d {
                return Err(Error::InvalidTheta(format!("component {c} has wrong shape")));
            }
            if l.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidTheta(format!("component {c} intercept non-finite")));
            }
            let scale = s.amax().max(1.0);
            if (s - s.transpose()).amax() > SYMMETRY_TOL * scale {
                return Err(Error::InvalidTheta(format!("covariance {c} not symmetric")));
            }
            if checked_cholesky(s).is_none() {
                return Err(Error::SingularCovariance { component: c });
            }
        }
        Ok(())
    }

    /// Components reordered so that new component `j` is old component `order[j]`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            pi: DVector::from_iterator(order.len(), order.iter().map(|&o| self.pi[o])),
            beta: self.beta.clone(),
            lambda: order.iter().map(|&o| self.lambda[o].clone()).collect(),
            sigma: order.iter().map(|&o| self.sigma[o].clone()).collect(),
        }
    }

    /// γ = (λ_1', …, λ_K', β')'.
    pub fn pack_gamma(&self) -> DVector<f64> {
        let parts: Vec<f64> = self
            .lambda
            .iter()
            .flat_map(|l| l.iter().copied())
            .chain(self.beta.iter().copied())
            .collect();
        DVector::from_vec(parts)
    }
}

/// Half-vectorization v(A): lower-triangle columns stacked.
pub fn half_vec(a: &DMatrix<f64>) -> DVector<f64> {
    let d = a.nrows();
    DVector::from_iterator(half_len(d), lower_positions(d).map(|(r, c)| a[(r, c)]))
}

/// Symmetric matrix rebuilt from its half-vector.
pub fn from_half_vec(v: &[f64], dim: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(dim, dim);
    for (r, c) in lower_positions(dim) {
        let x = v[half_vec_index(dim, r, c)];
        m[(r, c)] = x;
        m[(c, r)] = x;
    }
    m
}

/// Flat parameter vector ordered (π_1..π_{K−1}, β, θ_1, …, θ_K) with
/// θ_k = (λ_k, v(Σ_k)).
#[derive(Debug, Clone, PartialEq)]
pub struct PackedTheta(pub DVector<f64>);

impl PackedTheta {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }
}

pub fn pack(theta: &Theta) -> PackedTheta {
    let k = theta.n_components();
    let mut out: Vec<f64> = theta.pi.iter().take(k - 1).copied().collect();
    out.extend(theta.beta.iter());
    for (l, s) in theta.lambda.iter().zip(&theta.sigma) {
        out.extend(l.iter());
        out.extend(half_vec(s).iter());
    }
    PackedTheta(DVector::from_vec(out))
}

pub fn unpack(packed: &PackedTheta, spec: &ModelSpec) -> Result<Theta> {
    let k = spec.n_components();
    let d = spec.n_responses();
    let p = spec.n_coefficients();
    let expected = count_parameters(spec);
    if packed.len() != expected {
        return Err(Error::InvalidTheta(format!(
            "packed length {} but spec needs {expected}",
            packed.len()
        )));
    }
    let v = packed.as_slice();
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidTheta("non-finite packed entry".into()));
    }
    let free = &v[..k - 1];
    let last = 1.0 - free.iter().sum::<f64>();
    if last <= 0.0 {
        return Err(Error::DegenerateWeight { component: k - 1 });
    }
    let pi = DVector::from_iterator(k, free.iter().copied().chain(std::iter::once(last)));
    let beta = DVector::from_column_slice(&v[k - 1..k - 1 + p]);
    let block = spec.component_block_len();
    let mut lambda = Vec::with_capacity(k);
    let mut sigma = Vec::with_capacity(k);
    for c in 0..k {
        let start = k - 1 + p + c * block;
        lambda.push(DVector::from_column_slice(&v[start..start + d]));
        sigma.push(from_half_vec(&v[start + d..start + block], d));
    }
    Theta::new(pi, beta, lambda, sigma)
}

/// A failing equation in the identifiability check.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RankViolation {
    pub equation: usize,
    pub rank: usize,
    pub required: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Default)]
pub struct IdentifiabilityReport {
    pub violations: Vec<RankViolation>,
}

impl IdentifiabilityReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Numerical rank via singular values, tolerance `max(rows, cols)·ε·σ_max`.
pub fn numerical_rank(m: &DMatrix<f64>) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.clone().singular_values();
    let smax = sv.max();
    let tol = m.nrows().max(m.ncols()) as f64 * f64::EPSILON * smax;
    sv.iter().filter(|&&s| s > tol).count()
}

/// For every equation with regressors, requires `[1 | x_d]` to have full
/// column rank, i.e. the regressor rows do not lie on a common hyperplane.
pub fn check_identifiability(design: &Design) -> IdentifiabilityReport {
    let spec = design.spec();
    let n = design.n_obs();
    let mut violations = Vec::new();
    for d in 0..spec.n_responses() {
        let pd = spec.regressors()[d].len();
        if pd == 0 {
            continue;
        }
        let off = spec.coefficient_offset(d);
        let mut m = DMatrix::from_element(n, pd + 1, 1.0);
        m.view_mut((0, 1), (n, pd))
            .copy_from(&design.regressor_values().columns(off, pd));
        let rank = numerical_rank(&m);
        if rank < pd + 1 {
            violations.push(RankViolation {
                equation: d,
                rank,
                required: pd + 1,
            });
        }
    }
    IdentifiabilityReport { violations }
}
