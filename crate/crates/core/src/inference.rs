//! Model selection, asymptotic intervals, MAP clustering and the χ²
//! association table.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::calculus::{covariance_of_estimates, hessian};
use crate::em::{fit, Convergence, EmControls, FitResult};
use crate::error::{Error, Result};
use crate::likelihood::Posteriors;
use crate::model::{Dataset, Design, ModelSpec};

/// Largest grid `search` will enumerate.
pub const MAX_SEARCH_CELLS: u128 = 1 << 20;

/// BIC with the larger-is-better sign: 2·l − npar·ln I.
pub fn bic(loglik: f64, npar: usize, n_obs: usize) -> f64 {
    2.0 * loglik - npar as f64 * (n_obs as f64).ln()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntervalEstimate {
    pub point: f64,
    pub se: f64,
    pub lo: f64,
    pub hi: f64,
    pub level: f64,
}

/// Two-sided normal interval point ± z·se.
pub fn interval(point: f64, se: f64, level: f64) -> Result<IntervalEstimate> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidSpec(format!("confidence level {level} outside (0, 1)")));
    }
    if !(se >= 0.0) {
        return Err(Error::InvalidSpec(format!("standard error {se} is negative or NaN")));
    }
    let z = Normal::standard().inverse_cdf(0.5 * (1.0 + level));
    Ok(IntervalEstimate {
        point,
        se,
        lo: point - z * se,
        hi: point + z * se,
        level,
    })
}

/// Interval for one regression coefficient.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoefficientInterval {
    pub equation: usize,
    /// Column of the regressor pool.
    pub regressor: usize,
    pub estimate: IntervalEstimate,
}

/// Standard errors from the inverse observed information and normal
/// intervals for every β_j.
pub fn coefficient_inference(fit: &FitResult, design: &Design, level: f64) -> Result<Vec<CoefficientInterval>> {
    let h = hessian(&fit.theta, design)?;
    let cov = covariance_of_estimates(&h)?;
    let offset = fit.theta.n_components() - 1;
    let spec = design.spec();
    let mut out = Vec::with_capacity(spec.n_coefficients());
    for (d, regs) in spec.regressors().iter().enumerate() {
        for (q, &col) in regs.iter().enumerate() {
            let j = spec.coefficient_offset(d) + q;
            let var = cov[(offset + j, offset + j)];
            if !(var > 0.0) {
                return Err(Error::NotPositiveDefinite);
            }
            out.push(CoefficientInterval {
                equation: d,
                regressor: col,
                estimate: interval(fit.theta.beta[j], var.sqrt(), level)?,
            });
        }
    }
    Ok(out)
}

/// MAP labels, 1-based; ties go to the lower component.
pub fn classify(p: &Posteriors) -> Vec<usize> {
    (0..p.n_obs())
        .map(|i| {
            let mut best = 0;
            for k in 1..p.n_components() {
                if p.0[(i, k)] > p.0[(i, best)] {
                    best = k;
                }
            }
            best + 1
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChiSquareTest {
    pub chi2: f64,
    pub df: usize,
    pub p_value: f64,
}

/// Pearson χ² (no continuity correction) for a table of counts.
pub fn chi_square_counts(table: &DMatrix<f64>) -> Result<ChiSquareTest> {
    let (r, c) = table.shape();
    if r < 2 || c < 2 {
        return Err(Error::DegenerateTable(format!("{r}x{c} table needs at least two levels per margin")));
    }
    if table.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::DegenerateTable("counts must be finite and non-negative".into()));
    }
    let total = table.sum();
    let rows: Vec<f64> = (0..r).map(|i| table.row(i).sum()).collect();
    let cols: Vec<f64> = (0..c).map(|j| table.column(j).sum()).collect();
    let mut chi2 = 0.0;
    for i in 0..r {
        for j in 0..c {
            let e = rows[i] * cols[j] / total;
            if !(e > 0.0) {
                return Err(Error::DegenerateTable(format!("expected count in cell ({i}, {j}) is zero")));
            }
            chi2 += (table[(i, j)] - e).powi(2) / e;
        }
    }
    let df = (r - 1) * (c - 1);
    let dist = ChiSquared::new(df as f64).map_err(|e| Error::DegenerateTable(e.to_string()))?;
    Ok(ChiSquareTest {
        chi2,
        df,
        p_value: dist.sf(chi2),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrossTab {
    /// Distinct labels in ascending order (table rows).
    pub row_levels: Vec<usize>,
    /// Distinct factor levels in ascending order (table columns).
    pub col_levels: Vec<String>,
    pub counts: Vec<Vec<u64>>,
    pub test: ChiSquareTest,
}

/// Cross-tabulates cluster labels against a categorical factor and tests
/// association.
pub fn crosstab_chi_square<S: AsRef<str>>(labels: &[usize], factor: &[S]) -> Result<CrossTab> {
    if labels.len() != factor.len() {
        return Err(Error::InvalidData(format!(
            "{} labels but {} factor values",
            labels.len(),
            factor.len()
        )));
    }
    let mut cells: BTreeMap<(usize, String), u64> = BTreeMap::new();
    for (l, f) in labels.iter().zip(factor) {
        *cells.entry((*l, f.as_ref().to_string())).or_default() += 1;
    }
    let mut row_levels: Vec<usize> = labels.to_vec();
    row_levels.sort_unstable();
    row_levels.dedup();
    let mut col_levels: Vec<String> = factor.iter().map(|f| f.as_ref().to_string()).collect();
    col_levels.sort();
    col_levels.dedup();
    let counts: Vec<Vec<u64>> = row_levels
        .iter()
        .map(|&r| {
            col_levels
                .iter()
                .map(|c| cells.get(&(r, c.clone())).copied().unwrap_or(0))
                .collect()
        })
        .collect();
    let table = DMatrix::from_fn(row_levels.len(), col_levels.len(), |i, j| counts[i][j] as f64);
    let test = chi_square_counts(&table)?;
    Ok(CrossTab {
        row_levels,
        col_levels,
        counts,
        test,
    })
}

/// Candidate regressors per equation and component counts to enumerate.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchSpace {
    /// Pool columns eligible for each equation.
    pub candidates: Vec<Vec<usize>>,
    pub components: Vec<usize>,
}

impl SearchSpace {
    pub fn n_cells(&self) -> u128 {
        let bits: usize = self.candidates.iter().map(Vec::len).sum();
        let k = self.components.len() as u128;
        if bits >= 100 {
            return u128::MAX;
        }
        (1u128 << bits).saturating_mul(k)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum CellStatus {
    Fitted {
        loglik: f64,
        npar: usize,
        bic: f64,
        convergence: Convergence,
    },
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchCell {
    pub n_components: usize,
    /// Inclusion bits, one character per candidate, equations separated by '/'.
    pub mask: String,
    pub regressors: Vec<Vec<usize>>,
    pub n_coefficients: usize,
    pub status: CellStatus,
}

impl SearchCell {
    fn score(&self) -> Option<(f64, usize)> {
        match self.status {
            CellStatus::Fitted { bic, npar, .. } if bic.is_finite() => Some((bic, npar)),
            _ => None,
        }
    }
}

/// Ordering where `Less` means `a` is the better model.
fn better(a: &SearchCell, b: &SearchCell) -> Ordering {
    match (a.score(), b.score()) {
        (Some((ba, na)), Some((bb, nb))) => bb
            .partial_cmp(&ba)
            .unwrap_or(Ordering::Equal)
            .then(na.cmp(&nb))
            .then_with(|| a.mask.cmp(&b.mask))
            .then(a.n_components.cmp(&b.n_components)),
        (Some(_), None) => Ordering::Less,
        (None, Some(_)) => Ordering::Greater,
        (None, None) => Ordering::Equal,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BestByCount {
    pub n_components: usize,
    pub n_coefficients: usize,
    pub mask: String,
    pub loglik: f64,
    pub npar: usize,
    pub bic: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchGrid {
    /// Every cell, ordered by (K, mask).
    pub cells: Vec<SearchCell>,
    /// Best BIC for each (K, P) pair with at least one successful fit.
    pub best_by_count: Vec<BestByCount>,
    /// Index into `cells` of the overall winner.
    pub best: Option<usize>,
    pub best_fit: Option<FitResult>,
}

fn decode_mask(candidates: &[Vec<usize>], bits: u64) -> (String, Vec<Vec<usize>>) {
    let mut shift = 0;
    let mut mask = String::new();
    let mut regs = Vec::with_capacity(candidates.len());
    for (d, cand) in candidates.iter().enumerate() {
        if d > 0 {
            mask.push('/');
        }
        let mut chosen = Vec::new();
        for &col in cand {
            let on = bits >> shift & 1 == 1;
            mask.push(if on { '1' } else { '0' });
            if on {
                chosen.push(col);
            }
            shift += 1;
        }
        regs.push(chosen);
    }
    (mask, regs)
}

fn fit_cell(data: &Dataset, regressors: &[Vec<usize>], k: usize, controls: &EmControls) -> Result<FitResult> {
    let spec = ModelSpec::new(k, regressors.to_vec())?;
    let design = Design::new(data, &spec)?;
    fit(&design, controls)
}

/// Exhaustive search over regressor subsets and component counts.
pub fn search(data: &Dataset, space: &SearchSpace, controls: &EmControls) -> Result<SearchGrid> {
    let cells = space.n_cells();
    if cells > MAX_SEARCH_CELLS {
        return Err(Error::EnumerationTooLarge {
            cells,
            limit: MAX_SEARCH_CELLS,
        });
    }
    if space.components.is_empty() || space.components.contains(&0) {
        return Err(Error::InvalidSpec("component range must be non-empty and positive".into()));
    }
    if space.candidates.len() != data.y().ncols() {
        return Err(Error::InvalidSpec("one candidate list is needed per response".into()));
    }
    let bits: usize = space.candidates.iter().map(Vec::len).sum();
    let mut ks = space.components.clone();
    ks.sort_unstable();
    ks.dedup();
    let schedule: Vec<(usize, u64)> = ks
        .iter()
        .flat_map(|&k| (0..1u64 << bits).map(move |m| (k, m)))
        .collect();
    let mut out: Vec<SearchCell> = schedule
        .par_iter()
        .map(|&(k, m)| {
            let (mask, regressors) = decode_mask(&space.candidates, m);
            let n_coefficients = regressors.iter().map(Vec::len).sum();
            let status = match fit_cell(data, &regressors, k, controls) {
                Ok(f) => CellStatus::Fitted {
                    loglik: f.loglik,
                    npar: f.npar,
                    bic: f.bic,
                    convergence: f.convergence,
                },
                Err(e) => CellStatus::Failed(e.to_string()),
            };
            SearchCell {
                n_components: k,
                mask,
                regressors,
                n_coefficients,
                status,
            }
        })
        .collect();
    out.sort_by(|a, b| a.n_components.cmp(&b.n_components).then_with(|| a.mask.cmp(&b.mask)));

    let mut groups: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (idx, cell) in out.iter().enumerate() {
        if cell.score().is_none() {
            continue;
        }
        let key = (cell.n_components, cell.n_coefficients);
        match groups.get(&key) {
            Some(&cur) if better(&out[cur], cell) != Ordering::Greater => {}
            _ => {
                groups.insert(key, idx);
            }
        }
    }
    let best_by_count = groups
        .values()
        .map(|&idx| {
            let c = &out[idx];
            let CellStatus::Fitted { loglik, npar, bic, .. } = c.status else {
                unreachable!("only fitted cells are grouped")
            };
            BestByCount {
                n_components: c.n_components,
                n_coefficients: c.n_coefficients,
                mask: c.mask.clone(),
                loglik,
                npar,
                bic,
            }
        })
        .collect();
    let best = groups
        .values()
        .copied()
        .min_by(|&a, &b| better(&out[a], &out[b]));
    let best_fit = match best {
        Some(idx) => Some(fit_cell(data, &out[idx].regressors, out[idx].n_components, controls)?),
        None => None,
    };
    Ok(SearchGrid {
        cells: out,
        best_by_count,
        best,
        best_fit,
    })
}
