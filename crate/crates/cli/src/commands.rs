//! Subcommand implementations.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use mixsur::calculus::{gradcheck, GradcheckOptions, GradcheckReport};
use mixsur::em::{fit, FitResult};
use mixsur::inference::{classify, coefficient_inference, crosstab_chi_square, search, SearchSpace};
use mixsur::model::check_identifiability;
use mixsur::simboot::{bootstrap_summary, parametric_bootstrap, simulate, BootstrapRun, BootstrapSummary};
use mixsur::{count_parameters, Design, ModelSpec};
use serde::Serialize;

use crate::config::RunConfig;
use crate::ingest::{bind, Bound, Table};
use crate::report::{
    best_by_count_text, bootstrap_text, coefficient_name, coefficient_names, comparison_text, model_text,
    ComparisonRow, GridRow, ModelDoc, ModelInputs, ThetaDoc, BIC_CONVENTION,
};

/// Outcome of a command that ran to completion.
pub enum Status {
    Ok,
    /// A verification command found a failure.
    CheckFailed,
}

/// Grids above this many cells need `--slow`.
pub const DESK_GRID_CELLS: u128 = 4096;
/// Bootstrap sizes above this need `--slow`.
pub const DESK_BOOTSTRAP_B: usize = 1000;

struct Loaded {
    table: Table,
    bound: Bound,
}

fn load(cfg: &RunConfig, regressors: &[Vec<String>]) -> Result<Loaded> {
    let table = Table::read(&cfg.data, cfg.delimiter)?;
    let bound = bind(&table, &cfg.responses, regressors)?;
    Ok(Loaded { table, bound })
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let path = dir.join(name);
    let text = serde_json::to_string_pretty(value)?;
    fs::write(&path, text + "\n").with_context(|| format!("cannot write {}", path.display()))
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    fs::create_dir_all(&cfg.out).with_context(|| format!("cannot create {}", cfg.out.display()))?;
    Ok(&cfg.out)
}

fn factor_values(cfg: &RunConfig, table: &Table) -> Result<Option<Vec<String>>> {
    cfg.factor.as_deref().map(|f| table.strings(f)).transpose().map_err(Into::into)
}

fn model_doc(
    cfg: &RunConfig,
    regressors: &[Vec<String>],
    design: &Design,
    f: &FitResult,
    factor: Option<&[String]>,
) -> ModelDoc {
    let labels = classify(&f.posteriors);
    let crosstab = factor.and_then(|v| match crosstab_chi_square(&labels, v) {
        Ok(ct) => Some(ct),
        Err(e) => {
            eprintln!("warning: cross-tabulation skipped: {e}");
            None
        }
    });
    ModelDoc::new(ModelInputs {
        responses: &cfg.responses,
        regressors,
        fit: f,
        identifiability: check_identifiability(design),
        intervals: coefficient_inference(f, design, cfg.level).map_err(|e| e.to_string()),
        labels,
        crosstab,
        level: cfg.level,
    })
}

fn identifiability_gate(cfg: &RunConfig, design: &Design) -> Result<()> {
    let report = check_identifiability(design);
    for v in &report.violations {
        let msg = format!(
            "equation {} ({}) has regressor rank {} < {}",
            v.equation + 1,
            cfg.responses[v.equation],
            v.rank,
            v.required
        );
        if cfg.deny_unidentifiable {
            bail!("model is not identifiable: {msg}");
        }
        eprintln!("warning: {msg}");
    }
    Ok(())
}

#[derive(Serialize)]
struct FitReport<'a> {
    command: &'static str,
    data: String,
    bic_convention: &'static str,
    comparison: &'a [ComparisonRow],
    selected: &'a ModelDoc,
}

/// Fits every K in the range and reports the BIC-best one in detail.
fn fit_range(cfg: &RunConfig, loaded: &Loaded) -> Result<(Vec<ComparisonRow>, Design, FitResult)> {
    let p: usize = loaded.bound.regressors.iter().map(Vec::len).sum();
    let mut rows = Vec::new();
    let mut best: Option<(Design, FitResult)> = None;
    let mut last_err = None;
    for &k in &cfg.components {
        let spec = ModelSpec::new(k, loaded.bound.regressors.clone())?;
        let design = Design::new(&loaded.bound.data, &spec)?;
        identifiability_gate(cfg, &design)?;
        match fit(&design, &cfg.controls) {
            Ok(f) => {
                rows.push(ComparisonRow {
                    k,
                    p,
                    loglik: Some(f.loglik),
                    npar: f.npar,
                    bic: Some(f.bic),
                    status: format!("{:?}", f.convergence).to_lowercase(),
                });
                if best.as_ref().is_none_or(|(_, b)| f.bic > b.bic) {
                    best = Some((design, f));
                }
            }
            Err(e) => {
                rows.push(ComparisonRow {
                    k,
                    p,
                    loglik: None,
                    npar: count_parameters(&spec),
                    bic: None,
                    status: format!("failed: {e}"),
                });
                last_err = Some(e);
            }
        }
    }
    match best {
        Some((design, f)) => Ok((rows, design, f)),
        None => Err(last_err.expect("at least one K was tried").into()),
    }
}

pub fn cmd_fit(cfg: &RunConfig) -> Result<Status> {
    let loaded = load(cfg, &cfg.regressors)?;
    let (rows, design, f) = fit_range(cfg, &loaded)?;
    let factor = factor_values(cfg, &loaded.table)?;
    let doc = model_doc(cfg, &cfg.regressors, &design, &f, factor.as_deref());
    let mut text = comparison_text(&rows);
    text.push('\n');
    text.push_str(&model_text(&doc));
    let dir = out_dir(cfg)?;
    write_json(
        dir,
        "fit.json",
        &FitReport {
            command: "fit",
            data: cfg.data.display().to_string(),
            bic_convention: BIC_CONVENTION,
            comparison: &rows,
            selected: &doc,
        },
    )?;
    write_json(dir, "theta.json", &doc.theta)?;
    write_text(dir, "fit.txt", &text)?;
    print!("{text}");
    Ok(Status::Ok)
}

#[derive(Serialize)]
struct SelectReport<'a> {
    command: &'static str,
    data: String,
    bic_convention: &'static str,
    candidates: &'a [Vec<String>],
    components: &'a [usize],
    n_cells: usize,
    n_failed: usize,
    grid: &'a [GridRow],
    best_by_count: &'a [mixsur::inference::BestByCount],
    selected: Option<&'a ModelDoc>,
}

fn write_grid_csv(path: &Path, rows: &[GridRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("cannot write {}", path.display()))?;
    w.write_record(["K", "P", "regressor_mask", "loglik", "npar", "bic", "status"])?;
    for r in rows {
        w.write_record([
            r.k.to_string(),
            r.p.to_string(),
            r.regressor_mask.clone(),
            r.loglik.map_or_else(String::new, |v| v.to_string()),
            r.npar.to_string(),
            r.bic.map_or_else(String::new, |v| v.to_string()),
            r.status.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_select(cfg: &RunConfig) -> Result<Status> {
    let Some(candidates) = &cfg.candidates else {
        bail!("select needs candidate regressors (use --candidates or `candidates`)");
    };
    let loaded = load(cfg, candidates)?;
    let space = SearchSpace {
        candidates: loaded.bound.regressors.clone(),
        components: cfg.components.clone(),
    };
    let cells = space.n_cells();
    if cells > DESK_GRID_CELLS && !cfg.slow {
        bail!("the grid has {cells} cells; pass --slow to fit more than {DESK_GRID_CELLS}");
    }
    let grid = search(&loaded.bound.data, &space, &cfg.controls)?;
    let pool = loaded.bound.data.pool_names();
    let rows: Vec<GridRow> = grid
        .cells
        .iter()
        .map(|c| {
            let spec = ModelSpec::new(c.n_components, c.regressors.clone()).expect("grid specs are valid");
            GridRow::from_cell(c, count_parameters(&spec))
        })
        .collect();
    let n_failed = rows.iter().filter(|r| r.bic.is_none()).count();

    let selected = match (grid.best, &grid.best_fit) {
        (Some(idx), Some(f)) => {
            let cell = &grid.cells[idx];
            let names: Vec<Vec<String>> = cell
                .regressors
                .iter()
                .map(|eq| eq.iter().map(|&j| pool[j].clone()).collect())
                .collect();
            let spec = ModelSpec::new(cell.n_components, cell.regressors.clone())?;
            let design = Design::new(&loaded.bound.data, &spec)?;
            let factor = factor_values(cfg, &loaded.table)?;
            Some(model_doc(cfg, &names, &design, f, factor.as_deref()))
        }
        _ => None,
    };

    let mut text = format!(
        "Searched {} models ({} failed). {BIC_CONVENTION}\nMask bits follow the candidate order per equation: {}\n\n",
        rows.len(),
        n_failed,
        cfg.responses
            .iter()
            .zip(candidates)
            .map(|(r, c)| format!("{r}[{}]", c.join(",")))
            .collect::<Vec<_>>()
            .join(" / ")
    );
    text.push_str(&best_by_count_text(&grid.best_by_count));
    text.push('\n');
    match &selected {
        Some(doc) => {
            text.push_str("Selected model\n");
            for (r, regs) in doc.responses.iter().zip(&doc.regressors) {
                text.push_str(&format!("  {r} ~ {}\n", if regs.is_empty() { "1".to_string() } else { regs.join(" + ") }));
            }
            text.push('\n');
            text.push_str(&model_text(doc));
        }
        None => text.push_str("Every model failed.\n"),
    }

    let dir = out_dir(cfg)?;
    write_grid_csv(&dir.join("bic_grid.csv"), &rows)?;
    write_json(
        dir,
        "select.json",
        &SelectReport {
            command: "select",
            data: cfg.data.display().to_string(),
            bic_convention: BIC_CONVENTION,
            candidates,
            components: &cfg.components,
            n_cells: rows.len(),
            n_failed,
            grid: &rows,
            best_by_count: &grid.best_by_count,
            selected: selected.as_ref(),
        },
    )?;
    write_text(dir, "select.txt", &text)?;
    print!("{text}");
    if selected.is_none() {
        return Err(mixsur::Error::AllStartsFailed(vec!["every grid cell failed".into()]).into());
    }
    Ok(Status::Ok)
}

#[derive(Serialize)]
struct BootstrapReport<'a> {
    command: &'static str,
    data: String,
    seed: u64,
    requested: usize,
    succeeded: usize,
    coefficient_names: Vec<String>,
    summary: &'a BootstrapSummary,
    failures: &'a [mixsur::simboot::ReplicateFailure],
    warnings: &'a [String],
    model: &'a ModelDoc,
}

fn write_replicates(dir: &Path, names: &[String], run: &BootstrapRun) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.join("replicates.csv"))?;
    let mut header = vec!["replicate".to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    for r in &run.replicates {
        let mut rec = vec![r.index.to_string()];
        rec.extend(r.beta.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("failures.csv"))?;
    w.write_record(["replicate", "reason"])?;
    for f in &run.failures {
        w.write_record([f.index.to_string(), f.reason.clone()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_bootstrap(cfg: &RunConfig) -> Result<Status> {
    if cfg.bootstrap_b == 0 {
        bail!("bootstrap needs at least 2 replicates (got B = 0)");
    }
    if cfg.bootstrap_b > DESK_BOOTSTRAP_B && !cfg.slow {
        bail!("B = {} exceeds {DESK_BOOTSTRAP_B}; pass --slow to run it", cfg.bootstrap_b);
    }
    let loaded = load(cfg, &cfg.regressors)?;
    let (_, design, f) = fit_range(cfg, &loaded)?;
    let factor = factor_values(cfg, &loaded.table)?;
    let doc = model_doc(cfg, &cfg.regressors, &design, &f, factor.as_deref());
    let run = parametric_bootstrap(&f, &design, cfg.bootstrap_b, &cfg.controls, cfg.controls.seed);
    for w in &run.warnings {
        eprintln!("warning: {w}");
    }
    let summary = bootstrap_summary(&run, &f.theta.beta, cfg.level)?;
    let names: Vec<String> = coefficient_names(&cfg.responses, &cfg.regressors)
        .iter()
        .map(|(r, x)| coefficient_name(r, x))
        .collect();
    let text = bootstrap_text(&summary, &doc);
    let dir = out_dir(cfg)?;
    write_replicates(dir, &names, &run)?;
    write_json(
        dir,
        "bootstrap.json",
        &BootstrapReport {
            command: "bootstrap",
            data: cfg.data.display().to_string(),
            seed: run.seed,
            requested: run.requested,
            succeeded: run.succeeded(),
            coefficient_names: names,
            summary: &summary,
            failures: &run.failures,
            warnings: &run.warnings,
            model: &doc,
        },
    )?;
    write_text(dir, "bootstrap.txt", &text)?;
    print!("{text}");
    Ok(Status::Ok)
}

fn read_theta(path: &Path) -> Result<ThetaDoc> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("invalid parameter file {}", path.display()))
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<Status> {
    let Some(theta_path) = &cfg.theta else {
        bail!("simulate needs a parameter file (use --theta)");
    };
    let theta = read_theta(theta_path)?.to_theta()?;
    let table = Table::read(&cfg.data, cfg.delimiter)?;
    // responses are replaced, so only the regressor columns need to be numeric
    let pool_names: Vec<String> = {
        let mut v: Vec<String> = Vec::new();
        for x in cfg.regressors.iter().flatten() {
            if !v.contains(x) {
                v.push(x.clone());
            }
        }
        v
    };
    let pool = table.numeric(&pool_names)?;
    let n = table.rows.len();
    let y0 = nalgebra::DMatrix::zeros(n, cfg.responses.len());
    let data = mixsur::Dataset::with_names(y0, pool, cfg.responses.clone(), pool_names.clone())?;
    let regs: Vec<Vec<usize>> = cfg
        .regressors
        .iter()
        .map(|eq| eq.iter().map(|x| pool_names.iter().position(|p| p == x).expect("pool built from regressors")).collect())
        .collect();
    let spec = ModelSpec::new(theta.n_components(), regs)?;
    let design = Design::new(&data, &spec)?;
    let sim = simulate(&theta, &design, cfg.controls.seed)?;

    let dir = out_dir(cfg)?;
    let path = dir.join("simulated.csv");
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("cannot write {}", path.display()))?;
    let mut header = cfg.responses.clone();
    header.extend(pool_names.iter().cloned());
    header.push("component".into());
    w.write_record(&header)?;
    for i in 0..n {
        let mut rec: Vec<String> = sim.y.row(i).iter().map(f64::to_string).collect();
        rec.extend(data.pool().row(i).iter().map(f64::to_string));
        rec.push((sim.labels[i] + 1).to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    let mut stdout = std::io::stdout();
    writeln!(stdout, "wrote {n} simulated rows to {}", path.display())?;
    Ok(Status::Ok)
}

#[derive(Serialize)]
struct GradcheckDoc<'a> {
    command: &'static str,
    source: &'static str,
    passed: bool,
    report: &'a GradcheckReport,
}

pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<Status> {
    let loaded = load(cfg, &cfg.regressors)?;
    let (theta, source) = match &cfg.theta {
        Some(p) => (read_theta(p)?.to_theta()?, "supplied"),
        None => (fit_range(cfg, &loaded)?.2.theta, "fitted"),
    };
    let spec = ModelSpec::new(theta.n_components(), loaded.bound.regressors.clone())?;
    let design = Design::new(&loaded.bound.data, &spec)?;
    let report = gradcheck(
        &theta,
        &design,
        GradcheckOptions {
            perturb_analytic: cfg.perturb_analytic,
            richardson: cfg.richardson,
        },
    )?;
    let passed = report.passed();
    let text = format!(
        "Finite-difference check at the {source} parameters ({} coordinates)\n\
         {:<8}  {:>14}  {:>10}  {}\n\
         {:<8}  {:>14.3e}  {:>10.0e}  {}\n\
         {:<8}  {:>14.3e}  {:>10.0e}  {}\n",
        report.n_parameters,
        "check",
        "max rel error",
        "tolerance",
        "result",
        "score",
        report.score_max_rel_error,
        report.score_tolerance,
        if report.score_max_rel_error < report.score_tolerance { "pass" } else { "FAIL" },
        "hessian",
        report.hessian_max_rel_error,
        report.hessian_tolerance,
        if report.hessian_max_rel_error < report.hessian_tolerance { "pass" } else { "FAIL" },
    );
    let dir = out_dir(cfg)?;
    write_json(
        dir,
        "gradcheck.json",
        &GradcheckDoc {
            command: "gradcheck",
            source,
            passed,
            report: &report,
        },
    )?;
    write_text(dir, "gradcheck.txt", &text)?;
    print!("{text}");
    if !passed && !cfg.richardson {
        eprintln!("note: poorly scaled regressors inflate the truncation error; --richardson extrapolates it away");
    }
    Ok(if passed { Status::Ok } else { Status::CheckFailed })
}
