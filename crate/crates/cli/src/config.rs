//! Run configuration: an optional TOML file overridden by command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use mixsur::em::EmControls;
use serde::Deserialize;

use crate::ingest::parse_delimiter;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub data: Option<PathBuf>,
    pub delimiter: Option<String>,
    pub responses: Option<Vec<String>>,
    pub regressors: Option<Vec<Vec<String>>>,
    pub candidates: Option<Vec<Vec<String>>>,
    pub factor: Option<String>,
    pub k: Option<usize>,
    pub k_range: Option<[usize; 2]>,
    pub level: Option<f64>,
    pub out: Option<PathBuf>,
    pub theta: Option<PathBuf>,
    #[serde(default)]
    pub em: EmSection,
    #[serde(default)]
    pub bootstrap: BootstrapSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmSection {
    pub max_iter: Option<usize>,
    pub tol: Option<f64>,
    pub inner_max_iter: Option<usize>,
    pub inner_tol: Option<f64>,
    pub starts: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapSection {
    pub b: Option<usize>,
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// Delimited data file with a header row
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// TOML run configuration; flags override its values
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Field delimiter: auto, comma, semicolon or tab
    #[arg(long)]
    pub delimiter: Option<String>,
    /// Response columns, comma separated
    #[arg(long)]
    pub responses: Option<String>,
    /// Regressors per equation: equations separated by ';', names by ','
    #[arg(long)]
    pub regressors: Option<String>,
    /// Candidate regressors per equation for `select`, same syntax as --regressors
    #[arg(long)]
    pub candidates: Option<String>,
    /// Categorical column to cross-tabulate against the MAP clusters
    #[arg(long)]
    pub factor: Option<String>,
    /// Number of mixture components
    #[arg(long)]
    pub k: Option<usize>,
    /// Inclusive component range, e.g. 1..3
    #[arg(long)]
    pub k_range: Option<String>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
    /// Total EM starts (the first uses the default initialization)
    #[arg(long)]
    pub starts: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub bootstrap_b: Option<usize>,
    /// Confidence level for intervals
    #[arg(long)]
    pub level: Option<f64>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Parameter file (JSON, as written in the `theta` field of fit.json)
    #[arg(long)]
    pub theta: Option<PathBuf>,
    /// Allow long-running grids and bootstrap sizes
    #[arg(long)]
    pub slow: bool,
    /// Fail instead of warning when an equation's regressors are rank deficient
    #[arg(long)]
    pub deny_unidentifiable: bool,
    /// Richardson-extrapolate the finite differences in `gradcheck`
    #[arg(long)]
    pub richardson: bool,
    #[arg(long, hide = true)]
    pub perturb_analytic: bool,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub data: PathBuf,
    pub delimiter: Option<u8>,
    pub responses: Vec<String>,
    pub regressors: Vec<Vec<String>>,
    pub candidates: Option<Vec<Vec<String>>>,
    pub factor: Option<String>,
    pub components: Vec<usize>,
    pub controls: EmControls,
    pub bootstrap_b: usize,
    pub level: f64,
    pub out: PathBuf,
    pub theta: Option<PathBuf>,
    pub slow: bool,
    pub deny_unidentifiable: bool,
    pub richardson: bool,
    pub perturb_analytic: bool,
}

pub const DEFAULT_BOOTSTRAP_B: usize = 200;

fn split_list(s: &str) -> Vec<String> {
    s.split(',').map(str::trim).filter(|t| !t.is_empty()).map(str::to_string).collect()
}

pub fn parse_equations(s: &str) -> Vec<Vec<String>> {
    s.split(';').map(split_list).collect()
}

pub fn parse_k_range(s: &str) -> Result<Vec<usize>> {
    let parts: Vec<&str> = if s.contains("..") {
        s.split("..").collect()
    } else {
        s.split(['-', ':']).collect()
    };
    let [lo, hi] = parts.as_slice() else {
        bail!("k range `{s}` should look like 1..3");
    };
    let lo: usize = lo.trim().parse().with_context(|| format!("bad k range `{s}`"))?;
    let hi: usize = hi.trim().parse().with_context(|| format!("bad k range `{s}`"))?;
    if lo == 0 || hi < lo {
        bail!("k range `{s}` must satisfy 1 <= lo <= hi");
    }
    Ok((lo..=hi).collect())
}

fn read_file_config(path: &Path) -> Result<FileConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
}

impl RunConfig {
    pub fn resolve(args: &CommonArgs) -> Result<Self> {
        let file = match &args.config {
            Some(p) => read_file_config(p)?,
            None => FileConfig::default(),
        };
        let base = args
            .config
            .as_ref()
            .and_then(|p| p.parent().map(Path::to_path_buf))
            .unwrap_or_default();
        let relative = |p: PathBuf| if p.is_absolute() { p } else { base.join(p) };

        let data = match (&args.data, file.data) {
            (Some(p), _) => p.clone(),
            (None, Some(p)) => relative(p),
            (None, None) => bail!("no data file given (use --data or `data` in the config)"),
        };
        let delimiter = match args.delimiter.as_deref().or(file.delimiter.as_deref()) {
            Some(s) => parse_delimiter(s).with_context(|| format!("unknown delimiter `{s}`"))?,
            None => None,
        };
        let responses = match (&args.responses, file.responses) {
            (Some(s), _) => split_list(s),
            (None, Some(v)) => v,
            (None, None) => bail!("no response columns given (use --responses or `responses`)"),
        };
        if responses.is_empty() {
            bail!("at least one response column is required");
        }
        let regressors = match (&args.regressors, file.regressors) {
            (Some(s), _) => parse_equations(s),
            (None, Some(v)) => v,
            (None, None) => vec![vec![]; responses.len()],
        };
        if regressors.len() != responses.len() {
            bail!(
                "{} regressor lists for {} responses",
                regressors.len(),
                responses.len()
            );
        }
        let candidates = match (&args.candidates, file.candidates) {
            (Some(s), _) => Some(parse_equations(s)),
            (None, v) => v,
        };
        if let Some(c) = &candidates {
            if c.len() != responses.len() {
                bail!("{} candidate lists for {} responses", c.len(), responses.len());
            }
        }
        let components = match (args.k, &args.k_range, file.k, file.k_range) {
            (Some(k), _, _, _) => vec![k],
            (None, Some(r), _, _) => parse_k_range(r)?,
            (None, None, Some(k), _) => vec![k],
            (None, None, None, Some([lo, hi])) => parse_k_range(&format!("{lo}..{hi}"))?,
            (None, None, None, None) => vec![1],
        };
        if components.contains(&0) {
            bail!("K must be at least 1");
        }
        let mut controls = EmControls::default();
        let em = file.em;
        controls.max_iter = args.max_iter.or(em.max_iter).unwrap_or(controls.max_iter);
        controls.tol = args.tol.or(em.tol).unwrap_or(controls.tol);
        controls.inner_max_iter = em.inner_max_iter.unwrap_or(controls.inner_max_iter);
        controls.inner_tol = em.inner_tol.unwrap_or(controls.inner_tol);
        controls.n_starts = args.starts.or(em.starts).unwrap_or(controls.n_starts);
        controls.seed = args.seed.or(em.seed).unwrap_or(controls.seed);
        controls.validate()?;
        let level = args.level.or(file.level).unwrap_or(0.95);
        if !(level > 0.0 && level < 1.0) {
            bail!("level {level} must lie strictly between 0 and 1");
        }
        Ok(Self {
            data,
            delimiter,
            responses,
            regressors,
            candidates,
            factor: args.factor.clone().or(file.factor),
            components,
            controls,
            bootstrap_b: args.bootstrap_b.or(file.bootstrap.b).unwrap_or(DEFAULT_BOOTSTRAP_B),
            level,
            out: args.out.clone().or(file.out.map(relative)).unwrap_or_else(|| PathBuf::from("mixsur-out")),
            theta: args.theta.clone().or(file.theta.map(relative)),
            slow: args.slow,
            deny_unidentifiable: args.deny_unidentifiable,
            richardson: args.richardson,
            perturb_analytic: args.perturb_analytic,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn list_syntax() {
        assert_eq!(
            parse_equations("RCC,PFC;RCC;;PFC"),
            vec![vec!["RCC".to_string(), "PFC".to_string()], vec!["RCC".to_string()], vec![], vec!["PFC".to_string()]]
        );
        assert_eq!(parse_k_range("1..3").unwrap(), vec![1, 2, 3]);
        assert_eq!(parse_k_range("2-2").unwrap(), vec![2]);
        assert!(parse_k_range("3..1").is_err());
        assert!(parse_k_range("0..2").is_err());
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.toml");
        fs::write(
            &cfg,
            "data = \"d.csv\"\nresponses = [\"a\", \"b\"]\nregressors = [[\"x\"], []]\nk = 2\n[em]\nstarts = 4\nseed = 9\n",
        )
        .unwrap();
        let args = CommonArgs {
            config: Some(cfg),
            seed: Some(1),
            ..CommonArgs::default()
        };
        let rc = RunConfig::resolve(&args).unwrap();
        assert_eq!(rc.data, dir.path().join("d.csv"));
        assert_eq!(rc.components, vec![2]);
        assert_eq!((rc.controls.n_starts, rc.controls.seed), (4, 1));
        assert_eq!(rc.regressors[1], Vec::<String>::new());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("bad.toml");
        fs::write(&cfg, "data = \"d.csv\"\nresponse = [\"a\"]\n").unwrap();
        let args = CommonArgs {
            config: Some(cfg),
            ..CommonArgs::default()
        };
        assert!(RunConfig::resolve(&args).is_err());
    }
}
