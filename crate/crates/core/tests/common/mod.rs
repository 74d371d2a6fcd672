#![allow(dead_code)]

use std::path::{Path, PathBuf};

use mixsur::simboot::simulate;
use mixsur::{Dataset, Design, ModelSpec, Theta};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_theta(rng: &mut ChaCha8Rng, k: usize, d: usize, p: usize) -> Theta {
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.5..1.5)).collect();
    let total: f64 = raw.iter().sum();
    let pi = DVector::from_iterator(k, raw.iter().map(|v| v / total));
    let beta = DVector::from_fn(p, |_, _| rng.random_range(-1.0..1.0));
    let lambda = (0..k)
        .map(|_| DVector::from_fn(d, |_, _| rng.random_range(-2.0..2.0)))
        .collect();
    let sigma = (0..k)
        .map(|_| {
            let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-0.7..0.7));
            &a * a.transpose() + DMatrix::identity(d, d) * 0.5
        })
        .collect();
    Theta::new(pi, beta, lambda, sigma).unwrap()
}

/// Data simulated at `theta` over a pool of `r` uniform regressor columns.
pub fn simulated(rng: &mut ChaCha8Rng, theta: &Theta, n: usize, r: usize, spec: &ModelSpec) -> (Dataset, Design) {
    let pool = DMatrix::from_fn(n, r, |_, _| rng.random_range(-2.0..2.0));
    let data = Dataset::new(DMatrix::zeros(n, spec.n_responses()), pool).unwrap();
    let design = Design::new(&data, spec).unwrap();
    let sim = simulate(theta, &design, rng.random()).unwrap();
    let data = data.with_responses(sim.y).unwrap();
    let design = Design::new(&data, spec).unwrap();
    (data, design)
}

pub fn ais_path() -> Option<PathBuf> {
    if let Ok(p) = std::env::var("AIS_DATA") {
        return Some(PathBuf::from(p));
    }
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/ais.csv");
    p.exists().then_some(p)
}

pub struct Ais {
    pub data: Dataset,
    pub sex: Vec<String>,
}

/// Responses BMI, SSF, PBF, LBM; pool RCC, WCC, PFC.
pub fn load_ais(path: &Path) -> Ais {
    let mut reader = csv::Reader::from_path(path).unwrap();
    let header = reader.headers().unwrap().clone();
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    let ys = ["BMI", "SSF", "PBF", "LBM"].map(col);
    let xs = ["RCC", "WCC", "PFC"].map(col);
    let sex_col = header.iter().position(|h| h == "Sex");
    let records: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
    let n = records.len();
    let num = |i: usize, c: usize| records[i][c].trim().parse::<f64>().unwrap();
    let y = DMatrix::from_fn(n, 4, |i, j| num(i, ys[j]));
    let pool = DMatrix::from_fn(n, 3, |i, j| num(i, xs[j]));
    let sex = match sex_col {
        Some(c) => records.iter().map(|r| r[c].trim().to_string()).collect(),
        None => Vec::new(),
    };
    Ais {
        data: Dataset::new(y, pool).unwrap(),
        sex,
    }
}

/// The selected AIS model: BMI, PBF, LBM on RCC and PFC; SSF on RCC.
pub fn ais_spec(k: usize) -> ModelSpec {
    ModelSpec::new(k, vec![vec![0, 2], vec![0], vec![0, 2], vec![0, 2]]).unwrap()
}
