//! End-to-end runs of the `mixsur` binary on small generated files.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::Value;

fn mixsur(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mixsur")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn floats(v: &Value) -> Vec<f64> {
    v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
}

struct Toy {
    x: DMatrix<f64>,
    y: DMatrix<f64>,
}

/// Two responses, y1 on x1 and y2 on x2, correlated Gaussian noise.
fn toy(n: usize, seed: u64) -> Toy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-2.0..2.0));
    let mut y = DMatrix::zeros(n, 2);
    for i in 0..n {
        let e1: f64 = StandardNormal.sample(&mut rng);
        let e2: f64 = StandardNormal.sample(&mut rng);
        y[(i, 0)] = 1.0 + 1.5 * x[(i, 0)] + 0.8 * e1;
        y[(i, 1)] = -0.5 - 0.7 * x[(i, 1)] + 0.6 * (0.5 * e1 + 0.75f64.sqrt() * e2);
    }
    Toy { x, y }
}

fn write_toy(dir: &Path, t: &Toy, sep: char) -> PathBuf {
    let path = dir.join(if sep == ';' { "toy_semicolon.csv" } else { "toy.csv" });
    let mut s = ["y1", "y2", "x1", "x2", "group"].join(&sep.to_string());
    s.push('\n');
    for i in 0..t.y.nrows() {
        let g = if i % 3 == 0 { "a" } else { "b" };
        let cells = [t.y[(i, 0)], t.y[(i, 1)], t.x[(i, 0)], t.x[(i, 1)]].map(|v| v.to_string());
        s.push_str(&format!("{}{sep}{g}\n", cells.join(&sep.to_string())));
    }
    fs::write(&path, s).unwrap();
    path
}

/// Iterated feasible GLS for the two-equation system, run to a fixed point.
fn sur_oracle(t: &Toy) -> (DVector<f64>, DMatrix<f64>, f64) {
    let n = t.y.nrows();
    // coefficient order (intercept 1, slope 1, intercept 2, slope 2)
    let row = |i: usize, d: usize| -> DVector<f64> {
        let mut r = DVector::zeros(4);
        r[2 * d] = 1.0;
        r[2 * d + 1] = t.x[(i, d)];
        r
    };
    let mut sigma = DMatrix::identity(2, 2);
    let mut b = DVector::zeros(4);
    for _ in 0..500 {
        let w = sigma.clone().try_inverse().unwrap();
        let mut a = DMatrix::zeros(4, 4);
        let mut rhs = DVector::zeros(4);
        for i in 0..n {
            let xi = DMatrix::from_columns(&[row(i, 0), row(i, 1)]).transpose();
            let yi = DVector::from_vec(vec![t.y[(i, 0)], t.y[(i, 1)]]);
            a += xi.transpose() * &w * &xi;
            rhs += xi.transpose() * &w * yi;
        }
        let next = a.try_inverse().unwrap() * rhs;
        let mut s = DMatrix::zeros(2, 2);
        for i in 0..n {
            let e = DVector::from_vec(vec![
                t.y[(i, 0)] - row(i, 0).dot(&next),
                t.y[(i, 1)] - row(i, 1).dot(&next),
            ]);
            s += &e * e.transpose();
        }
        sigma = s / n as f64;
        let done = (&next - &b).amax() < 1e-13;
        b = next;
        if done {
            break;
        }
    }
    let nf = n as f64;
    let loglik = -nf * (2.0 * std::f64::consts::PI).ln() - 0.5 * nf * sigma.determinant().ln() - nf;
    (b, sigma, loglik)
}

#[test]
fn single_component_fit_matches_gls() {
    let dir = tempfile::tempdir().unwrap();
    let t = toy(150, 1);
    let data = write_toy(dir.path(), &t, ',');
    let out = dir.path().join("out");
    let o = mixsur(&[
        "fit",
        "--data",
        data.to_str().unwrap(),
        "--responses",
        "y1,y2",
        "--regressors",
        "x1;x2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let doc = json(&out.join("fit.json"));
    let m = &doc["selected"];
    let (b, sigma, loglik) = sur_oracle(&t);
    let beta = floats(&m["theta"]["beta"]);
    let lambda = floats(&m["theta"]["lambda"][0]);
    assert!((beta[0] - b[1]).abs() < 1e-6 && (beta[1] - b[3]).abs() < 1e-6, "{beta:?} {b}");
    assert!((lambda[0] - b[0]).abs() < 1e-6 && (lambda[1] - b[2]).abs() < 1e-6);
    let s = &m["theta"]["sigma"][0];
    for r in 0..2 {
        for c in 0..2 {
            assert!((s[r][c].as_f64().unwrap() - sigma[(r, c)]).abs() < 1e-6);
        }
    }
    assert!((m["loglik"].as_f64().unwrap() - loglik).abs() < 1e-6);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("Model comparison"));
    assert_eq!(text, fs::read_to_string(out.join("fit.txt")).unwrap());
}

#[test]
fn reported_bic_recomputes_from_loglik() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_toy(dir.path(), &toy(120, 2), ',');
    let out = dir.path().join("out");
    let o = mixsur(&[
        "fit",
        "--data",
        data.to_str().unwrap(),
        "--responses",
        "y1,y2",
        "--regressors",
        "x1;x2",
        "--k-range",
        "1..2",
        "--starts",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let doc = json(&out.join("fit.json"));
    let rows = doc["comparison"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    for r in rows {
        let k = r["k"].as_u64().unwrap() as f64;
        // (K-1) weights, 2 slopes, K intercept pairs, K covariances
        let npar = (k - 1.0) + 2.0 + 2.0 * k + 3.0 * k;
        assert_eq!(r["npar"].as_f64().unwrap(), npar);
        let bic = 2.0 * r["loglik"].as_f64().unwrap() - npar * 120f64.ln();
        assert!((r["bic"].as_f64().unwrap() - bic).abs() < 1e-9);
    }
    let best = rows
        .iter()
        .max_by(|a, b| a["bic"].as_f64().unwrap().total_cmp(&b["bic"].as_f64().unwrap()))
        .unwrap();
    assert_eq!(best["k"], doc["selected"]["k"]);
}

#[test]
fn semicolon_files_and_config_files_give_the_same_fit() {
    let dir = tempfile::tempdir().unwrap();
    let t = toy(80, 3);
    let comma = write_toy(dir.path(), &t, ',');
    write_toy(dir.path(), &t, ';');
    fs::write(
        dir.path().join("run.toml"),
        "data = \"toy_semicolon.csv\"\nresponses = [\"y1\", \"y2\"]\nregressors = [[\"x1\"], [\"x2\"]]\nout = \"from_config\"\n",
    )
    .unwrap();
    let a = mixsur(&["fit", "--config", dir.path().join("run.toml").to_str().unwrap()]);
    assert_eq!(code(&a), 0, "{}", String::from_utf8_lossy(&a.stderr));
    let out = dir.path().join("from_flags");
    let b = mixsur(&[
        "fit",
        "--data",
        comma.to_str().unwrap(),
        "--responses",
        "y1,y2",
        "--regressors",
        "x1;x2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&b), 0);
    let la = json(&dir.path().join("from_config/fit.json"))["selected"]["loglik"].as_f64().unwrap();
    let lb = json(&out.join("fit.json"))["selected"]["loglik"].as_f64().unwrap();
    assert_eq!(la, lb);
}

#[test]
fn usage_and_input_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_toy(dir.path(), &toy(30, 4), ',');
    let d = data.to_str().unwrap();
    let missing = mixsur(&["fit", "--data", "no/such/file.csv", "--responses", "y1"]);
    assert_eq!(code(&missing), 1);
    assert!(String::from_utf8_lossy(&missing.stderr).contains("no/such/file.csv"));
    let column = mixsur(&["fit", "--data", d, "--responses", "y1,nope"]);
    assert_eq!(code(&column), 1);
    assert!(String::from_utf8_lossy(&column.stderr).contains("nope"));
    let text_column = mixsur(&["fit", "--data", d, "--responses", "group"]);
    assert_eq!(code(&text_column), 1);
    let no_candidates = mixsur(&["select", "--data", d, "--responses", "y1"]);
    assert_eq!(code(&no_candidates), 1);
    let zero_b = mixsur(&["bootstrap", "--data", d, "--responses", "y1", "--bootstrap-b", "0"]);
    assert_eq!(code(&zero_b), 1);
    assert!(String::from_utf8_lossy(&zero_b.stderr).contains("B = 0"));
    let big_b = mixsur(&["bootstrap", "--data", d, "--responses", "y1", "--bootstrap-b", "5000"]);
    assert_eq!(code(&big_b), 1);
    assert!(String::from_utf8_lossy(&big_b.stderr).contains("--slow"));
}

#[test]
fn unidentifiable_equations_warn_or_fail() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("flat.csv");
    let mut s = String::from("y,x\n");
    for i in 0..20 {
        s.push_str(&format!("{},{}\n", (i as f64 * 0.7).sin(), 2.0));
    }
    fs::write(&path, s).unwrap();
    let p = path.to_str().unwrap();
    let out = dir.path().join("out");
    let deny = mixsur(&["fit", "--data", p, "--responses", "y", "--regressors", "x", "--deny-unidentifiable"]);
    assert_eq!(code(&deny), 1);
    assert!(String::from_utf8_lossy(&deny.stderr).contains("not identifiable"));
    let warn = mixsur(&["fit", "--data", p, "--responses", "y", "--regressors", "x", "--out", out.to_str().unwrap()]);
    assert!(String::from_utf8_lossy(&warn.stderr).contains("warning"));
}

#[test]
fn select_scans_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_toy(dir.path(), &toy(300, 5), ',');
    let out = dir.path().join("sel");
    let o = mixsur(&[
        "select",
        "--data",
        data.to_str().unwrap(),
        "--responses",
        "y1,y2",
        "--candidates",
        "x1,x2;x1,x2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let grid = fs::read_to_string(out.join("bic_grid.csv")).unwrap();
    let mut lines = grid.lines();
    assert_eq!(lines.next().unwrap(), "K,P,regressor_mask,loglik,npar,bic,status");
    assert_eq!(lines.count(), 16);
    let doc = json(&out.join("select.json"));
    assert_eq!(doc["n_cells"], 16);
    assert_eq!(doc["best_by_count"].as_array().unwrap().len(), 5);
    let regs = &doc["selected"]["regressors"];
    assert_eq!(regs[0], serde_json::json!(["x1"]));
    assert_eq!(regs[1], serde_json::json!(["x2"]));
}

#[test]
fn simulate_is_reproducible_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_toy(dir.path(), &toy(400, 6), ',');
    let theta = dir.path().join("theta.json");
    fs::write(
        &theta,
        r#"{"pi":[0.6,0.4],"beta":[1.5,-0.7],"lambda":[[-3.0,0.0],[3.0,2.0]],
            "sigma":[[[0.5,0.1],[0.1,0.4]],[[0.6,-0.2],[-0.2,0.7]]]}"#,
    )
    .unwrap();
    let sim = |seed: &str, name: &str| {
        let out = dir.path().join(name);
        let o = mixsur(&[
            "simulate",
            "--data",
            data.to_str().unwrap(),
            "--responses",
            "y1,y2",
            "--regressors",
            "x1;x2",
            "--theta",
            theta.to_str().unwrap(),
            "--seed",
            seed,
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        out.join("simulated.csv")
    };
    let a = fs::read_to_string(sim("3", "a")).unwrap();
    let b = fs::read_to_string(sim("3", "b")).unwrap();
    let c = fs::read_to_string(sim("4", "c")).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.lines().next().unwrap(), "y1,y2,x1,x2,component");

    let out = dir.path().join("refit");
    let simulated = dir.path().join("a/simulated.csv");
    let o = mixsur(&[
        "fit",
        "--data",
        simulated.to_str().unwrap(),
        "--responses",
        "y1,y2",
        "--regressors",
        "x1;x2",
        "--k",
        "2",
        "--factor",
        "component",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m = &json(&out.join("fit.json"))["selected"];
    let beta = floats(&m["theta"]["beta"]);
    assert!((beta[0] - 1.5).abs() < 0.1 && (beta[1] + 0.7).abs() < 0.1, "{beta:?}");
    // well separated components are recovered almost perfectly
    let counts = &m["crosstab"]["counts"];
    let diag = counts[0][0].as_u64().unwrap() + counts[1][1].as_u64().unwrap();
    let anti = counts[0][1].as_u64().unwrap() + counts[1][0].as_u64().unwrap();
    assert!(diag.max(anti) >= 396, "{counts}");
}

#[test]
fn gradcheck_passes_and_detects_a_corrupted_derivative() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_toy(dir.path(), &toy(30, 7), ',');
    let theta = dir.path().join("theta.json");
    fs::write(
        &theta,
        r#"{"pi":[0.55,0.45],"beta":[1.2,-0.4],"lambda":[[-1.0,0.5],[1.0,-0.5]],
            "sigma":[[[0.9,0.2],[0.2,1.1]],[[1.3,-0.3],[-0.3,0.8]]]}"#,
    )
    .unwrap();
    let base = [
        "gradcheck",
        "--data",
        data.to_str().unwrap(),
        "--responses",
        "y1,y2",
        "--regressors",
        "x1;x2",
        "--theta",
        theta.to_str().unwrap(),
    ];
    let run = |extra: &[&str], name: &str| {
        let out = dir.path().join(name);
        let mut args = base.to_vec();
        args.extend_from_slice(extra);
        args.extend_from_slice(&["--out", out.to_str().unwrap()]);
        (mixsur(&args), out)
    };
    let (ok, out) = run(&[], "ok");
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stdout));
    assert_eq!(json(&out.join("gradcheck.json"))["passed"], true);
    let (bad, out) = run(&["--perturb-analytic"], "bad");
    assert_eq!(code(&bad), 3);
    assert_eq!(json(&out.join("gradcheck.json"))["passed"], false);
    let (extrapolated, _) = run(&["--richardson"], "extrapolated");
    assert_eq!(code(&extrapolated), 0);
}

#[test]
fn bootstrap_writes_replicates() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_toy(dir.path(), &toy(100, 8), ',');
    let out = dir.path().join("boot");
    let args = [
        "bootstrap",
        "--data",
        data.to_str().unwrap(),
        "--responses",
        "y1,y2",
        "--regressors",
        "x1;x2",
        "--bootstrap-b",
        "25",
        "--seed",
        "9",
        "--out",
        out.to_str().unwrap(),
    ];
    let o = mixsur(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let reps = fs::read_to_string(out.join("replicates.csv")).unwrap();
    assert_eq!(reps.lines().next().unwrap(), "replicate,y1~x1,y2~x2");
    assert_eq!(reps.lines().count(), 26);
    let doc = json(&out.join("bootstrap.json"));
    assert_eq!(doc["succeeded"], 25);
    let c = &doc["summary"]["coefficients"][0];
    assert!(c["lo"].as_f64().unwrap() < c["point"].as_f64().unwrap());
    assert!(c["point"].as_f64().unwrap() < c["hi"].as_f64().unwrap());
    let again = mixsur(&args);
    assert_eq!(code(&again), 0);
    assert_eq!(reps, fs::read_to_string(out.join("replicates.csv")).unwrap());
}

#[test]
fn failed_fits_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tiny.csv");
    fs::write(&path, "y,x\n1,2\n2,3\n1.5,4\n3,1\n2.2,2.5\n0.3,1.1\n").unwrap();
    let out = dir.path().join("out");
    let o = mixsur(&[
        "fit",
        "--data",
        path.to_str().unwrap(),
        "--responses",
        "y",
        "--regressors",
        "x",
        "--k",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("starts failed"));
}
