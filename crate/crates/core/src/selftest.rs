//! Independent oracles and a quick self-check suite built on them.
//!
//! The oracles avoid the code paths they check: predictions come from an
//! LU-based dense inverse rather than the Cholesky solve, gradients from
//! central differences of the log marginal likelihood.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::ensemble::{combine_average, combine_poe};
use crate::error::{Error, Result};
use crate::gp::{GpModel, NoiseSpec, Prediction, VarianceKind};
use crate::kernels::KernelSpec;
use crate::sizing;

/// Latent predictions via `K^-1` from an LU inverse; no jitter.
pub fn dense_oracle(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    kernel: &KernelSpec,
    noise: f64,
    xstar: &DMatrix<f64>,
) -> Result<Vec<Prediction>> {
    let mut k = kernel.gram(x, None)?;
    for i in 0..k.nrows() {
        k[(i, i)] += noise;
    }
    let k_inv = k
        .try_inverse()
        .ok_or_else(|| Error::input("oracle Gram matrix is singular"))?;
    let cross = kernel.gram(x, Some(xstar))?;
    let weights = &k_inv * y;
    let prior = kernel.diag(xstar)?;
    Ok((0..xstar.nrows())
        .map(|j| {
            let c = cross.column(j);
            Prediction {
                mean: c.dot(&weights),
                variance: prior[j] - c.dot(&(&k_inv * c)),
            }
        })
        .collect())
}

/// Central differences of the LML in every log-parameter (kernel, then
/// noise), with step `h`.
pub fn finite_difference_gradient(model: &GpModel, h: f64) -> Result<Vec<f64>> {
    let params = model.log_params();
    let (x, y) = (model.train_x(), model.train_y());
    let lml_at = |p: &[f64]| -> Result<f64> {
        let (kp, noise) = p.split_at(p.len() - 1);
        let kernel = model.kernel().with_log_params(kp)?;
        let m = GpModel::fit(x, y, &kernel, NoiseSpec::new(noise[0].exp())?)?;
        Ok(m.log_marginal_likelihood())
    };
    (0..params.len())
        .map(|i| {
            let mut up = params.clone();
            let mut down = params.clone();
            up[i] += h;
            down[i] -= h;
            Ok((lml_at(&up)? - lml_at(&down)?) / (2.0 * h))
        })
        .collect()
}

/// `|a - b| / max(|b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / b.abs().max(floor)
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check {
        name,
        passed,
        detail,
    }
}

fn check_sinc() -> Check {
    let (a, b) = (
        crate::data::sinc(0.0),
        crate::data::sinc(std::f64::consts::PI),
    );
    check(
        "sinc-values",
        a == 1.0 && b.abs() <= 1e-12,
        format!("sinc(0)={a}, sinc(pi)={b:e}"),
    )
}

fn check_formula() -> Result<Check> {
    let plan = sizing::size_by_formula(1_000_000, 1.0, 1.0)?;
    let ln_n = 1e6f64.ln();
    let direct = (ln_n / ln_n.ln()).exp().ceil() as usize;
    Ok(check(
        "sizing-formula",
        plan.ns == 193 && direct == 193,
        format!("Ns={} (direct evaluation {direct})", plan.ns),
    ))
}

fn check_combination() -> Check {
    let p = |mean, variance| Prediction { mean, variance };
    let avg = combine_average(&[p(0.0, 1.0), p(4.0, 3.0)]);
    let poe = combine_poe(&[p(0.0, 1.0), p(4.0, 1.0 / 3.0)]);
    let ok =
        avg == p(2.0, 1.0) && (poe.mean - 3.0).abs() < 1e-14 && (poe.variance - 0.25).abs() < 1e-14;
    check(
        "combination-rules",
        ok,
        format!("average={avg:?}, poe={poe:?}"),
    )
}

fn random_problem(rng: &mut ChaCha8Rng, n: usize, d: usize) -> (DMatrix<f64>, DVector<f64>) {
    let x = DMatrix::from_fn(n, d, |_, _| rng.random_range(-2.0f64..2.0));
    let y = DVector::from_fn(n, |i, _| {
        f64::sin(x.row(i).sum()) + 0.1 * rng.random_range(-1.0f64..1.0)
    });
    (x, y)
}

fn check_prediction_oracle(seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (x, y) = random_problem(&mut rng, 40, 3);
    let xs = DMatrix::from_fn(15, 3, |_, _| rng.random_range(-2.5..2.5));
    let kernel: KernelSpec =
        "rbf(variance=1.3, lengthscales=[0.9,1.4,2.0]) + linear(variance=0.2)".parse()?;
    let model = GpModel::fit(&x, &y, &kernel, NoiseSpec::new(0.05)?)?;
    let got = model.predict(&xs, VarianceKind::Latent)?;
    let want = dense_oracle(&x, &y, &kernel, 0.05, &xs)?;
    let (mut em, mut ev) = (0.0f64, 0.0f64);
    for (g, w) in got.iter().zip(&want) {
        em = em.max(relative_error(g.mean, w.mean, 1e-3));
        ev = ev.max((g.variance - w.variance).abs());
    }
    Ok(check(
        "exact-gp-oracle",
        em <= 1e-8 && ev <= 1e-6,
        format!("max mean rel err {em:.2e}, max variance err {ev:.2e}"),
    ))
}

fn check_gradient(seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (x, y) = random_problem(&mut rng, 25, 2);
    let kernel: KernelSpec =
        "rbf(variance=0.8, lengthscales=[1.1,0.7]) * periodicmatern32(period=2.5) + bias(variance=0.3)"
            .parse()?;
    let model = GpModel::fit(&x, &y, &kernel, NoiseSpec::new(0.1)?)?;
    let analytic = model.lml_gradient()?;
    let numeric = finite_difference_gradient(&model, 1e-5)?;
    let worst = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(*a, *n, 1e-2))
        .fold(0.0, f64::max);
    Ok(check(
        "lml-gradient",
        worst <= 1e-4,
        format!(
            "max relative error {worst:.2e} over {} parameters",
            analytic.len()
        ),
    ))
}

/// Runs every check; an error inside a check counts as a failure.
pub fn run_all(seed: u64) -> Vec<Check> {
    let wrap = |name, r: Result<Check>| r.unwrap_or_else(|e| check(name, false, e.to_string()));
    vec![
        check_sinc(),
        wrap("sizing-formula", check_formula()),
        check_combination(),
        wrap("exact-gp-oracle", check_prediction_oracle(seed)),
        wrap("lml-gradient", check_gradient(seed)),
    ]
}
