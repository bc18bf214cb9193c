//! Marginal-likelihood hyperparameter fitting for one subset.
//!
//! Parameters are optimized in log space inside a box. Unset template
//! values are initialized from the data (signal variance `Var(y)`,
//! lengthscales from per-column spread, `sigma_n^2 = 0.1 Var(y)`); restart 0
//! starts there and later restarts perturb each free log-parameter by a
//! uniform draw in `[-1, 1]`.

pub mod lbfgs;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gp::{GpModel, NoiseSpec};
use crate::kernels::{BaseKind, KernelSpec};
use crate::rng;

pub use lbfgs::{LbfgsConfig, LbfgsResult, Termination};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub restarts: usize,
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub log_lower: f64,
    pub log_upper: f64,
    pub seed: u64,
    /// Holds `sigma_n^2` at this value instead of optimizing it.
    pub fixed_noise: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            restarts: 3,
            max_iterations: 200,
            gradient_tolerance: 1e-5,
            log_lower: -10.0,
            log_upper: 10.0,
            seed: 0,
            fixed_noise: None,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.restarts == 0 {
            return Err(Error::input("optimizer needs at least one restart"));
        }
        if !(self.log_lower.is_finite()
            && self.log_upper.is_finite()
            && self.log_lower < self.log_upper)
        {
            return Err(Error::input(
                "log-parameter bounds must be finite with lower < upper",
            ));
        }
        if !(self.gradient_tolerance > 0.0) {
            return Err(Error::input("gradient tolerance must be > 0"));
        }
        if let Some(v) = self.fixed_noise {
            NoiseSpec::new(v)?;
        }
        Ok(())
    }

    fn lbfgs(&self) -> LbfgsConfig {
        LbfgsConfig {
            max_iterations: self.max_iterations,
            gradient_tolerance: self.gradient_tolerance,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartOutcome {
    pub index: usize,
    pub lml: Option<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub termination: Option<Termination>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperoptReport {
    pub initial_lml: Option<f64>,
    pub best_restart: usize,
    pub restarts: Vec<RestartOutcome>,
}

/// Resolves the template against the data and fills every value the
/// template left unset.
pub fn initial_kernel(template: &KernelSpec, data: &Dataset) -> Result<KernelSpec> {
    let mut spec = template.resolve(data.dim())?;
    let var_y = response_variance(data);
    let spreads: Vec<f64> = data
        .x
        .column_iter()
        .map(|c| {
            let n = c.len() as f64;
            let m = c.sum() / n;
            let sd = (c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt();
            if sd > 0.0 && sd.is_finite() {
                sd
            } else {
                1.0
            }
        })
        .collect();
    for leaf in spec.leaves_mut() {
        if !leaf.explicit.variance {
            leaf.variance = match leaf.kind {
                BaseKind::WhiteNoise => 0.1 * var_y,
                _ => var_y,
            };
        }
        let dims: Vec<usize> = leaf
            .active_dims
            .clone()
            .unwrap_or_else(|| (0..data.dim()).collect());
        if leaf.kind.has_lengthscales() && !leaf.explicit.lengthscales {
            leaf.lengthscales = dims.iter().map(|&c| spreads[c]).collect();
        }
        if leaf.kind == BaseKind::BrownianMotion && !leaf.explicit.origin {
            leaf.origin = data.x.column(dims[0]).min();
        }
    }
    Ok(spec)
}

fn response_variance(data: &Dataset) -> f64 {
    let n = data.len() as f64;
    let m = data.y.sum() / n;
    let v = data.y.iter().map(|y| (y - m) * (y - m)).sum::<f64>() / n;
    v.max(1e-6)
}

struct Objective<'a> {
    data: &'a Dataset,
    kernel: KernelSpec,
    /// All kernel log-parameters, then log noise.
    base: Vec<f64>,
    free: Vec<usize>,
}

impl Objective<'_> {
    fn full(&self, free_values: &[f64]) -> Vec<f64> {
        let mut full = self.base.clone();
        for (&i, &v) in self.free.iter().zip(free_values) {
            full[i] = v;
        }
        full
    }

    fn model(&self, free_values: &[f64]) -> Result<GpModel> {
        let full = self.full(free_values);
        let (kp, noise) = full.split_at(full.len() - 1);
        let kernel = self.kernel.with_log_params(kp)?;
        GpModel::fit(
            &self.data.x,
            &self.data.y,
            &kernel,
            NoiseSpec::new(noise[0].exp())?,
        )
    }

    fn eval(&self, free_values: &[f64]) -> Option<(f64, Vec<f64>)> {
        let model = self.model(free_values).ok()?;
        Some((
            -model.log_marginal_likelihood(),
            self.negated_gradient(&model)?,
        ))
    }

    fn negated_gradient(&self, model: &GpModel) -> Option<Vec<f64>> {
        let grad = model.lml_gradient().ok()?;
        Some(self.free.iter().map(|&i| -grad[i]).collect())
    }

    fn session(&self) -> Session<'_, '_> {
        Session {
            objective: self,
            last: None,
        }
    }
}

/// Negative LML over the free log-parameters; keeps the last factorized
/// model so line-search trials cost one Cholesky each.
struct Session<'o, 'd> {
    objective: &'o Objective<'d>,
    last: Option<(Vec<f64>, GpModel)>,
}

impl lbfgs::Problem for Session<'_, '_> {
    fn value(&mut self, x: &[f64]) -> Option<f64> {
        let model = self.objective.model(x).ok()?;
        let f = -model.log_marginal_likelihood();
        self.last = Some((x.to_vec(), model));
        Some(f)
    }

    fn gradient(&mut self, x: &[f64]) -> Option<Vec<f64>> {
        match &self.last {
            Some((at, model)) if at.as_slice() == x => self.objective.negated_gradient(model),
            _ => self.objective.eval(x).map(|(_, g)| g),
        }
    }
}

/// Maximizes the log marginal likelihood; returns the best model over all
/// restarts.
pub fn fit_gp(data: &Dataset, template: &KernelSpec, config: &OptimizerConfig) -> Result<GpModel> {
    fit_gp_with_report(data, template, config).map(|(m, _)| m)
}

pub fn fit_gp_with_report(
    data: &Dataset,
    template: &KernelSpec,
    config: &OptimizerConfig,
) -> Result<(GpModel, HyperoptReport)> {
    config.validate()?;
    let kernel = initial_kernel(template, data)?;
    let noise = config.fixed_noise.unwrap_or(0.1 * response_variance(data));
    let (lo, hi) = (config.log_lower, config.log_upper);

    let mut base = kernel.log_params();
    base.push(noise.ln());
    let mut free: Vec<usize> = kernel
        .free_mask()
        .into_iter()
        .enumerate()
        .filter_map(|(i, f)| f.then_some(i))
        .collect();
    if config.fixed_noise.is_none() {
        free.push(base.len() - 1);
    }
    for &i in &free {
        base[i] = base[i].clamp(lo, hi);
    }

    let objective = Objective {
        data,
        kernel: kernel.clone(),
        base,
        free,
    };
    let x0: Vec<f64> = objective.free.iter().map(|&i| objective.base[i]).collect();
    if x0.is_empty() {
        let model = GpModel::fit(&data.x, &data.y, &kernel, NoiseSpec::new(noise)?)?;
        let lml = model.log_marginal_likelihood();
        let report = HyperoptReport {
            initial_lml: Some(lml),
            best_restart: 0,
            restarts: vec![RestartOutcome {
                index: 0,
                lml: Some(lml),
                iterations: 0,
                evaluations: 1,
                converged: true,
                termination: None,
                error: None,
            }],
        };
        return Ok((model, report));
    }

    let initial_lml = objective.eval(&x0).map(|(f, _)| -f);
    let lower = vec![lo; x0.len()];
    let upper = vec![hi; x0.len()];
    let lbfgs = config.lbfgs();

    let runs: Vec<(RestartOutcome, Option<Vec<f64>>)> = (0..config.restarts)
        .into_par_iter()
        .map(|r| {
            let start: Vec<f64> = if r == 0 {
                x0.clone()
            } else {
                let mut g = rng::stream(config.seed, r as u64);
                x0.iter()
                    .map(|&v| (v + g.random_range(-1.0..=1.0)).clamp(lo, hi))
                    .collect()
            };
            match lbfgs::minimize(&mut objective.session(), &start, &lower, &upper, &lbfgs) {
                Some(res) => (
                    RestartOutcome {
                        index: r,
                        lml: Some(-res.value),
                        iterations: res.iterations,
                        evaluations: res.evaluations,
                        converged: res.converged(),
                        termination: Some(res.termination),
                        error: None,
                    },
                    Some(res.x),
                ),
                None => (
                    RestartOutcome {
                        index: r,
                        lml: None,
                        iterations: 0,
                        evaluations: 1,
                        converged: false,
                        termination: None,
                        error: Some("objective undefined at start point".to_owned()),
                    },
                    None,
                ),
            }
        })
        .collect();

    let mut best: Option<(usize, f64)> = None;
    for (outcome, _) in &runs {
        if let Some(lml) = outcome.lml {
            if best.is_none_or(|(_, b)| lml > b + 1e-9) {
                best = Some((outcome.index, lml));
            }
        }
    }
    let Some((best_index, _)) = best else {
        // Surface the factorization error from the unperturbed start.
        let last = objective
            .model(&x0)
            .err()
            .unwrap_or_else(|| Error::input("objective undefined at every start"));
        return Err(Error::AllRestartsFailed {
            restarts: config.restarts,
            last: Box::new(last),
        });
    };
    let x_best = runs[best_index]
        .1
        .as_ref()
        .expect("successful restart has a point");
    let model = objective.model(x_best)?;
    let report = HyperoptReport {
        initial_lml,
        best_restart: best_index,
        restarts: runs.into_iter().map(|(o, _)| o).collect(),
    };
    Ok((model, report))
}
