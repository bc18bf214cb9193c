//! Training-subset size `Ns` for each ensemble member.
//!
//! Two routes: a probe search for the smallest exponent `delta` with
//! `Ns = N^delta` that reaches a target RMSE on a small sample, and the
//! closed-form estimator `Ns = N^(1/ln ln N) / (C * eps^(1/10))`.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gp::VarianceKind;
use crate::hyperopt::{self, OptimizerConfig};
use crate::kernels::KernelSpec;
use crate::metrics;

/// No subset is ever smaller than this (unless the data itself is).
pub const MIN_SUBSET: usize = 8;
/// Below this `ln ln N <= 1` and the formula exponent is not below 1.
pub const FORMULA_MIN_N: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SizingMethod {
    ProportionInference,
    EmpiricalFormula,
    FixedDelta,
    Explicit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeStep {
    pub delta: f64,
    pub subset_size: usize,
    pub rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizingPlan {
    pub n: usize,
    pub method: SizingMethod,
    pub delta: Option<f64>,
    pub epsilon: Option<f64>,
    pub c: Option<f64>,
    pub ns: usize,
    pub effective_delta: f64,
    /// False when the probe never reached `epsilon`.
    pub target_met: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub probe: Vec<ProbeStep>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl SizingPlan {
    fn new(n: usize, method: SizingMethod, ns: usize) -> Self {
        SizingPlan {
            n,
            method,
            delta: None,
            epsilon: None,
            c: None,
            ns,
            effective_delta: effective_delta(n, ns),
            target_met: true,
            probe: Vec::new(),
            warnings: Vec::new(),
        }
    }
}

pub fn effective_delta(n: usize, ns: usize) -> f64 {
    if n <= 1 {
        1.0
    } else {
        (ns as f64).ln() / (n as f64).ln()
    }
}

/// `delta(N) = 1 / ln(ln N)`.
pub fn formula_delta(n: usize) -> f64 {
    1.0 / (n as f64).ln().ln()
}

fn clamp_size(raw: f64, n: usize) -> usize {
    let floor = MIN_SUBSET.min(n);
    if raw >= n as f64 {
        n
    } else {
        (raw.ceil() as usize).clamp(floor, n)
    }
}

/// Closed-form estimator with `g(eps) = C eps^(1/10)`.
pub fn size_by_formula(n: usize, epsilon: f64, c: f64) -> Result<SizingPlan> {
    if n == 0 {
        return Err(Error::input("dataset size must be >= 1"));
    }
    if !(epsilon > 0.0) || !(c > 0.0) {
        return Err(Error::input(format!(
            "epsilon ({epsilon}) and C ({c}) must be > 0"
        )));
    }
    if n < FORMULA_MIN_N {
        let mut plan = SizingPlan::new(n, SizingMethod::EmpiricalFormula, n);
        plan.epsilon = Some(epsilon);
        plan.c = Some(c);
        let msg = format!("N = {n} < {FORMULA_MIN_N}: using the full dataset");
        log::warn!("{msg}");
        plan.warnings.push(msg);
        return Ok(plan);
    }
    let delta = formula_delta(n);
    let raw = (n as f64).powf(delta) / (c * epsilon.powf(0.1));
    let mut plan = SizingPlan::new(n, SizingMethod::EmpiricalFormula, clamp_size(raw, n));
    plan.delta = Some(delta);
    plan.epsilon = Some(epsilon);
    plan.c = Some(c);
    Ok(plan)
}

/// `Ns = ceil(N^delta)` for a caller-chosen exponent.
pub fn size_by_delta(n: usize, delta: f64) -> Result<SizingPlan> {
    if n == 0 {
        return Err(Error::input("dataset size must be >= 1"));
    }
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::input(format!("delta {delta} outside (0, 1]")));
    }
    let mut plan = SizingPlan::new(
        n,
        SizingMethod::FixedDelta,
        clamp_size((n as f64).powf(delta), n),
    );
    plan.delta = Some(delta);
    Ok(plan)
}

pub fn size_explicit(n: usize, ns: usize) -> Result<SizingPlan> {
    if ns == 0 || ns > n {
        return Err(Error::input(format!("subset size {ns} outside [1, {n}]")));
    }
    Ok(SizingPlan::new(n, SizingMethod::Explicit, ns))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub sample_size: usize,
    pub grid_start: f64,
    pub grid_step: f64,
    pub train_fraction: f64,
    pub seed: u64,
    pub kernel: KernelSpec,
    pub optimizer: OptimizerConfig,
}

impl ProbeConfig {
    pub fn new(kernel: KernelSpec) -> Self {
        ProbeConfig {
            sample_size: 2000,
            grid_start: 0.1,
            grid_step: 0.05,
            train_fraction: 0.7,
            seed: 0,
            kernel,
            optimizer: OptimizerConfig::default(),
        }
    }

    /// Ascending exponents from `grid_start` up to 1.
    pub fn grid(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for i in 0.. {
            let d = ((self.grid_start + i as f64 * self.grid_step) * 1e9).round() / 1e9;
            if d > 1.0 + 1e-12 {
                break;
            }
            out.push(d);
        }
        out
    }
}

/// Probe search for the smallest grid `delta` whose single-GP RMSE on a
/// held-out part of a random sample is within `epsilon` (response units).
pub fn infer_delta(data: &Dataset, epsilon: f64, probe: &ProbeConfig) -> Result<SizingPlan> {
    if !(epsilon > 0.0) {
        return Err(Error::input(format!("epsilon {epsilon} must be > 0")));
    }
    if !(probe.grid_start > 0.0 && probe.grid_start <= 1.0 && probe.grid_step > 0.0) {
        return Err(Error::input(
            "probe grid must start in (0, 1] with a positive step",
        ));
    }
    let n = data.len();
    let m = probe.sample_size.min(n);
    if m < 4 {
        return Err(Error::input(format!(
            "probe needs at least 4 rows, got {m}"
        )));
    }
    let sample_rows = crate::ensemble::draw_without_replacement(n, m, probe.seed);
    let sample = data.select(&sample_rows);
    let (probe_train, probe_test) = sample.split(probe.train_fraction, probe.seed)?;
    let truths = probe_test.raw_y();
    let m_train = probe_train.len();

    let grid = probe.grid();
    let mut steps = Vec::new();
    let mut chosen = None;
    for &delta in &grid {
        let size = clamp_size((m_train as f64).powf(delta), m_train);
        let subset = probe_train.select(&(0..size).collect::<Vec<_>>());
        let model = hyperopt::fit_gp(&subset, &probe.kernel, &probe.optimizer)?;
        let preds = model.predict(&probe_test.x, VarianceKind::Latent)?;
        let means: Vec<f64> = preds
            .iter()
            .map(|p| match &data.standardization {
                Some(s) => s.inverse_y(p.mean),
                None => p.mean,
            })
            .collect();
        let rmse = metrics::rmse(&means, truths.as_slice())?;
        log::debug!("probe delta={delta} size={size} rmse={rmse}");
        steps.push(ProbeStep {
            delta,
            subset_size: size,
            rmse,
        });
        if rmse <= epsilon {
            chosen = Some(delta);
            break;
        }
    }

    let (delta, met) = match chosen {
        Some(d) => (d, true),
        None => (*grid.last().expect("grid is non-empty"), false),
    };
    let mut plan = SizingPlan::new(
        n,
        SizingMethod::ProportionInference,
        clamp_size((n as f64).powf(delta), n),
    );
    plan.delta = Some(delta);
    plan.epsilon = Some(epsilon);
    plan.target_met = met;
    plan.probe = steps;
    if !met {
        let msg = format!("no probe delta reached epsilon {epsilon}; using delta {delta}");
        log::warn!("{msg}");
        plan.warnings.push(msg);
    }
    Ok(plan)
}
