//! Box-constrained limited-memory BFGS with a projected backtracking line
//! search.
//!
//! Minimizes `f` over `lower <= x <= upper`. Every accepted iterate satisfies
//! the Armijo condition, so the objective along the accepted path never
//! increases. Terminates when the projected gradient norm drops to the
//! tolerance or the iteration cap is reached; also stops early when the line
//! search fails from steepest descent or the objective stays flat at working
//! precision.

use std::collections::VecDeque;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsConfig {
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub memory: usize,
    /// Sufficient-decrease constant for the Armijo test.
    pub armijo: f64,
    pub max_backtracks: usize,
    /// Relative per-step decrease below which a step counts as flat.
    pub flat_tolerance: f64,
}

/// Consecutive flat steps before giving up.
const FLAT_PATIENCE: usize = 5;
/// Trial points closer than this in every coordinate count as no move.
const MIN_STEP: f64 = 1e-10;

impl Default for LbfgsConfig {
    fn default() -> Self {
        LbfgsConfig {
            max_iterations: 200,
            gradient_tolerance: 1e-5,
            memory: 10,
            armijo: 1e-4,
            max_backtracks: 40,
            flat_tolerance: 1e-12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    GradientTolerance,
    IterationCap,
    LineSearchStalled,
    /// Objective stopped decreasing at working precision.
    Flat,
}

#[derive(Debug, Clone)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub projected_gradient_norm: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
    /// Objective at the start point and after each accepted step.
    pub trace: Vec<f64>,
}

impl LbfgsResult {
    pub fn converged(&self) -> bool {
        self.termination == Termination::GradientTolerance
    }
}

fn project(x: &mut [f64], lower: &[f64], upper: &[f64]) {
    for ((v, &lo), &hi) in x.iter_mut().zip(lower).zip(upper) {
        *v = v.clamp(lo, hi);
    }
}

/// Gradient with components zeroed where a bound blocks descent.
fn projected_gradient(x: &[f64], g: &[f64], lower: &[f64], upper: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(g)
        .zip(lower.iter().zip(upper))
        .map(|((&xi, &gi), (&lo, &hi))| {
            if (xi <= lo && gi > 0.0) || (xi >= hi && gi < 0.0) {
                0.0
            } else {
                gi
            }
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Two-loop recursion: returns `-H g` for the current curvature memory.
fn direction(g: &[f64], memory: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(memory.len());
    for (s, y, rho) in memory.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = memory.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y, rho), a) in memory.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

/// `eval` returns `None` where the objective is undefined (treated as +inf).
/// Objective for [`minimize`]. `gradient` is only ever requested at the
/// point most recently passed to `value`, so implementations may cache
/// whatever `value` computed.
pub trait Problem {
    /// `None` marks a point outside the domain.
    fn value(&mut self, x: &[f64]) -> Option<f64>;
    fn gradient(&mut self, x: &[f64]) -> Option<Vec<f64>>;
}

/// Adapts a closure returning value and gradient together.
pub struct Joint<F>(pub F, Option<Vec<f64>>);

impl<F> Joint<F> {
    pub fn new(f: F) -> Self {
        Joint(f, None)
    }
}

impl<F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>> Problem for Joint<F> {
    fn value(&mut self, x: &[f64]) -> Option<f64> {
        let (f, g) = (self.0)(x)?;
        self.1 = Some(g);
        Some(f)
    }

    fn gradient(&mut self, _x: &[f64]) -> Option<Vec<f64>> {
        self.1.take()
    }
}

/// Minimizer of a quadratic through `f(0)`, slope `d0` and `f(t)`, kept
/// within `[0.1 t, 0.5 t]`.
fn backtrack(t: f64, f0: f64, d0: f64, ft: f64) -> f64 {
    let curvature = ft - f0 - d0 * t;
    let next = if curvature > 0.0 && d0 < 0.0 {
        -d0 * t * t / (2.0 * curvature)
    } else {
        0.5 * t
    };
    if next.is_finite() {
        next.clamp(0.1 * t, 0.5 * t)
    } else {
        0.5 * t
    }
}

pub fn minimize<P: Problem>(
    problem: &mut P,
    x0: &[f64],
    lower: &[f64],
    upper: &[f64],
    config: &LbfgsConfig,
) -> Option<LbfgsResult> {
    assert_eq!(x0.len(), lower.len());
    assert_eq!(x0.len(), upper.len());
    let mut x = x0.to_vec();
    project(&mut x, lower, upper);
    let mut f = problem.value(&x)?;
    if !f.is_finite() {
        return None;
    }
    let mut g = problem.gradient(&x)?;
    let mut evaluations = 1;
    let mut trace = vec![f];
    let mut memory: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut iterations = 0;
    let mut flat = 0;

    let termination = loop {
        let pg = projected_gradient(&x, &g, lower, upper);
        let pg_norm = norm(&pg);
        if pg_norm <= config.gradient_tolerance {
            break Termination::GradientTolerance;
        }
        if iterations >= config.max_iterations {
            break Termination::IterationCap;
        }

        let mut d = direction(&pg, &memory);
        for (di, pgi) in d.iter_mut().zip(&pg) {
            if *pgi == 0.0 {
                *di = 0.0;
            }
        }
        if dot(&d, &pg) >= 0.0 {
            memory.clear();
            d = pg.iter().map(|v| -v).collect();
        }
        let mut step = if memory.is_empty() {
            (1.0 / norm(&d)).min(1.0)
        } else {
            1.0
        };

        let mut accepted = None;
        for _ in 0..config.max_backtracks {
            let mut trial: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + step * di).collect();
            project(&mut trial, lower, upper);
            let moved: Vec<f64> = trial.iter().zip(&x).map(|(a, b)| a - b).collect();
            if moved.iter().all(|m| m.abs() <= MIN_STEP) {
                break;
            }
            let decrease = dot(&g, &moved);
            evaluations += 1;
            match problem.value(&trial) {
                Some(ft) if ft.is_finite() => {
                    if ft <= f + config.armijo * decrease.min(0.0) && ft <= f {
                        accepted = Some((trial, ft, moved));
                        break;
                    }
                    step = backtrack(step, f, decrease / step, ft);
                }
                _ => step *= 0.5,
            }
        }

        let accepted = accepted.and_then(|(trial, ft, s)| {
            let gt = problem.gradient(&trial)?;
            Some((trial, ft, gt, s))
        });
        let Some((trial, ft, gt, s)) = accepted else {
            if memory.is_empty() {
                break Termination::LineSearchStalled;
            }
            memory.clear();
            continue;
        };
        let y: Vec<f64> = gt.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) && sy > 0.0 {
            if memory.len() == config.memory {
                memory.pop_front();
            }
            memory.push_back((s, y, 1.0 / sy));
        }
        let improvement = f - ft;
        x = trial;
        f = ft;
        g = gt;
        trace.push(f);
        iterations += 1;
        if improvement <= config.flat_tolerance * f.abs().max(1.0) {
            flat += 1;
            if flat >= FLAT_PATIENCE {
                break Termination::Flat;
            }
        } else {
            flat = 0;
        }
    };

    let projected_gradient_norm = norm(&projected_gradient(&x, &g, lower, upper));
    Some(LbfgsResult {
        x,
        value: f,
        projected_gradient_norm,
        iterations,
        evaluations,
        termination,
        trace,
    })
}
