//! Exact GP regression on one (sub)dataset.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernels::KernelSpec;

/// First rung of the jitter ladder, relative to the mean diagonal.
pub const JITTER_START: f64 = 1e-8;
/// Last rung of the jitter ladder, relative to the mean diagonal.
pub const JITTER_MAX: f64 = 1e-2;

const PREDICT_CHUNK: usize = 4096;

/// Observation-noise variance `sigma_n^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub variance: f64,
}

impl NoiseSpec {
    pub fn new(variance: f64) -> Result<Self> {
        if !(variance >= 0.0 && variance.is_finite()) {
            return Err(Error::input(format!(
                "noise variance {variance} must be >= 0"
            )));
        }
        Ok(NoiseSpec { variance })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub mean: f64,
    pub variance: f64,
}

/// Which variance `predict` reports.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceKind {
    /// Variance of the latent function value, without observation noise.
    #[default]
    Latent,
    /// Latent variance plus `sigma_n^2`.
    Observation,
}

/// A fitted exact GP. Immutable after construction.
#[derive(Debug, Clone)]
pub struct GpModel {
    x: DMatrix<f64>,
    y: DVector<f64>,
    kernel: KernelSpec,
    noise: NoiseSpec,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    jitter: f64,
}

/// Factorizes `k` as given, then `k + jitter I` with jitter escalating
/// tenfold per failure. Returns the factor and the absolute jitter that
/// succeeded (0 when none was needed).
pub fn factorize_with_jitter(k: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64)> {
    if let Some(chol) = Cholesky::new(k.clone()) {
        return Ok((chol, 0.0));
    }
    let n = k.nrows();
    let mean_diag = k.diagonal().sum() / n as f64;
    let base = if mean_diag > 0.0 && mean_diag.is_finite() {
        mean_diag
    } else {
        1.0
    };
    let mut tried = Vec::new();
    let mut rel = JITTER_START;
    while rel <= JITTER_MAX * (1.0 + 1e-9) {
        let jitter = rel * base;
        tried.push(jitter);
        let mut m = k.clone();
        for i in 0..n {
            m[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(m) {
            log::debug!("cholesky needed jitter {jitter:e} (rel {rel:e})");
            return Ok((chol, jitter));
        }
        rel *= 10.0;
    }
    Err(Error::Factorization { jitters: tried })
}

/// Fits an exact GP with fixed hyperparameters.
pub fn fit_exact(data: &Dataset, kernel: &KernelSpec, noise: NoiseSpec) -> Result<GpModel> {
    GpModel::fit(&data.x, &data.y, kernel, noise)
}

impl GpModel {
    pub fn fit(
        x: &DMatrix<f64>,
        y: &DVector<f64>,
        kernel: &KernelSpec,
        noise: NoiseSpec,
    ) -> Result<GpModel> {
        if x.nrows() == 0 {
            return Err(Error::input("cannot fit a GP to zero rows"));
        }
        if x.nrows() != y.len() {
            return Err(Error::Dimension {
                expected: x.nrows(),
                got: y.len(),
                context: "response length vs feature rows",
            });
        }
        NoiseSpec::new(noise.variance)?;
        let kernel = kernel.resolve(x.ncols())?;
        let mut k = kernel.gram(x, None)?;
        for i in 0..k.nrows() {
            k[(i, i)] += noise.variance;
        }
        let (chol, jitter) = factorize_with_jitter(&k)?;
        let alpha = chol.solve(y);
        Ok(GpModel {
            x: x.clone(),
            y: y.clone(),
            kernel,
            noise,
            chol,
            alpha,
            jitter,
        })
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn noise(&self) -> NoiseSpec {
        self.noise
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    /// Lower-triangular factor `L` with `L L^T = K + sigma_n^2 I + jitter I`.
    pub fn cholesky_factor(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn train_x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn train_y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.x.ncols()
    }

    /// Free kernel log-parameters followed by `log sigma_n^2`.
    pub fn log_params(&self) -> Vec<f64> {
        let mut p = self.kernel.log_params();
        p.push(self.noise.variance.ln());
        p
    }

    pub fn param_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self
            .kernel
            .hyperparameters()
            .into_iter()
            .map(|h| h.id)
            .collect();
        ids.push("noise.variance".to_owned());
        ids
    }

    pub fn predict(&self, xstar: &DMatrix<f64>, kind: VarianceKind) -> Result<Vec<Prediction>> {
        if xstar.ncols() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                got: xstar.ncols(),
                context: "query columns vs training columns",
            });
        }
        let extra = match kind {
            VarianceKind::Latent => 0.0,
            VarianceKind::Observation => self.noise.variance,
        };
        let l = self.chol.l_dirty();
        let mut out = Vec::with_capacity(xstar.nrows());
        let mut clipped = 0usize;
        let mut start = 0;
        while start < xstar.nrows() {
            let rows = PREDICT_CHUNK.min(xstar.nrows() - start);
            let chunk = xstar.rows(start, rows).into_owned();
            let cross = self.kernel.gram(&self.x, Some(&chunk))?;
            let prior = self.kernel.diag(&chunk)?;
            let means = cross.tr_mul(&self.alpha);
            let v = l
                .solve_lower_triangular(&cross)
                .expect("cholesky diagonal is nonzero");
            for (j, col) in v.column_iter().enumerate() {
                let mut var = prior[j] - col.norm_squared();
                if var < 0.0 {
                    clipped += 1;
                    var = 0.0;
                }
                out.push(Prediction {
                    mean: means[j],
                    variance: var + extra,
                });
            }
            start += rows;
        }
        if clipped > 0 {
            log::debug!("clipped {clipped} negative predictive variance(s) to zero");
        }
        Ok(out)
    }

    /// `-1/2 y^T A^{-1} y - 1/2 log|A| - n/2 log 2 pi` with
    /// `A = K + sigma_n^2 I` (plus the factorization jitter).
    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.len() as f64;
        let quad = self.y.dot(&self.alpha);
        let log_det: f64 = self
            .chol
            .l_dirty()
            .diagonal()
            .iter()
            .map(|d| d.ln())
            .sum::<f64>()
            * 2.0;
        -0.5 * quad - 0.5 * log_det - 0.5 * n * (2.0 * PI).ln()
    }

    /// `dLML/d log(theta)` for every kernel hyperparameter (fixed ones
    /// included) then `log sigma_n^2`, via
    /// `1/2 tr[(alpha alpha^T - A^{-1}) dA/dtheta]`.
    pub fn lml_gradient(&self) -> Result<Vec<f64>> {
        let (_, grads) = self.kernel.gram_with_gradients(&self.x)?;
        let mut w = self.chol.inverse();
        w.neg_mut();
        w.ger(1.0, &self.alpha, &self.alpha, 1.0);
        let mut out: Vec<f64> = grads.iter().map(|g| 0.5 * w.dot(g)).collect();
        out.push(0.5 * self.noise.variance * w.trace());
        Ok(out)
    }
}
