//! Kernel composition algebra.
//!
//! A [`KernelSpec`] is a tree of sums and products over parameterized base
//! kernels. Every hyperparameter is stored as a positive value and exposed
//! to optimizers in log space; [`KernelSpec::log_params`] and
//! [`KernelSpec::with_log_params`] walk the leaves depth-first in a fixed
//! order, so parameter indices are stable for a given tree shape.

mod parse;

use std::f64::consts::PI;

use nalgebra::{DMatrix, Dyn, Matrix, RowDVector, Storage, U1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use parse::parse_kernel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BaseKind {
    Rbf,
    Linear,
    WhiteNoise,
    Bias,
    Cosine,
    BrownianMotion,
    PeriodicMatern32,
}

impl BaseKind {
    pub const ALL: [BaseKind; 7] = [
        BaseKind::Rbf,
        BaseKind::Linear,
        BaseKind::WhiteNoise,
        BaseKind::Bias,
        BaseKind::Cosine,
        BaseKind::BrownianMotion,
        BaseKind::PeriodicMatern32,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaseKind::Rbf => "rbf",
            BaseKind::Linear => "linear",
            BaseKind::WhiteNoise => "white",
            BaseKind::Bias => "bias",
            BaseKind::Cosine => "cosine",
            BaseKind::BrownianMotion => "brownian",
            BaseKind::PeriodicMatern32 => "periodicmatern32",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        let kind = match name.to_ascii_lowercase().as_str() {
            "rbf" | "se" | "sqexp" => BaseKind::Rbf,
            "linear" | "lin" => BaseKind::Linear,
            "white" | "whitenoise" => BaseKind::WhiteNoise,
            "bias" | "constant" => BaseKind::Bias,
            "cosine" | "cos" => BaseKind::Cosine,
            "brownian" | "brownianmotion" => BaseKind::BrownianMotion,
            "periodicmatern32" | "pm32" => BaseKind::PeriodicMatern32,
            _ => return None,
        };
        Some(kind)
    }

    pub fn has_lengthscales(self) -> bool {
        matches!(
            self,
            BaseKind::Rbf | BaseKind::Cosine | BaseKind::PeriodicMatern32
        )
    }

    pub fn has_period(self) -> bool {
        self == BaseKind::PeriodicMatern32
    }
}

/// Which hyperparameters were given explicitly rather than left for
/// data-driven initialization.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Explicit {
    pub variance: bool,
    pub lengthscales: bool,
    pub period: bool,
    pub origin: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaseKernel {
    pub kind: BaseKind,
    pub variance: f64,
    /// One per active input dimension once resolved; empty means "not yet
    /// sized to the data".
    pub lengthscales: Vec<f64>,
    pub period: f64,
    /// Brownian motion only: inputs are measured from this origin and
    /// clipped at zero. Not a hyperparameter.
    pub origin: f64,
    /// Input columns this term sees; `None` means all columns.
    pub active_dims: Option<Vec<usize>>,
    /// Fixed terms contribute no free parameters to optimization.
    pub fixed: bool,
    pub explicit: Explicit,
}

impl BaseKernel {
    pub fn new(kind: BaseKind) -> Self {
        BaseKernel {
            kind,
            variance: 1.0,
            lengthscales: Vec::new(),
            period: 1.0,
            origin: 0.0,
            active_dims: None,
            fixed: false,
            explicit: Explicit::default(),
        }
    }

    pub fn with_variance(mut self, variance: f64) -> Self {
        self.variance = variance;
        self.explicit.variance = true;
        self
    }

    pub fn with_lengthscales(mut self, lengthscales: Vec<f64>) -> Self {
        self.lengthscales = lengthscales;
        self.explicit.lengthscales = true;
        self
    }

    pub fn with_period(mut self, period: f64) -> Self {
        self.period = period;
        self.explicit.period = true;
        self
    }

    pub fn with_origin(mut self, origin: f64) -> Self {
        self.origin = origin;
        self.explicit.origin = true;
        self
    }

    pub fn on_dims(mut self, dims: Vec<usize>) -> Self {
        self.active_dims = Some(dims);
        self
    }

    pub fn fixed(mut self) -> Self {
        self.fixed = true;
        self
    }

    fn n_active(&self, input_dim: usize) -> usize {
        self.active_dims.as_ref().map_or(input_dim, Vec::len)
    }

    fn num_params(&self) -> usize {
        1 + if self.kind.has_lengthscales() {
            self.lengthscales.len()
        } else {
            0
        } + usize::from(self.kind.has_period())
    }

    fn push_params(&self, leaf: usize, out: &mut Vec<Hyperparameter>) {
        let name = self.kind.name();
        out.push(Hyperparameter {
            id: format!("k{leaf}.{name}.variance"),
            value: self.variance,
            fixed: self.fixed,
        });
        if self.kind.has_lengthscales() {
            for (j, &l) in self.lengthscales.iter().enumerate() {
                out.push(Hyperparameter {
                    id: format!("k{leaf}.{name}.lengthscale.{j}"),
                    value: l,
                    fixed: self.fixed,
                });
            }
        }
        if self.kind.has_period() {
            out.push(Hyperparameter {
                id: format!("k{leaf}.{name}.period"),
                value: self.period,
                fixed: self.fixed,
            });
        }
    }

    fn set_log_params(&mut self, values: &mut impl Iterator<Item = f64>) -> Result<()> {
        let mut next = || {
            values
                .next()
                .ok_or_else(|| Error::input("too few log-parameters for kernel"))
        };
        self.variance = next()?.exp();
        if self.kind.has_lengthscales() {
            for l in self.lengthscales.iter_mut() {
                *l = next()?.exp();
            }
        }
        if self.kind.has_period() {
            self.period = next()?.exp();
        }
        self.explicit.variance = true;
        self.explicit.lengthscales = true;
        self.explicit.period |= self.kind.has_period();
        Ok(())
    }

    fn check(&self, input_dim: usize) -> Result<()> {
        if let Some(dims) = &self.active_dims {
            if dims.is_empty() {
                return Err(Error::input("empty active-dimension list"));
            }
            if let Some(&bad) = dims.iter().find(|&&c| c >= input_dim) {
                return Err(Error::Dimension {
                    expected: input_dim,
                    got: bad + 1,
                    context: "active dimension beyond input columns",
                });
            }
        }
        let active = self.n_active(input_dim);
        if self.kind.has_lengthscales() && self.lengthscales.len() != active {
            return Err(Error::Dimension {
                expected: active,
                got: self.lengthscales.len(),
                context: "lengthscale count vs active dimensions",
            });
        }
        if self.kind == BaseKind::BrownianMotion && active != 1 {
            return Err(Error::Dimension {
                expected: 1,
                got: active,
                context: "brownian motion kernel is one-dimensional",
            });
        }
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.variance)
            || !self.lengthscales.iter().all(|&l| positive(l))
            || (self.kind.has_period() && !positive(self.period))
        {
            return Err(Error::input(format!(
                "{} hyperparameters must be finite and strictly positive",
                self.kind.name()
            )));
        }
        Ok(())
    }

    fn resolve(&mut self, input_dim: usize) -> Result<()> {
        let active = self.n_active(input_dim);
        if self.kind.has_lengthscales() {
            match self.lengthscales.len() {
                0 => self.lengthscales = vec![1.0; active],
                1 if active > 1 => self.lengthscales = vec![self.lengthscales[0]; active],
                _ => {}
            }
        } else {
            self.lengthscales.clear();
        }
        self.check(input_dim)
    }

    fn gather<S>(&self, row: &Matrix<f64, U1, Dyn, S>) -> Vec<f64>
    where
        S: Storage<f64, U1, Dyn>,
    {
        match &self.active_dims {
            Some(dims) => dims.iter().map(|&c| row[c]).collect(),
            None => row.iter().copied().collect(),
        }
    }

    /// Pointwise covariance on already-gathered active coordinates.
    fn eval_active(&self, a: &[f64], b: &[f64]) -> f64 {
        let s2 = self.variance;
        match self.kind {
            BaseKind::Rbf => {
                let q: f64 = a
                    .iter()
                    .zip(b)
                    .zip(&self.lengthscales)
                    .map(|((x, y), l)| {
                        let d = (x - y) / l;
                        d * d
                    })
                    .sum();
                s2 * (-0.5 * q).exp()
            }
            BaseKind::Linear => s2 * a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>(),
            BaseKind::Bias => s2,
            BaseKind::WhiteNoise => {
                if a == b {
                    s2
                } else {
                    0.0
                }
            }
            BaseKind::Cosine => {
                let s: f64 = a
                    .iter()
                    .zip(b)
                    .zip(&self.lengthscales)
                    .map(|((x, y), l)| (x - y) / l)
                    .sum();
                s2 * s.cos()
            }
            BaseKind::BrownianMotion => {
                let u = (a[0] - self.origin).max(0.0);
                let v = (b[0] - self.origin).max(0.0);
                s2 * u.min(v)
            }
            BaseKind::PeriodicMatern32 => {
                let t = 3f64.sqrt() * self.periodic_distance(a, b);
                s2 * (1.0 + t) * (-t).exp()
            }
        }
    }

    fn periodic_distance(&self, a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .zip(&self.lengthscales)
            .map(|((x, y), l)| {
                let u = (PI * (x - y) / self.period).sin() / l;
                u * u
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Log-space derivatives of the pointwise covariance, in parameter order.
    fn grad_active(&self, a: &[f64], b: &[f64], k: f64, out: &mut [f64]) {
        out[0] = k;
        match self.kind {
            BaseKind::Rbf => {
                for (j, l) in self.lengthscales.iter().enumerate() {
                    let d = (a[j] - b[j]) / l;
                    out[1 + j] = k * d * d;
                }
            }
            BaseKind::Cosine => {
                let s: f64 = a
                    .iter()
                    .zip(b)
                    .zip(&self.lengthscales)
                    .map(|((x, y), l)| (x - y) / l)
                    .sum();
                let sin = self.variance * s.sin();
                for (j, l) in self.lengthscales.iter().enumerate() {
                    out[1 + j] = sin * (a[j] - b[j]) / l;
                }
            }
            BaseKind::PeriodicMatern32 => {
                let t = 3f64.sqrt() * self.periodic_distance(a, b);
                let scale = 3.0 * self.variance * (-t).exp();
                let mut d_period = 0.0;
                for (j, l) in self.lengthscales.iter().enumerate() {
                    let phase = PI * (a[j] - b[j]) / self.period;
                    let u = phase.sin() / l;
                    out[1 + j] = scale * u * u;
                    d_period += u * phase.cos() * phase / l;
                }
                out[1 + self.lengthscales.len()] = scale * d_period;
            }
            BaseKind::Linear | BaseKind::Bias | BaseKind::WhiteNoise | BaseKind::BrownianMotion => {
            }
        }
    }
}

/// One hyperparameter as seen by optimizers and reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameter {
    pub id: String,
    pub value: f64,
    pub fixed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum KernelSpec {
    Base(BaseKernel),
    Sum(Vec<KernelSpec>),
    Product(Vec<KernelSpec>),
}

impl From<BaseKernel> for KernelSpec {
    fn from(base: BaseKernel) -> Self {
        KernelSpec::Base(base)
    }
}

impl std::str::FromStr for KernelSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_kernel(s)
    }
}

impl KernelSpec {
    pub fn base(kind: BaseKind) -> Self {
        KernelSpec::Base(BaseKernel::new(kind))
    }

    /// Sum node; nested sums are flattened.
    pub fn sum(children: Vec<KernelSpec>) -> Result<Self> {
        Self::composite(children, true)
    }

    /// Product node; nested products are flattened.
    pub fn product(children: Vec<KernelSpec>) -> Result<Self> {
        Self::composite(children, false)
    }

    fn composite(children: Vec<KernelSpec>, is_sum: bool) -> Result<Self> {
        let mut flat = Vec::with_capacity(children.len());
        for child in children {
            match (child, is_sum) {
                (KernelSpec::Sum(inner), true) | (KernelSpec::Product(inner), false) => {
                    flat.extend(inner)
                }
                (other, _) => flat.push(other),
            }
        }
        if flat.len() < 2 {
            return Err(Error::input("sum/product nodes need at least two children"));
        }
        Ok(if is_sum {
            KernelSpec::Sum(flat)
        } else {
            KernelSpec::Product(flat)
        })
    }

    pub fn leaves(&self) -> Vec<&BaseKernel> {
        let mut out = Vec::new();
        self.visit(&mut |b| out.push(b));
        out
    }

    fn visit<'a>(&'a self, f: &mut impl FnMut(&'a BaseKernel)) {
        match self {
            KernelSpec::Base(b) => f(b),
            KernelSpec::Sum(c) | KernelSpec::Product(c) => c.iter().for_each(|k| k.visit(f)),
        }
    }

    pub fn leaves_mut(&mut self) -> Vec<&mut BaseKernel> {
        let mut out = Vec::new();
        fn walk<'a>(k: &'a mut KernelSpec, out: &mut Vec<&'a mut BaseKernel>) {
            match k {
                KernelSpec::Base(b) => out.push(b),
                KernelSpec::Sum(c) | KernelSpec::Product(c) => {
                    c.iter_mut().for_each(|k| walk(k, out))
                }
            }
        }
        walk(self, &mut out);
        out
    }

    /// Sizes per-dimension lengthscales to `input_dim` columns and checks the
    /// whole tree against that input width.
    pub fn resolve(&self, input_dim: usize) -> Result<KernelSpec> {
        let mut spec = self.clone();
        spec.check_structure()?;
        for leaf in spec.leaves_mut() {
            leaf.resolve(input_dim)?;
        }
        Ok(spec)
    }

    fn check_structure(&self) -> Result<()> {
        match self {
            KernelSpec::Base(_) => Ok(()),
            KernelSpec::Sum(c) | KernelSpec::Product(c) => {
                if c.len() < 2 {
                    return Err(Error::input("sum/product nodes need at least two children"));
                }
                c.iter().try_for_each(KernelSpec::check_structure)
            }
        }
    }

    pub fn check_dims(&self, input_dim: usize) -> Result<()> {
        self.check_structure()?;
        self.leaves()
            .into_iter()
            .try_for_each(|l| l.check(input_dim))
    }

    pub fn num_params(&self) -> usize {
        self.leaves().iter().map(|l| l.num_params()).sum()
    }

    pub fn hyperparameters(&self) -> Vec<Hyperparameter> {
        let mut out = Vec::new();
        for (i, leaf) in self.leaves().into_iter().enumerate() {
            leaf.push_params(i, &mut out);
        }
        out
    }

    pub fn free_mask(&self) -> Vec<bool> {
        self.hyperparameters().iter().map(|h| !h.fixed).collect()
    }

    pub fn log_params(&self) -> Vec<f64> {
        self.hyperparameters()
            .iter()
            .map(|h| h.value.ln())
            .collect()
    }

    /// New spec with every hyperparameter replaced by `exp(values[i])`.
    pub fn with_log_params(&self, values: &[f64]) -> Result<KernelSpec> {
        if values.len() != self.num_params() {
            return Err(Error::Dimension {
                expected: self.num_params(),
                got: values.len(),
                context: "log-parameter vector",
            });
        }
        let mut spec = self.clone();
        let mut it = values.iter().copied();
        for leaf in spec.leaves_mut() {
            leaf.set_log_params(&mut it)?;
        }
        Ok(spec)
    }

    /// Covariance between two input rows (full rows; active dimensions are
    /// selected internally).
    pub fn eval(&self, x1: &[f64], x2: &[f64]) -> Result<f64> {
        if x1.len() != x2.len() {
            return Err(Error::Dimension {
                expected: x1.len(),
                got: x2.len(),
                context: "kernel arguments",
            });
        }
        self.check_dims(x1.len())?;
        let a = RowDVector::from_row_slice(x1);
        let b = RowDVector::from_row_slice(x2);
        Ok(self.eval_rows(&a, &b))
    }

    fn eval_rows<S1, S2>(&self, a: &Matrix<f64, U1, Dyn, S1>, b: &Matrix<f64, U1, Dyn, S2>) -> f64
    where
        S1: Storage<f64, U1, Dyn>,
        S2: Storage<f64, U1, Dyn>,
    {
        match self {
            KernelSpec::Base(leaf) => leaf.eval_active(&leaf.gather(a), &leaf.gather(b)),
            KernelSpec::Sum(c) => c.iter().map(|k| k.eval_rows(a, b)).sum(),
            KernelSpec::Product(c) => c.iter().map(|k| k.eval_rows(a, b)).product(),
        }
    }

    /// Prior variance `k(x, x)` for every row of `x`.
    pub fn diag(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        self.check_dims(x.ncols())?;
        Ok(x.row_iter().map(|r| self.eval_rows(&r, &r)).collect())
    }

    /// Covariance matrix `K(X, X)` when `x2` is `None`, else `K(X, X2)`.
    ///
    /// The square case fills the upper triangle and mirrors it, so the
    /// result is exactly symmetric.
    pub fn gram(&self, x: &DMatrix<f64>, x2: Option<&DMatrix<f64>>) -> Result<DMatrix<f64>> {
        self.check_dims(x.ncols())?;
        if let Some(x2) = x2 {
            if x2.ncols() != x.ncols() {
                return Err(Error::Dimension {
                    expected: x.ncols(),
                    got: x2.ncols(),
                    context: "gram second argument columns",
                });
            }
        }
        Ok(self.gram_unchecked(x, x2))
    }

    fn gram_unchecked(&self, x: &DMatrix<f64>, x2: Option<&DMatrix<f64>>) -> DMatrix<f64> {
        match self {
            KernelSpec::Base(leaf) => leaf_gram(leaf, x, x2),
            KernelSpec::Sum(c) => {
                let mut acc = c[0].gram_unchecked(x, x2);
                for k in &c[1..] {
                    acc += k.gram_unchecked(x, x2);
                }
                acc
            }
            KernelSpec::Product(c) => {
                let mut acc = c[0].gram_unchecked(x, x2);
                for k in &c[1..] {
                    acc.component_mul_assign(&k.gram_unchecked(x, x2));
                }
                acc
            }
        }
    }

    /// Gram matrix plus its derivative with respect to every log
    /// hyperparameter (fixed ones included), in [`Self::hyperparameters`]
    /// order.
    pub fn gram_with_gradients(
        &self,
        x: &DMatrix<f64>,
    ) -> Result<(DMatrix<f64>, Vec<DMatrix<f64>>)> {
        self.check_dims(x.ncols())?;
        Ok(self.gram_grad_unchecked(x))
    }

    fn gram_grad_unchecked(&self, x: &DMatrix<f64>) -> (DMatrix<f64>, Vec<DMatrix<f64>>) {
        match self {
            KernelSpec::Base(leaf) => leaf_gram_grad(leaf, x),
            KernelSpec::Sum(c) => {
                let mut grads = Vec::new();
                let mut acc: Option<DMatrix<f64>> = None;
                for child in c {
                    let (k, g) = child.gram_grad_unchecked(x);
                    grads.extend(g);
                    acc = Some(match acc {
                        Some(a) => a + k,
                        None => k,
                    });
                }
                (acc.expect("composite has children"), grads)
            }
            KernelSpec::Product(c) => {
                let parts: Vec<_> = c.iter().map(|k| k.gram_grad_unchecked(x)).collect();
                let mut total = parts[0].0.clone();
                for (k, _) in &parts[1..] {
                    total.component_mul_assign(k);
                }
                let mut grads = Vec::new();
                for (i, (_, child_grads)) in parts.iter().enumerate() {
                    let mut others = DMatrix::from_element(x.nrows(), x.nrows(), 1.0);
                    for (j, (k, _)) in parts.iter().enumerate() {
                        if j != i {
                            others.component_mul_assign(k);
                        }
                    }
                    grads.extend(child_grads.iter().map(|g| g.component_mul(&others)));
                }
                (total, grads)
            }
        }
    }

    /// `dK/d log(theta)` for each free hyperparameter, keyed by parameter id.
    pub fn gram_gradients(&self, x: &DMatrix<f64>) -> Result<Vec<(String, DMatrix<f64>)>> {
        let (_, grads) = self.gram_with_gradients(x)?;
        Ok(self
            .hyperparameters()
            .into_iter()
            .zip(grads)
            .filter(|(h, _)| !h.fixed)
            .map(|(h, g)| (h.id, g))
            .collect())
    }
}

fn leaf_gram(leaf: &BaseKernel, x: &DMatrix<f64>, x2: Option<&DMatrix<f64>>) -> DMatrix<f64> {
    let rows: Vec<Vec<f64>> = x.row_iter().map(|r| leaf.gather(&r)).collect();
    match x2 {
        None => {
            let n = rows.len();
            let mut k = DMatrix::zeros(n, n);
            for i in 0..n {
                for j in i..n {
                    let v = leaf.eval_active(&rows[i], &rows[j]);
                    k[(i, j)] = v;
                    k[(j, i)] = v;
                }
            }
            k
        }
        Some(x2) => {
            let cols: Vec<Vec<f64>> = x2.row_iter().map(|r| leaf.gather(&r)).collect();
            DMatrix::from_fn(rows.len(), cols.len(), |i, j| {
                leaf.eval_active(&rows[i], &cols[j])
            })
        }
    }
}

fn leaf_gram_grad(leaf: &BaseKernel, x: &DMatrix<f64>) -> (DMatrix<f64>, Vec<DMatrix<f64>>) {
    let rows: Vec<Vec<f64>> = x.row_iter().map(|r| leaf.gather(&r)).collect();
    let n = rows.len();
    let p = leaf.num_params();
    let mut k = DMatrix::zeros(n, n);
    let mut grads = vec![DMatrix::zeros(n, n); p];
    let mut buf = vec![0.0; p];
    for i in 0..n {
        for j in i..n {
            let v = leaf.eval_active(&rows[i], &rows[j]);
            k[(i, j)] = v;
            k[(j, i)] = v;
            leaf.grad_active(&rows[i], &rows[j], v, &mut buf);
            for (g, &b) in grads.iter_mut().zip(&buf) {
                g[(i, j)] = b;
                g[(j, i)] = b;
            }
        }
    }
    (k, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn rbf(var: f64, ls: f64) -> KernelSpec {
        BaseKernel::new(BaseKind::Rbf)
            .with_variance(var)
            .with_lengthscales(vec![ls])
            .into()
    }

    fn line(points: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(points.len(), 1, points)
    }

    #[test]
    fn rbf_at_zero_distance_is_variance() {
        assert_eq!(rbf(1.0, 1.0).eval(&[0.3], &[0.3]).unwrap(), 1.0);
    }

    #[test]
    fn rbf_at_distance_two() {
        // exp(-(2^2) / 2)
        let v = rbf(1.0, 1.0).eval(&[0.0], &[2.0]).unwrap();
        assert_relative_eq!(v, 0.1353352832366127, max_relative = 1e-15);
        assert_relative_eq!(v, (-2.0f64).exp(), max_relative = 1e-15);
    }

    #[test]
    fn white_noise_off_diagonal_is_zero() {
        let w: KernelSpec = BaseKernel::new(BaseKind::WhiteNoise)
            .with_variance(2.5)
            .into();
        assert_eq!(w.eval(&[0.0, 1.0], &[0.0, 1.5]).unwrap(), 0.0);
        assert_eq!(w.eval(&[0.0, 1.0], &[0.0, 1.0]).unwrap(), 2.5);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let k = rbf(1.0, 1.0);
        assert!(matches!(
            k.eval(&[0.0], &[0.0, 1.0]),
            Err(Error::Dimension { .. })
        ));
        assert!(matches!(
            k.eval(&[0.0, 1.0], &[0.0, 1.0]),
            Err(Error::Dimension { .. })
        ));
        let x = line(&[0.0, 1.0]);
        let x2 = DMatrix::zeros(2, 2);
        assert!(k.gram(&x, Some(&x2)).is_err());
    }

    #[test]
    fn single_point_gram() {
        let k = rbf(1.7, 0.4);
        let g = k.gram(&line(&[3.0]), None).unwrap();
        assert_eq!(g.shape(), (1, 1));
        assert_eq!(g[(0, 0)], 1.7);
    }

    #[test]
    fn rbf_gram_on_integer_grid() {
        let g = rbf(1.0, 1.0).gram(&line(&[0.0, 1.0, 2.0]), None).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let d = i as f64 - j as f64;
                assert_relative_eq!(g[(i, j)], (-d * d / 2.0).exp(), max_relative = 1e-15);
            }
        }
    }

    #[test]
    fn sum_gram_is_elementwise_sum() {
        let x = DMatrix::from_row_slice(3, 2, &[0.1, 0.2, -1.0, 0.5, 2.0, -0.3]);
        let a: KernelSpec = BaseKernel::new(BaseKind::Rbf).into();
        let b: KernelSpec = BaseKernel::new(BaseKind::Linear).with_variance(0.5).into();
        let a = a.resolve(2).unwrap();
        let sum = KernelSpec::sum(vec![a.clone(), b.clone()]).unwrap();
        let expect = a.gram(&x, None).unwrap() + b.gram(&x, None).unwrap();
        assert_eq!(sum.gram(&x, None).unwrap(), expect);
    }

    #[test]
    fn variance_gradient_is_gram_itself() {
        let x = line(&[0.0, 0.7, 2.0]);
        let k = rbf(1.3, 0.8);
        let grads = k.gram_gradients(&x).unwrap();
        assert_eq!(grads[0].0, "k0.rbf.variance");
        assert_eq!(grads[0].1, k.gram(&x, None).unwrap());
    }

    #[test]
    fn white_noise_gradient_is_scaled_identity() {
        let x = line(&[0.0, 0.7, 2.0, 3.0]);
        let w: KernelSpec = BaseKernel::new(BaseKind::WhiteNoise)
            .with_variance(0.3)
            .into();
        let grads = w.gram_gradients(&x).unwrap();
        assert_eq!(grads.len(), 1);
        assert_eq!(grads[0].1, DMatrix::identity(4, 4) * 0.3);
    }

    #[test]
    fn rbf_lengthscale_gradient_off_diagonal() {
        // d/dlog(l) exp(-d^2/(2 l^2)) = exp(-d^2/(2 l^2)) * d^2 / l^2; d=2, l=1
        let grads = rbf(1.0, 1.0).gram_gradients(&line(&[0.0, 2.0])).unwrap();
        let (id, g) = &grads[1];
        assert_eq!(id, "k0.rbf.lengthscale.0");
        assert_relative_eq!(g[(0, 1)], (-2.0f64).exp() * 4.0, max_relative = 1e-14);
        assert_eq!(g[(0, 0)], 0.0);
    }

    #[test]
    fn fixed_terms_have_no_free_gradients() {
        let x = line(&[0.0, 1.0]);
        let spec = KernelSpec::sum(vec![
            rbf(1.0, 1.0),
            BaseKernel::new(BaseKind::Bias).fixed().into(),
        ])
        .unwrap();
        let ids: Vec<_> = spec
            .gram_gradients(&x)
            .unwrap()
            .into_iter()
            .map(|g| g.0)
            .collect();
        assert_eq!(ids, ["k0.rbf.variance", "k0.rbf.lengthscale.0"]);
    }

    #[test]
    fn composites_need_two_children() {
        assert!(KernelSpec::sum(vec![rbf(1.0, 1.0)]).is_err());
        assert!(KernelSpec::Product(vec![rbf(1.0, 1.0)])
            .check_dims(1)
            .is_err());
    }

    #[test]
    fn log_params_round_trip() {
        let spec = KernelSpec::product(vec![
            rbf(2.0, 0.5),
            BaseKernel::new(BaseKind::Linear).into(),
        ])
        .unwrap();
        let logs = spec.log_params();
        assert_eq!(logs.len(), 3);
        let back = spec.with_log_params(&logs).unwrap();
        for (a, b) in back.hyperparameters().iter().zip(spec.hyperparameters()) {
            assert_relative_eq!(a.value, b.value, max_relative = 1e-15);
        }
        assert!(spec.with_log_params(&[0.0]).is_err());
    }

    #[test]
    fn brownian_requires_one_dimension_and_clips_at_origin() {
        let bm: KernelSpec = BaseKernel::new(BaseKind::BrownianMotion)
            .with_origin(-1.0)
            .into();
        assert_eq!(bm.eval(&[0.0], &[2.0]).unwrap(), 1.0);
        assert_eq!(bm.eval(&[-3.0], &[2.0]).unwrap(), 0.0);
        assert!(bm.resolve(2).is_err());
        let on_col = BaseKernel::new(BaseKind::BrownianMotion).on_dims(vec![1]);
        assert!(KernelSpec::from(on_col).resolve(3).is_ok());
    }

    #[test]
    fn active_dims_select_columns() {
        let k: KernelSpec = BaseKernel::new(BaseKind::Linear).on_dims(vec![1]).into();
        assert_eq!(k.eval(&[5.0, 2.0], &[7.0, 3.0]).unwrap(), 6.0);
        assert!(k.eval(&[5.0], &[7.0]).is_err());
    }

    #[test]
    fn resolve_broadcasts_lengthscales() {
        let k = rbf(1.0, 0.5).resolve(3).unwrap();
        assert_eq!(k.leaves()[0].lengthscales, vec![0.5; 3]);
        let unset: KernelSpec = BaseKernel::new(BaseKind::Cosine).into();
        assert_eq!(
            unset.resolve(2).unwrap().leaves()[0].lengthscales,
            vec![1.0; 2]
        );
    }

    #[test]
    fn nonpositive_hyperparameters_are_rejected() {
        assert!(rbf(0.0, 1.0).eval(&[0.0], &[0.0]).is_err());
        assert!(rbf(1.0, -1.0).eval(&[0.0], &[0.0]).is_err());
    }
}
