//! Bagged ensembles of exact GPs.
//!
//! Each of the K members is fitted on its own simple random sample of `Ns`
//! rows (with replacement by default) with an independent hyperparameter
//! fit. Member `i` draws from RNG stream `(seed, i)`, so results do not
//! depend on how members are scheduled across threads.

use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::index;
use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Standardization};
use crate::error::{Error, Result};
use crate::gp::{GpModel, NoiseSpec, Prediction, VarianceKind};
use crate::hyperopt::{self, OptimizerConfig};
use crate::kernels::KernelSpec;
use crate::rng;

/// Precision floor for product-of-experts weights.
pub const POE_VARIANCE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Combination {
    #[default]
    Average,
    Poe,
}

impl std::str::FromStr for Combination {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "average" | "avg" | "mean" => Ok(Combination::Average),
            "poe" | "product" | "product-of-experts" => Ok(Combination::Poe),
            other => Err(Error::input(format!("unknown combination rule '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    pub k: usize,
    pub subset_size: usize,
    pub with_replacement: bool,
    pub combination: Combination,
    pub seed: u64,
    /// Worker threads for fitting and prediction; `None` uses the global
    /// pool. Never changes results.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            k: 30,
            subset_size: 0,
            with_replacement: true,
            combination: Combination::Average,
            seed: 0,
            workers: None,
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.k == 0 {
            return Err(Error::input("ensemble needs K >= 1"));
        }
        if self.subset_size == 0 || self.subset_size > n {
            return Err(Error::input(format!(
                "subset size {} outside [1, {n}]",
                self.subset_size
            )));
        }
        if self.workers == Some(0) {
            return Err(Error::input("workers must be >= 1"));
        }
        Ok(())
    }
}

pub fn draw_with_replacement(n: usize, size: usize, rng: &mut impl Rng) -> Vec<usize> {
    (0..size).map(|_| rng.random_range(0..n)).collect()
}

pub fn draw_without_replacement(n: usize, size: usize, seed: u64) -> Vec<usize> {
    index::sample(&mut rng::stream(seed, u64::MAX), n, size).into_vec()
}

/// Row indices and optimizer seed for member `index`.
pub fn member_draw(config: &EnsembleConfig, n: usize, index: usize) -> (Vec<usize>, u64) {
    let mut r = rng::stream(config.seed, index as u64);
    let rows = if config.with_replacement {
        draw_with_replacement(n, config.subset_size, &mut r)
    } else {
        index::sample(&mut r, n, config.subset_size).into_vec()
    };
    (rows, r.next_u64())
}

/// Mean `(1/K) sum mu_i`, variance `(1/K^2) sum sigma_i^2`.
pub fn combine_average(members: &[Prediction]) -> Prediction {
    let k = members.len() as f64;
    let mean = members.iter().map(|p| p.mean).sum::<f64>() / k;
    let variance = members.iter().map(|p| p.variance).sum::<f64>() / (k * k);
    Prediction { mean, variance }
}

/// Precision-weighted product of Gaussian experts: `T = sum 1/sigma_i^2`,
/// variance `1/T`, mean `(1/T) sum mu_i / sigma_i^2`.
pub fn combine_poe(members: &[Prediction]) -> Prediction {
    let mut precision = 0.0;
    let mut weighted = 0.0;
    for p in members {
        let t = 1.0 / p.variance.max(POE_VARIANCE_FLOOR);
        precision += t;
        weighted += p.mean * t;
    }
    let variance = 1.0 / precision;
    Prediction {
        mean: variance * weighted,
        variance,
    }
}

pub fn combine(rule: Combination, members: &[Prediction]) -> Prediction {
    match rule {
        Combination::Average => combine_average(members),
        Combination::Poe => combine_poe(members),
    }
}

#[derive(Debug, Clone)]
pub struct Member {
    pub index: usize,
    /// Rows of the training data, in draw order (repeats kept).
    pub rows: Vec<usize>,
    pub model: GpModel,
    pub lml: f64,
}

/// K fitted members plus the rule that combines them. The combined
/// predictor corresponds to the uniform kernel mixture
/// `(1/K) sum k_i`, see [`EnsembleModel::mixture_gram`].
#[derive(Debug, Clone)]
pub struct EnsembleModel {
    pub members: Vec<Member>,
    pub config: EnsembleConfig,
    pub template: KernelSpec,
    pub standardization: Option<Standardization>,
    pub feature_names: Vec<String>,
    pub target_name: String,
}

fn with_pool<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        None => Ok(f()),
        Some(w) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(w)
                .build()
                .map_err(|e| Error::input(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

pub fn fit_ensemble(
    data: &Dataset,
    template: &KernelSpec,
    config: &EnsembleConfig,
    optimizer: &OptimizerConfig,
) -> Result<EnsembleModel> {
    config.validate(data.len())?;
    optimizer.validate()?;
    template.resolve(data.dim())?;
    let fitted: Vec<Result<Member>> = with_pool(config.workers, || {
        (0..config.k)
            .into_par_iter()
            .map(|i| {
                let (rows, opt_seed) = member_draw(config, data.len(), i);
                let subset = data.select(&rows);
                let opt = OptimizerConfig {
                    seed: opt_seed,
                    ..optimizer.clone()
                };
                let model =
                    hyperopt::fit_gp(&subset, template, &opt).map_err(|e| Error::Member {
                        index: i,
                        source: Box::new(e),
                    })?;
                let lml = model.log_marginal_likelihood();
                Ok(Member {
                    index: i,
                    rows,
                    model,
                    lml,
                })
            })
            .collect()
    })?;
    let members = fitted.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(EnsembleModel {
        members,
        config: config.clone(),
        template: template.clone(),
        standardization: data.standardization.clone(),
        feature_names: data.feature_names.clone(),
        target_name: data.target_name.clone(),
    })
}

impl EnsembleModel {
    pub fn k(&self) -> usize {
        self.members.len()
    }

    pub fn input_dim(&self) -> usize {
        self.members[0].model.input_dim()
    }

    /// Per-member predictions in model (standardized) units;
    /// `result[i][j]` is member `i` at query `j`.
    pub fn member_predictions(&self, x: &DMatrix<f64>) -> Result<Vec<Vec<Prediction>>> {
        with_pool(self.config.workers, || {
            self.members
                .par_iter()
                .map(|m| m.model.predict(x, VarianceKind::Latent))
                .collect::<Result<Vec<_>>>()
        })?
    }

    /// Combined predictions for inputs already in model units.
    pub fn predict_standardized(&self, x: &DMatrix<f64>) -> Result<Vec<Prediction>> {
        self.predict_standardized_with(x, self.config.combination)
    }

    pub fn predict_standardized_with(
        &self,
        x: &DMatrix<f64>,
        rule: Combination,
    ) -> Result<Vec<Prediction>> {
        let per_member = self.member_predictions(x)?;
        Ok(combine_columns(&per_member, rule))
    }

    /// Combined predictions for raw-unit inputs, reported in raw units.
    pub fn predict(&self, x_raw: &DMatrix<f64>) -> Result<Vec<Prediction>> {
        self.predict_with(x_raw, self.config.combination)
    }

    pub fn predict_with(&self, x_raw: &DMatrix<f64>, rule: Combination) -> Result<Vec<Prediction>> {
        Ok(self.predict_rules(x_raw, &[rule])?.pop().expect("one rule"))
    }

    /// Several combination rules over one pass of member predictions.
    pub fn predict_rules(
        &self,
        x_raw: &DMatrix<f64>,
        rules: &[Combination],
    ) -> Result<Vec<Vec<Prediction>>> {
        let x = match &self.standardization {
            Some(s) => s.transform_x(x_raw)?,
            None => x_raw.clone(),
        };
        let per_member = self.member_predictions(&x)?;
        Ok(rules
            .iter()
            .map(|&rule| {
                let mut out = combine_columns(&per_member, rule);
                if let Some(s) = &self.standardization {
                    for p in &mut out {
                        p.mean = s.inverse_y(p.mean);
                        p.variance = s.inverse_variance(p.variance);
                    }
                }
                out
            })
            .collect())
    }

    /// Gram matrix of the uniform mixture `(1/K) sum k_i` of member kernels
    /// on model-unit inputs.
    pub fn mixture_gram(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let mut acc = DMatrix::zeros(x.nrows(), x.nrows());
        for m in &self.members {
            acc += m.model.kernel().gram(x, None)?;
        }
        Ok(acc / self.k() as f64)
    }

    pub fn member_lml(&self) -> Vec<f64> {
        self.members.iter().map(|m| m.lml).collect()
    }
}

fn combine_columns(per_member: &[Vec<Prediction>], rule: Combination) -> Vec<Prediction> {
    let n_points = per_member.first().map_or(0, Vec::len);
    let mut buf = Vec::with_capacity(per_member.len());
    (0..n_points)
        .map(|j| {
            buf.clear();
            buf.extend(per_member.iter().map(|m| m[j]));
            combine(rule, &buf)
        })
        .collect()
}

pub const ARCHIVE_FORMAT: &str = "gpbag-ensemble";
pub const ARCHIVE_VERSION: u32 = 1;

/// On-disk form of an [`EnsembleModel`]. Cholesky factors are not stored;
/// members are re-factorized from their training rows on load.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Archive {
    pub format: String,
    pub version: u32,
    pub library_version: String,
    pub config: EnsembleConfig,
    pub kernel_template: String,
    pub standardization: Option<Standardization>,
    pub feature_names: Vec<String>,
    pub target_name: String,
    pub members: Vec<ArchivedMember>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchivedMember {
    pub index: usize,
    pub kernel: String,
    pub noise_variance: f64,
    pub param_ids: Vec<String>,
    pub log_params: Vec<f64>,
    pub lml: f64,
    pub rows: Vec<usize>,
    /// Training inputs in model units, one inner vector per row.
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
}

impl EnsembleModel {
    pub fn to_archive(&self) -> Archive {
        Archive {
            format: ARCHIVE_FORMAT.to_owned(),
            version: ARCHIVE_VERSION,
            library_version: crate::VERSION.to_owned(),
            config: self.config.clone(),
            kernel_template: self.template.to_string(),
            standardization: self.standardization.clone(),
            feature_names: self.feature_names.clone(),
            target_name: self.target_name.clone(),
            members: self
                .members
                .iter()
                .map(|m| ArchivedMember {
                    index: m.index,
                    kernel: m.model.kernel().to_string(),
                    noise_variance: m.model.noise().variance,
                    param_ids: m.model.param_ids(),
                    log_params: m.model.log_params(),
                    lml: m.lml,
                    rows: m.rows.clone(),
                    x: m.model
                        .train_x()
                        .row_iter()
                        .map(|r| r.iter().copied().collect())
                        .collect(),
                    y: m.model.train_y().iter().copied().collect(),
                })
                .collect(),
        }
    }

    pub fn from_archive(archive: Archive) -> Result<EnsembleModel> {
        if archive.format != ARCHIVE_FORMAT {
            return Err(Error::Archive(format!(
                "unexpected format '{}'",
                archive.format
            )));
        }
        if archive.version != ARCHIVE_VERSION {
            return Err(Error::Archive(format!(
                "unsupported version {} (expected {ARCHIVE_VERSION})",
                archive.version
            )));
        }
        if archive.members.is_empty() || archive.members.len() != archive.config.k {
            return Err(Error::Archive(format!(
                "{} members stored for K = {}",
                archive.members.len(),
                archive.config.k
            )));
        }
        let template: KernelSpec = archive.kernel_template.parse()?;
        let dim = archive.feature_names.len();
        let members = archive
            .members
            .into_iter()
            .map(|m| {
                let kernel: KernelSpec = m.kernel.parse()?;
                let n = m.y.len();
                if m.x.len() != n || m.x.iter().any(|r| r.len() != dim) {
                    return Err(Error::Archive(format!(
                        "member {} training data has inconsistent shape",
                        m.index
                    )));
                }
                let flat: Vec<f64> = m.x.iter().flatten().copied().collect();
                let x = DMatrix::from_row_slice(n, dim, &flat);
                let y = nalgebra::DVector::from_vec(m.y);
                let model = GpModel::fit(&x, &y, &kernel, NoiseSpec::new(m.noise_variance)?)?;
                Ok(Member {
                    index: m.index,
                    rows: m.rows,
                    lml: model.log_marginal_likelihood(),
                    model,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EnsembleModel {
            members,
            config: archive.config,
            template,
            standardization: archive.standardization,
            feature_names: archive.feature_names,
            target_name: archive.target_name,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, &self.to_archive())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<EnsembleModel> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let archive: Archive = serde_json::from_reader(file)?;
        Self::from_archive(archive)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_sinc;

    fn p(mean: f64, variance: f64) -> Prediction {
        Prediction { mean, variance }
    }

    #[test]
    fn average_of_one_is_identity() {
        assert_eq!(combine_average(&[p(1.5, 0.3)]), p(1.5, 0.3));
        assert_eq!(combine_poe(&[p(1.5, 0.25)]), p(1.5, 0.25));
    }

    #[test]
    fn identical_members() {
        let members = vec![p(2.0, 0.5); 4];
        assert_eq!(combine_average(&members), p(2.0, 0.125));
        let poe = combine_poe(&members);
        assert!((poe.mean - 2.0).abs() < 1e-15 && (poe.variance - 0.125).abs() < 1e-15);
    }

    #[test]
    fn average_two_members() {
        assert_eq!(combine_average(&[p(0.0, 1.0), p(4.0, 3.0)]), p(2.0, 1.0));
    }

    #[test]
    fn poe_two_members() {
        let c = combine_poe(&[p(0.0, 1.0), p(4.0, 1.0 / 3.0)]);
        assert!((c.variance - 0.25).abs() < 1e-15);
        assert!((c.mean - 3.0).abs() < 1e-15);
    }

    #[test]
    fn poe_floors_zero_variance() {
        let c = combine_poe(&[p(1.0, 0.0), p(5.0, 1.0)]);
        assert!(c.variance.is_finite() && c.variance > 0.0);
        assert!((c.mean - 1.0).abs() < 1e-9);
    }

    #[test]
    fn combination_parses() {
        assert_eq!("POE".parse::<Combination>().unwrap(), Combination::Poe);
        assert_eq!(
            "average".parse::<Combination>().unwrap(),
            Combination::Average
        );
        assert!("median".parse::<Combination>().is_err());
    }

    #[test]
    fn draws_are_schedule_free() {
        let cfg = EnsembleConfig {
            k: 5,
            subset_size: 20,
            seed: 17,
            ..Default::default()
        };
        let a: Vec<_> = (0..5).map(|i| member_draw(&cfg, 100, i)).collect();
        let b: Vec<_> = (0..5).rev().map(|i| member_draw(&cfg, 100, i)).collect();
        assert!(a.iter().eq(b.iter().rev()));
        assert!(a[0].0.iter().all(|&r| r < 100));
    }

    #[test]
    fn without_replacement_has_no_repeats() {
        let cfg = EnsembleConfig {
            k: 1,
            subset_size: 50,
            with_replacement: false,
            ..Default::default()
        };
        let (mut rows, _) = member_draw(&cfg, 50, 0);
        rows.sort_unstable();
        assert_eq!(rows, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn config_validation() {
        let base = EnsembleConfig {
            subset_size: 10,
            ..Default::default()
        };
        assert!(base.validate(10).is_ok());
        assert!(base.validate(9).is_err());
        assert!(EnsembleConfig {
            k: 0,
            ..base.clone()
        }
        .validate(10)
        .is_err());
        assert!(EnsembleConfig {
            workers: Some(0),
            ..base
        }
        .validate(10)
        .is_err());
    }

    #[test]
    fn member_failure_names_the_member() {
        let data = generate_sinc(30, (-3.0, 3.0), 0.0, 1).unwrap();
        // non-positive fixed lengthscale in the template cannot be fitted
        let template: KernelSpec = "rbf(lengthscales=[-1])".parse().unwrap();
        let cfg = EnsembleConfig {
            k: 2,
            subset_size: 10,
            ..Default::default()
        };
        let err = fit_ensemble(&data, &template, &cfg, &OptimizerConfig::default()).unwrap_err();
        assert!(
            matches!(err, Error::Input(_) | Error::Member { .. }),
            "{err}"
        );
    }

    #[test]
    fn archive_round_trip_reproduces_predictions() {
        let data = generate_sinc(120, (-8.0, 8.0), 0.01, 5)
            .unwrap()
            .standardized();
        let cfg = EnsembleConfig {
            k: 3,
            subset_size: 30,
            seed: 4,
            ..Default::default()
        };
        let opt = OptimizerConfig {
            restarts: 1,
            ..Default::default()
        };
        let model = fit_ensemble(&data, &"rbf + bias".parse().unwrap(), &cfg, &opt).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        model.save(&path).unwrap();
        let back = EnsembleModel::load(&path).unwrap();
        let xq = data.raw_x();
        assert_eq!(model.predict(&xq).unwrap(), back.predict(&xq).unwrap());
        assert_eq!(model.member_lml(), back.member_lml());
    }

    #[test]
    fn archive_rejects_wrong_version() {
        let data = generate_sinc(20, (-3.0, 3.0), 0.0, 1).unwrap();
        let cfg = EnsembleConfig {
            k: 1,
            subset_size: 10,
            ..Default::default()
        };
        let opt = OptimizerConfig {
            restarts: 1,
            ..Default::default()
        };
        let mut archive = fit_ensemble(&data, &"rbf".parse().unwrap(), &cfg, &opt)
            .unwrap()
            .to_archive();
        archive.version = 99;
        assert!(matches!(
            EnsembleModel::from_archive(archive),
            Err(Error::Archive(_))
        ));
    }
}
