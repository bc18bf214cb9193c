//! End-to-end runs: load or generate data, split, size, fit, evaluate.
//!
//! A [`RunConfig`] fully determines a [`RunReport`] apart from timings:
//! every random choice derives from `seed`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, DelimitedSchema};
use crate::ensemble::{self, Combination, EnsembleConfig, EnsembleModel};
use crate::error::{Error, Result};
use crate::hyperopt::OptimizerConfig;
use crate::kernels::KernelSpec;
use crate::metrics;
use crate::rng;
use crate::sizing::{self, ProbeConfig, SizingPlan};

pub const REPORT_FORMAT: &str = "gpbag-report";
pub const REPORT_VERSION: u32 = 1;

const SALT_SPLIT: u64 = 1;
const SALT_ENSEMBLE: u64 = 2;
const SALT_PROBE: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    Sinc {
        n: usize,
        #[serde(default = "default_sinc_range")]
        range: (f64, f64),
        #[serde(default)]
        noise_sd: f64,
    },
    Delimited {
        path: PathBuf,
        target: String,
        #[serde(default)]
        features: Vec<String>,
        #[serde(default = "default_delimiter")]
        delimiter: char,
    },
}

fn default_sinc_range() -> (f64, f64) {
    (-15.0, 15.0)
}

fn default_delimiter() -> char {
    ','
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SizingConfig {
    /// `Ns = ceil(N^delta)`.
    Delta {
        delta: f64,
    },
    /// Closed-form estimator.
    Formula {
        epsilon: f64,
        #[serde(default = "one")]
        c: f64,
    },
    /// Probe search for the smallest adequate `delta`.
    Infer {
        epsilon: f64,
        #[serde(default = "default_probe_size")]
        sample_size: usize,
    },
    Explicit {
        ns: usize,
    },
}

fn one() -> f64 {
    1.0
}

fn default_probe_size() -> usize {
    2000
}

impl Default for SizingConfig {
    fn default() -> Self {
        SizingConfig::Delta { delta: 0.5 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Structured JSON report.
    pub report: Option<PathBuf>,
    /// Line-oriented `key=value` report.
    pub lines: Option<PathBuf>,
    /// Model archive.
    pub model: Option<PathBuf>,
    /// Per-row test predictions (delimited, raw units).
    pub predictions: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub data: DataSource,
    #[serde(default = "default_kernel")]
    pub kernel: String,
    #[serde(default)]
    pub sizing: SizingConfig,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub combination: Combination,
    #[serde(default = "default_true")]
    pub with_replacement: bool,
    #[serde(default = "default_split")]
    pub split: f64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

fn default_kernel() -> String {
    "rbf".to_owned()
}

fn default_k() -> usize {
    30
}

fn default_true() -> bool {
    true
}

fn default_split() -> f64 {
    0.7
}

impl RunConfig {
    pub fn new(data: DataSource, seed: u64) -> Self {
        RunConfig {
            name: None,
            data,
            kernel: default_kernel(),
            sizing: SizingConfig::default(),
            k: default_k(),
            combination: Combination::Average,
            with_replacement: true,
            split: default_split(),
            seed,
            workers: None,
            optimizer: OptimizerConfig::default(),
            output: OutputConfig::default(),
        }
    }

    /// The sinc benchmark: 100k noise-free points on [-15, 15], `delta = 0.5`,
    /// K = 30, RBF, model averaging.
    pub fn sinc_benchmark(seed: u64) -> Self {
        let mut cfg = RunConfig::new(
            DataSource::Sinc {
                n: 100_000,
                range: default_sinc_range(),
                noise_sd: 0.0,
            },
            seed,
        );
        cfg.name = Some("sinc".to_owned());
        cfg
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parses a TOML file; relative paths are taken from the file's
    /// directory.
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Joins relative data and output paths onto `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let DataSource::Delimited { path, .. } = &mut self.data {
            join(path);
        }
        let out = &mut self.output;
        for p in [
            &mut out.report,
            &mut out.lines,
            &mut out.model,
            &mut out.predictions,
        ]
        .into_iter()
        .flatten()
        {
            join(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.split > 0.0 && self.split < 1.0) {
            return Err(Error::Config(format!(
                "split {} outside (0, 1)",
                self.split
            )));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be >= 1".to_owned()));
        }
        self.kernel.parse::<KernelSpec>()?;
        self.optimizer.validate()?;
        match &self.data {
            DataSource::Sinc { n, range, noise_sd } => {
                if *n < 2 || !(range.0 < range.1) || !(*noise_sd >= 0.0) {
                    return Err(Error::Config(
                        "sinc source needs n >= 2, lo < hi and noise_sd >= 0".to_owned(),
                    ));
                }
            }
            DataSource::Delimited { target, .. } => {
                if target.is_empty() {
                    return Err(Error::Config("target column name is empty".to_owned()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Config,
    Data,
    Sizing,
    Fit,
    Predict,
    Output,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub sizing_s: f64,
    pub fit_s: f64,
    pub predict_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub format: String,
    pub version: u32,
    pub library_version: String,
    pub status: RunStatus,
    /// Stage that failed, when `status` is `failed`.
    pub failed_stage: Option<Stage>,
    pub error: Option<String>,
    /// Absent only when no configuration could be formed.
    pub config: Option<RunConfig>,
    pub n_train: Option<usize>,
    pub n_test: Option<usize>,
    pub input_dim: Option<usize>,
    pub dropped_rows: usize,
    pub sizing: Option<SizingPlan>,
    pub member_lml: Vec<f64>,
    /// Test RMSE of the configured combination rule.
    pub rmse: Option<f64>,
    pub rmse_average: Option<f64>,
    pub rmse_poe: Option<f64>,
    pub sd_baseline: Option<f64>,
    pub timings: Timings,
}

impl RunReport {
    fn empty(config: Option<&RunConfig>) -> Self {
        RunReport {
            format: REPORT_FORMAT.to_owned(),
            version: REPORT_VERSION,
            library_version: crate::VERSION.to_owned(),
            status: RunStatus::Ok,
            failed_stage: None,
            error: None,
            config: config.cloned(),
            n_train: None,
            n_test: None,
            input_dim: None,
            dropped_rows: 0,
            sizing: None,
            member_lml: Vec::new(),
            rmse: None,
            rmse_average: None,
            rmse_poe: None,
            sd_baseline: None,
            timings: Timings::default(),
        }
    }

    pub fn failure(config: Option<&RunConfig>, stage: Stage, error: &Error) -> Self {
        let mut r = Self::empty(config);
        r.fail(stage, error);
        r
    }

    fn fail(&mut self, stage: Stage, error: &Error) {
        self.status = RunStatus::Failed;
        self.failed_stage = Some(stage);
        self.error = Some(error.to_string());
    }

    pub fn is_ok(&self) -> bool {
        self.status == RunStatus::Ok
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One `key=value` per line; nested fields use dotted keys, absent
    /// values are written as `null`.
    pub fn to_lines(&self) -> Result<String> {
        let value = serde_json::to_value(self)?;
        let mut out = String::new();
        flatten_into(&mut out, "", &value);
        Ok(out)
    }

    pub fn write(&self, json: Option<&Path>, lines: Option<&Path>) -> Result<()> {
        if let Some(p) = json {
            std::fs::write(p, self.to_json()? + "\n")?;
        }
        if let Some(p) = lines {
            std::fs::write(p, self.to_lines()?)?;
        }
        Ok(())
    }
}

fn flatten_into(out: &mut String, prefix: &str, value: &serde_json::Value) {
    use serde_json::Value;
    let key = |k: &str| {
        if prefix.is_empty() {
            k.to_owned()
        } else {
            format!("{prefix}.{k}")
        }
    };
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                flatten_into(out, &key(k), v);
            }
        }
        Value::Array(items) if !items.is_empty() => {
            for (i, v) in items.iter().enumerate() {
                flatten_into(out, &key(&i.to_string()), v);
            }
        }
        Value::String(s) => out.push_str(&format!("{prefix}={s}\n")),
        other => out.push_str(&format!("{prefix}={other}\n")),
    }
}

/// Everything a run produced; the model is absent on failure.
#[derive(Debug)]
pub struct RunOutcome {
    pub report: RunReport,
    pub model: Option<EnsembleModel>,
    pub test: Option<Dataset>,
}

/// Train and test sets in raw units, plus the dropped-row count.
pub fn prepare_data(config: &RunConfig) -> Result<(Dataset, Dataset, usize)> {
    let (full, dropped) = match &config.data {
        DataSource::Sinc { n, range, noise_sd } => {
            (data::generate_sinc(*n, *range, *noise_sd, config.seed)?, 0)
        }
        DataSource::Delimited {
            path,
            target,
            features,
            delimiter,
        } => {
            let schema = DelimitedSchema {
                delimiter: *delimiter,
                target: target.clone(),
                features: features.clone(),
                standardize: false,
            };
            let loaded = data::load_delimited(path, &schema)?;
            (loaded.dataset, loaded.dropped_rows)
        }
    };
    if full.len() < 4 {
        return Err(Error::input(format!(
            "need at least 4 rows, got {}",
            full.len()
        )));
    }
    let (train, test) = full.split(config.split, rng::mix(config.seed, SALT_SPLIT))?;
    Ok((train, test, dropped))
}

fn plan_sizes(config: &RunConfig, train: &Dataset, kernel: &KernelSpec) -> Result<SizingPlan> {
    let n = train.len();
    match &config.sizing {
        SizingConfig::Delta { delta } => sizing::size_by_delta(n, *delta),
        SizingConfig::Formula { epsilon, c } => sizing::size_by_formula(n, *epsilon, *c),
        SizingConfig::Explicit { ns } => sizing::size_explicit(n, *ns),
        SizingConfig::Infer {
            epsilon,
            sample_size,
        } => {
            let mut probe = ProbeConfig::new(kernel.clone());
            probe.sample_size = *sample_size;
            probe.seed = rng::mix(config.seed, SALT_PROBE);
            probe.optimizer = config.optimizer.clone();
            sizing::infer_delta(train, *epsilon, &probe)
        }
    }
}

pub fn ensemble_config(config: &RunConfig, subset_size: usize) -> EnsembleConfig {
    EnsembleConfig {
        k: config.k,
        subset_size,
        with_replacement: config.with_replacement,
        combination: config.combination,
        seed: rng::mix(config.seed, SALT_ENSEMBLE),
        workers: config.workers,
    }
}

/// Runs the full pipeline. Never returns early with an error: failures are
/// recorded in the report together with the stage that failed.
pub fn run(config: &RunConfig) -> RunOutcome {
    let mut report = RunReport::empty(Some(config));
    let fail = |mut report: RunReport, stage, e: Error| {
        log::error!("{stage:?} stage failed: {e}");
        report.fail(stage, &e);
        RunOutcome {
            report,
            model: None,
            test: None,
        }
    };

    let kernel = match config
        .validate()
        .and_then(|_| config.kernel.parse::<KernelSpec>())
    {
        Ok(k) => k,
        Err(e) => return fail(report, Stage::Config, e),
    };
    let (train, test, dropped) = match prepare_data(config) {
        Ok(v) => v,
        Err(e) => return fail(report, Stage::Data, e),
    };
    report.n_train = Some(train.len());
    report.n_test = Some(test.len());
    report.input_dim = Some(train.dim());
    report.dropped_rows = dropped;
    let train = train.standardized();

    let t = Instant::now();
    let plan = plan_sizes(config, &train, &kernel);
    report.timings.sizing_s = t.elapsed().as_secs_f64();
    let plan = match plan {
        Ok(p) => p,
        Err(e) => return fail(report, Stage::Sizing, e),
    };
    let ens_cfg = ensemble_config(config, plan.ns);
    report.sizing = Some(plan);

    let t = Instant::now();
    let model = ensemble::fit_ensemble(&train, &kernel, &ens_cfg, &config.optimizer);
    report.timings.fit_s = t.elapsed().as_secs_f64();
    let model = match model {
        Ok(m) => m,
        Err(e) => return fail(report, Stage::Fit, e),
    };
    report.member_lml = model.member_lml();

    let t = Instant::now();
    let scored = score(&model, &test);
    report.timings.predict_s = t.elapsed().as_secs_f64();
    let scores = match scored {
        Ok(s) => s,
        Err(e) => return fail(report, Stage::Predict, e),
    };
    report.rmse_average = Some(scores.average);
    report.rmse_poe = Some(scores.poe);
    report.rmse = Some(match config.combination {
        Combination::Average => scores.average,
        Combination::Poe => scores.poe,
    });
    report.sd_baseline = Some(scores.sd);
    RunOutcome {
        report,
        model: Some(model),
        test: Some(test),
    }
}

/// Config validation, data preparation and sizing only.
pub fn plan_only(config: &RunConfig) -> RunReport {
    let mut report = RunReport::empty(Some(config));
    let kernel = match config
        .validate()
        .and_then(|_| config.kernel.parse::<KernelSpec>())
    {
        Ok(k) => k,
        Err(e) => {
            report.fail(Stage::Config, &e);
            return report;
        }
    };
    let (train, test, dropped) = match prepare_data(config) {
        Ok(v) => v,
        Err(e) => {
            report.fail(Stage::Data, &e);
            return report;
        }
    };
    report.n_train = Some(train.len());
    report.n_test = Some(test.len());
    report.input_dim = Some(train.dim());
    report.dropped_rows = dropped;
    let t = Instant::now();
    match plan_sizes(config, &train.standardized(), &kernel) {
        Ok(plan) => report.sizing = Some(plan),
        Err(e) => report.fail(Stage::Sizing, &e),
    }
    report.timings.sizing_s = t.elapsed().as_secs_f64();
    report
}

struct Scores {
    average: f64,
    poe: f64,
    sd: f64,
}

fn score(model: &EnsembleModel, test: &Dataset) -> Result<Scores> {
    let preds = model.predict_rules(&test.raw_x(), &[Combination::Average, Combination::Poe])?;
    let truth = test.raw_y();
    let mut rmse = preds.iter().map(|p| {
        let means: Vec<f64> = p.iter().map(|q| q.mean).collect();
        metrics::evaluate(&means, truth.as_slice())
    });
    let average = rmse.next().expect("two rules")?;
    let poe = rmse.next().expect("two rules")?;
    Ok(Scores {
        average: average.rmse,
        poe: poe.rmse,
        sd: average.sd_baseline,
    })
}

/// [`run`] followed by writing every configured output. Output failures
/// turn the report into a failure report, which is still written where
/// possible.
pub fn run_experiment(config: &RunConfig) -> RunReport {
    let mut outcome = run(config);
    if let Err(e) = write_outputs(config, &outcome) {
        log::error!("writing outputs failed: {e}");
        outcome.report.fail(Stage::Output, &e);
    }
    if let Err(e) = outcome.report.write(
        config.output.report.as_deref(),
        config.output.lines.as_deref(),
    ) {
        log::error!("writing the report failed: {e}");
    }
    outcome.report
}

fn write_outputs(config: &RunConfig, outcome: &RunOutcome) -> Result<()> {
    let (Some(model), Some(test)) = (&outcome.model, &outcome.test) else {
        return Ok(());
    };
    if let Some(p) = &config.output.model {
        model.save(p)?;
    }
    if let Some(p) = &config.output.predictions {
        write_predictions(p, model, test)?;
    }
    Ok(())
}

/// Writes `truth,mean,variance` per test row in raw units.
pub fn write_predictions(path: &Path, model: &EnsembleModel, test: &Dataset) -> Result<()> {
    let preds = model.predict(&test.raw_x())?;
    let truth = test.raw_y();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["truth", "mean", "variance"])?;
    for (t, p) in truth.iter().zip(&preds) {
        w.write_record([
            format!("{t:?}"),
            format!("{:?}", p.mean),
            format!("{:?}", p.variance),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_sinc(seed: u64) -> RunConfig {
        let mut cfg = RunConfig::new(
            DataSource::Sinc {
                n: 300,
                range: (-10.0, 10.0),
                noise_sd: 0.0,
            },
            seed,
        );
        cfg.k = 4;
        cfg.sizing = SizingConfig::Explicit { ns: 40 };
        cfg.optimizer.restarts = 1;
        cfg
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::sinc_benchmark(3);
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn minimal_toml() {
        let cfg = RunConfig::from_toml_str(
            "seed = 1\n[data]\nsource = \"delimited\"\npath = \"x.csv\"\ntarget = \"y\"\n\
             [sizing]\nmethod = \"formula\"\nepsilon = 0.1\n",
        )
        .unwrap();
        assert_eq!(cfg.k, 30);
        assert_eq!(cfg.split, 0.7);
        assert_eq!(
            cfg.sizing,
            SizingConfig::Formula {
                epsilon: 0.1,
                c: 1.0
            }
        );
        assert!(RunConfig::from_toml_str("seed = 1\nbogus = 2\n").is_err());
    }

    #[test]
    fn small_run_beats_baseline() {
        let report = run(&small_sinc(2)).report;
        assert!(report.is_ok(), "{:?}", report.error);
        assert_eq!((report.n_train, report.n_test), (Some(210), Some(90)));
        assert_eq!(report.member_lml.len(), 4);
        assert!(report.rmse.unwrap() < report.sd_baseline.unwrap());
    }

    #[test]
    fn invalid_split_is_a_config_failure() {
        let mut cfg = small_sinc(0);
        cfg.split = 1.0;
        let report = run(&cfg).report;
        assert_eq!(report.status, RunStatus::Failed);
        assert_eq!(report.failed_stage, Some(Stage::Config));
    }

    #[test]
    fn missing_file_is_a_data_failure() {
        let mut cfg = small_sinc(0);
        cfg.data = DataSource::Delimited {
            path: "/nonexistent/file.csv".into(),
            target: "y".into(),
            features: vec![],
            delimiter: ',',
        };
        let report = run(&cfg).report;
        assert_eq!(report.failed_stage, Some(Stage::Data));
        assert!(report.to_lines().unwrap().contains("status=failed\n"));
    }

    #[test]
    fn lines_flatten_nested_fields() {
        let report = run(&small_sinc(1)).report;
        let lines = report.to_lines().unwrap();
        assert!(lines.contains("status=ok\n"));
        assert!(lines.contains("sizing.ns=40\n"));
        assert!(lines.contains("member_lml.3="));
        assert!(lines.contains("config.data.source=sinc\n"));
    }

    #[test]
    fn relative_paths_resolve_against_base() {
        let mut cfg = small_sinc(0);
        cfg.data = DataSource::Delimited {
            path: "d/x.csv".into(),
            target: "y".into(),
            features: vec![],
            delimiter: ',',
        };
        cfg.output.report = Some("out.json".into());
        cfg.resolve_paths(Path::new("/base"));
        let DataSource::Delimited { path, .. } = &cfg.data else {
            unreachable!()
        };
        assert_eq!(path, Path::new("/base/d/x.csv"));
        assert_eq!(
            cfg.output.report.as_deref(),
            Some(Path::new("/base/out.json"))
        );
    }
}
