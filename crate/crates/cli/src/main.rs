//! `gpbag`: subset sizing, ensemble training, prediction, evaluation and
//! the sinc benchmark from the command line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use gpbag::data::{self, DelimitedSchema};
use gpbag::experiment::{self, RunConfig, RunReport, Stage};
use gpbag::{metrics, selftest, Combination, EnsembleModel};
use toml::{Table, Value};

#[derive(Parser)]
#[command(
    name = "gpbag",
    version,
    about = "Bagged exact Gaussian Process regression"
)]
struct Cli {
    /// Log level filter (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "warn")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Plan the per-member subset size only.
    Size(RunArgs),
    /// Split, size, fit the ensemble and evaluate on the held-out part.
    Fit(RunArgs),
    /// Predict a delimited file with a saved model.
    Predict(PredictArgs),
    /// Score a saved model on a labelled delimited file.
    Eval(EvalArgs),
    /// The 100k-point noise-free sinc benchmark.
    BenchSinc(BenchArgs),
    /// Oracle self-checks.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Mirrors `RunConfig`; a `--config` file overrides any flag it sets.
#[derive(Args, Default)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Delimited input file (header row required).
    #[arg(long, conflicts_with = "sinc_n")]
    data: Option<PathBuf>,
    /// Generate this many sinc points instead of reading a file.
    #[arg(long)]
    sinc_n: Option<usize>,
    #[arg(long)]
    target: Option<String>,
    /// Comma-separated feature columns (default: all but the target).
    #[arg(long, value_delimiter = ',')]
    features: Option<Vec<String>>,
    #[arg(long)]
    delimiter: Option<char>,
    #[arg(long)]
    kernel: Option<String>,
    /// Sizing method: delta, formula, infer or explicit.
    #[arg(long)]
    sizing: Option<String>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    c: Option<f64>,
    #[arg(long)]
    ns: Option<usize>,
    #[arg(long)]
    probe_size: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    combination: Option<String>,
    /// Draw member subsets without replacement.
    #[arg(long)]
    no_replacement: bool,
    #[arg(long)]
    split: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    restarts: Option<usize>,
    /// JSON report path.
    #[arg(long)]
    report: Option<PathBuf>,
    /// `key=value` report path.
    #[arg(long)]
    lines: Option<PathBuf>,
    /// Model archive path.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Test-set predictions path.
    #[arg(long)]
    predictions: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = ',')]
    delimiter: char,
    #[arg(long)]
    combination: Option<String>,
    /// Output file; stdout when absent.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Response column (default: the model's target name).
    #[arg(long)]
    target: Option<String>,
    #[arg(long, default_value_t = ',')]
    delimiter: char,
    #[arg(long)]
    combination: Option<String>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 100_000)]
    n: usize,
    #[arg(long, default_value_t = 30)]
    k: usize,
    #[arg(long, default_value_t = 0.5)]
    delta: f64,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    lines: Option<PathBuf>,
}

impl RunArgs {
    /// Flags as a TOML table in `RunConfig` layout, omitting unset ones.
    fn to_table(&self) -> anyhow::Result<Table> {
        let mut root = Table::new();
        let put = |t: &mut Table, k: &str, v: Option<Value>| {
            if let Some(v) = v {
                t.insert(k.to_owned(), v);
            }
        };
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| Value::from(p.display().to_string()));

        let mut data = Table::new();
        if let Some(p) = &self.data {
            data.insert("source".into(), "delimited".into());
            data.insert("path".into(), p.display().to_string().into());
        } else if let Some(n) = self.sinc_n {
            data.insert("source".into(), "sinc".into());
            data.insert("n".into(), int(n)?);
        }
        put(&mut data, "target", self.target.clone().map(Value::from));
        put(
            &mut data,
            "features",
            self.features
                .as_ref()
                .map(|f| Value::Array(f.iter().cloned().map(Value::from).collect())),
        );
        put(
            &mut data,
            "delimiter",
            self.delimiter.map(|c| Value::from(c.to_string())),
        );
        if !data.is_empty() {
            root.insert("data".into(), Value::Table(data));
        }

        let mut sizing = Table::new();
        let method = self.sizing.clone().or_else(|| {
            if self.ns.is_some() {
                Some("explicit".into())
            } else if self.delta.is_some() {
                Some("delta".into())
            } else if self.epsilon.is_some() {
                Some("formula".into())
            } else {
                None
            }
        });
        put(&mut sizing, "method", method.map(Value::from));
        put(&mut sizing, "delta", self.delta.map(Value::from));
        put(&mut sizing, "epsilon", self.epsilon.map(Value::from));
        put(&mut sizing, "c", self.c.map(Value::from));
        put(&mut sizing, "ns", self.ns.map(int).transpose()?);
        put(
            &mut sizing,
            "sample_size",
            self.probe_size.map(int).transpose()?,
        );
        if !sizing.is_empty() {
            root.insert("sizing".into(), Value::Table(sizing));
        }

        put(&mut root, "kernel", self.kernel.clone().map(Value::from));
        put(&mut root, "k", self.k.map(int).transpose()?);
        put(
            &mut root,
            "combination",
            self.combination.clone().map(Value::from),
        );
        if self.no_replacement {
            root.insert("with_replacement".into(), false.into());
        }
        put(&mut root, "split", self.split.map(Value::from));
        put(&mut root, "seed", self.seed.map(int).transpose()?);
        put(&mut root, "workers", self.workers.map(int).transpose()?);
        if let Some(r) = self.restarts {
            let mut opt = Table::new();
            opt.insert("restarts".into(), int(r)?);
            root.insert("optimizer".into(), Value::Table(opt));
        }

        let mut output = Table::new();
        put(&mut output, "report", path(&self.report));
        put(&mut output, "lines", path(&self.lines));
        put(&mut output, "model", path(&self.model));
        put(&mut output, "predictions", path(&self.predictions));
        if !output.is_empty() {
            root.insert("output".into(), Value::Table(output));
        }
        Ok(root)
    }

    fn run_config(&self) -> anyhow::Result<RunConfig> {
        let mut table = self.to_table()?;
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            let mut file: Table =
                toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            if let Some(dir) = path.parent() {
                resolve_file_paths(&mut file, dir);
            }
            merge(&mut table, file);
        }
        let text = toml::to_string(&table)?;
        Ok(RunConfig::from_toml_str(&text)?)
    }
}

fn int<T: TryInto<i64>>(v: T) -> anyhow::Result<Value> {
    match v.try_into() {
        Ok(i) => Ok(Value::Integer(i)),
        Err(_) => bail!("integer flag out of range"),
    }
}

/// Deep merge; values in `over` win.
fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => {
                // a different tagged variant replaces the whole table
                let retag = ["source", "method"]
                    .iter()
                    .any(|tag| o.contains_key(*tag) && b.get(*tag) != o.get(*tag));
                if retag {
                    *b = o;
                } else {
                    merge(b, o);
                }
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Relative paths in a config file are relative to the file itself.
fn resolve_file_paths(file: &mut Table, dir: &Path) {
    let fix = |v: &mut Value| {
        if let Value::String(s) = v {
            let p = Path::new(s.as_str());
            if p.is_relative() {
                *s = dir.join(p).display().to_string();
            }
        }
    };
    if let Some(Value::Table(d)) = file.get_mut("data") {
        if let Some(p) = d.get_mut("path") {
            fix(p);
        }
    }
    if let Some(Value::Table(o)) = file.get_mut("output") {
        for (_, v) in o.iter_mut() {
            fix(v);
        }
    }
}

fn parse_combination(s: &Option<String>) -> anyhow::Result<Option<Combination>> {
    s.as_deref().map(str::parse).transpose().map_err(Into::into)
}

fn print_report(report: &RunReport) {
    let show = |v: Option<f64>| v.map_or("-".to_owned(), |v| format!("{v:.6}"));
    if let Some(plan) = &report.sizing {
        println!(
            "sizing: method={:?} n={} ns={} effective_delta={:.4}",
            plan.method, plan.n, plan.ns, plan.effective_delta
        );
    }
    if report.rmse.is_some() {
        println!(
            "rmse={} rmse_average={} rmse_poe={} sd_baseline={}",
            show(report.rmse),
            show(report.rmse_average),
            show(report.rmse_poe),
            show(report.sd_baseline)
        );
        println!(
            "timings: sizing={:.2}s fit={:.2}s predict={:.2}s",
            report.timings.sizing_s, report.timings.fit_s, report.timings.predict_s
        );
    }
    match &report.error {
        Some(e) => eprintln!("status=failed stage={:?}: {e}", report.failed_stage),
        None => println!("status=ok"),
    }
}

fn finish(report: &RunReport) -> ExitCode {
    print_report(report);
    if report.is_ok() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

/// A flag-level failure still produces a report when one was requested.
fn config_failure(args: &RunArgs, err: &anyhow::Error) -> ExitCode {
    eprintln!("error: {err:#}");
    let report = RunReport::failure(
        None,
        Stage::Config,
        &gpbag::Error::Config(format!("{err:#}")),
    );
    if let Err(e) = report.write(args.report.as_deref(), args.lines.as_deref()) {
        eprintln!("error: writing report: {e}");
    }
    ExitCode::FAILURE
}

fn cmd_size(args: &RunArgs) -> ExitCode {
    let cfg = match args.run_config() {
        Ok(c) => c,
        Err(e) => return config_failure(args, &e),
    };
    let report = experiment::plan_only(&cfg);
    if let Err(e) = report.write(cfg.output.report.as_deref(), cfg.output.lines.as_deref()) {
        eprintln!("error: writing report: {e}");
        return ExitCode::FAILURE;
    }
    finish(&report)
}

fn cmd_fit(args: &RunArgs) -> ExitCode {
    match args.run_config() {
        Ok(cfg) => finish(&experiment::run_experiment(&cfg)),
        Err(e) => config_failure(args, &e),
    }
}

fn cmd_bench(args: &BenchArgs) -> ExitCode {
    let mut cfg = RunConfig::sinc_benchmark(args.seed);
    cfg.data = experiment::DataSource::Sinc {
        n: args.n,
        range: (-15.0, 15.0),
        noise_sd: 0.0,
    };
    cfg.k = args.k;
    cfg.sizing = experiment::SizingConfig::Delta { delta: args.delta };
    cfg.workers = args.workers;
    cfg.output.report = args.report.clone();
    cfg.output.lines = args.lines.clone();
    finish(&experiment::run_experiment(&cfg))
}

fn cmd_predict(args: &PredictArgs) -> anyhow::Result<()> {
    let model = EnsembleModel::load(&args.model)?;
    let rule = parse_combination(&args.combination)?.unwrap_or(model.config.combination);
    let (x, _) = data::load_features(&args.data, args.delimiter, &model.feature_names)?;
    let preds = model.predict_with(&x, rule)?;
    let mut out = String::from("mean,variance\n");
    for p in &preds {
        out.push_str(&format!("{:?},{:?}\n", p.mean, p.variance));
    }
    match &args.output {
        Some(p) => std::fs::write(p, out).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{out}"),
    }
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> anyhow::Result<()> {
    let model = EnsembleModel::load(&args.model)?;
    let rule = parse_combination(&args.combination)?.unwrap_or(model.config.combination);
    let schema = DelimitedSchema {
        delimiter: args.delimiter,
        target: args
            .target
            .clone()
            .unwrap_or_else(|| model.target_name.clone()),
        features: model.feature_names.clone(),
        standardize: false,
    };
    let ds = data::load_delimited(&args.data, &schema)?.dataset;
    let preds = model.predict_with(&ds.x, rule)?;
    let means: Vec<f64> = preds.iter().map(|p| p.mean).collect();
    let ev = metrics::evaluate(&means, ds.y.as_slice())?;
    println!(
        "{}",
        serde_json::json!({ "n": ds.len(), "rmse": ev.rmse, "sd_baseline": ev.sd_baseline })
    );
    Ok(())
}

fn cmd_selftest(seed: u64) -> ExitCode {
    let checks = selftest::run_all(seed);
    for c in &checks {
        println!(
            "{} {}: {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
    }
    if checks.iter().all(|c| c.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).init();
    let simple = |r: anyhow::Result<()>| match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    };
    match &cli.command {
        Command::Size(a) => cmd_size(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Predict(a) => simple(cmd_predict(a)),
        Command::Eval(a) => simple(cmd_eval(a)),
        Command::BenchSinc(a) => cmd_bench(a),
        Command::Selftest { seed } => cmd_selftest(*seed),
    }
}
