use gpbag::data::{self, Dataset};
use gpbag::ensemble::{self, EnsembleConfig};
use gpbag::experiment::{self, DataSource, RunConfig, SizingConfig};
use gpbag::hyperopt::fit_gp;
use gpbag::kernels::{BaseKernel, BaseKind, KernelSpec};
use gpbag::sizing::{self, ProbeConfig};
use gpbag::{metrics, GpModel, NoiseSpec, OptimizerConfig, VarianceKind};
use nalgebra::{DMatrix, DVector};

fn quick() -> OptimizerConfig {
    OptimizerConfig {
        restarts: 2,
        max_iterations: 60,
        ..Default::default()
    }
}

#[test]
fn lml_peaks_at_the_optimized_noise() {
    let data = data::generate_sinc(150, (-8.0, 8.0), 0.1, 4)
        .unwrap()
        .standardized();
    let model = fit_gp(&data, &"rbf".parse().unwrap(), &OptimizerConfig::default()).unwrap();
    let best = model.log_marginal_likelihood();
    let s2 = model.noise().variance;
    for factor in [0.5, 0.8, 1.25, 2.0] {
        let other = GpModel::fit(
            &data.x,
            &data.y,
            model.kernel(),
            NoiseSpec::new(s2 * factor).unwrap(),
        )
        .unwrap()
        .log_marginal_likelihood();
        assert!(other <= best + 1e-6, "noise x{factor}: {other} > {best}");
    }
}

#[test]
fn recovers_the_generating_lengthscale() {
    // draw from a GP prior with lengthscale 2 on a fine grid
    let n = 300;
    let x = DMatrix::from_fn(n, 1, |i, _| -20.0 + 40.0 * i as f64 / n as f64);
    let truth: KernelSpec = BaseKernel::new(BaseKind::Rbf)
        .with_variance(1.0)
        .with_lengthscales(vec![2.0])
        .into();
    let mut k = truth.gram(&x, None).unwrap();
    for i in 0..n {
        k[(i, i)] += 1e-2;
    }
    let l = k.cholesky().unwrap().l();
    let z = data::generate_sinc(n, (0.0, 1.0), 1.0, 9).unwrap();
    // the generator's noise draws give standard normals around sinc
    let eps = DVector::from_fn(n, |i, _| z.raw_y()[i] - data::sinc(z.raw_x()[(i, 0)]));
    let y = l * eps;
    let data = Dataset::new(x, y).unwrap();
    let model = fit_gp(&data, &"rbf".parse().unwrap(), &OptimizerConfig::default()).unwrap();
    let ls = model.kernel().leaves()[0].lengthscales[0];
    assert!((1.5..=2.7).contains(&ls), "lengthscale {ls}");
}

#[test]
fn pure_noise_is_absorbed_by_the_noise_terms() {
    let template: KernelSpec = "rbf + white".parse().unwrap();
    for seed in [13, 14, 15] {
        let draws = data::generate_sinc(200, (0.0, 1.0), 1.0, seed).unwrap();
        let y = DVector::from_fn(200, |i, _| {
            draws.raw_y()[i] - data::sinc(draws.raw_x()[(i, 0)])
        });
        let x = DMatrix::from_fn(200, 1, |i, _| draws.raw_x()[(i, 0)] * 20.0);
        let var_y = metrics::population_sd(y.as_slice()).powi(2);
        let data = Dataset::new(x, y).unwrap();
        let model = fit_gp(&data, &template, &quick()).unwrap();
        let white: f64 = model
            .kernel()
            .leaves()
            .iter()
            .filter(|l| l.kind == BaseKind::WhiteNoise)
            .map(|l| l.variance)
            .sum();
        let absorbed = model.noise().variance + white;
        assert!(
            absorbed >= 0.8 * var_y,
            "seed {seed}: {absorbed} < 0.8 * {var_y}"
        );
    }
}

#[test]
fn infer_delta_meets_a_loose_target() {
    for seed in 0..5 {
        let data = data::generate_sinc(3000, (-10.0, 10.0), 0.0, seed).unwrap();
        let mut probe = ProbeConfig::new("rbf".parse().unwrap());
        probe.sample_size = 400;
        probe.seed = seed;
        probe.optimizer = quick();
        let plan = sizing::infer_delta(&data, 0.05, &probe).unwrap();
        assert!(plan.target_met);
        let delta = plan.delta.unwrap();
        assert!(delta <= 0.6, "seed {seed}: delta {delta}");
        let last = plan.probe.last().unwrap();
        assert!(last.rmse <= 0.05);
        assert!(plan.probe[..plan.probe.len() - 1]
            .iter()
            .all(|s| s.rmse > 0.05));
        assert_eq!(plan.ns, sizing::size_by_delta(3000, delta).unwrap().ns);
    }
}

#[test]
fn infer_delta_reports_an_unmet_target() {
    let data = data::generate_sinc(800, (-10.0, 10.0), 0.5, 2).unwrap();
    let mut probe = ProbeConfig::new("rbf".parse().unwrap());
    probe.sample_size = 100;
    probe.grid_step = 0.3;
    probe.optimizer = quick();
    let plan = sizing::infer_delta(&data, 1e-6, &probe).unwrap();
    assert!(!plan.target_met);
    assert_eq!(plan.ns, 800);
    assert!(!plan.warnings.is_empty());
}

fn csv_run(dir: &std::path::Path, rows: &[(f64, f64)]) -> RunConfig {
    let mut text = String::from("x,y\n");
    for (x, y) in rows {
        text.push_str(&format!("{x},{y}\n"));
    }
    let path = dir.join("d.csv");
    std::fs::write(&path, text).unwrap();
    let mut cfg = RunConfig::new(
        DataSource::Delimited {
            path,
            target: "y".into(),
            features: vec![],
            delimiter: ',',
        },
        3,
    );
    cfg.k = 3;
    cfg.sizing = SizingConfig::Explicit { ns: 20 };
    cfg.optimizer = quick();
    cfg
}

#[test]
fn constant_response_predicts_the_constant() {
    let dir = tempfile::tempdir().unwrap();
    let rows: Vec<(f64, f64)> = (0..60).map(|i| (i as f64 * 0.1, 4.25)).collect();
    let report = experiment::run(&csv_run(dir.path(), &rows)).report;
    assert!(report.is_ok(), "{:?}", report.error);
    assert!(report.rmse.unwrap() <= 1e-6, "{:?}", report.rmse);
    assert_eq!(report.sd_baseline, Some(0.0));
}

#[test]
fn predictions_scale_with_the_inputs_and_response() {
    let base = data::generate_sinc(200, (-6.0, 6.0), 0.05, 21).unwrap();
    let (x, y) = (base.raw_x(), base.raw_y());
    let scaled = Dataset::new(&x * 10.0, &y * 10.0).unwrap();
    let kernel: KernelSpec = BaseKernel::new(BaseKind::Rbf)
        .with_variance(1.0)
        .with_lengthscales(vec![1.5])
        .fixed()
        .into();
    let scaled_kernel: KernelSpec = BaseKernel::new(BaseKind::Rbf)
        .with_variance(100.0)
        .with_lengthscales(vec![15.0])
        .fixed()
        .into();
    let xs = DMatrix::from_vec(4, 1, vec![-5.0, -0.5, 0.0, 2.5]);
    let a = GpModel::fit(&x, &y, &kernel, NoiseSpec::new(0.01).unwrap())
        .unwrap()
        .predict(&xs, VarianceKind::Latent)
        .unwrap();
    let b = GpModel::fit(
        &scaled.x,
        &scaled.y,
        &scaled_kernel,
        NoiseSpec::new(1.0).unwrap(),
    )
    .unwrap()
    .predict(&(&xs * 10.0), VarianceKind::Latent)
    .unwrap();
    for (p, q) in a.iter().zip(&b) {
        assert!((10.0 * p.mean - q.mean).abs() <= 1e-8 * q.mean.abs().max(1.0));
        assert!((100.0 * p.variance - q.variance).abs() <= 1e-8 * q.variance.max(1.0));
    }
}

#[test]
fn single_full_member_matches_a_direct_gp() {
    let mut cfg = RunConfig::new(
        DataSource::Sinc {
            n: 300,
            range: (-8.0, 8.0),
            noise_sd: 0.05,
        },
        17,
    );
    cfg.k = 1;
    cfg.with_replacement = false;
    cfg.sizing = SizingConfig::Explicit { ns: 210 };
    cfg.optimizer = quick();
    let outcome = experiment::run(&cfg);
    assert!(outcome.report.is_ok(), "{:?}", outcome.report.error);
    let model = outcome.model.unwrap();
    let test = outcome.test.unwrap();
    let member = &model.members[0].model;
    // the one member saw every training row
    let mut rows = model.members[0].rows.clone();
    rows.sort_unstable();
    assert_eq!(rows, (0..210).collect::<Vec<_>>());

    let s = model.standardization.as_ref().unwrap();
    let xs = s.transform_x(&test.raw_x()).unwrap();
    let direct = member.predict(&xs, VarianceKind::Latent).unwrap();
    let means: Vec<f64> = direct.iter().map(|p| s.inverse_y(p.mean)).collect();
    let truths: Vec<f64> = test.raw_y().iter().cloned().collect();
    let rmse = metrics::rmse(&means, &truths).unwrap();
    assert_eq!(rmse.to_bits(), outcome.report.rmse.unwrap().to_bits());
    assert_eq!(outcome.report.rmse_average, outcome.report.rmse_poe);
}

#[test]
fn worker_count_does_not_change_results() {
    let data = data::generate_sinc(500, (-8.0, 8.0), 0.05, 5)
        .unwrap()
        .standardized();
    let kernel: KernelSpec = "rbf".parse().unwrap();
    let xs = DMatrix::from_fn(20, 1, |i, _| -1.5 + 0.15 * i as f64);
    let fit = |workers| {
        let cfg = EnsembleConfig {
            k: 6,
            subset_size: 40,
            seed: 99,
            workers,
            ..Default::default()
        };
        ensemble::fit_ensemble(&data, &kernel, &cfg, &quick()).unwrap()
    };
    let reference = fit(Some(1));
    let want = reference.predict_standardized(&xs).unwrap();
    for workers in [None, Some(2), Some(4)] {
        let got = fit(workers).predict_standardized(&xs).unwrap();
        for (p, q) in want.iter().zip(&got) {
            assert_eq!(p.mean.to_bits(), q.mean.to_bits());
            assert_eq!(p.variance.to_bits(), q.variance.to_bits());
        }
    }
}
