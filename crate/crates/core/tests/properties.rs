use gpbag::data::Dataset;
use gpbag::ensemble::{self, EnsembleConfig};
use gpbag::kernels::{BaseKernel, BaseKind, KernelSpec};
use gpbag::{GpModel, NoiseSpec, OptimizerConfig, VarianceKind};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use proptest::prelude::*;

fn leaf() -> impl Strategy<Value = KernelSpec> {
    (
        0..BaseKind::ALL.len(),
        0.2f64..3.0,
        0.3f64..3.0,
        0.5f64..4.0,
    )
        .prop_map(|(i, var, ls, period)| {
            let kind = BaseKind::ALL[i];
            let mut b = BaseKernel::new(kind).with_variance(var);
            if kind.has_lengthscales() {
                b = b.with_lengthscales(vec![ls]);
            }
            if kind.has_period() {
                b = b.with_period(period);
            }
            if kind == BaseKind::BrownianMotion {
                b = b.with_origin(-5.0);
            }
            b.into()
        })
}

fn tree() -> impl Strategy<Value = KernelSpec> {
    leaf().prop_recursive(3, 12, 3, |inner| {
        (prop::collection::vec(inner, 2..4), any::<bool>()).prop_map(|(children, sum)| {
            if sum {
                KernelSpec::sum(children).unwrap()
            } else {
                KernelSpec::product(children).unwrap()
            }
        })
    })
}

fn points(n: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-4.0f64..4.0, n).prop_map(move |v| DMatrix::from_vec(n, 1, v))
}

fn min_eigenvalue(k: &DMatrix<f64>) -> (f64, f64) {
    let eig = SymmetricEigen::new(k.clone());
    let min = eig
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    (min, max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn composite_grams_are_symmetric_psd(kernel in tree(), x in points(12)) {
        let k = kernel.gram(&x, None).unwrap();
        prop_assert!((&k - k.transpose()).amax() <= 1e-12 * k.amax().max(1.0));
        let (min, max) = min_eigenvalue(&k);
        prop_assert!(min >= -1e-9 * max.max(1.0), "min eigenvalue {min}, max {max}");
    }

    #[test]
    fn posterior_variance_never_exceeds_prior(
        kernel in tree(), x in points(15), y in prop::collection::vec(-2.0f64..2.0, 15),
        xs in points(10), noise in 0.01f64..0.5,
    ) {
        let model = GpModel::fit(&x, &DVector::from_vec(y), &kernel, NoiseSpec::new(noise).unwrap()).unwrap();
        let preds = model.predict(&xs, VarianceKind::Latent).unwrap();
        let prior = kernel.diag(&xs).unwrap();
        for (p, k) in preds.iter().zip(prior) {
            prop_assert!(p.variance >= 0.0);
            prop_assert!(p.variance <= k + 1e-9 * k.max(1.0), "{} > prior {k}", p.variance);
        }
    }

    #[test]
    fn predictions_ignore_training_order(
        x in points(14), y in prop::collection::vec(-2.0f64..2.0, 14), shift in 1usize..13,
    ) {
        let kernel: KernelSpec = "rbf + linear".parse().unwrap();
        let noise = NoiseSpec::new(0.1).unwrap();
        let y = DVector::from_vec(y);
        let order: Vec<usize> = (0..14).map(|i| (i * shift + 3) % 14).collect();
        // `shift` coprime with 14 makes `order` a permutation
        prop_assume!(gcd(shift, 14) == 1);
        let xp = x.select_rows(&order);
        let yp = DVector::from_iterator(14, order.iter().map(|&i| y[i]));
        let xs = DMatrix::from_vec(5, 1, vec![-3.0, -1.0, 0.0, 1.5, 3.5]);
        let a = GpModel::fit(&x, &y, &kernel, noise).unwrap().predict(&xs, VarianceKind::Latent).unwrap();
        let b = GpModel::fit(&xp, &yp, &kernel, noise).unwrap().predict(&xs, VarianceKind::Latent).unwrap();
        for (p, q) in a.iter().zip(&b) {
            prop_assert!((p.mean - q.mean).abs() <= 1e-9 * p.mean.abs().max(1.0));
            prop_assert!((p.variance - q.variance).abs() <= 1e-9);
        }
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

#[test]
fn ensemble_mixture_gram_is_psd() {
    let x = DMatrix::from_fn(40, 1, |i, _| -6.0 + 0.3 * i as f64);
    let y = DVector::from_fn(40, |i, _| gpbag::data::sinc(x[(i, 0)]));
    let data = Dataset::new(x.clone(), y).unwrap();
    let kernel: KernelSpec = "rbf".parse().unwrap();
    let opt = OptimizerConfig {
        restarts: 1,
        max_iterations: 20,
        ..Default::default()
    };
    for k in [2, 3, 5] {
        let cfg = EnsembleConfig {
            k,
            subset_size: 15,
            seed: k as u64,
            ..Default::default()
        };
        let model = ensemble::fit_ensemble(&data, &kernel, &cfg, &opt).unwrap();
        let m = model.mixture_gram(&x).unwrap();
        let (min, max) = min_eigenvalue(&m);
        assert!(min >= -1e-9 * max, "K={k}: min eigenvalue {min}");
        // uniform mixture of the member kernels
        let mut want = DMatrix::zeros(40, 40);
        for member in &model.members {
            want += member.model.kernel().gram(&x, None).unwrap();
        }
        want /= k as f64;
        assert!((m - want).amax() <= 1e-12);
    }
}
