//! Fixtures shared by the benchmark targets.

use gpbag::data::{self, Dataset};
use gpbag::{KernelSpec, OptimizerConfig};

/// Standardized noisy sinc sample; fixed seed so runs compare.
pub fn sinc(n: usize) -> Dataset {
    data::generate_sinc(n, (-15.0, 15.0), 0.05, 42)
        .expect("valid generator arguments")
        .standardized()
}

pub fn rbf() -> KernelSpec {
    "rbf".parse().expect("valid kernel")
}

pub fn composite() -> KernelSpec {
    "rbf + linear + (periodicmatern32 * rbf)"
        .parse()
        .expect("valid kernel")
}

/// One short restart: benches time the linear algebra, not convergence.
pub fn short_optimizer() -> OptimizerConfig {
    OptimizerConfig {
        restarts: 1,
        max_iterations: 10,
        ..Default::default()
    }
}
