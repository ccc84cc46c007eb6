//! Shared fixtures for the criterion benches.

use feedcap::model::{build_arma11, two_driver_scalar};
use feedcap::{PoSsRealization, SequentialStrategy};

/// ARMA(1,1) noise used across the benches.
pub fn arma(n: usize) -> PoSsRealization {
    build_arma11(0.4, 0.5, 1.0, n)
}

/// Scalar-state model whose noise is driven by two independent sources.
pub fn two_driver(n: usize) -> PoSsRealization {
    two_driver_scalar(0.7, 0.2, n)
}

/// A fixed strategy with moderate gains and dither.
pub fn strategy(n: usize) -> SequentialStrategy {
    SequentialStrategy {
        lambda: (0..n).map(|t| vec![0.3 + 0.1 * (t % 3) as f64]).collect(),
        dither_var: vec![0.5; n],
    }
}
