//! Finite-block feedback capacity of additive Gaussian noise channels whose noise
//! is generated by a partially observable state-space model.
//!
//! The sequential engine ([`noise_filter`], [`channel_filter`], [`capacity`])
//! computes rates through two Riccati recursions. [`oracle`] holds the
//! matrix-form characterization it is checked against, and [`mc_sim`] validates
//! the sample-path claims by simulation.

pub use nalgebra;

pub mod capacity;
pub mod channel_filter;
pub mod error;
pub mod export;
pub mod linalg;
pub mod mc_sim;
pub mod model;
pub mod model_file;
pub mod noise_filter;
pub mod optim;
pub mod oracle;

pub use capacity::{
    asymptotic_rate_estimate, evaluate_perfect_state, evaluate_rate, optimize_strategy,
    perfect_state_rate, steady_state_riccati, CapacityResult, OptimizerDiagnostics,
};
pub use channel_filter::{run_output_filter, OutputFilterTrace, SequentialStrategy};
pub use error::{Error, Result};
pub use mc_sim::{check_orthogonality, empirical_power, empirical_rate, simulate, SimulationTrace};
pub use model::{
    assemble_noise_covariance, validate_realization, ChannelConfig, PoSsRealization,
    TimeInvariantModel,
};
pub use model_file::{load_model, parse_model};
pub use noise_filter::{noise_entropy, run_noise_filter, NoiseFilterTrace};
pub use optim::OptimizerOptions;
pub use oracle::{
    cp_objective, cp_optimize, cp_to_innovations_form, joint_covariance, unroll_sequential,
    CoverPombraStrategy, InnovationsFormStrategy,
};
