//! Objectives, optimizers and convergence-time arithmetic.

pub mod horizon;
pub mod idx;
pub mod optim;
pub mod problems;

pub use horizon::{
    bounded_sg_constants, excess_time_ratio, measure_sg_constants, sigma_sq, training_horizon, Horizon, HorizonInputs,
};
pub use optim::{AdamParams, LrSchedule, OptState, OptimizerKind};
pub use problems::{sg_oracle, Batch, Dataset, LeastSquares, Logistic, Mlp, Problem, Quadratic};
