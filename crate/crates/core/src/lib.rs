//! Learned shape estimation and shape-aware control for multi-segment
//! continuum robots.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`]: reverse-mode differentiation, the perceptron, Adam.
//! * [`odeint`]: fixed-step Euler / RK4 / Adams–Bashforth integration that
//!   works on plain tensors and on tape-recorded states alike.
//! * [`robot`]: the ground-truth Cosserat backbone simulator, datasets and
//!   reference trajectories.
//! * [`shape_node`]: the arc-length neural ODE that predicts backbone shapes.
//! * [`control_node`]: the time-domain neural ODE policy, its MPC-style loss,
//!   closed-loop tracking and the Jacobian open-loop baseline.
//! * [`metrics`]: RMSE/STD tables and the log formats shared with the CLI.

// `!(x > 0.0)` also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod control_node;
pub mod error;
pub mod metrics;
pub mod odeint;
pub mod robot;
pub mod shape_node;
pub mod tensor;

pub use error::{Error, Result};
pub use nalgebra::{DMatrix, Vector3};
pub use tensor::{Tape, Tensor, Var};
