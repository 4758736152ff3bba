//! Visual-inertial odometry with attention-based sensor fusion and
//! Laplace-approximation uncertainty.

pub mod error;
pub mod gradcheck;
pub mod laplace;
pub mod layers;
pub mod model;
pub mod optim;
pub mod params;
pub mod dataset;
pub mod degrade;
pub mod encoders;
pub mod eval;
pub mod fusion;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
