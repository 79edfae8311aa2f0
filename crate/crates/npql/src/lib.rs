//! Non-parametric Q-learning with action-primitive behavior priors, at desk
//! scale: the AP-NPQL agent, its parametric-projection baselines (AP-MPO,
//! AP-SAC, SAC), toy 2-D sparse-reward manipulation environments, dual replay
//! buffers, and an exact tabular oracle for the regularized Bellman operator.

pub mod env;
pub mod error;
pub mod agent;
pub mod baselines;
pub mod dist;
pub mod nn;
pub mod oracle;
pub mod replay;
pub mod run;
pub mod verify;

pub use error::{NpqlError, Result};
