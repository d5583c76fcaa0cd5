//! CtrlFlow: trajectory-level conditional flow matching with a
//! controllability-Gramian control correction and energy-based value
//! guidance, wired into a Dyna-style online RL loop.
//!
//! The crate is organized around the data path of the method:
//!
//! * [`nn`] — minimal differentiable function approximators (dense stacks and
//!   a miniature attention block) with exact reverse-mode gradients.
//! * [`env`] — small closed-form control environments and the replay buffers
//!   `B_env` / `B_mod`.
//! * [`flow`] — conditional flow matching over whole trajectories: probability
//!   paths, the CFM loss, a KL endpoint regularizer, and training.
//! * [`control`] — flow maps and their Jacobians, the LTI controllability
//!   Gramian oracle, the nonlinear Gramian, minimum-energy control inputs,
//!   and training of the control correction model.
//! * [`guidance`] — energy functions over trajectories, the guidance /
//!   partition networks, and the energy vector field.
//! * [`sampler`] — composes the learned fields into the sampling ODE and
//!   fills the model buffer with generated trajectories.
//! * [`agent`] — a SAC learner and the round-based orchestration loop.
//! * [`oracle`] — the analytic verification suites shared by the CLI and the
//!   acceptance tests.

pub mod agent;
pub mod config;
pub mod control;
pub mod env;
pub mod error;
pub mod experiments;
pub mod flow;
pub mod guidance;
pub mod io;
pub mod nn;
pub mod oracle;
pub mod parallel;
pub mod rng;
pub mod sampler;

pub use error::{CtrlFlowError, Result};
