//! Trajectory-level conditional flow matching: probability paths, target
//! velocities, the matching loss with an endpoint-KL regularizer, and
//! buffer-driven training.

mod model;
mod train;

pub use model::{euler_endpoint, VectorFieldModel};
pub use train::{
    cfm_loss, diag_gauss_kl, energy_distance, kl_endpoint_core, kl_endpoint_regularizer,
    train_cfm, CfmConfig, EpochStats, KlReport, TrainReport,
};

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::env::{Normalizer, Trajectory};
use crate::error::{CtrlFlowError, Result};

/// A point on the flow: a trajectory payload of `h` rows, each
/// `(state, action, reward)` triple of width `row_width`, at flow time `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowState {
    /// Row-major `[h, row_width]` matrix.
    pub payload: Vec<f64>,
    pub h: usize,
    pub row_width: usize,
    pub t: f64,
}

impl FlowState {
    pub fn new(payload: Vec<f64>, h: usize, row_width: usize, t: f64) -> Result<Self> {
        if h == 0 || row_width == 0 || payload.len() != h * row_width {
            return Err(CtrlFlowError::config(format!(
                "payload length {} does not match {h} x {row_width}",
                payload.len()
            )));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(CtrlFlowError::config("flow time must lie in [0, 1]"));
        }
        if payload.iter().any(|x| !x.is_finite()) {
            return Err(CtrlFlowError::overflow("flow state payload", None));
        }
        Ok(Self {
            payload,
            h,
            row_width,
            t,
        })
    }

    /// Standard normal payload at `t = 0`.
    pub fn standard_normal(h: usize, row_width: usize, rng: &mut ChaCha12Rng) -> Self {
        let payload = (0..h * row_width)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            payload,
            h,
            row_width,
            t: 0.0,
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.payload[i * self.row_width..(i + 1) * self.row_width]
    }

    pub fn flatten(&self) -> &[f64] {
        &self.payload
    }

    pub fn unflatten(flat: &[f64], h: usize, row_width: usize, t: f64) -> Result<Self> {
        Self::new(flat.to_vec(), h, row_width, t)
    }
}

/// Flattens a trajectory into normalized `(s, a, r)` rows.
pub fn payload_from_trajectory(traj: &Trajectory, norm: &Normalizer) -> Result<Vec<f64>> {
    if traj.is_empty() {
        return Err(CtrlFlowError::config("empty trajectory has no payload"));
    }
    let width = traj.transitions[0].state.len() + traj.transitions[0].action.len() + 1;
    if norm.dim() != width {
        return Err(CtrlFlowError::config("normalizer width mismatch"));
    }
    let mut payload = Vec::with_capacity(traj.len() * width);
    for t in &traj.transitions {
        let mut row = Vec::with_capacity(width);
        row.extend_from_slice(&t.state);
        row.extend_from_slice(&t.action);
        row.push(t.reward);
        payload.extend(norm.normalize(&row));
    }
    Ok(payload)
}

/// One draw from the Gaussian conditional path toward a data trajectory:
/// mean `t*tau1 + (1-t)*tau0`, noise scale `sigma_t`, and the conditional
/// target velocity `tau1 - tau0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbPathSample {
    pub tau0: FlowState,
    /// Target payload (normalized), flat.
    pub tau1: Vec<f64>,
    pub t: f64,
    pub mu_t: Vec<f64>,
    pub sigma_t: f64,
    pub epsilon: Vec<f64>,
    pub noisy_point: Vec<f64>,
    pub target_velocity: Vec<f64>,
}

pub fn make_path_sample(
    tau1: &[f64],
    h: usize,
    row_width: usize,
    sigma: f64,
    rng: &mut ChaCha12Rng,
) -> Result<ProbPathSample> {
    let t = rng.random_range(0.0..1.0);
    make_path_sample_at(tau1, h, row_width, sigma, t, rng)
}

/// Forced-`t` variant used by the interpolation-endpoint checks.
pub fn make_path_sample_at(
    tau1: &[f64],
    h: usize,
    row_width: usize,
    sigma: f64,
    t: f64,
    rng: &mut ChaCha12Rng,
) -> Result<ProbPathSample> {
    if sigma < 0.0 {
        return Err(CtrlFlowError::config("sigma must be non-negative"));
    }
    let tau0 = FlowState::standard_normal(h, row_width, rng);
    if tau1.len() != tau0.payload.len() {
        return Err(CtrlFlowError::config("tau1 payload shape mismatch"));
    }
    let mu_t: Vec<f64> = tau1
        .iter()
        .zip(tau0.payload.iter())
        .map(|(x1, x0)| t * x1 + (1.0 - t) * x0)
        .collect();
    let epsilon: Vec<f64> = (0..tau1.len())
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    let noisy_point: Vec<f64> = mu_t
        .iter()
        .zip(epsilon.iter())
        .map(|(m, e)| m + sigma * e)
        .collect();
    let target_velocity: Vec<f64> = tau1
        .iter()
        .zip(tau0.payload.iter())
        .map(|(x1, x0)| x1 - x0)
        .collect();
    Ok(ProbPathSample {
        tau0,
        tau1: tau1.to_vec(),
        t,
        mu_t,
        sigma_t: sigma,
        epsilon,
        noisy_point,
        target_velocity,
    })
}
