//! Controllability machinery: flow maps and their Jacobians, the LTI
//! Gramian oracle, the nonlinear Gramian of the controlled flow, minimum
//! energy control inputs, the energy bound, and the control-correction
//! model with its trainer.

mod flowmap;
mod gramian;
mod jacobian;
mod lti;
mod train;

pub use flowmap::{FlowMap, FnField, ModelField, Scheme};
pub use gramian::{
    control_energy_bound, control_input, estimate_lipschitz, extreme_eigs, gramian_matvec,
    nonlinear_gramian, nonlinear_gramian_matfree, quadrature_path, ControlSolve, GramianReport,
    GramianSummary, DENSE_DIM_LIMIT,
};
pub use jacobian::{flow_jacobian, variation_of_constants_check, FdMethod, JacobianEstimate};
pub use lti::{lti_gramian, lti_min_energy, lti_min_energy_control, LtiSystem};
pub use train::{
    control_loss_value, train_control, ControlConfig, ControlEpoch, ControlModel,
    ControlTrainReport, ControlledField, EndpointMode,
};

use serde::{Deserialize, Serialize};

use crate::env::Normalizer;

/// Eigenvalue floor below which a Gramian counts as numerically singular.
pub const EPS_PD: f64 = 1e-6;
/// Ridge added to a singular Gramian when the caller opts into the fallback.
pub const EPS_REG: f64 = 1e-4;

/// Field evaluation interface for flow integration. Implementations must be
/// pure in `(x, t)`.
pub trait Field: Sync {
    fn velocity(&self, x: &[f64], t: f64) -> crate::Result<Vec<f64>>;

    /// Vector-Jacobian product `(dv/dx)^T upstream`. The default builds it
    /// from central differences of `<v(x), upstream>`; model-backed fields
    /// override with their exact backward pass.
    fn vjp(&self, x: &[f64], t: f64, upstream: &[f64]) -> crate::Result<Vec<f64>> {
        let delta = 1e-6;
        let mut probe = x.to_vec();
        let mut out = vec![0.0; x.len()];
        for i in 0..x.len() {
            let orig = probe[i];
            probe[i] = orig + delta;
            let vp = self.velocity(&probe, t)?;
            probe[i] = orig - delta;
            let vm = self.velocity(&probe, t)?;
            probe[i] = orig;
            out[i] = vp
                .iter()
                .zip(vm.iter())
                .zip(upstream.iter())
                .map(|((p, m), u)| (p - m) / (2.0 * delta) * u)
                .sum();
        }
        Ok(out)
    }
}

/// Actuation weight of the control channel: the scalar discounted-reward
/// gain expands virtually to `b * I` and is never materialized densely.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ControlGain {
    Scalar(f64),
    /// Per-dimension diagonal gains (config extension of the scalar form).
    Diagonal(Vec<f64>),
}

impl ControlGain {
    /// `B u` (elementwise scale).
    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        match self {
            ControlGain::Scalar(b) => u.iter().map(|x| b * x).collect(),
            ControlGain::Diagonal(d) => u.iter().zip(d.iter()).map(|(x, b)| b * x).collect(),
        }
    }

    /// Elementwise `b_i^2` for the Gramian integrand.
    pub fn squared(&self, dim: usize) -> Vec<f64> {
        match self {
            ControlGain::Scalar(b) => vec![b * b; dim],
            ControlGain::Diagonal(d) => d.iter().map(|b| b * b).collect(),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            ControlGain::Scalar(b) => *b == 0.0,
            ControlGain::Diagonal(d) => d.iter().all(|b| *b == 0.0),
        }
    }
}

/// Discounted reward sum over the decoded trajectory payload:
/// `b = sum_{i=1..h} gamma^i * r_i * (1 - I_i)` where the indicator `I_i`
/// is 1 exactly for invalid (padding/absorbing) rows, and rewards are read
/// from the denormalized reward channel.
pub fn gain_from_payload(
    payload: &[f64],
    h: usize,
    row_width: usize,
    gamma: f64,
    norm: &Normalizer,
    valid: Option<&[bool]>,
) -> ControlGain {
    let mut b = 0.0;
    let mut scale = gamma;
    for i in 0..h {
        let row = &payload[i * row_width..(i + 1) * row_width];
        let reward = norm.denormalize(row)[row_width - 1];
        let indicator = valid.map(|v| if v[i] { 0.0 } else { 1.0 }).unwrap_or(0.0);
        b += scale * reward * (1.0 - indicator);
        scale *= gamma;
    }
    ControlGain::Scalar(b)
}

/// The controllability vector field `v_C = v + B u`.
pub fn controllable_field(v: &[f64], gain: &ControlGain, u: &[f64]) -> Vec<f64> {
    let bu = gain.apply(u);
    v.iter().zip(bu.iter()).map(|(a, b)| a + b).collect()
}
