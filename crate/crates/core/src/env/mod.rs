//! Small fully known control environments plus replay buffers.
//!
//! Dynamics are pure functions of `(spec, state, action)` so environments
//! need no internal state and clone trivially across workers.

mod buffer;
mod normalizer;

pub use buffer::ReplayBuffer;
pub use normalizer::Normalizer;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{CtrlFlowError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EnvKind {
    /// Double integrator on the plane: state `(px, py, vx, vy)`, acceleration
    /// actions in `[-1, 1]^2`, reward `-||p' - goal||` after the step.
    PointMass2d,
    /// Torque-controlled pendulum: state `(cos th, sin th, thdot)`, torque in
    /// `[-2, 2]`, quadratic cost on angle, speed, and torque. `th = 0` is
    /// upright.
    Pendulum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub d_s: usize,
    pub d_a: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub horizon: usize,
    pub gamma: f64,
    pub dt: f64,
    /// Goal position (point-mass only; empty for the pendulum).
    pub goal: Vec<f64>,
    pub reward_desc: String,
}

impl EnvSpec {
    pub fn point_mass_2d() -> Self {
        Self::point_mass_2d_with_goal([1.0, 0.0])
    }

    pub fn point_mass_2d_with_goal(goal: [f64; 2]) -> Self {
        Self {
            kind: EnvKind::PointMass2d,
            d_s: 4,
            d_a: 2,
            action_low: vec![-1.0, -1.0],
            action_high: vec![1.0, 1.0],
            horizon: 50,
            gamma: 0.99,
            dt: 0.05,
            goal: goal.to_vec(),
            reward_desc: "-||position - goal|| after the step".into(),
        }
    }

    pub fn pendulum() -> Self {
        Self {
            kind: EnvKind::Pendulum,
            d_s: 3,
            d_a: 1,
            action_low: vec![-2.0],
            action_high: vec![2.0],
            horizon: 100,
            gamma: 0.99,
            dt: 0.05,
            goal: vec![],
            reward_desc: "-(angle^2 + 0.1 thdot^2 + 0.001 torque^2)".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(CtrlFlowError::config("horizon must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(CtrlFlowError::config("gamma must lie in [0, 1)"));
        }
        if self.action_low.len() != self.d_a || self.action_high.len() != self.d_a {
            return Err(CtrlFlowError::config("action box dimension mismatch"));
        }
        if self
            .action_low
            .iter()
            .chain(self.action_high.iter())
            .any(|b| !b.is_finite())
        {
            return Err(CtrlFlowError::config("action box must be finite"));
        }
        Ok(())
    }

    pub fn clip_action(&self, action: &[f64]) -> Vec<f64> {
        action
            .iter()
            .zip(self.action_low.iter().zip(self.action_high.iter()))
            .map(|(a, (lo, hi))| a.clamp(*lo, *hi))
            .collect()
    }

    /// Initial-state distribution: point-mass positions uniform in
    /// `[-0.5, 0.5]^2` at rest; pendulum angle uniform in `[-pi, pi]`,
    /// speed uniform in `[-1, 1]`.
    pub fn reset(&self, rng: &mut ChaCha12Rng) -> Vec<f64> {
        match self.kind {
            EnvKind::PointMass2d => vec![
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                0.0,
                0.0,
            ],
            EnvKind::Pendulum => {
                let th: f64 = rng.random_range(-PI..PI);
                let thdot = rng.random_range(-1.0..1.0);
                vec![th.cos(), th.sin(), thdot]
            }
        }
    }
}

/// One step of the named dynamics. Actions are clipped to the box first;
/// the result is a deterministic function of `(state, action)`.
pub fn step(spec: &EnvSpec, state: &[f64], action: &[f64]) -> Result<(Vec<f64>, f64, bool)> {
    if state.len() != spec.d_s || state.iter().any(|s| !s.is_finite()) {
        return Err(CtrlFlowError::EnvFault("non-finite or mis-sized state".into()));
    }
    if action.len() != spec.d_a {
        return Err(CtrlFlowError::EnvFault("action dimension mismatch".into()));
    }
    let a = spec.clip_action(action);
    match spec.kind {
        EnvKind::PointMass2d => {
            let dt = spec.dt;
            let vx = state[2] + dt * a[0];
            let vy = state[3] + dt * a[1];
            let px = state[0] + dt * vx;
            let py = state[1] + dt * vy;
            let reward = -((px - spec.goal[0]).powi(2) + (py - spec.goal[1]).powi(2)).sqrt();
            Ok((vec![px, py, vx, vy], reward, false))
        }
        EnvKind::Pendulum => {
            let (g, m, l) = (10.0, 1.0, 1.0);
            let dt = spec.dt;
            let th = state[1].atan2(state[0]);
            let thdot = state[2];
            let u = a[0];
            let cost = wrap_angle(th).powi(2) + 0.1 * thdot * thdot + 0.001 * u * u;
            let acc = 3.0 * g / (2.0 * l) * th.sin() + 3.0 / (m * l * l) * u;
            let thdot_new = (thdot + dt * acc).clamp(-8.0, 8.0);
            let th_new = th + dt * thdot_new;
            Ok((
                vec![th_new.cos(), th_new.sin(), thdot_new],
                -cost,
                false,
            ))
        }
    }
}

/// Wraps an angle to `[-pi, pi]`.
pub fn wrap_angle(th: f64) -> f64 {
    let mut a = (th + PI) % (2.0 * PI);
    if a < 0.0 {
        a += 2.0 * PI;
    }
    a - PI
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    /// Genuine terminal state reached; never set on horizon truncation.
    pub done_flag: bool,
    /// False only for padding or absorbing entries (the last transition of a
    /// generated trajectory has no real successor).
    pub valid_flag: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Source {
    Environment,
    Model,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub transitions: Vec<Transition>,
    pub source: Source,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Environment-sourced trajectories chain: `next_state[i] == state[i+1]`.
    pub fn is_chained(&self) -> bool {
        self.transitions
            .windows(2)
            .all(|w| w[0].next_state == w[1].state)
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.transitions.iter().map(|t| t.reward).collect()
    }
}

/// `sum_i gamma^i * r_i`, i from 0, by direct summation.
pub fn discounted_return(traj: &Trajectory, gamma: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(CtrlFlowError::config("gamma must lie in [0, 1)"));
    }
    let mut acc = 0.0;
    let mut scale = 1.0;
    for t in &traj.transitions {
        acc += scale * t.reward;
        scale *= gamma;
    }
    Ok(acc)
}

/// Rolls one episode with the given policy, returning chained transitions.
pub fn rollout(
    spec: &EnvSpec,
    rng: &mut ChaCha12Rng,
    mut policy: impl FnMut(&[f64], &mut ChaCha12Rng) -> Vec<f64>,
) -> Result<Trajectory> {
    let mut state = spec.reset(rng);
    let mut transitions = Vec::with_capacity(spec.horizon);
    for _ in 0..spec.horizon {
        let action = spec.clip_action(&policy(&state, rng));
        let (next, reward, done) = step(spec, &state, &action)?;
        transitions.push(Transition {
            state: state.clone(),
            action,
            reward,
            next_state: next.clone(),
            done_flag: done,
            valid_flag: true,
        });
        state = next;
        if done {
            break;
        }
    }
    Ok(Trajectory {
        transitions,
        source: Source::Environment,
    })
}
