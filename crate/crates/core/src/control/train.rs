use serde::{Deserialize, Serialize};

use super::flowmap::{FlowMap, Scheme};
use super::gramian::{nonlinear_gramian, quadrature_path, GramianReport};
use super::{controllable_field, gain_from_payload, ControlGain, Field, EPS_PD};
use crate::env::ReplayBuffer;
use crate::error::{CtrlFlowError, Result};
use crate::flow::{payload_from_trajectory, FlowState, VectorFieldModel};
use crate::nn::{Adam, Gradients};
use crate::rng::{RunSeed, Stream};

/// Reading of the endpoint map `M` used in the control loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EndpointMode {
    /// `M(tau0)` is the flow of the corrected field integrated over `[0, 1]`.
    Integration,
    /// `M(tau0)` is a single whole-interval step `tau0 + v(tau0, 0) + B u(tau0, 0)`.
    DirectMap,
}

/// Correction head `u(x, t)` trained to steer the frozen velocity field's
/// endpoints onto the data distribution.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControlModel {
    pub field: VectorFieldModel,
    /// Energy weight `alpha` in the loss denominator.
    pub alpha: f64,
}

impl ControlModel {
    pub fn new(field: VectorFieldModel, alpha: f64) -> Result<Self> {
        if alpha <= 0.0 || !alpha.is_finite() {
            return Err(CtrlFlowError::config("alpha must be positive"));
        }
        Ok(Self { field, alpha })
    }
}

/// The corrected field `v_theta + B u_omega` as one [`Field`], with the
/// exact backward passes of both models composed in its pullback.
pub struct ControlledField<'a> {
    pub cfm: &'a VectorFieldModel,
    pub ctrl: &'a VectorFieldModel,
    pub gain: ControlGain,
    pub h: usize,
}

impl Field for ControlledField<'_> {
    fn velocity(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let v = self.cfm.velocity(x, self.h, t)?;
        let u = self.ctrl.velocity(x, self.h, t)?;
        Ok(controllable_field(&v, &self.gain, &u))
    }

    fn vjp(&self, x: &[f64], t: f64, upstream: &[f64]) -> Result<Vec<f64>> {
        let (_, tape_v) = self.cfm.velocity_tape(x, self.h, t)?;
        let mut pull = self.cfm.backward(&tape_v, self.h, upstream)?.input;
        let (_, tape_u) = self.ctrl.velocity_tape(x, self.h, t)?;
        let through_gain = self.gain.apply(upstream);
        let pull_u = self.ctrl.backward(&tape_u, self.h, &through_gain)?.input;
        for (a, b) in pull.iter_mut().zip(pull_u.iter()) {
            *a += b;
        }
        Ok(pull)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControlConfig {
    /// Trajectory window length.
    pub h: usize,
    pub batch_size: usize,
    pub batches_per_epoch: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Euler steps of the endpoint roll; in `Integration` mode it must be a
    /// multiple of `2 * quad_nodes` so the Gramian nodes sit on the grid.
    pub euler_steps: usize,
    /// Quadrature nodes of the per-batch probe Gramian.
    pub quad_nodes: usize,
    pub endpoint_mode: EndpointMode,
    /// Discount for the reward-sum gain.
    pub gamma: f64,
    /// Restrict window sampling to this many most recent episodes.
    pub recent_episodes: u64,
    /// Probe radius for the Gramian's Jacobian columns.
    pub jacobian_delta: f64,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            h: 1,
            batch_size: 16,
            batches_per_epoch: 8,
            epochs: 10,
            lr: 1e-3,
            euler_steps: 8,
            quad_nodes: 4,
            endpoint_mode: EndpointMode::Integration,
            gamma: 0.99,
            recent_episodes: u64::MAX,
            jacobian_delta: 1e-4,
        }
    }
}

impl ControlConfig {
    fn validate(&self, ctrl: &ControlModel, cfm: &VectorFieldModel) -> Result<()> {
        if self.h == 0 || self.h > ctrl.field.h_max.min(cfm.h_max) {
            return Err(CtrlFlowError::config("window length out of model range"));
        }
        if ctrl.field.row_width != cfm.row_width {
            return Err(CtrlFlowError::config("control and velocity row widths differ"));
        }
        if self.batch_size == 0 || self.batches_per_epoch == 0 {
            return Err(CtrlFlowError::config("empty training schedule"));
        }
        if self.euler_steps == 0 || self.quad_nodes == 0 {
            return Err(CtrlFlowError::config("steps and quadrature nodes must be >= 1"));
        }
        if self.endpoint_mode == EndpointMode::Integration
            && self.euler_steps % (2 * self.quad_nodes) != 0
        {
            return Err(CtrlFlowError::config(
                "euler_steps must be a multiple of 2 * quad_nodes",
            ));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(CtrlFlowError::config("gamma must lie in [0, 1)"));
        }
        if !self.lr.is_finite() || self.jacobian_delta <= 0.0 {
            return Err(CtrlFlowError::config("bad optimizer constants"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControlEpoch {
    pub mean_loss: f64,
    pub mean_lambda_min: f64,
    pub degenerate_batches: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ControlTrainReport {
    pub epochs: Vec<ControlEpoch>,
}

impl ControlTrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.mean_loss)
    }
}

/// The endpoint-mismatch loss `||tau_bar||^2 / (alpha * max(lambda_min, eps_pd))`.
pub fn control_loss_value(tau_bar_sq: f64, lambda_min: f64, alpha: f64) -> f64 {
    tau_bar_sq / (alpha * lambda_min.max(EPS_PD))
}

struct Rollout {
    /// `euler_steps + 1` states, `x_0 = tau0`.
    states: Vec<Vec<f64>>,
    times: Vec<f64>,
    dt: f64,
}

fn roll_endpoint(
    cfm: &VectorFieldModel,
    ctrl: &VectorFieldModel,
    gain: &ControlGain,
    tau0: &[f64],
    h: usize,
    cfg: &ControlConfig,
) -> Result<Rollout> {
    let (steps, dt) = match cfg.endpoint_mode {
        EndpointMode::Integration => (cfg.euler_steps, 1.0 / cfg.euler_steps as f64),
        EndpointMode::DirectMap => (1, 1.0),
    };
    let mut states = Vec::with_capacity(steps + 1);
    let mut times = Vec::with_capacity(steps + 1);
    states.push(tau0.to_vec());
    times.push(0.0);
    for k in 0..steps {
        let t = k as f64 * dt;
        let x = states.last().unwrap();
        let v = cfm.velocity(x, h, t)?;
        let u = ctrl.velocity(x, h, t)?;
        let bu = gain.apply(&u);
        let next: Vec<f64> = x
            .iter()
            .zip(v.iter().zip(bu.iter()))
            .map(|(xi, (vi, ui))| xi + dt * (vi + ui))
            .collect();
        if next.iter().any(|v| !v.is_finite()) {
            return Err(CtrlFlowError::overflow("control rollout", Some(k)));
        }
        states.push(next);
        times.push((k + 1) as f64 * dt);
    }
    Ok(Rollout { states, times, dt })
}

/// Probe Gramian of the corrected field along the first sample's rollout.
/// Gains and rolled states enter detached: the spectral floor scales the
/// loss but contributes no gradient.
fn probe_gramian(
    cfm: &VectorFieldModel,
    ctrl: &VectorFieldModel,
    gain: &ControlGain,
    roll: &Rollout,
    tau0: &[f64],
    h: usize,
    cfg: &ControlConfig,
) -> Result<GramianReport> {
    let field = ControlledField {
        cfm,
        ctrl,
        gain: gain.clone(),
        h,
    };
    let map = FlowMap::new(&field, cfg.euler_steps, Scheme::Euler)?;
    let gains = vec![gain.clone(); cfg.quad_nodes];
    match cfg.endpoint_mode {
        EndpointMode::Integration => {
            let stride = cfg.euler_steps / (2 * cfg.quad_nodes);
            let nodes: Vec<(f64, Vec<f64>)> = (0..cfg.quad_nodes)
                .map(|k| {
                    let idx = stride * (2 * k + 1);
                    (roll.times[idx], roll.states[idx].clone())
                })
                .collect();
            let terminal = roll.states.last().unwrap().clone();
            nonlinear_gramian(&map, &nodes, &gains, (0.0, 1.0), &terminal, cfg.jacobian_delta)
        }
        EndpointMode::DirectMap => {
            let (nodes, terminal) = quadrature_path(&map, tau0, 0.0, 1.0, cfg.quad_nodes)?;
            nonlinear_gramian(&map, &nodes, &gains, (0.0, 1.0), &terminal, cfg.jacobian_delta)
        }
    }
}

struct BatchOutcome {
    loss: f64,
    lambda_min: f64,
    degenerate: bool,
}

/// One optimizer step: roll every sample, read the spectral floor off the
/// first sample's Gramian, and backpropagate the endpoint mismatch through
/// the Euler chain into the control parameters only.
fn run_batch(
    ctrl: &mut ControlModel,
    cfm: &VectorFieldModel,
    tau0s: &[Vec<f64>],
    tau1s: &[Vec<f64>],
    gains: &[ControlGain],
    cfg: &ControlConfig,
    adam: &mut Adam,
) -> Result<BatchOutcome> {
    let b = tau0s.len();
    let h = cfg.h;
    let alpha = ctrl.alpha;

    let rolls: Vec<Rollout> = tau0s
        .iter()
        .zip(gains.iter())
        .map(|(tau0, gain)| roll_endpoint(cfm, &ctrl.field, gain, tau0, h, cfg))
        .collect::<Result<_>>()?;

    let report = probe_gramian(cfm, &ctrl.field, &gains[0], &rolls[0], &tau0s[0], h, cfg)?;
    let lambda_min = report.lambda_min;
    let degenerate = lambda_min < EPS_PD;
    let floor = lambda_min.max(EPS_PD);

    let mut loss = 0.0;
    let mut grads = Gradients {
        params: vec![0.0; ctrl.field.net.param_count()],
        input: Vec::new(),
    };
    for ((roll, tau1), gain) in rolls.iter().zip(tau1s.iter()).zip(gains.iter()) {
        let endpoint = roll.states.last().unwrap();
        let tau_bar: Vec<f64> = tau1.iter().zip(endpoint.iter()).map(|(a, b)| a - b).collect();
        let err_sq: f64 = tau_bar.iter().map(|x| x * x).sum();
        loss += control_loss_value(err_sq, lambda_min, alpha) / b as f64;

        // d loss / d endpoint, with the batch mean folded in.
        let mut lambda: Vec<f64> = tau_bar
            .iter()
            .map(|e| -2.0 * e / (alpha * floor * b as f64))
            .collect();
        for k in (0..roll.states.len() - 1).rev() {
            let x = &roll.states[k];
            let t = roll.times[k];
            let dt = roll.dt;
            let scaled: Vec<f64> = lambda.iter().map(|l| dt * l).collect();

            let (_, tape_u) = ctrl.field.velocity_tape(x, h, t)?;
            let through_gain = gain.apply(&scaled);
            let pull_u = ctrl.field.backward(&tape_u, h, &through_gain)?;
            for (g, p) in grads.params.iter_mut().zip(pull_u.params.iter()) {
                *g += p;
            }

            let (_, tape_v) = cfm.velocity_tape(x, h, t)?;
            let pull_v = cfm.backward(&tape_v, h, &scaled)?.input;
            for ((l, pv), pu) in lambda
                .iter_mut()
                .zip(pull_v.iter())
                .zip(pull_u.input.iter())
            {
                *l += pv + pu;
            }
        }
    }
    if !loss.is_finite() {
        return Err(CtrlFlowError::TrainingDiverged(
            "control loss became non-finite".into(),
        ));
    }
    adam.step(ctrl.field.net.params_mut(), &grads.params)?;
    Ok(BatchOutcome {
        loss,
        lambda_min,
        degenerate,
    })
}

/// Trains the control correction against a frozen velocity field by
/// endpoint mismatch over replayed trajectory windows. The velocity model's
/// normalizer defines the payload space for both nets.
pub fn train_control(
    ctrl: &mut ControlModel,
    cfm: &VectorFieldModel,
    buffer: &ReplayBuffer,
    seed: RunSeed,
    cfg: &ControlConfig,
) -> Result<ControlTrainReport> {
    cfg.validate(ctrl, cfm)?;
    let mut report = ControlTrainReport::default();
    if cfg.epochs == 0 {
        return Ok(report);
    }
    if buffer.max_window() < cfg.h {
        return Err(CtrlFlowError::NotReady(
            "replay buffer has no window of the requested length".into(),
        ));
    }
    let mut rng = seed.stream(Stream::ControlTrain);
    let mut adam = Adam::new(cfg.lr, ctrl.field.net.param_count());
    let row_width = cfm.row_width;

    for _ in 0..cfg.epochs {
        let mut losses = Vec::with_capacity(cfg.batches_per_epoch);
        let mut floors = Vec::with_capacity(cfg.batches_per_epoch);
        let mut degenerate_batches = 0;
        for _ in 0..cfg.batches_per_epoch {
            let trajs = buffer.sample_trajectories_recent(
                &mut rng,
                cfg.h,
                cfg.batch_size,
                cfg.recent_episodes,
            )?;
            let mut tau0s = Vec::with_capacity(cfg.batch_size);
            let mut tau1s = Vec::with_capacity(cfg.batch_size);
            let mut gains = Vec::with_capacity(cfg.batch_size);
            for traj in &trajs {
                let payload = payload_from_trajectory(traj, &cfm.normalizer)?;
                let valid: Vec<bool> = traj.transitions.iter().map(|t| t.valid_flag).collect();
                gains.push(gain_from_payload(
                    &payload,
                    cfg.h,
                    row_width,
                    cfg.gamma,
                    &cfm.normalizer,
                    Some(&valid),
                ));
                tau1s.push(payload);
                tau0s.push(FlowState::standard_normal(cfg.h, row_width, &mut rng).payload);
            }
            let out = run_batch(ctrl, cfm, &tau0s, &tau1s, &gains, cfg, &mut adam)?;
            losses.push(out.loss);
            floors.push(out.lambda_min);
            if out.degenerate {
                degenerate_batches += 1;
            }
        }
        report.epochs.push(ControlEpoch {
            mean_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            mean_lambda_min: floors.iter().sum::<f64>() / floors.len() as f64,
            degenerate_batches,
        });
        if degenerate_batches == cfg.batches_per_epoch {
            return Err(CtrlFlowError::ControlDegenerate(format!(
                "gramian spectral floor stayed below {EPS_PD:.0e} for a full epoch; \
                 review reward gains or quadrature settings"
            )));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{ReplayBuffer, Source, Transition};
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn fresh_models(h_max: usize, row_width: usize, hidden: &[usize]) -> (ControlModel, VectorFieldModel) {
        let cfm = VectorFieldModel::feed_forward(h_max, row_width, hidden, 4).unwrap();
        let ctrl_net = VectorFieldModel::feed_forward(h_max, row_width, hidden, 4).unwrap();
        (ControlModel::new(ctrl_net, 1.0).unwrap(), cfm)
    }

    fn toy_buffer(seed: u64, reward: f64, episodes: usize) -> ReplayBuffer {
        let mut rng = RunSeed(seed).stream(Stream::EnvReset);
        let dist = Normal::new(0.0, 0.05).unwrap();
        let mut buf = ReplayBuffer::new(4096, Source::Environment, 1);
        for _ in 0..episodes {
            let transitions: Vec<Transition> = (0..8)
                .map(|_| Transition {
                    state: vec![2.0 + dist.sample(&mut rng)],
                    action: vec![1.0 + dist.sample(&mut rng)],
                    reward: reward + if reward == 0.0 { 0.0 } else { dist.sample(&mut rng) },
                    next_state: vec![2.0 + dist.sample(&mut rng)],
                    done_flag: false,
                    valid_flag: true,
                })
                .collect();
            buf.push_episode(transitions).unwrap();
        }
        buf
    }

    #[test]
    fn perfect_endpoints_cost_nothing() {
        // Zero-parameter models leave tau0 in place; tau1 = tau0 means the
        // mismatch is identically zero no matter the spectral floor.
        let (mut ctrl, cfm) = fresh_models(1, 3, &[8]);
        let cfg = ControlConfig {
            h: 1,
            batch_size: 2,
            ..ControlConfig::default()
        };
        let tau0s = vec![vec![0.3, -0.2, 0.9], vec![1.0, 0.0, -1.0]];
        let tau1s = tau0s.clone();
        let gains = vec![ControlGain::Scalar(0.0); 2];
        let mut adam = Adam::new(0.0, ctrl.field.net.param_count());
        let out = run_batch(&mut ctrl, &cfm, &tau0s, &tau1s, &gains, &cfg, &mut adam).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.degenerate);
    }

    #[test]
    fn loss_formula_matches_hand_arithmetic() {
        assert_eq!(control_loss_value(1.0, 0.5, 2.0), 1.0);
        assert_eq!(control_loss_value(0.0, 0.5, 2.0), 0.0);
        // Below the floor the divisor clamps.
        assert_eq!(control_loss_value(1.0, 0.0, 1.0), 1.0 / EPS_PD);
    }

    #[test]
    fn zero_rewards_degenerate_the_gramian() {
        let (mut ctrl, cfm) = fresh_models(1, 3, &[8]);
        let buf = toy_buffer(1, 0.0, 8);
        let cfg = ControlConfig {
            h: 1,
            epochs: 2,
            batch_size: 4,
            batches_per_epoch: 2,
            ..ControlConfig::default()
        };
        match train_control(&mut ctrl, &cfm, &buf, RunSeed(2), &cfg) {
            Err(CtrlFlowError::ControlDegenerate(msg)) => {
                assert!(msg.contains("review"));
            }
            other => panic!("expected degenerate error, got {other:?}"),
        }
    }

    #[test]
    fn velocity_model_stays_frozen() {
        let (mut ctrl, mut cfm) = fresh_models(1, 3, &[8]);
        let mut rng = RunSeed(3).stream(Stream::Init);
        cfm.init(&mut rng);
        ctrl.field.init(&mut rng);
        let before = cfm.net.params().to_vec();
        let buf = toy_buffer(4, 1.0, 8);
        let cfg = ControlConfig {
            h: 1,
            epochs: 2,
            batch_size: 4,
            batches_per_epoch: 2,
            lr: 1e-3,
            ..ControlConfig::default()
        };
        train_control(&mut ctrl, &cfm, &buf, RunSeed(5), &cfg).unwrap();
        assert_eq!(cfm.net.params(), before.as_slice());
    }

    #[test]
    fn same_seed_reproduces_the_report() {
        let buf = toy_buffer(6, 1.0, 8);
        let cfg = ControlConfig {
            h: 1,
            epochs: 2,
            batch_size: 4,
            batches_per_epoch: 2,
            ..ControlConfig::default()
        };
        let run = || {
            let (mut ctrl, cfm) = fresh_models(1, 3, &[8]);
            let mut rng = RunSeed(7).stream(Stream::Init);
            ctrl.field.init(&mut rng);
            let rep = train_control(&mut ctrl, &cfm, &buf, RunSeed(8), &cfg).unwrap();
            (rep, ctrl.field.net.params().to_vec())
        };
        let (r1, p1) = run();
        let (r2, p2) = run();
        assert_eq!(p1, p2);
        assert_eq!(
            serde_json::to_string(&r1).unwrap(),
            serde_json::to_string(&r2).unwrap()
        );
    }

    #[test]
    fn direct_map_mode_trains_too() {
        let buf = toy_buffer(9, 1.0, 8);
        let (mut ctrl, cfm) = fresh_models(1, 3, &[8]);
        let mut rng = RunSeed(10).stream(Stream::Init);
        ctrl.field.init(&mut rng);
        let cfg = ControlConfig {
            h: 1,
            epochs: 2,
            batch_size: 4,
            batches_per_epoch: 2,
            endpoint_mode: EndpointMode::DirectMap,
            ..ControlConfig::default()
        };
        let rep = train_control(&mut ctrl, &cfm, &buf, RunSeed(11), &cfg).unwrap();
        assert_eq!(rep.epochs.len(), 2);
        assert!(rep.epochs.iter().all(|e| e.mean_loss.is_finite()));
    }

    #[test]
    fn misaligned_quadrature_is_rejected() {
        let (mut ctrl, cfm) = fresh_models(1, 3, &[8]);
        let buf = toy_buffer(12, 1.0, 4);
        let cfg = ControlConfig {
            h: 1,
            euler_steps: 6,
            quad_nodes: 4,
            ..ControlConfig::default()
        };
        assert!(train_control(&mut ctrl, &cfm, &buf, RunSeed(13), &cfg).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences_through_the_roll() {
        use crate::nn::gradcheck::{finite_diff_grad, rel_error};
        let (mut ctrl, mut cfm) = fresh_models(1, 3, &[6]);
        let mut rng = RunSeed(14).stream(Stream::Init);
        cfm.init(&mut rng);
        ctrl.field.init(&mut rng);
        let cfg = ControlConfig {
            h: 1,
            batch_size: 2,
            euler_steps: 8,
            quad_nodes: 4,
            ..ControlConfig::default()
        };
        let tau0s = vec![vec![0.2, -0.4, 0.1], vec![-0.3, 0.5, 0.0]];
        let tau1s = vec![vec![1.0, 0.5, 1.2], vec![0.8, 0.2, 0.6]];
        let gains = vec![ControlGain::Scalar(0.9), ControlGain::Scalar(1.1)];

        let base_params = ctrl.field.net.params().to_vec();

        // Rebuild the optimizer-side accumulation by hand so the gradient
        // is observable without an Adam step in the way.
        let report = {
            let roll = roll_endpoint(&cfm, &ctrl.field, &gains[0], &tau0s[0], cfg.h, &cfg).unwrap();
            probe_gramian(&cfm, &ctrl.field, &gains[0], &roll, &tau0s[0], cfg.h, &cfg).unwrap()
        };
        let floor = report.lambda_min.max(EPS_PD);
        let mut analytic = vec![0.0; ctrl.field.net.param_count()];
        for ((tau0, tau1), gain) in tau0s.iter().zip(tau1s.iter()).zip(gains.iter()) {
            let roll = roll_endpoint(&cfm, &ctrl.field, gain, tau0, cfg.h, &cfg).unwrap();
            let end = roll.states.last().unwrap();
            let mut lambda: Vec<f64> = tau1
                .iter()
                .zip(end.iter())
                .map(|(a, b)| -2.0 * (a - b) / (1.0 * floor * 2.0))
                .collect();
            for k in (0..roll.states.len() - 1).rev() {
                let x = &roll.states[k];
                let t = roll.times[k];
                let scaled: Vec<f64> = lambda.iter().map(|l| roll.dt * l).collect();
                let (_, tape_u) = ctrl.field.velocity_tape(x, cfg.h, t).unwrap();
                let pull_u = ctrl
                    .field
                    .backward(&tape_u, cfg.h, &gain.apply(&scaled))
                    .unwrap();
                for (g, p) in analytic.iter_mut().zip(pull_u.params.iter()) {
                    *g += p;
                }
                let (_, tape_v) = cfm.velocity_tape(x, cfg.h, t).unwrap();
                let pull_v = cfm.backward(&tape_v, cfg.h, &scaled).unwrap().input;
                for ((l, pv), pu) in
                    lambda.iter_mut().zip(pull_v.iter()).zip(pull_u.input.iter())
                {
                    *l += pv + pu;
                }
            }
        }
        // The finite-difference reference re-solves the Gramian per probe,
        // but lambda_min is detached in the analytic path; freeze it by
        // differencing the loss with the floor held at the base report.
        let mut f = |p: &[f64]| {
            let mut probe = ctrl.field.clone();
            probe.net.params_mut().copy_from_slice(p);
            let mut total = 0.0;
            for ((tau0, tau1), gain) in tau0s.iter().zip(tau1s.iter()).zip(gains.iter()) {
                let roll = roll_endpoint(&cfm, &probe, gain, tau0, cfg.h, &cfg).unwrap();
                let end = roll.states.last().unwrap();
                let err_sq: f64 = tau1
                    .iter()
                    .zip(end.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                total += err_sq / (1.0 * floor) / 2.0;
            }
            total
        };
        let fd = finite_diff_grad(&mut f, &base_params, 1e-5);
        let err = rel_error(&analytic, &fd);
        assert!(err < 1e-4, "gradient mismatch {err}");
    }

    #[test]
    fn toy_task_halves_the_endpoint_error() {
        // Tight 1-D data cluster, zero-parameter velocity field: endpoints
        // without control stay standard normal, far from the data; the
        // trained correction should pull them at least twice as close.
        let mut total_off = 0.0;
        let mut total_on = 0.0;
        let mut improved = 0;
        for seed in 0..5u64 {
            let buf = toy_buffer(20 + seed, 1.0, 16);
            let (mut ctrl, cfm) = fresh_models(1, 3, &[32]);
            let mut rng = RunSeed(30 + seed).stream(Stream::Init);
            ctrl.field.init(&mut rng);
            let cfg = ControlConfig {
                h: 1,
                epochs: 30,
                batch_size: 16,
                batches_per_epoch: 4,
                lr: 5e-3,
                ..ControlConfig::default()
            };
            train_control(&mut ctrl, &cfm, &buf, RunSeed(40 + seed), &cfg).unwrap();

            let mut eval_rng = RunSeed(50 + seed).stream(Stream::Eval);
            let mut err_off = 0.0;
            let mut err_on = 0.0;
            let n_eval = 64;
            for _ in 0..n_eval {
                let traj = buf.sample_trajectory(&mut eval_rng, 1).unwrap();
                let tau1 = payload_from_trajectory(&traj, &cfm.normalizer).unwrap();
                let gain = gain_from_payload(&tau1, 1, 3, cfg.gamma, &cfm.normalizer, None);
                let tau0 = FlowState::standard_normal(1, 3, &mut eval_rng).payload;

                let off = roll_endpoint(&cfm, &ctrl.field, &ControlGain::Scalar(0.0), &tau0, 1, &cfg)
                    .unwrap();
                let on = roll_endpoint(&cfm, &ctrl.field, &gain, &tau0, 1, &cfg).unwrap();
                let dist = |end: &[f64]| -> f64 {
                    end.iter()
                        .zip(tau1.iter())
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt()
                };
                err_off += dist(off.states.last().unwrap()) / n_eval as f64;
                err_on += dist(on.states.last().unwrap()) / n_eval as f64;
            }
            total_off += err_off;
            total_on += err_on;
            if err_off >= 2.0 * err_on {
                improved += 1;
            }
        }
        assert!(
            total_off >= 2.0 * total_on,
            "pooled endpoint error {total_off} vs controlled {total_on}"
        );
        assert!(improved >= 4, "only {improved}/5 seeds improved 2x");
    }

    #[test]
    fn training_report_trends_down() {
        let buf = toy_buffer(60, 1.0, 16);
        let (mut ctrl, cfm) = fresh_models(1, 3, &[32]);
        let mut rng = RunSeed(61).stream(Stream::Init);
        ctrl.field.init(&mut rng);
        let cfg = ControlConfig {
            h: 1,
            epochs: 12,
            batch_size: 16,
            batches_per_epoch: 4,
            lr: 5e-3,
            ..ControlConfig::default()
        };
        let rep = train_control(&mut ctrl, &cfm, &buf, RunSeed(62), &cfg).unwrap();
        let first = rep.epochs.first().unwrap().mean_loss;
        let last = rep.final_loss().unwrap();
        assert!(last < first, "loss went {first} -> {last}");
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let (mut ctrl, cfm) = fresh_models(1, 3, &[8]);
        let before = ctrl.field.net.params().to_vec();
        let buf = toy_buffer(70, 1.0, 4);
        let cfg = ControlConfig {
            h: 1,
            epochs: 0,
            ..ControlConfig::default()
        };
        let rep = train_control(&mut ctrl, &cfm, &buf, RunSeed(71), &cfg).unwrap();
        assert!(rep.epochs.is_empty());
        assert_eq!(ctrl.field.net.params(), before.as_slice());
    }

    #[test]
    fn controlled_field_vjp_composes_both_models() {
        use crate::nn::gradcheck::rel_error;
        let (mut ctrl, mut cfm) = fresh_models(2, 3, &[10]);
        let mut rng = RunSeed(80).stream(Stream::Init);
        cfm.init(&mut rng);
        ctrl.field.init(&mut rng);
        let field = ControlledField {
            cfm: &cfm,
            ctrl: &ctrl.field,
            gain: ControlGain::Scalar(0.7),
            h: 2,
        };
        let x: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let up: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let exact = field.vjp(&x, 0.4, &up).unwrap();

        // Default finite-difference pullback over the same velocity.
        struct Fd<'a>(&'a ControlledField<'a>);
        impl Field for Fd<'_> {
            fn velocity(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
                self.0.velocity(x, t)
            }
        }
        let fd = Fd(&field).vjp(&x, 0.4, &up).unwrap();
        assert!(rel_error(&exact, &fd) < 1e-4);
    }
}
