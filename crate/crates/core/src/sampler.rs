//! Composes the learned fields into the sampling ODE and turns the
//! integrated endpoints into replayable trajectories.
//!
//! A draw starts at a standard-normal trajectory payload and is pushed from
//! t = 0 to t = 1 by the base velocity field, optionally corrected by the
//! reward-gained control channel and the energy guidance head. Endpoints are
//! decoded through the field's payload normalizer into transitions tagged
//! [`Source::Model`].

use serde::{Deserialize, Serialize};

use crate::control::{gain_from_payload, ControlModel};
use crate::env::{step, EnvSpec, ReplayBuffer, Source, Trajectory, Transition};
use crate::error::{CtrlFlowError, Result};
use crate::flow::{FlowState, VectorFieldModel};
use crate::guidance::{scaled_guidance, GuidanceBundle};
use crate::parallel::indexed_map;
use crate::rng::{RunSeed, Stream};

/// The learned pieces the sampler may compose. Only `cfm` is mandatory;
/// the optional channels contribute exactly when the matching toggle in
/// [`SampleConfig`] is on.
#[derive(Clone, Copy)]
pub struct SamplerModels<'a> {
    pub cfm: &'a VectorFieldModel,
    pub control: Option<&'a ControlModel>,
    pub guidance: Option<&'a GuidanceBundle>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    /// Generated trajectory length, in [1, env horizon].
    pub h: usize,
    /// Fixed midpoint steps from t = 0 to t = 1.
    pub ode_steps: usize,
    pub control_on: bool,
    pub guidance_on: bool,
    /// Guidance strength: scales the reweighting coefficient at sampling
    /// time, 1 meaning the head's trained strength.
    pub beta: f64,
    pub batch: usize,
    /// RNG stream the per-sample substreams hang off.
    pub stream: u64,
    /// Replace the generated reward channel with the environment reward of
    /// the decoded (state, action) rows (diagnostics path).
    pub recompute_rewards: bool,
    /// Worker threads for batch generation; results are index-ordered so
    /// the output is identical at any thread count.
    pub threads: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            h: 5,
            ode_steps: 20,
            control_on: false,
            guidance_on: false,
            beta: 1.0,
            batch: 64,
            stream: Stream::Sampler as u64,
            recompute_rewards: false,
            threads: 1,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self, env: &EnvSpec) -> Result<()> {
        if self.h == 0 || self.h > env.horizon {
            return Err(CtrlFlowError::config(format!(
                "sample length {} outside [1, {}]",
                self.h, env.horizon
            )));
        }
        if self.ode_steps == 0 {
            return Err(CtrlFlowError::config("ode_steps must be at least 1"));
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(CtrlFlowError::config("beta must be positive"));
        }
        Ok(())
    }
}

/// Summary statistics of one scalar series.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SeriesStats {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl SeriesStats {
    pub fn from_values(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Self {
            mean,
            std: var.sqrt(),
            min,
            max,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GenBatchReport {
    pub requested: usize,
    /// Accepted samples: requested minus rejected.
    pub count: usize,
    /// Draws discarded because the integration left the finite range.
    pub rejected: usize,
    /// Discounted return of each accepted trajectory's reward channel.
    pub returns: SeriesStats,
    /// One-step dynamics residual of the decoded transitions.
    pub residual: SeriesStats,
    /// Final-state cosine similarity against true-dynamics rollouts.
    pub cosine: SeriesStats,
}

/// The assembled sampling field
/// `v_theta + [control] B u + [guidance] scaled G`, with the control gain
/// recomputed from the current decoded iterate at every evaluation.
struct SampleField<'a> {
    models: &'a SamplerModels<'a>,
    cfg: &'a SampleConfig,
    env: &'a EnvSpec,
}

impl SampleField<'_> {
    fn eval(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let cfm = self.models.cfm;
        let base = cfm.velocity(x, self.cfg.h, t)?;
        let mut v = base.clone();
        if self.cfg.control_on {
            let ctrl = self
                .models
                .control
                .ok_or_else(|| CtrlFlowError::config("control_on without a control model"))?;
            let gain = gain_from_payload(
                x,
                self.cfg.h,
                cfm.row_width,
                self.env.gamma,
                &cfm.normalizer,
                None,
            );
            let u = ctrl.field.velocity(x, self.cfg.h, t)?;
            for (vi, bu) in v.iter_mut().zip(gain.apply(&u)) {
                *vi += bu;
            }
        }
        if self.cfg.guidance_on {
            let bundle = self
                .models
                .guidance
                .ok_or_else(|| CtrlFlowError::config("guidance_on without a guidance bundle"))?;
            let g = bundle.g.velocity(x, self.cfg.h, t)?;
            for (vi, gi) in v
                .iter_mut()
                .zip(scaled_guidance(&g, &base, self.cfg.beta))
            {
                *vi += gi;
            }
        }
        Ok(v)
    }
}

fn validate_models(models: &SamplerModels, env: &EnvSpec, cfg: &SampleConfig) -> Result<()> {
    cfg.validate(env)?;
    let width = env.d_s + env.d_a + 1;
    let check = |name: &str, h_max: usize, row_width: usize| -> Result<()> {
        if row_width != width {
            return Err(CtrlFlowError::config(format!(
                "{name} row width {row_width} does not match env payload width {width}"
            )));
        }
        if cfg.h > h_max {
            return Err(CtrlFlowError::config(format!(
                "sample length {} exceeds {name} capacity {h_max}",
                cfg.h
            )));
        }
        Ok(())
    };
    check("velocity model", models.cfm.h_max, models.cfm.row_width)?;
    if cfg.control_on {
        let ctrl = models
            .control
            .ok_or_else(|| CtrlFlowError::config("control_on without a control model"))?;
        check("control model", ctrl.field.h_max, ctrl.field.row_width)?;
    }
    if cfg.guidance_on {
        let bundle = models
            .guidance
            .ok_or_else(|| CtrlFlowError::config("guidance_on without a guidance bundle"))?;
        check("guidance model", bundle.g.h_max, bundle.g.row_width)?;
    }
    Ok(())
}

/// Integrates one draw from t = 0 to t = 1 with fixed midpoint steps.
/// A non-finite state or field value rejects the draw (returns None);
/// numeric overflow inside a model forward pass is the same condition
/// surfacing earlier, so it rejects too instead of aborting the batch.
fn integrate_sample(field: &SampleField, mut x: Vec<f64>) -> Result<Option<Vec<f64>>> {
    let eval = |x: &[f64], t: f64| match field.eval(x, t) {
        Ok(v) => Ok(Some(v)),
        Err(CtrlFlowError::NumericOverflow { .. }) => Ok(None),
        Err(e) => Err(e),
    };
    let steps = field.cfg.ode_steps;
    let dt = 1.0 / steps as f64;
    for k in 0..steps {
        let t = k as f64 * dt;
        let Some(v1) = eval(&x, t)? else {
            return Ok(None);
        };
        let mid: Vec<f64> = x
            .iter()
            .zip(v1.iter())
            .map(|(xi, vi)| xi + 0.5 * dt * vi)
            .collect();
        if mid.iter().any(|m| !m.is_finite()) {
            return Ok(None);
        }
        let Some(v2) = eval(&mid, t + 0.5 * dt)? else {
            return Ok(None);
        };
        for (xi, vi) in x.iter_mut().zip(v2.iter()) {
            *xi += dt * vi;
        }
        if x.iter().any(|xi| !xi.is_finite()) {
            return Ok(None);
        }
    }
    Ok(Some(x))
}

/// Decodes a normalized endpoint payload into an h-step model trajectory.
/// Rows map to (state, action, reward); actions are clipped to the env box;
/// consecutive rows chain next_state. The last row has no successor, so it
/// closes on itself and is flagged invalid for learning.
fn decode_payload(
    payload: &[f64],
    env: &EnvSpec,
    cfm: &VectorFieldModel,
    h: usize,
    recompute_rewards: bool,
) -> Result<Trajectory> {
    let width = cfm.row_width;
    let mut states = Vec::with_capacity(h);
    let mut actions = Vec::with_capacity(h);
    let mut rewards = Vec::with_capacity(h);
    for i in 0..h {
        let row = cfm.normalizer.denormalize(&payload[i * width..(i + 1) * width]);
        let state = row[..env.d_s].to_vec();
        let action = env.clip_action(&row[env.d_s..env.d_s + env.d_a]);
        let reward = if recompute_rewards {
            step(env, &state, &action)?.1
        } else {
            row[width - 1]
        };
        states.push(state);
        actions.push(action);
        rewards.push(reward);
    }
    let mut transitions = Vec::with_capacity(h);
    for i in 0..h {
        let last = i + 1 == h;
        transitions.push(Transition {
            state: states[i].clone(),
            action: actions[i].clone(),
            reward: rewards[i],
            next_state: if last {
                states[i].clone()
            } else {
                states[i + 1].clone()
            },
            done_flag: false,
            valid_flag: !last,
        });
    }
    Ok(Trajectory {
        transitions,
        source: Source::Model,
    })
}

/// Draws a batch of model trajectories by integrating the assembled field.
///
/// Every sample gets its own RNG substream, so the batch is identical for
/// any thread count and any accept/reject pattern of other samples.
pub fn generate(
    models: &SamplerModels,
    env: &EnvSpec,
    cfg: &SampleConfig,
    seed: RunSeed,
) -> Result<(Vec<Trajectory>, GenBatchReport)> {
    validate_models(models, env, cfg)?;
    let field = SampleField { models, cfg, env };
    let width = models.cfm.row_width;

    let draws: Vec<Result<Option<Vec<f64>>>> = indexed_map(cfg.batch, cfg.threads.max(1), |i| {
        let mut rng = seed.substream(cfg.stream, i as u64);
        let x0 = FlowState::standard_normal(cfg.h, width, &mut rng);
        integrate_sample(&field, x0.payload)
    });

    let mut trajectories = Vec::with_capacity(cfg.batch);
    let mut rejected = 0usize;
    for draw in draws {
        match draw? {
            Some(endpoint) => trajectories.push(decode_payload(
                &endpoint,
                env,
                models.cfm,
                cfg.h,
                cfg.recompute_rewards,
            )?),
            None => rejected += 1,
        }
    }

    let returns: Vec<f64> = trajectories
        .iter()
        .map(|t| crate::env::discounted_return(t, env.gamma))
        .collect::<Result<_>>()?;
    let (residual, cosine) = dynamics_consistency(&trajectories, env)?;
    let report = GenBatchReport {
        requested: cfg.batch,
        count: trajectories.len(),
        rejected,
        returns: SeriesStats::from_values(&returns),
        residual,
        cosine,
    };
    Ok((trajectories, report))
}

fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        let same = a
            .iter()
            .zip(b.iter())
            .all(|(x, y)| (x - y).abs() < 1e-12);
        return if same { 1.0 } else { 0.0 };
    }
    let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
    dot / (na * nb)
}

/// Scores trajectories against the environment's closed-form dynamics.
///
/// Residuals are one-step prediction errors along the stored chain,
/// `norm(next_state - f(state, action))`, skipping rows whose successor is
/// fabricated (invalid last model rows). Cosine stats compare each
/// trajectory's final state against a fresh rollout of the true dynamics
/// from the same initial state through the same action sequence.
pub fn dynamics_consistency(
    trajs: &[Trajectory],
    env: &EnvSpec,
) -> Result<(SeriesStats, SeriesStats)> {
    let mut residuals = Vec::new();
    let mut cosines = Vec::with_capacity(trajs.len());
    for traj in trajs {
        if traj.is_empty() {
            continue;
        }
        for tr in traj.transitions.iter().filter(|tr| tr.valid_flag) {
            let (pred, _, _) = step(env, &tr.state, &tr.action)?;
            let err = tr
                .next_state
                .iter()
                .zip(pred.iter())
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            residuals.push(err);
        }
        let mut true_state = traj.transitions[0].state.clone();
        for tr in &traj.transitions[..traj.len() - 1] {
            true_state = step(env, &true_state, &tr.action)?.0;
        }
        let generated_final = &traj.transitions[traj.len() - 1].state;
        cosines.push(cosine_similarity(generated_final, &true_state));
    }
    Ok((
        SeriesStats::from_values(&residuals),
        SeriesStats::from_values(&cosines),
    ))
}

/// Appends generated trajectories to the model buffer in order. Returns the
/// number of transitions stored; ring eviction is the buffer's business.
pub fn fill_model_buffer(buffer: &mut ReplayBuffer, trajs: &[Trajectory]) -> Result<usize> {
    let mut stored = 0;
    for traj in trajs {
        if traj.is_empty() {
            continue;
        }
        buffer.push_episode(traj.transitions.clone())?;
        stored += traj.len();
    }
    Ok(stored)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{rollout, Normalizer};
    use crate::flow::{train_cfm, CfmConfig};
    use crate::guidance::ZModel;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn fresh_cfm(h_max: usize, width: usize) -> VectorFieldModel {
        VectorFieldModel::feed_forward(h_max, width, &[16], 4).unwrap()
    }

    fn seeded_cfm(h_max: usize, width: usize, seed: u64) -> VectorFieldModel {
        let mut m = fresh_cfm(h_max, width);
        m.init(&mut RunSeed(seed).stream(Stream::Init));
        m
    }

    fn only_cfm<'a>(cfm: &'a VectorFieldModel) -> SamplerModels<'a> {
        SamplerModels {
            cfm,
            control: None,
            guidance: None,
        }
    }

    #[test]
    fn zero_field_single_step_returns_the_noise_draw() {
        let env = EnvSpec::point_mass_2d();
        let cfm = fresh_cfm(2, 7);
        let cfg = SampleConfig {
            h: 2,
            ode_steps: 1,
            batch: 3,
            ..SampleConfig::default()
        };
        let seed = RunSeed(21);
        let (trajs, report) = generate(&only_cfm(&cfm), &env, &cfg, seed).unwrap();
        assert_eq!(report.count, 3);
        assert_eq!(report.rejected, 0);
        for (i, traj) in trajs.iter().enumerate() {
            let mut rng = seed.substream(cfg.stream, i as u64);
            let raw = FlowState::standard_normal(2, 7, &mut rng).payload;
            assert_eq!(traj.source, Source::Model);
            assert_eq!(traj.len(), 2);
            for (row, tr) in traj.transitions.iter().enumerate() {
                let want = &raw[row * 7..(row + 1) * 7];
                assert_eq!(tr.state, &want[..4]);
                assert_eq!(tr.action, env.clip_action(&want[4..6]));
                assert_eq!(tr.reward, want[6]);
            }
            assert_eq!(traj.transitions[0].next_state, traj.transitions[1].state);
            assert_eq!(
                traj.transitions[1].next_state,
                traj.transitions[1].state
            );
            assert!(traj.transitions[0].valid_flag);
            assert!(!traj.transitions[1].valid_flag);
        }
    }

    #[test]
    fn same_seed_reproduces_the_batch() {
        let env = EnvSpec::point_mass_2d();
        let cfm = seeded_cfm(3, 7, 22);
        let cfg = SampleConfig {
            h: 3,
            batch: 8,
            ..SampleConfig::default()
        };
        let a = generate(&only_cfm(&cfm), &env, &cfg, RunSeed(23)).unwrap();
        let b = generate(&only_cfm(&cfm), &env, &cfg, RunSeed(23)).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(
            serde_json::to_string(&a.1).unwrap(),
            serde_json::to_string(&b.1).unwrap()
        );
        let c = generate(&only_cfm(&cfm), &env, &cfg, RunSeed(24)).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn thread_count_is_bitwise_irrelevant() {
        let env = EnvSpec::point_mass_2d();
        let cfm = seeded_cfm(3, 7, 25);
        let serial = SampleConfig {
            h: 3,
            batch: 16,
            threads: 1,
            ..SampleConfig::default()
        };
        let parallel = SampleConfig {
            threads: 4,
            ..serial.clone()
        };
        let a = generate(&only_cfm(&cfm), &env, &serial, RunSeed(26)).unwrap();
        let b = generate(&only_cfm(&cfm), &env, &parallel, RunSeed(26)).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    fn seeded_extras(width: usize) -> (ControlModel, GuidanceBundle) {
        let mut rng = RunSeed(27).stream(Stream::Init);
        let mut ctrl_field = fresh_cfm(3, width);
        ctrl_field.init(&mut rng);
        let ctrl = ControlModel::new(ctrl_field, 1.0).unwrap();
        let mut g = fresh_cfm(3, width);
        g.init(&mut rng);
        let mut z = ZModel::new(3, width, &[16], 4).unwrap();
        z.init(&mut rng);
        let bundle = GuidanceBundle::new(g, z, 1.0, 0.5).unwrap();
        (ctrl, bundle)
    }

    #[test]
    fn toggles_off_matches_plain_cfm_bitwise() {
        let env = EnvSpec::point_mass_2d();
        let cfm = seeded_cfm(3, 7, 28);
        let (ctrl, bundle) = seeded_extras(7);
        let with_models = SamplerModels {
            cfm: &cfm,
            control: Some(&ctrl),
            guidance: Some(&bundle),
        };
        let cfg = SampleConfig {
            h: 3,
            batch: 8,
            ..SampleConfig::default()
        };
        let a = generate(&with_models, &env, &cfg, RunSeed(29)).unwrap();
        let b = generate(&only_cfm(&cfm), &env, &cfg, RunSeed(29)).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn toggled_channels_move_the_samples() {
        let env = EnvSpec::point_mass_2d();
        let cfm = seeded_cfm(3, 7, 30);
        let (ctrl, bundle) = seeded_extras(7);
        let models = SamplerModels {
            cfm: &cfm,
            control: Some(&ctrl),
            guidance: Some(&bundle),
        };
        let off = SampleConfig {
            h: 3,
            batch: 8,
            ..SampleConfig::default()
        };
        let control_on = SampleConfig {
            control_on: true,
            ..off.clone()
        };
        let guidance_on = SampleConfig {
            guidance_on: true,
            ..off.clone()
        };
        let base = generate(&models, &env, &off, RunSeed(31)).unwrap();
        let with_c = generate(&models, &env, &control_on, RunSeed(31)).unwrap();
        let with_g = generate(&models, &env, &guidance_on, RunSeed(31)).unwrap();
        assert_ne!(base.0, with_c.0);
        assert_ne!(base.0, with_g.0);
        assert_ne!(with_c.0, with_g.0);
    }

    #[test]
    fn toggles_need_their_models() {
        let env = EnvSpec::point_mass_2d();
        let cfm = seeded_cfm(3, 7, 32);
        let cfg = SampleConfig {
            h: 3,
            batch: 2,
            control_on: true,
            ..SampleConfig::default()
        };
        assert!(matches!(
            generate(&only_cfm(&cfm), &env, &cfg, RunSeed(33)),
            Err(CtrlFlowError::Config(_))
        ));
        let cfg = SampleConfig {
            h: 3,
            batch: 2,
            guidance_on: true,
            ..SampleConfig::default()
        };
        assert!(matches!(
            generate(&only_cfm(&cfm), &env, &cfg, RunSeed(33)),
            Err(CtrlFlowError::Config(_))
        ));
    }

    #[test]
    fn config_validation_rejects_bad_inputs() {
        let env = EnvSpec::point_mass_2d();
        let cfm = seeded_cfm(3, 7, 34);
        let bad = |f: &dyn Fn(&mut SampleConfig)| {
            let mut cfg = SampleConfig {
                h: 3,
                batch: 2,
                ..SampleConfig::default()
            };
            f(&mut cfg);
            generate(&only_cfm(&cfm), &env, &cfg, RunSeed(35))
        };
        assert!(bad(&|c| c.h = 0).is_err());
        assert!(bad(&|c| c.h = env.horizon + 1).is_err());
        assert!(bad(&|c| c.h = 4).is_err());
        assert!(bad(&|c| c.ode_steps = 0).is_err());
        assert!(bad(&|c| c.beta = 0.0).is_err());
        let narrow = seeded_cfm(3, 5, 36);
        let cfg = SampleConfig {
            h: 3,
            batch: 2,
            ..SampleConfig::default()
        };
        assert!(generate(&only_cfm(&narrow), &env, &cfg, RunSeed(37)).is_err());
    }

    #[test]
    fn trained_toy_recovers_the_target_mean() {
        // Constant-distribution toy adapted to the point-mass payload:
        // every state dimension clusters at 2, so integrated endpoints
        // must decode to states averaging 2.
        let env = EnvSpec::point_mass_2d();
        let mut rng = RunSeed(38).stream(Stream::Oracle);
        let jitter = Normal::new(0.0, 0.1).unwrap();
        let mut buf = ReplayBuffer::new(100_000, Source::Environment, 0);
        for _ in 0..400 {
            let state: Vec<f64> = (0..4).map(|_| 2.0 + jitter.sample(&mut rng)).collect();
            buf.push_episode(vec![Transition {
                state: state.clone(),
                action: vec![jitter.sample(&mut rng), jitter.sample(&mut rng)],
                reward: jitter.sample(&mut rng),
                next_state: state,
                done_flag: false,
                valid_flag: true,
            }])
            .unwrap();
        }
        let mut cfm = VectorFieldModel::feed_forward(1, 7, &[64, 64], 8).unwrap();
        cfm.init(&mut RunSeed(39).stream(Stream::Init));
        let cfg = CfmConfig {
            batch_size: 64,
            batches_per_epoch: 20,
            lr: 2e-3,
            normalize: false,
            ..CfmConfig::default()
        };
        let report = train_cfm(&mut cfm, &buf, 30, &cfg, RunSeed(40)).unwrap();
        assert!(report.final_loss().unwrap() < report.epochs[0].cfm_loss);

        let sample_cfg = SampleConfig {
            h: 1,
            batch: 256,
            ode_steps: 50,
            ..SampleConfig::default()
        };
        let (trajs, rep) = generate(&only_cfm(&cfm), &env, &sample_cfg, RunSeed(41)).unwrap();
        assert_eq!(rep.count, 256);
        let mean: f64 = trajs
            .iter()
            .flat_map(|t| t.transitions[0].state.iter())
            .sum::<f64>()
            / (4.0 * trajs.len() as f64);
        assert!((mean - 2.0).abs() <= 0.1, "endpoint state mean {mean}");
    }

    #[test]
    fn dynamics_consistency_is_exact_on_real_rollouts() {
        let env = EnvSpec::point_mass_2d();
        let mut rng = RunSeed(42).stream(Stream::EnvReset);
        let trajs: Vec<Trajectory> = (0..5)
            .map(|_| {
                rollout(&env, &mut rng, |_, r| {
                    vec![r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)]
                })
                .unwrap()
            })
            .collect();
        let (residual, cosine) = dynamics_consistency(&trajs, &env).unwrap();
        assert!(residual.max <= 1e-12, "residual {residual:?}");
        assert!(cosine.min >= 1.0 - 1e-12, "cosine {cosine:?}");
    }

    #[test]
    fn random_trajectories_decorrelate_from_the_dynamics() {
        let env = EnvSpec::point_mass_2d();
        let mut rng = RunSeed(43).stream(Stream::Oracle);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let trajs: Vec<Trajectory> = (0..1000)
            .map(|_| {
                let states: Vec<Vec<f64>> = (0..6)
                    .map(|_| (0..4).map(|_| normal.sample(&mut rng)).collect())
                    .collect();
                let transitions = (0..5)
                    .map(|i| Transition {
                        state: states[i].clone(),
                        action: vec![
                            rng.random_range(-1.0..1.0),
                            rng.random_range(-1.0..1.0),
                        ],
                        reward: 0.0,
                        next_state: states[i + 1].clone(),
                        done_flag: false,
                        valid_flag: true,
                    })
                    .collect();
                Trajectory {
                    transitions,
                    source: Source::Model,
                }
            })
            .collect();
        let (residual, cosine) = dynamics_consistency(&trajs, &env).unwrap();
        assert!(residual.mean > 0.1, "random data should not fit: {residual:?}");
        assert!(cosine.mean.abs() < 0.1, "cosine {cosine:?}");
    }

    #[test]
    fn actions_are_always_in_the_box() {
        let env = EnvSpec::point_mass_2d();
        let mut cfm = seeded_cfm(2, 7, 44);
        // Wide action channels force raw decodes outside the box.
        cfm.normalizer = Normalizer {
            mean: vec![0.0; 7],
            std: vec![1.0, 1.0, 1.0, 1.0, 3.0, 3.0, 1.0],
        };
        let cfg = SampleConfig {
            h: 2,
            batch: 64,
            ..SampleConfig::default()
        };
        let (trajs, _) = generate(&only_cfm(&cfm), &env, &cfg, RunSeed(45)).unwrap();
        let mut clipped = 0;
        for tr in trajs.iter().flat_map(|t| t.transitions.iter()) {
            for (a, (lo, hi)) in tr
                .action
                .iter()
                .zip(env.action_low.iter().zip(env.action_high.iter()))
            {
                assert!(a >= lo && a <= hi);
                if a == lo || a == hi {
                    clipped += 1;
                }
            }
        }
        assert!(clipped > 0, "expected the box to bite on 3-sigma actions");
    }

    #[test]
    fn nonfinite_fields_reject_not_store() {
        let env = EnvSpec::point_mass_2d();
        let mut cfm = fresh_cfm(2, 7);
        cfm.net.params_mut().fill(f64::MAX);
        let cfg = SampleConfig {
            h: 2,
            batch: 8,
            ..SampleConfig::default()
        };
        let (trajs, report) = generate(&only_cfm(&cfm), &env, &cfg, RunSeed(46)).unwrap();
        assert!(trajs.is_empty());
        assert_eq!(report.requested, 8);
        assert_eq!(report.count, 0);
        assert_eq!(report.rejected, 8);
        assert_eq!(report.returns, SeriesStats::default());
    }

    #[test]
    fn fill_model_buffer_counts_and_evicts() {
        let env = EnvSpec::point_mass_2d();
        let cfm = seeded_cfm(5, 7, 47);
        let cfg = SampleConfig {
            h: 5,
            batch: 3,
            ..SampleConfig::default()
        };
        let (trajs, _) = generate(&only_cfm(&cfm), &env, &cfg, RunSeed(48)).unwrap();
        let mut buf = ReplayBuffer::new(12, Source::Model, 2);
        assert_eq!(fill_model_buffer(&mut buf, &[]).unwrap(), 0);
        assert_eq!(fill_model_buffer(&mut buf, &trajs[..1]).unwrap(), 5);
        assert_eq!(buf.len(), 5);
        assert_eq!(fill_model_buffer(&mut buf, &trajs[1..]).unwrap(), 10);
        assert_eq!(buf.len(), 12);
    }

    #[test]
    fn series_stats_summarize_correctly() {
        let s = SeriesStats::from_values(&[1.0, 2.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.min, 1.0);
        assert_eq!(s.max, 3.0);
        assert!((s.std - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(SeriesStats::from_values(&[]), SeriesStats::default());
    }

    #[test]
    fn recomputed_rewards_follow_the_env() {
        let env = EnvSpec::point_mass_2d();
        let cfm = seeded_cfm(2, 7, 49);
        let base = SampleConfig {
            h: 2,
            batch: 4,
            ..SampleConfig::default()
        };
        let diag = SampleConfig {
            recompute_rewards: true,
            ..base.clone()
        };
        let (gen_r, _) = generate(&only_cfm(&cfm), &env, &base, RunSeed(50)).unwrap();
        let (env_r, _) = generate(&only_cfm(&cfm), &env, &diag, RunSeed(50)).unwrap();
        for (a, b) in gen_r.iter().zip(env_r.iter()) {
            for (ta, tb) in a.transitions.iter().zip(b.transitions.iter()) {
                assert_eq!(ta.state, tb.state);
                assert_eq!(ta.action, tb.action);
                let (_, want, _) = step(&env, &tb.state, &tb.action).unwrap();
                assert_eq!(tb.reward, want);
                assert_ne!(ta.reward, tb.reward);
            }
        }
    }
}
