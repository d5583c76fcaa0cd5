//! Value guidance: an energy over trajectory returns, the guidance and
//! partition networks with their matching losses, and assembly of the
//! guided vector field used at sampling time.

use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::env::{discounted_return, ReplayBuffer, Trajectory};
use crate::error::{CtrlFlowError, Result};
use crate::flow::{make_path_sample, payload_from_trajectory, VectorFieldModel};
use crate::nn::encode::temporal_encode;
use crate::nn::{sigmoid, softplus, Activation, Adam, GradTape, Gradients, ParamNet};
use crate::rng::{RunSeed, Stream};

/// Clamp range for `e^{-J}` before it divides by the partition estimate.
pub const EXP_NEG_J_MIN: f64 = 1e-4;
pub const EXP_NEG_J_MAX: f64 = 1e4;

/// Additive floor keeping the partition output strictly positive even where
/// softplus underflows to zero.
const Z_FLOOR: f64 = 1e-6;

/// Width of the sinusoidal trajectory-length embedding, matching the
/// velocity model's input stacking.
const H_EMBED: usize = 4;

/// Running min/max of observed discounted returns. Bounds expand instantly
/// on a new extreme and contract toward recent observations at rate
/// `1 - decay`, so the map tracks a shifting online return distribution.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReturnNormalizer {
    lo: f64,
    hi: f64,
    decay: f64,
    count: u64,
}

impl ReturnNormalizer {
    pub fn new(decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(CtrlFlowError::config("decay must lie in [0, 1]"));
        }
        Ok(Self {
            lo: f64::INFINITY,
            hi: f64::NEG_INFINITY,
            decay,
            count: 0,
        })
    }

    pub fn observe(&mut self, x: f64) {
        if !x.is_finite() {
            return;
        }
        if self.count == 0 {
            self.lo = x;
            self.hi = x;
        } else {
            let blend = 1.0 - self.decay;
            self.lo = x.min(self.lo + blend * (x - self.lo));
            self.hi = x.max(self.hi + blend * (x - self.hi));
        }
        self.count += 1;
    }

    pub fn is_ready(&self) -> bool {
        self.count > 0
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    /// Position of `x` in the current bounds, clamped to `[0, 1]`. A
    /// degenerate window maps everything to the midpoint.
    pub fn normalized(&self, x: f64) -> f64 {
        let width = self.hi - self.lo;
        if width <= 1e-8 {
            0.5
        } else {
            ((x - self.lo) / width).clamp(0.0, 1.0)
        }
    }
}

impl Default for ReturnNormalizer {
    fn default() -> Self {
        Self::new(0.999).unwrap()
    }
}

/// Energy over trajectories: `J = -lambda_j * normalized_return`, so higher
/// return means lower energy and a larger `e^{-J}` tilt toward it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnergyFn {
    pub lambda_j: f64,
    pub normalizer: ReturnNormalizer,
}

impl EnergyFn {
    pub fn new(lambda_j: f64) -> Result<Self> {
        if !lambda_j.is_finite() || lambda_j < 0.0 {
            return Err(CtrlFlowError::config("lambda_j must be non-negative"));
        }
        Ok(Self {
            lambda_j,
            normalizer: ReturnNormalizer::default(),
        })
    }

    pub fn energy_of_return(&self, ret: f64) -> Result<f64> {
        if !self.normalizer.is_ready() {
            return Err(CtrlFlowError::NotReady(
                "return normalizer has seen no returns yet".into(),
            ));
        }
        Ok(-self.lambda_j * self.normalizer.normalized(ret))
    }

    pub fn energy(&self, traj: &Trajectory, gamma: f64) -> Result<f64> {
        if traj.is_empty() {
            return Err(CtrlFlowError::domain("energy of an empty trajectory"));
        }
        self.energy_of_return(discounted_return(traj, gamma)?)
    }
}

/// `e^{-J}` clamped into the stable range; the flag records clamping for
/// diagnostics.
pub fn clamped_exp_neg_j(j: f64) -> (f64, bool) {
    let raw = (-j).exp();
    let clamped = raw.clamp(EXP_NEG_J_MIN, EXP_NEG_J_MAX);
    (clamped, clamped != raw)
}

/// Positive scalar net `Z(payload, h, t)` with the same padded stacking as
/// the feed-forward velocity model, linked through softplus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ZModel {
    pub net: ParamNet,
    pub h_max: usize,
    pub row_width: usize,
}

/// Forward record of [`ZModel`]: the pre-link output fixes the softplus
/// slope in the backward pass.
pub struct ZTape {
    raw: f64,
    tape: GradTape,
}

impl ZModel {
    pub fn new(
        h_max: usize,
        row_width: usize,
        hidden: &[usize],
        time_features: usize,
    ) -> Result<Self> {
        if h_max == 0 || row_width == 0 {
            return Err(CtrlFlowError::config("empty payload shape"));
        }
        let net = ParamNet::feed_forward(
            h_max * row_width + H_EMBED,
            hidden,
            1,
            Activation::Tanh,
            Activation::Linear,
            time_features,
        )?;
        Ok(Self {
            net,
            h_max,
            row_width,
        })
    }

    pub fn init(&mut self, rng: &mut ChaCha12Rng) {
        self.net.init(rng);
    }

    fn stack(&self, payload: &[f64], h: usize) -> Result<Vec<f64>> {
        if h == 0 || h > self.h_max || payload.len() != h * self.row_width {
            return Err(CtrlFlowError::config("partition input shape mismatch"));
        }
        let mut x = vec![0.0; self.h_max * self.row_width];
        x[..payload.len()].copy_from_slice(payload);
        x.extend(temporal_encode(&[h], H_EMBED)?.pop().unwrap());
        Ok(x)
    }

    pub fn value_tape(&self, payload: &[f64], h: usize, t: f64) -> Result<(f64, ZTape)> {
        let x = self.stack(payload, h)?;
        let (out, tape) = self.net.forward(&x, Some(t))?;
        let raw = out[0];
        Ok((softplus(raw) + Z_FLOOR, ZTape { raw, tape }))
    }

    pub fn value(&self, payload: &[f64], h: usize, t: f64) -> Result<f64> {
        self.value_tape(payload, h, t).map(|(z, _)| z)
    }

    /// Accumulates parameter gradients of `upstream * dZ/dparams`; the
    /// payload gradient is dropped.
    pub fn backward_into(
        &self,
        tape: &ZTape,
        upstream: f64,
        grads: &mut Vec<f64>,
    ) -> Result<()> {
        let up = upstream * sigmoid(tape.raw);
        let mut inner = Gradients {
            params: std::mem::take(grads),
            input: Vec::new(),
        };
        let r = self.net.backward_into(&tape.tape, &[up], &mut inner);
        *grads = inner.params;
        r
    }
}

/// Guidance field and partition estimator with their sampling-time scales:
/// `beta` scales the reweighting coefficient, `coupling` is the reverse
/// coupling ratio inside the training target (kept at 1), and `zeta` weighs
/// the pair inside the combined method loss.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GuidanceBundle {
    pub g: VectorFieldModel,
    pub z: ZModel,
    pub beta: f64,
    pub zeta: f64,
    pub coupling: f64,
}

impl GuidanceBundle {
    pub fn new(g: VectorFieldModel, z: ZModel, beta: f64, zeta: f64) -> Result<Self> {
        if g.h_max != z.h_max || g.row_width != z.row_width {
            return Err(CtrlFlowError::config("guidance and partition shapes differ"));
        }
        if beta <= 0.0 || zeta <= 0.0 || !beta.is_finite() || !zeta.is_finite() {
            return Err(CtrlFlowError::config("beta and zeta must be positive"));
        }
        Ok(Self {
            g,
            z,
            beta,
            zeta,
            coupling: 1.0,
        })
    }
}

/// The regression target `(e^{-J}/Z - 1) * v`, with `e^{-J}` clamped; the
/// flag reports clamping.
pub fn guidance_target(v: &[f64], j_val: f64, z_val: f64) -> Result<(Vec<f64>, bool)> {
    if z_val <= 0.0 {
        return Err(CtrlFlowError::domain("partition value must be positive"));
    }
    let (e, clamped) = clamped_exp_neg_j(j_val);
    let coef = e / z_val - 1.0;
    Ok((v.iter().map(|x| coef * x).collect(), clamped))
}

/// The beta-scaled guidance value `(beta e^{-J}/Z - 1) v`, recovered from
/// the learned `(e^{-J}/Z - 1) v` and the base field:
/// `beta * g + (beta - 1) * v`. At `beta = 1` it is the net output itself.
pub fn scaled_guidance(g_val: &[f64], v_base: &[f64], beta: f64) -> Vec<f64> {
    g_val
        .iter()
        .zip(v_base.iter())
        .map(|(g, v)| beta * g + (beta - 1.0) * v)
        .collect()
}

/// The guided field `v_E = v_C + G`.
pub fn energy_field(v_c: &[f64], g_val: &[f64]) -> Vec<f64> {
    v_c.iter().zip(g_val.iter()).map(|(a, b)| a + b).collect()
}

/// One flow-time point paired with its conditional target velocity and the
/// tilt `e^{-J(tau1)}` of the trajectory it was drawn toward.
#[derive(Debug, Clone)]
pub struct GuidanceSample {
    pub x_t: Vec<f64>,
    pub t: f64,
    pub v: Vec<f64>,
    pub exp_neg_j: f64,
}

/// Coefficient and magnitude summary of one loss evaluation.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct GuidanceDiagnostics {
    pub mean_exp_neg_j: f64,
    pub mean_z: f64,
    pub coef_min: f64,
    pub coef_mean: f64,
    pub coef_max: f64,
}

pub struct GuidanceLossReport {
    pub l_g: f64,
    pub l_z: f64,
    pub grads_psi: Vec<f64>,
    pub grads_phi: Vec<f64>,
    pub diag: GuidanceDiagnostics,
}

/// Matching losses of the guidance pair over one batch.
///
/// `L_G` regresses the guidance net onto `(coupling e^{-J}/Z - 1) v` with
/// the partition value held constant (no feedback loop through the target);
/// `L_Z` regresses the partition net onto `e^{-J}` directly. Both are means
/// over the batch, `L_G` additionally over payload entries.
pub fn guidance_losses(
    bundle: &GuidanceBundle,
    h: usize,
    batch: &[GuidanceSample],
) -> Result<GuidanceLossReport> {
    if batch.is_empty() {
        return Err(CtrlFlowError::config("empty guidance batch"));
    }
    let b = batch.len() as f64;
    let d = batch[0].v.len() as f64;
    let mut l_g = 0.0;
    let mut l_z = 0.0;
    let mut grads_phi = vec![0.0; bundle.z.net.param_count()];
    let mut psi_acc = Gradients {
        params: vec![0.0; bundle.g.net.param_count()],
        input: Vec::new(),
    };
    let mut diag = GuidanceDiagnostics {
        coef_min: f64::INFINITY,
        coef_max: f64::NEG_INFINITY,
        ..Default::default()
    };

    for s in batch {
        let (z_val, z_tape) = bundle.z.value_tape(&s.x_t, h, s.t)?;
        let coef = bundle.coupling * s.exp_neg_j / z_val - 1.0;
        let (g_out, g_tape) = bundle.g.velocity_tape(&s.x_t, h, s.t)?;

        let mut upstream = Vec::with_capacity(g_out.len());
        for (gi, vi) in g_out.iter().zip(s.v.iter()) {
            let diff = gi - coef * vi;
            l_g += diff * diff / (b * d);
            upstream.push(2.0 * diff / (b * d));
        }
        psi_acc.input.clear();
        bundle.g.backward_into(&g_tape, h, &upstream, &mut psi_acc)?;

        let dz = z_val - s.exp_neg_j;
        l_z += dz * dz / b;
        bundle.z.backward_into(&z_tape, 2.0 * dz / b, &mut grads_phi)?;

        diag.mean_exp_neg_j += s.exp_neg_j / b;
        diag.mean_z += z_val / b;
        diag.coef_mean += coef / b;
        diag.coef_min = diag.coef_min.min(coef);
        diag.coef_max = diag.coef_max.max(coef);
    }

    if !l_g.is_finite() || !l_z.is_finite() {
        return Err(CtrlFlowError::overflow("guidance losses", None));
    }
    Ok(GuidanceLossReport {
        l_g,
        l_z,
        grads_psi: psi_acc.params,
        grads_phi,
        diag,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub h: usize,
    pub batch_size: usize,
    pub batches_per_epoch: usize,
    pub epochs: usize,
    pub lr_g: f64,
    pub lr_z: f64,
    /// Noise scale of the probability path the samples are drawn from.
    pub sigma: f64,
    pub gamma: f64,
    pub recent_episodes: u64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            h: 1,
            batch_size: 64,
            batches_per_epoch: 8,
            epochs: 10,
            lr_g: 1e-3,
            lr_z: 1e-3,
            sigma: 1e-2,
            gamma: 0.99,
            recent_episodes: u64::MAX,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GuidanceEpoch {
    pub mean_l_g: f64,
    pub mean_l_z: f64,
    pub diag: GuidanceDiagnostics,
    /// Samples whose `e^{-J}` hit the clamp range this epoch.
    pub clamped: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct GuidanceTrainReport {
    pub epochs: Vec<GuidanceEpoch>,
}

/// Trains the guidance pair against a frozen velocity model's probability
/// path over replayed trajectory windows. Each batch first feeds every
/// observed return to the energy normalizer, then regresses on the batch.
pub fn train_guidance(
    bundle: &mut GuidanceBundle,
    cfm: &VectorFieldModel,
    energy: &mut EnergyFn,
    buffer: &ReplayBuffer,
    seed: RunSeed,
    cfg: &GuidanceConfig,
) -> Result<GuidanceTrainReport> {
    if cfg.h == 0 || cfg.h > bundle.g.h_max.min(cfm.h_max) {
        return Err(CtrlFlowError::config("window length out of model range"));
    }
    if bundle.g.row_width != cfm.row_width {
        return Err(CtrlFlowError::config("guidance and velocity row widths differ"));
    }
    if cfg.batch_size == 0 || cfg.batches_per_epoch == 0 {
        return Err(CtrlFlowError::config("empty training schedule"));
    }
    if !(0.0..1.0).contains(&cfg.gamma) || cfg.sigma < 0.0 {
        return Err(CtrlFlowError::config("bad path constants"));
    }
    let mut report = GuidanceTrainReport::default();
    if cfg.epochs == 0 {
        return Ok(report);
    }
    let mut rng = seed.stream(Stream::GuidanceTrain);
    let mut adam_g = Adam::new(cfg.lr_g, bundle.g.net.param_count());
    let mut adam_z = Adam::new(cfg.lr_z, bundle.z.net.param_count());
    let row_width = cfm.row_width;

    for _ in 0..cfg.epochs {
        let mut l_g_sum = 0.0;
        let mut l_z_sum = 0.0;
        let mut clamped = 0;
        let mut diag_acc = GuidanceDiagnostics {
            coef_min: f64::INFINITY,
            coef_max: f64::NEG_INFINITY,
            ..Default::default()
        };
        for _ in 0..cfg.batches_per_epoch {
            let trajs = buffer.sample_trajectories_recent(
                &mut rng,
                cfg.h,
                cfg.batch_size,
                cfg.recent_episodes,
            )?;
            let returns: Vec<f64> = trajs
                .iter()
                .map(|t| discounted_return(t, cfg.gamma))
                .collect::<Result<_>>()?;
            for &r in &returns {
                energy.normalizer.observe(r);
            }
            let mut batch = Vec::with_capacity(trajs.len());
            for (traj, &ret) in trajs.iter().zip(returns.iter()) {
                let tau1 = payload_from_trajectory(traj, &cfm.normalizer)?;
                let ps = make_path_sample(&tau1, cfg.h, row_width, cfg.sigma, &mut rng)?;
                let (e, hit) = clamped_exp_neg_j(energy.energy_of_return(ret)?);
                if hit {
                    clamped += 1;
                }
                batch.push(GuidanceSample {
                    x_t: ps.noisy_point,
                    t: ps.t,
                    v: ps.target_velocity,
                    exp_neg_j: e,
                });
            }
            let rep = guidance_losses(bundle, cfg.h, &batch)?;
            adam_g.step(bundle.g.net.params_mut(), &rep.grads_psi)?;
            adam_z.step(bundle.z.net.params_mut(), &rep.grads_phi)?;
            let k = cfg.batches_per_epoch as f64;
            l_g_sum += rep.l_g / k;
            l_z_sum += rep.l_z / k;
            diag_acc.mean_exp_neg_j += rep.diag.mean_exp_neg_j / k;
            diag_acc.mean_z += rep.diag.mean_z / k;
            diag_acc.coef_mean += rep.diag.coef_mean / k;
            diag_acc.coef_min = diag_acc.coef_min.min(rep.diag.coef_min);
            diag_acc.coef_max = diag_acc.coef_max.max(rep.diag.coef_max);
        }
        if !l_g_sum.is_finite() || !l_z_sum.is_finite() {
            return Err(CtrlFlowError::TrainingDiverged(
                "guidance loss became non-finite".into(),
            ));
        }
        report.epochs.push(GuidanceEpoch {
            mean_l_g: l_g_sum,
            mean_l_z: l_z_sum,
            diag: diag_acc,
            clamped,
        });
    }
    Ok(report)
}

/// Variance `s_t^2 = t^2 + (1-t)^2` of the noiseless path between two unit
/// Gaussians, the analytically solvable guidance setting.
pub fn gaussian_path_var(t: f64) -> f64 {
    t * t + (1.0 - t) * (1.0 - t)
}

/// Marginal velocity `(2t - 1) x / s_t^2` of that path.
pub fn gaussian_marginal_velocity(x: f64, t: f64) -> f64 {
    (2.0 * t - 1.0) * x / gaussian_path_var(t)
}

/// Exact guidance field `b (1 - t) / s_t^2` tilting the unit Gaussian
/// endpoint by `e^{b x}`, i.e. toward `N(b, 1)`.
pub fn gaussian_tilt_guidance(b: f64, t: f64) -> f64 {
    b * (1.0 - t) / gaussian_path_var(t)
}

/// Exact partition `E[e^{b tau1} | x_t = x] = exp(b m_1 + b^2 v_1 / 2)`
/// with posterior mean `m_1 = t x / s_t^2` and variance `v_1 = (1-t)^2 / s_t^2`.
pub fn gaussian_tilt_partition(x: f64, t: f64, b: f64) -> f64 {
    let s2 = gaussian_path_var(t);
    let m1 = t * x / s2;
    let v1 = (1.0 - t) * (1.0 - t) / s2;
    (b * m1 + b * b * v1 / 2.0).exp()
}
