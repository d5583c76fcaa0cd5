use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use super::model::VectorFieldModel;
use super::{make_path_sample, payload_from_trajectory, FlowState, ProbPathSample};
use crate::env::{Normalizer, ReplayBuffer};
use crate::error::{CtrlFlowError, Result};
use crate::nn::{Adam, Gradients};
use crate::rng::{RunSeed, Stream};

/// Variance floor for the endpoint moment-matching term.
const KL_VAR_FLOOR: f64 = 1e-6;

/// Mean squared error between the model field at each noisy point and the
/// conditional target velocity, with parameter gradients.
pub fn cfm_loss(model: &VectorFieldModel, batch: &[ProbPathSample]) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(CtrlFlowError::config("empty matching batch"));
    }
    let h = batch[0].tau0.h;
    if batch.iter().any(|s| s.tau0.h != h) {
        return Err(CtrlFlowError::config("matching batch mixes lengths"));
    }
    let d = batch[0].target_velocity.len();
    let denom = (batch.len() * d) as f64;
    let mut loss = 0.0;
    let mut grads = Gradients {
        params: vec![0.0; model.net.param_count()],
        input: Vec::new(),
    };
    for s in batch {
        let (v, tape) = model.velocity_tape(&s.noisy_point, h, s.t)?;
        let mut upstream = vec![0.0; d];
        for i in 0..d {
            let diff = v[i] - s.target_velocity[i];
            loss += diff * diff;
            upstream[i] = 2.0 * diff / denom;
        }
        model.backward_into(&tape, h, &upstream, &mut grads)?;
    }
    loss /= denom;
    if !loss.is_finite() {
        let ts: Vec<f64> = batch.iter().take(4).map(|s| s.t).collect();
        return Err(CtrlFlowError::overflow(
            format!("matching loss (batch {}, h {h}, t {ts:?})", batch.len()),
            None,
        ));
    }
    Ok((loss, grads.params))
}

/// KL between diagonal Gaussians `N(m_hat, diag v_hat)` and `N(m, diag v)`.
pub fn diag_gauss_kl(m_hat: &[f64], v_hat: &[f64], m: &[f64], v: &[f64]) -> f64 {
    let mut kl = 0.0;
    for i in 0..m_hat.len() {
        kl += 0.5 * ((v[i] / v_hat[i]).ln() + (v_hat[i] + (m_hat[i] - m[i]).powi(2)) / v[i] - 1.0);
    }
    kl
}

#[derive(Debug, Clone)]
pub struct KlReport {
    pub value: f64,
    pub grads: Vec<f64>,
    /// Some per-dimension variance hit the floor; value is still usable but
    /// reported so metrics can surface it.
    pub variance_floored: bool,
}

fn moments(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = rows[0].len();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, x) in mean.iter_mut().zip(r.iter()) {
            *m += x / n;
        }
    }
    let mut var = vec![0.0; d];
    for r in rows {
        for ((v, x), m) in var.iter_mut().zip(r.iter()).zip(mean.iter()) {
            *v += (x - m) * (x - m) / n;
        }
    }
    (mean, var)
}

/// Deterministic core of the endpoint regularizer: given fixed start points,
/// one-step endpoints are `tau0 + v(tau0, 0)`; their batch moments are pulled
/// toward the real batch moments through the Gaussian KL.
pub fn kl_endpoint_core(
    model: &VectorFieldModel,
    tau0s: &[Vec<f64>],
    h: usize,
    real_mean: &[f64],
    real_var: &[f64],
) -> Result<KlReport> {
    if tau0s.len() < 2 {
        return Err(CtrlFlowError::config(
            "endpoint KL needs a batch of at least 2",
        ));
    }
    let b = tau0s.len();
    let d = tau0s[0].len();
    let mut endpoints = Vec::with_capacity(b);
    let mut tapes = Vec::with_capacity(b);
    for tau0 in tau0s {
        let (v, tape) = model.velocity_tape(tau0, h, 0.0)?;
        let e: Vec<f64> = tau0.iter().zip(v.iter()).map(|(x, vi)| x + vi).collect();
        endpoints.push(e);
        tapes.push(tape);
    }
    let (m_hat, v_hat_raw) = moments(&endpoints);
    let mut floored = false;
    let v_hat: Vec<f64> = v_hat_raw
        .iter()
        .map(|&v| {
            if v < KL_VAR_FLOOR {
                floored = true;
                KL_VAR_FLOOR
            } else {
                v
            }
        })
        .collect();
    let v_real: Vec<f64> = real_var
        .iter()
        .map(|&v| {
            if v < KL_VAR_FLOOR {
                floored = true;
                KL_VAR_FLOOR
            } else {
                v
            }
        })
        .collect();
    let value = diag_gauss_kl(&m_hat, &v_hat, real_mean, &v_real);
    if !value.is_finite() {
        return Err(CtrlFlowError::overflow("endpoint KL", None));
    }

    // d KL / d m_hat and d KL / d v_hat; the floor zeroes the variance path.
    let dm: Vec<f64> = (0..d)
        .map(|i| (m_hat[i] - real_mean[i]) / v_real[i])
        .collect();
    let dv: Vec<f64> = (0..d)
        .map(|i| {
            if v_hat_raw[i] < KL_VAR_FLOOR {
                0.0
            } else {
                0.5 * (1.0 / v_real[i] - 1.0 / v_hat[i])
            }
        })
        .collect();
    let mut grads = Gradients {
        params: vec![0.0; model.net.param_count()],
        input: Vec::new(),
    };
    let bn = b as f64;
    for (e, tape) in endpoints.iter().zip(tapes.iter()) {
        let upstream: Vec<f64> = (0..d)
            .map(|i| dm[i] / bn + dv[i] * 2.0 * (e[i] - m_hat[i]) / bn)
            .collect();
        model.backward_into(tape, h, &upstream, &mut grads)?;
    }
    Ok(KlReport {
        value,
        grads: grads.params,
        variance_floored: floored,
    })
}

/// Draws fresh start points and applies [`kl_endpoint_core`] against the
/// moments of the real batch.
pub fn kl_endpoint_regularizer(
    model: &VectorFieldModel,
    real_payloads: &[Vec<f64>],
    h: usize,
    rng: &mut ChaCha12Rng,
) -> Result<KlReport> {
    if real_payloads.len() < 2 {
        return Err(CtrlFlowError::config(
            "endpoint KL needs a batch of at least 2",
        ));
    }
    let (m, v) = moments(real_payloads);
    let tau0s: Vec<Vec<f64>> = (0..real_payloads.len())
        .map(|_| FlowState::standard_normal(h, model.row_width, rng).payload)
        .collect();
    kl_endpoint_core(model, &tau0s, h, &m, &v)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CfmConfig {
    pub batch_size: usize,
    pub batches_per_epoch: usize,
    pub lr: f64,
    pub sigma: f64,
    /// Weight of the endpoint KL term; zero disables it.
    pub kl_weight: f64,
    pub h_min: usize,
    pub h_max: usize,
    /// Minimum buffer size before training may start.
    pub warmup_min: usize,
    /// Only the most recent K episodes are sampled (policy recency proxy).
    pub recent_episodes: u64,
    /// Refit the payload normalizer from the buffer before training.
    pub normalize: bool,
}

impl Default for CfmConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            batches_per_epoch: 20,
            lr: 1e-3,
            sigma: 1e-2,
            kl_weight: 0.0,
            h_min: 1,
            h_max: usize::MAX,
            warmup_min: 1,
            recent_episodes: u64::MAX,
            normalize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub cfm_loss: f64,
    pub kl_term: f64,
    pub grad_norm: f64,
    pub variance_floored: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.cfm_loss)
    }
}

/// Trains the velocity field on buffer windows: sample a length, sample
/// target trajectories, draw conditional-path points, regress the field onto
/// the conditional velocities, optionally add the endpoint KL.
pub fn train_cfm(
    model: &mut VectorFieldModel,
    buffer: &ReplayBuffer,
    epochs: usize,
    cfg: &CfmConfig,
    seed: RunSeed,
) -> Result<TrainReport> {
    let mut report = TrainReport::default();
    if epochs == 0 {
        return Ok(report);
    }
    if buffer.len() < cfg.warmup_min {
        return Err(CtrlFlowError::NotReady(format!(
            "buffer holds {} transitions, warm-up needs {}",
            buffer.len(),
            cfg.warmup_min
        )));
    }
    let h_cap = cfg.h_max.min(model.h_max).min(buffer.max_window());
    if h_cap < cfg.h_min {
        return Err(CtrlFlowError::NotReady(format!(
            "no stored episode supports windows of length {}",
            cfg.h_min
        )));
    }
    if cfg.normalize {
        let rows: Vec<Vec<f64>> = buffer
            .iter()
            .map(|(_, t)| {
                let mut row = t.state.clone();
                row.extend_from_slice(&t.action);
                row.push(t.reward);
                row
            })
            .collect();
        model.normalizer = Normalizer::fit(rows.iter().map(|r| r.as_slice()), model.row_width)?;
    }

    let mut rng = seed.stream(Stream::CfmTrain);
    let mut adam = Adam::new(cfg.lr, model.net.param_count());
    let mut initial_loss: Option<f64> = None;
    let mut diverging = 0usize;

    for epoch in 0..epochs {
        let mut loss_sum = 0.0;
        let mut kl_sum = 0.0;
        let mut gnorm_sum = 0.0;
        let mut floored = false;
        for _ in 0..cfg.batches_per_epoch {
            let h = rng.random_range(cfg.h_min..=h_cap);
            let trajs = buffer.sample_trajectories_recent(
                &mut rng,
                h,
                cfg.batch_size,
                cfg.recent_episodes,
            )?;
            let payloads: Vec<Vec<f64>> = trajs
                .iter()
                .map(|t| payload_from_trajectory(t, &model.normalizer))
                .collect::<Result<_>>()?;
            let samples: Vec<ProbPathSample> = payloads
                .iter()
                .map(|p| make_path_sample(p, h, model.row_width, cfg.sigma, &mut rng))
                .collect::<Result<_>>()?;
            let (loss, mut grads) = cfm_loss(model, &samples)?;
            let mut kl_val = 0.0;
            if cfg.kl_weight > 0.0 {
                let kl = kl_endpoint_regularizer(model, &payloads, h, &mut rng)?;
                kl_val = kl.value;
                floored |= kl.variance_floored;
                for (g, k) in grads.iter_mut().zip(kl.grads.iter()) {
                    *g += cfg.kl_weight * k;
                }
            }
            gnorm_sum += grads.iter().map(|g| g * g).sum::<f64>().sqrt();
            adam.step(model.net.params_mut(), &grads)?;
            loss_sum += loss;
            kl_sum += kl_val;
        }
        let n = cfg.batches_per_epoch as f64;
        let stats = EpochStats {
            epoch,
            cfm_loss: loss_sum / n,
            kl_term: kl_sum / n,
            grad_norm: gnorm_sum / n,
            variance_floored: floored,
        };
        let init = *initial_loss.get_or_insert(stats.cfm_loss);
        if stats.cfm_loss > 10.0 * init {
            diverging += 1;
        } else {
            diverging = 0;
        }
        report.epochs.push(stats);
        if diverging >= 3 {
            return Err(CtrlFlowError::TrainingDiverged(format!(
                "matching loss exceeded 10x its initial value for 3 consecutive epochs (initial {init:.3e})",
            )));
        }
    }
    Ok(report)
}

/// Squared energy distance between two samples:
/// `2 E||x - y|| - E||x - x'|| - E||y - y'||`.
pub fn energy_distance(xs: &[Vec<f64>], ys: &[Vec<f64>]) -> f64 {
    fn mean_cross(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
        let mut acc = 0.0;
        for x in a {
            for y in b {
                let d: f64 = x
                    .iter()
                    .zip(y.iter())
                    .map(|(p, q)| (p - q) * (p - q))
                    .sum();
                acc += d.sqrt();
            }
        }
        acc / (a.len() * b.len()) as f64
    }
    2.0 * mean_cross(xs, ys) - mean_cross(xs, xs) - mean_cross(ys, ys)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Source, Transition};
    use crate::flow::euler_endpoint;
    use crate::nn::gradcheck;

    fn sample_batch(model: &VectorFieldModel, h: usize, n: usize) -> Vec<ProbPathSample> {
        let mut rng = RunSeed(41).stream(Stream::CfmTrain);
        let d = h * model.row_width;
        (0..n)
            .map(|i| {
                let tau1: Vec<f64> = (0..d).map(|j| ((i + j) as f64 * 0.37).sin()).collect();
                make_path_sample(&tau1, h, model.row_width, 1e-2, &mut rng).unwrap()
            })
            .collect()
    }

    fn small_model(seed: u64) -> VectorFieldModel {
        let mut m = VectorFieldModel::feed_forward(3, 2, &[12], 4).unwrap();
        m.init(&mut RunSeed(seed).stream(Stream::Init));
        m
    }

    #[test]
    fn matched_targets_give_zero_loss() {
        let model = small_model(1);
        let mut batch = sample_batch(&model, 2, 4);
        for s in &mut batch {
            s.target_velocity = model.velocity(&s.noisy_point, 2, s.t).unwrap();
        }
        let (loss, grads) = cfm_loss(&model, &batch).unwrap();
        assert!(loss < 1e-28);
        assert!(grads.iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn zero_model_against_unit_targets_gives_unit_loss() {
        let model = VectorFieldModel::feed_forward(3, 2, &[12], 4).unwrap();
        let mut batch = sample_batch(&model, 2, 4);
        for s in &mut batch {
            s.target_velocity = vec![1.0; 4];
        }
        let (loss, _) = cfm_loss(&model, &batch).unwrap();
        assert_eq!(loss, 1.0);
    }

    #[test]
    fn loss_matches_elementwise_loop_oracle() {
        let model = small_model(2);
        let batch = sample_batch(&model, 3, 5);
        let (loss, _) = cfm_loss(&model, &batch).unwrap();
        let mut acc = 0.0;
        let mut count = 0usize;
        for s in &batch {
            let v = model.velocity(&s.noisy_point, 3, s.t).unwrap();
            for (a, b) in v.iter().zip(s.target_velocity.iter()) {
                acc += (a - b) * (a - b);
                count += 1;
            }
        }
        assert!((loss - acc / count as f64).abs() < 1e-12);
    }

    #[test]
    fn mixed_length_batches_are_rejected() {
        let model = small_model(3);
        let mut batch = sample_batch(&model, 2, 2);
        batch.extend(sample_batch(&model, 3, 1));
        assert!(cfm_loss(&model, &batch).is_err());
    }

    #[test]
    fn matching_gradients_pass_finite_differences() {
        let model = small_model(4);
        let batch = sample_batch(&model, 2, 3);
        let (_, analytic) = cfm_loss(&model, &batch).unwrap();
        let mut probe = model.clone();
        let fd = gradcheck::finite_diff_grad(
            &mut |p: &[f64]| {
                probe.net.params_mut().copy_from_slice(p);
                cfm_loss(&probe, &batch).unwrap().0
            },
            model.net.params(),
            1e-5,
        );
        let err = gradcheck::rel_error(&analytic, &fd);
        assert!(err <= 1e-4, "relative error {err}");
    }

    #[test]
    fn standard_gaussian_kl_example() {
        // m_hat = 0, m = 1, unit variances, 1-D: KL = 0.5.
        let kl = diag_gauss_kl(&[0.0], &[1.0], &[1.0], &[1.0]);
        assert!((kl - 0.5).abs() < 1e-15);
    }

    #[test]
    fn identical_moments_give_zero_kl() {
        let kl = diag_gauss_kl(&[0.3, -1.0], &[0.5, 2.0], &[0.3, -1.0], &[0.5, 2.0]);
        assert_eq!(kl, 0.0);
    }

    #[test]
    fn kl_matches_term_by_term_formula() {
        let (mh, vh) = (vec![0.4, -0.2], vec![0.8, 1.7]);
        let (m, v) = (vec![-0.1, 0.9], vec![1.2, 0.3]);
        let got = diag_gauss_kl(&mh, &vh, &m, &v);
        let mut want = 0.0;
        for i in 0..2 {
            let log_ratio = v[i].ln() - vh[i].ln();
            let var_ratio = vh[i] / v[i];
            let mean_term = (mh[i] - m[i]) * (mh[i] - m[i]) / v[i];
            want += 0.5 * (log_ratio + var_ratio + mean_term - 1.0);
        }
        assert!((got - want).abs() < 1e-10);
    }

    #[test]
    fn identical_batches_give_zero_regularizer() {
        // A model whose one-step endpoints exactly reproduce the start
        // points (zero field) against a "real" batch with the same moments.
        let model = VectorFieldModel::feed_forward(1, 2, &[8], 4).unwrap();
        let tau0s = vec![vec![1.0, 0.0], vec![-1.0, 2.0], vec![0.0, -2.0]];
        let (m, v) = moments(&tau0s);
        let rep = kl_endpoint_core(&model, &tau0s, 1, &m, &v).unwrap();
        assert!(rep.value.abs() < 1e-12);
    }

    #[test]
    fn degenerate_variance_is_floored_and_flagged() {
        let model = small_model(5);
        let reals = vec![vec![1.0, 1.0], vec![1.0, 1.0], vec![1.0, 1.0]];
        let mut rng = RunSeed(6).stream(Stream::CfmTrain);
        let rep = kl_endpoint_regularizer(&model, &reals, 1, &mut rng).unwrap();
        assert!(rep.variance_floored);
        assert!(rep.value.is_finite());
    }

    #[test]
    fn regularizer_gradients_pass_finite_differences() {
        let model = small_model(6);
        let mut rng = RunSeed(7).stream(Stream::CfmTrain);
        let tau0s: Vec<Vec<f64>> = (0..4)
            .map(|_| FlowState::standard_normal(2, 2, &mut rng).payload)
            .collect();
        let real_mean = vec![0.5, -0.5, 0.2, 0.0];
        let real_var = vec![1.0, 2.0, 0.5, 1.5];
        let analytic = kl_endpoint_core(&model, &tau0s, 2, &real_mean, &real_var)
            .unwrap()
            .grads;
        let mut probe = model.clone();
        let fd = gradcheck::finite_diff_grad(
            &mut |p: &[f64]| {
                probe.net.params_mut().copy_from_slice(p);
                kl_endpoint_core(&probe, &tau0s, 2, &real_mean, &real_var)
                    .unwrap()
                    .value
            },
            model.net.params(),
            1e-5,
        );
        let err = gradcheck::rel_error(&analytic, &fd);
        assert!(err <= 1e-4, "relative error {err}");
    }

    fn scalar_buffer(values: &[f64]) -> ReplayBuffer {
        // Rows are (state, reward) pairs of width 2; one-step episodes.
        let mut buf = ReplayBuffer::new(100_000, Source::Environment, 0);
        for &v in values {
            buf.push_episode(vec![Transition {
                state: vec![v],
                action: vec![],
                reward: 0.0,
                next_state: vec![v],
                done_flag: false,
                valid_flag: true,
            }])
            .unwrap();
        }
        buf
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let mut model = small_model(8);
        let before = model.net.params().to_vec();
        let buf = scalar_buffer(&[1.0, 2.0, 3.0]);
        let report = train_cfm(&mut model, &buf, 0, &CfmConfig::default(), RunSeed(1)).unwrap();
        assert!(report.epochs.is_empty());
        assert_eq!(model.net.params(), before.as_slice());
    }

    #[test]
    fn warmup_gate_reports_not_ready() {
        let mut model = small_model(9);
        let buf = scalar_buffer(&[1.0]);
        let cfg = CfmConfig {
            warmup_min: 10,
            ..CfmConfig::default()
        };
        assert!(matches!(
            train_cfm(&mut model, &buf, 1, &cfg, RunSeed(1)),
            Err(CtrlFlowError::NotReady(_))
        ));
    }

    #[test]
    fn same_seed_gives_identical_loss_curves() {
        let buf = scalar_buffer(&(0..50).map(|i| (i as f64 * 0.71).sin()).collect::<Vec<_>>());
        let cfg = CfmConfig {
            batch_size: 8,
            batches_per_epoch: 3,
            kl_weight: 0.1,
            ..CfmConfig::default()
        };
        let run = |seed: u64| {
            let mut model = VectorFieldModel::feed_forward(1, 2, &[8], 4).unwrap();
            model.init(&mut RunSeed(99).stream(Stream::Init));
            train_cfm(&mut model, &buf, 3, &cfg, RunSeed(seed)).unwrap()
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6));
    }

    #[test]
    fn gradient_ascent_triggers_the_divergence_guard() {
        let buf = scalar_buffer(&(0..50).map(|i| (i as f64 * 0.31).cos()).collect::<Vec<_>>());
        let mut model = VectorFieldModel::feed_forward(1, 2, &[8], 4).unwrap();
        model.init(&mut RunSeed(10).stream(Stream::Init));
        let cfg = CfmConfig {
            lr: -0.3,
            batch_size: 16,
            batches_per_epoch: 5,
            ..CfmConfig::default()
        };
        let r = train_cfm(&mut model, &buf, 200, &cfg, RunSeed(2));
        assert!(
            matches!(r, Err(CtrlFlowError::TrainingDiverged(_))),
            "expected divergence, got {r:?}"
        );
    }

    #[test]
    fn recovers_a_one_dimensional_gaussian_mean() {
        // Targets are (x, 0) rows with x ~ N(2, 0.1^2); integrated endpoints
        // must land at mean 2 within 0.1 without normalization help.
        let mut rng = RunSeed(12).stream(Stream::Oracle);
        let values: Vec<f64> = (0..400)
            .map(|_| 2.0 + 0.1 * rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let buf = scalar_buffer(&values);
        let mut model = VectorFieldModel::feed_forward(1, 2, &[64, 64], 8).unwrap();
        model.init(&mut RunSeed(13).stream(Stream::Init));
        let cfg = CfmConfig {
            batch_size: 64,
            batches_per_epoch: 20,
            lr: 2e-3,
            normalize: false,
            ..CfmConfig::default()
        };
        let report = train_cfm(&mut model, &buf, 30, &cfg, RunSeed(14)).unwrap();
        assert!(report.final_loss().unwrap() < report.epochs[0].cfm_loss);

        let mut sample_rng = RunSeed(15).stream(Stream::Sampler);
        let mut mean = 0.0;
        for _ in 0..256 {
            let tau0 = FlowState::standard_normal(1, 2, &mut sample_rng);
            let end = euler_endpoint(&model, &tau0.payload, 1, 50).unwrap();
            mean += end[0] / 256.0;
        }
        assert!((mean - 2.0).abs() <= 0.1, "endpoint mean {mean}");
    }

    #[test]
    fn energy_distance_identifies_identical_samples() {
        let xs = vec![vec![0.0, 1.0], vec![2.0, -1.0], vec![0.5, 0.5]];
        assert!(energy_distance(&xs, &xs).abs() < 1e-12);
    }

    #[test]
    fn energy_distance_grows_with_separation() {
        let xs = vec![vec![0.0], vec![0.1], vec![-0.1]];
        let near = vec![vec![0.05], vec![-0.05], vec![0.0]];
        let far = vec![vec![5.0], vec![5.1], vec![4.9]];
        assert!(energy_distance(&xs, &far) > energy_distance(&xs, &near));
    }

    #[test]
    fn recovers_a_two_dimensional_mixture() {
        // Mixture of N((1.5, 1.5), 0.3^2) and N((-1.5, -1.5), 0.3^2) over
        // (state, reward) rows; training must cut the energy distance to
        // held-out real samples by 10x versus the untrained model.
        let mut rng = RunSeed(16).stream(Stream::Oracle);
        let draw = |rng: &mut ChaCha12Rng| -> Vec<f64> {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            vec![
                sign * 1.5 + 0.3 * rng.sample::<f64, _>(rand_distr::StandardNormal),
                sign * 1.5 + 0.3 * rng.sample::<f64, _>(rand_distr::StandardNormal),
            ]
        };
        let mut buf = ReplayBuffer::new(100_000, Source::Environment, 0);
        for _ in 0..600 {
            let row = draw(&mut rng);
            buf.push_episode(vec![Transition {
                state: vec![row[0]],
                action: vec![],
                reward: row[1],
                next_state: vec![row[0]],
                done_flag: false,
                valid_flag: true,
            }])
            .unwrap();
        }
        let held_out: Vec<Vec<f64>> = (0..256).map(|_| draw(&mut rng)).collect();

        let mut model = VectorFieldModel::feed_forward(1, 2, &[64, 64], 8).unwrap();
        model.init(&mut RunSeed(17).stream(Stream::Init));
        let untrained = model.clone();
        let cfg = CfmConfig {
            batch_size: 64,
            batches_per_epoch: 20,
            lr: 2e-3,
            normalize: false,
            ..CfmConfig::default()
        };
        train_cfm(&mut model, &buf, 60, &cfg, RunSeed(18)).unwrap();

        let endpoints = |m: &VectorFieldModel| -> Vec<Vec<f64>> {
            let mut r = RunSeed(19).stream(Stream::Sampler);
            (0..256)
                .map(|_| {
                    let tau0 = FlowState::standard_normal(1, 2, &mut r);
                    euler_endpoint(m, &tau0.payload, 1, 50).unwrap()
                })
                .collect()
        };
        let ed_before = energy_distance(&endpoints(&untrained), &held_out);
        let ed_after = energy_distance(&endpoints(&model), &held_out);
        assert!(
            ed_after * 10.0 <= ed_before,
            "energy distance {ed_before:.4} -> {ed_after:.4}"
        );
    }
}
