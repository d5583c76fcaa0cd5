use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::env::Normalizer;
use crate::error::{CtrlFlowError, Result};
use crate::nn::encode::temporal_encode;
use crate::nn::{Activation, ArchTag, AttnConfig, GradTape, Gradients, ParamNet};

/// Width of the sinusoidal embedding of the trajectory length appended to
/// feed-forward inputs.
const H_EMBED: usize = 4;

/// Velocity field over trajectory payloads, conditioned on flow time and
/// trajectory length.
///
/// The feed-forward variant zero-pads payloads to the `h_max` shape and
/// appends a length embedding; the attention variant consumes one token per
/// row and handles any length natively. Output shape always equals the input
/// payload shape.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VectorFieldModel {
    pub net: ParamNet,
    pub h_max: usize,
    pub row_width: usize,
    /// Payload normalizer fitted from the training buffer; identity until
    /// first fit. Generation must denormalize through this.
    pub normalizer: Normalizer,
}

impl VectorFieldModel {
    pub fn feed_forward(
        h_max: usize,
        row_width: usize,
        hidden: &[usize],
        time_features: usize,
    ) -> Result<Self> {
        if h_max == 0 || row_width == 0 {
            return Err(CtrlFlowError::config("empty payload shape"));
        }
        let d = h_max * row_width;
        let net = ParamNet::feed_forward(
            d + H_EMBED,
            hidden,
            d,
            Activation::Tanh,
            Activation::Linear,
            time_features,
        )?;
        Ok(Self {
            net,
            h_max,
            row_width,
            normalizer: Normalizer::identity(row_width),
        })
    }

    pub fn attention(
        h_max: usize,
        row_width: usize,
        d_model: usize,
        heads: usize,
        blocks: usize,
        time_features: usize,
    ) -> Result<Self> {
        let net = ParamNet::mini_attention(
            AttnConfig {
                token_width: row_width,
                out_width: row_width,
                d_model,
                heads,
                blocks,
            },
            time_features,
        )?;
        Ok(Self {
            net,
            h_max,
            row_width,
            normalizer: Normalizer::identity(row_width),
        })
    }

    pub fn init(&mut self, rng: &mut ChaCha12Rng) {
        self.net.init(rng);
    }

    fn check_shape(&self, payload: &[f64], h: usize) -> Result<()> {
        if h == 0 || h > self.h_max {
            return Err(CtrlFlowError::config(format!(
                "trajectory length {h} outside [1, {}]",
                self.h_max
            )));
        }
        if payload.len() != h * self.row_width {
            return Err(CtrlFlowError::config("payload shape mismatch"));
        }
        Ok(())
    }

    fn stack_ff(&self, payload: &[f64], h: usize) -> Result<Vec<f64>> {
        let mut x = vec![0.0; self.h_max * self.row_width];
        x[..payload.len()].copy_from_slice(payload);
        x.extend(temporal_encode(&[h], H_EMBED)?.pop().unwrap());
        Ok(x)
    }

    /// Velocity with a tape for [`VectorFieldModel::backward_into`]. The
    /// output length equals the payload length.
    pub fn velocity_tape(
        &self,
        payload: &[f64],
        h: usize,
        t: f64,
    ) -> Result<(Vec<f64>, GradTape)> {
        self.check_shape(payload, h)?;
        match self.net.arch() {
            ArchTag::FeedForward => {
                let x = self.stack_ff(payload, h)?;
                let (mut out, tape) = self.net.forward(&x, Some(t))?;
                out.truncate(h * self.row_width);
                Ok((out, tape))
            }
            ArchTag::MiniAttention(_) => self.net.forward(payload, Some(t)),
        }
    }

    pub fn velocity(&self, payload: &[f64], h: usize, t: f64) -> Result<Vec<f64>> {
        self.velocity_tape(payload, h, t).map(|(v, _)| v)
    }

    /// Propagates an upstream gradient on the (truncated) velocity back to
    /// parameters and the payload. `grads.input` gains exactly one payload
    /// worth of entries per call.
    pub fn backward_into(
        &self,
        tape: &GradTape,
        h: usize,
        upstream: &[f64],
        grads: &mut Gradients,
    ) -> Result<()> {
        if upstream.len() != h * self.row_width {
            return Err(CtrlFlowError::config("upstream velocity width mismatch"));
        }
        match self.net.arch() {
            ArchTag::FeedForward => {
                let mut up = vec![0.0; self.h_max * self.row_width];
                up[..upstream.len()].copy_from_slice(upstream);
                let mut inner = Gradients {
                    params: std::mem::take(&mut grads.params),
                    input: Vec::new(),
                };
                let r = self.net.backward_into(tape, &up, &mut inner);
                grads.params = inner.params;
                r?;
                inner.input.truncate(h * self.row_width);
                grads.input.extend(inner.input);
                Ok(())
            }
            ArchTag::MiniAttention(_) => {
                let mut inner = Gradients {
                    params: std::mem::take(&mut grads.params),
                    input: Vec::new(),
                };
                let r = self.net.backward_into(tape, upstream, &mut inner);
                grads.params = inner.params;
                r?;
                grads.input.extend(inner.input);
                Ok(())
            }
        }
    }

    pub fn backward(&self, tape: &GradTape, h: usize, upstream: &[f64]) -> Result<Gradients> {
        let mut grads = Gradients {
            params: vec![0.0; self.net.param_count()],
            input: Vec::new(),
        };
        self.backward_into(tape, h, upstream, &mut grads)?;
        Ok(grads)
    }
}

/// Integrates `dx/dt = v(x, t)` from `t = 0` to `1` with fixed-step Euler,
/// returning the endpoint payload.
pub fn euler_endpoint(
    model: &VectorFieldModel,
    payload0: &[f64],
    h: usize,
    steps: usize,
) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(CtrlFlowError::config("integration needs >= 1 step"));
    }
    let dt = 1.0 / steps as f64;
    let mut x = payload0.to_vec();
    for k in 0..steps {
        let t = k as f64 * dt;
        let v = model.velocity(&x, h, t)?;
        for (xi, vi) in x.iter_mut().zip(v.iter()) {
            *xi += dt * vi;
        }
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(CtrlFlowError::overflow("flow integration endpoint", None));
    }
    Ok(x)
}
