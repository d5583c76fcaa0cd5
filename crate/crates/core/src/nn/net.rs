use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use super::attention::{self, AttnConfig, AttnTape};
use super::encode::time_embed;
use crate::error::{CtrlFlowError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Linear,
    Tanh,
    /// `ln(1 + e^z)`, strictly positive. Used as the output link of the
    /// partition network.
    Softplus,
}

impl Activation {
    pub fn apply(&self, z: f64) -> f64 {
        match self {
            Activation::Linear => z,
            Activation::Tanh => z.tanh(),
            Activation::Softplus => softplus(z),
        }
    }

    /// Derivative expressed via pre-activation `z` and activation `a`.
    pub fn derivative(&self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Tanh => 1.0 - a * a,
            Activation::Softplus => sigmoid(z),
        }
    }
}

pub fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else if z < -30.0 {
        z.exp()
    } else {
        z.exp().ln_1p()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// One dense sublayer: `out = act(W x + b)` with `W` stored row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub input_width: usize,
    pub output_width: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(input_width: usize, output_width: usize, activation: Activation) -> Self {
        Self {
            input_width,
            output_width,
            activation,
        }
    }

    pub fn param_count(&self) -> usize {
        (self.input_width + 1) * self.output_width
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ArchTag {
    FeedForward,
    MiniAttention(AttnConfig),
}

/// A parameterized function approximator with a flat parameter vector.
///
/// Feed-forward nets chain the `layer_specs` directly. The mini-attention
/// variant interprets its input as a sequence of equal-width tokens and runs
/// them through embedding, attention blocks, and a per-token output head; its
/// `layer_specs` describe the dense sublayers in parameter order so the
/// "parameter count equals the sum implied by layer_specs" invariant holds
/// for both architectures.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamNet {
    arch: ArchTag,
    layer_specs: Vec<LayerSpec>,
    /// Width of the sinusoidal embedding of `t` appended to the input
    /// (feed-forward) or every token (attention). Zero means the net is not
    /// time-conditioned.
    time_features: usize,
    params: Vec<f64>,
}

/// Parameter and input gradients from one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: Vec<f64>,
    /// Gradient w.r.t. the raw input (time-embedding features excluded).
    pub input: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct GradTape {
    kind: TapeKind,
    /// Identifies the net this tape belongs to.
    param_count: usize,
}

#[derive(Debug, Clone)]
enum TapeKind {
    FeedForward(FfTape),
    MiniAttention(AttnTape),
}

#[derive(Debug, Clone)]
struct FfTape {
    raw_input_len: usize,
    /// `layer_io[0]` is the stacked input; `layer_io[l+1]` the activation of
    /// layer `l`.
    layer_io: Vec<Vec<f64>>,
    pre_acts: Vec<Vec<f64>>,
}

impl ParamNet {
    /// A feed-forward stack. `widths` lists hidden widths; hidden layers use
    /// `hidden_act`, the final layer `out_act`.
    pub fn feed_forward(
        input_width: usize,
        hidden: &[usize],
        output_width: usize,
        hidden_act: Activation,
        out_act: Activation,
        time_features: usize,
    ) -> Result<Self> {
        if input_width == 0 || output_width == 0 {
            return Err(CtrlFlowError::config("zero-width net"));
        }
        if time_features % 2 != 0 {
            return Err(CtrlFlowError::config("time_features must be even"));
        }
        let mut specs = Vec::new();
        let mut prev = input_width + time_features;
        for &w in hidden {
            specs.push(LayerSpec::new(prev, w, hidden_act));
            prev = w;
        }
        specs.push(LayerSpec::new(prev, output_width, out_act));
        let count: usize = specs.iter().map(LayerSpec::param_count).sum();
        Ok(Self {
            arch: ArchTag::FeedForward,
            layer_specs: specs,
            time_features,
            params: vec![0.0; count],
        })
    }

    /// A miniature attention stack over `token_width`-wide tokens.
    pub fn mini_attention(cfg: AttnConfig, time_features: usize) -> Result<Self> {
        cfg.validate()?;
        if time_features % 2 != 0 {
            return Err(CtrlFlowError::config("time_features must be even"));
        }
        let specs = attention::layer_specs(&cfg, time_features);
        let count: usize = specs.iter().map(LayerSpec::param_count).sum();
        Ok(Self {
            arch: ArchTag::MiniAttention(cfg),
            layer_specs: specs,
            time_features,
            params: vec![0.0; count],
        })
    }

    /// Xavier-uniform weights, zero biases.
    pub fn init(&mut self, rng: &mut ChaCha12Rng) {
        let mut offset = 0;
        for spec in &self.layer_specs.clone() {
            let scale = (6.0 / (spec.input_width + spec.output_width) as f64).sqrt();
            let w_len = spec.input_width * spec.output_width;
            for p in &mut self.params[offset..offset + w_len] {
                *p = rng.random_range(-scale..scale);
            }
            for p in &mut self.params[offset + w_len..offset + w_len + spec.output_width] {
                *p = 0.0;
            }
            offset += spec.param_count();
        }
    }

    pub fn arch(&self) -> &ArchTag {
        &self.arch
    }

    pub fn layer_specs(&self) -> &[LayerSpec] {
        &self.layer_specs
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn time_features(&self) -> usize {
        self.time_features
    }

    /// Declared raw input width. For attention this is the token width (any
    /// multiple of it is accepted at call time).
    pub fn input_width(&self) -> usize {
        match &self.arch {
            ArchTag::FeedForward => self.layer_specs[0].input_width - self.time_features,
            ArchTag::MiniAttention(cfg) => cfg.token_width,
        }
    }

    pub fn output_width(&self) -> usize {
        match &self.arch {
            ArchTag::FeedForward => self.layer_specs.last().unwrap().output_width,
            ArchTag::MiniAttention(cfg) => cfg.out_width,
        }
    }

    /// Forward pass. `time` must be `Some` iff the net is time-conditioned.
    /// Returns the output and the tape for [`ParamNet::backward`].
    pub fn forward(&self, input: &[f64], time: Option<f64>) -> Result<(Vec<f64>, GradTape)> {
        match (self.time_features > 0, time.is_some()) {
            (true, false) => {
                return Err(CtrlFlowError::config(
                    "net is time-conditioned but no time was supplied",
                ))
            }
            (false, true) => {
                return Err(CtrlFlowError::config(
                    "net is not time-conditioned but a time was supplied",
                ))
            }
            _ => {}
        }
        match &self.arch {
            ArchTag::FeedForward => self.forward_ff(input, time),
            ArchTag::MiniAttention(cfg) => {
                let (out, tape) =
                    attention::forward(cfg, self.time_features, &self.params, input, time)?;
                Ok((
                    out,
                    GradTape {
                        kind: TapeKind::MiniAttention(tape),
                        param_count: self.params.len(),
                    },
                ))
            }
        }
    }

    /// Forward pass without tape recording (inference).
    pub fn infer(&self, input: &[f64], time: Option<f64>) -> Result<Vec<f64>> {
        // Tape allocation is small next to the matmuls; reuse the same path.
        self.forward(input, time).map(|(out, _)| out)
    }

    fn forward_ff(&self, input: &[f64], time: Option<f64>) -> Result<(Vec<f64>, GradTape)> {
        let declared = self.input_width();
        if input.len() != declared {
            return Err(CtrlFlowError::config(format!(
                "input width {} does not match declared width {}",
                input.len(),
                declared
            )));
        }
        let mut x: Vec<f64> = input.to_vec();
        if let Some(t) = time {
            x.extend(time_embed(t, self.time_features));
        }
        let mut layer_io = Vec::with_capacity(self.layer_specs.len() + 1);
        let mut pre_acts = Vec::with_capacity(self.layer_specs.len());
        layer_io.push(x);
        let mut offset = 0;
        for (li, spec) in self.layer_specs.iter().enumerate() {
            let input = layer_io.last().unwrap();
            let (w, b) = self.layer_params(offset, spec);
            let mut z = b.to_vec();
            for (row, zout) in z.iter_mut().enumerate() {
                let wrow = &w[row * spec.input_width..(row + 1) * spec.input_width];
                let mut acc = 0.0;
                for (wi, xi) in wrow.iter().zip(input.iter()) {
                    acc += wi * xi;
                }
                *zout += acc;
            }
            let a: Vec<f64> = z.iter().map(|&v| spec.activation.apply(v)).collect();
            if a.iter().any(|v| !v.is_finite()) {
                return Err(CtrlFlowError::overflow("feed-forward activation", Some(li)));
            }
            pre_acts.push(z);
            layer_io.push(a);
            offset += spec.param_count();
        }
        let out = layer_io.last().unwrap().clone();
        Ok((
            out,
            GradTape {
                kind: TapeKind::FeedForward(FfTape {
                    raw_input_len: declared,
                    layer_io,
                    pre_acts,
                }),
                param_count: self.params.len(),
            },
        ))
    }

    fn layer_params<'a>(&'a self, offset: usize, spec: &LayerSpec) -> (&'a [f64], &'a [f64]) {
        let w_len = spec.input_width * spec.output_width;
        (
            &self.params[offset..offset + w_len],
            &self.params[offset + w_len..offset + w_len + spec.output_width],
        )
    }

    /// Reverse pass: propagate `upstream` (d loss / d output) through the
    /// tape, returning parameter and raw-input gradients.
    pub fn backward(&self, tape: &GradTape, upstream: &[f64]) -> Result<Gradients> {
        if tape.param_count != self.params.len() {
            return Err(CtrlFlowError::config(
                "tape does not belong to this net (parameter count mismatch)",
            ));
        }
        let mut grads = Gradients {
            params: vec![0.0; self.params.len()],
            input: Vec::new(),
        };
        self.backward_into(tape, upstream, &mut grads)?;
        Ok(grads)
    }

    /// Like [`ParamNet::backward`] but accumulates parameter gradients into
    /// an existing buffer (batch loops).
    pub fn backward_into(
        &self,
        tape: &GradTape,
        upstream: &[f64],
        grads: &mut Gradients,
    ) -> Result<()> {
        if tape.param_count != self.params.len() {
            return Err(CtrlFlowError::config(
                "tape does not belong to this net (parameter count mismatch)",
            ));
        }
        if grads.params.len() != self.params.len() {
            return Err(CtrlFlowError::config("gradient buffer length mismatch"));
        }
        match (&tape.kind, &self.arch) {
            (TapeKind::FeedForward(ff), ArchTag::FeedForward) => {
                self.backward_ff(ff, upstream, grads)
            }
            (TapeKind::MiniAttention(at), ArchTag::MiniAttention(cfg)) => {
                attention::backward(cfg, self.time_features, &self.params, at, upstream, grads)
            }
            _ => Err(CtrlFlowError::config("tape/net architecture mismatch")),
        }
    }

    fn backward_ff(&self, tape: &FfTape, upstream: &[f64], grads: &mut Gradients) -> Result<()> {
        let last = self.layer_specs.len() - 1;
        if upstream.len() != self.layer_specs[last].output_width {
            return Err(CtrlFlowError::config("upstream gradient width mismatch"));
        }
        // Parameter offsets per layer.
        let mut offsets = Vec::with_capacity(self.layer_specs.len());
        let mut off = 0;
        for spec in &self.layer_specs {
            offsets.push(off);
            off += spec.param_count();
        }
        let mut delta = upstream.to_vec();
        for (li, spec) in self.layer_specs.iter().enumerate().rev() {
            let z = &tape.pre_acts[li];
            let a = &tape.layer_io[li + 1];
            let input = &tape.layer_io[li];
            let (w, _) = self.layer_params(offsets[li], spec);
            let mut dz = vec![0.0; spec.output_width];
            for i in 0..spec.output_width {
                dz[i] = delta[i] * spec.activation.derivative(z[i], a[i]);
            }
            let w_len = spec.input_width * spec.output_width;
            let gw = &mut grads.params[offsets[li]..offsets[li] + w_len];
            for (row, &dzi) in dz.iter().enumerate() {
                let grow = &mut gw[row * spec.input_width..(row + 1) * spec.input_width];
                for (g, xi) in grow.iter_mut().zip(input.iter()) {
                    *g += dzi * xi;
                }
            }
            let gb = &mut grads.params[offsets[li] + w_len..offsets[li] + w_len + spec.output_width];
            for (g, &dzi) in gb.iter_mut().zip(dz.iter()) {
                *g += dzi;
            }
            let mut next = vec![0.0; spec.input_width];
            for (row, &dzi) in dz.iter().enumerate() {
                let wrow = &w[row * spec.input_width..(row + 1) * spec.input_width];
                for (n, wi) in next.iter_mut().zip(wrow.iter()) {
                    *n += dzi * wi;
                }
            }
            delta = next;
        }
        delta.truncate(tape.raw_input_len);
        if grads.input.is_empty() {
            grads.input = delta;
        } else {
            for (g, d) in grads.input.iter_mut().zip(delta.iter()) {
                *g += d;
            }
        }
        Ok(())
    }
}
