use serde::{Deserialize, Serialize};

use super::encode::{temporal_encode, time_embed};
use super::net::{Activation, Gradients, LayerSpec};
use crate::error::{CtrlFlowError, Result};

/// Shape of the mini-attention stack. The input is a flat concatenation of
/// `token_width`-wide tokens; any token count is accepted at call time, which
/// is what lets one model handle variable-length sequences.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttnConfig {
    pub token_width: usize,
    pub out_width: usize,
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
}

impl AttnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.token_width == 0 || self.out_width == 0 {
            return Err(CtrlFlowError::config("zero-width attention tokens"));
        }
        if self.heads == 0 || self.blocks == 0 {
            return Err(CtrlFlowError::config("attention needs >=1 head and block"));
        }
        if self.d_model % self.heads != 0 {
            return Err(CtrlFlowError::config("d_model must divide into heads"));
        }
        if self.d_model % 2 != 0 {
            return Err(CtrlFlowError::config(
                "d_model must be even for positional encoding",
            ));
        }
        Ok(())
    }
}

/// Dense sublayers in parameter order: embedding, then per block
/// `Wq, Wk, Wv, Wo, FFN expand, FFN project`, then the per-token head.
pub(super) fn layer_specs(cfg: &AttnConfig, time_features: usize) -> Vec<LayerSpec> {
    let d = cfg.d_model;
    let mut specs = vec![LayerSpec::new(
        cfg.token_width + time_features,
        d,
        Activation::Linear,
    )];
    for _ in 0..cfg.blocks {
        for _ in 0..4 {
            specs.push(LayerSpec::new(d, d, Activation::Linear));
        }
        specs.push(LayerSpec::new(d, 2 * d, Activation::Tanh));
        specs.push(LayerSpec::new(2 * d, d, Activation::Linear));
    }
    specs.push(LayerSpec::new(d, cfg.out_width, Activation::Linear));
    specs
}

struct BlockOffsets {
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ffn1: usize,
    ffn2: usize,
}

struct Offsets {
    embed: usize,
    blocks: Vec<BlockOffsets>,
    head: usize,
}

fn offsets(cfg: &AttnConfig, time_features: usize) -> Offsets {
    let d = cfg.d_model;
    let square = (d + 1) * d;
    let mut off = ((cfg.token_width + time_features) + 1) * d;
    let mut blocks = Vec::with_capacity(cfg.blocks);
    for _ in 0..cfg.blocks {
        let b = BlockOffsets {
            wq: off,
            wk: off + square,
            wv: off + 2 * square,
            wo: off + 3 * square,
            ffn1: off + 4 * square,
            ffn2: off + 4 * square + (d + 1) * 2 * d,
        };
        off = b.ffn2 + (2 * d + 1) * d;
        blocks.push(b);
    }
    Offsets {
        embed: 0,
        blocks,
        head: off,
    }
}

#[derive(Debug, Clone)]
pub(super) struct AttnTape {
    /// Tokens with time features appended.
    stacked: Vec<Vec<f64>>,
    /// Hidden states entering each block; `hidden[0]` is embed + positional,
    /// `hidden[blocks]` feeds the head.
    hidden: Vec<Vec<Vec<f64>>>,
    blocks: Vec<BlockTape>,
}

#[derive(Debug, Clone)]
struct BlockTape {
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    /// Softmax weights, `attn[head][i][j]`.
    attn: Vec<Vec<Vec<f64>>>,
    /// Concatenated head outputs before the output projection.
    concat: Vec<Vec<f64>>,
    /// Hidden state after the attention residual (FFN input).
    ffn_in: Vec<Vec<f64>>,
    ffn_act: Vec<Vec<f64>>,
}

fn dense(params: &[f64], off: usize, in_w: usize, out_w: usize, x: &[f64]) -> Vec<f64> {
    let w = &params[off..off + in_w * out_w];
    let b = &params[off + in_w * out_w..off + in_w * out_w + out_w];
    let mut out = b.to_vec();
    for (row, o) in out.iter_mut().enumerate() {
        let wrow = &w[row * in_w..(row + 1) * in_w];
        let mut acc = 0.0;
        for (wi, xi) in wrow.iter().zip(x.iter()) {
            acc += wi * xi;
        }
        *o += acc;
    }
    out
}

/// Accumulates dW, db into `gp` and returns dx.
fn dense_backward(
    params: &[f64],
    gp: &mut [f64],
    off: usize,
    in_w: usize,
    out_w: usize,
    x: &[f64],
    dz: &[f64],
) -> Vec<f64> {
    let w = &params[off..off + in_w * out_w];
    for (row, &d) in dz.iter().enumerate() {
        let grow = &mut gp[off + row * in_w..off + (row + 1) * in_w];
        for (g, xi) in grow.iter_mut().zip(x.iter()) {
            *g += d * xi;
        }
    }
    let gb = &mut gp[off + in_w * out_w..off + in_w * out_w + out_w];
    for (g, &d) in gb.iter_mut().zip(dz.iter()) {
        *g += d;
    }
    let mut dx = vec![0.0; in_w];
    for (row, &d) in dz.iter().enumerate() {
        let wrow = &w[row * in_w..(row + 1) * in_w];
        for (g, wi) in dx.iter_mut().zip(wrow.iter()) {
            *g += d * wi;
        }
    }
    dx
}

pub(super) fn forward(
    cfg: &AttnConfig,
    time_features: usize,
    params: &[f64],
    input: &[f64],
    time: Option<f64>,
) -> Result<(Vec<f64>, AttnTape)> {
    if input.is_empty() || input.len() % cfg.token_width != 0 {
        return Err(CtrlFlowError::config(format!(
            "input length {} is not a multiple of token width {}",
            input.len(),
            cfg.token_width
        )));
    }
    let n = input.len() / cfg.token_width;
    let d = cfg.d_model;
    let off = offsets(cfg, time_features);
    let t_emb = time.map(|t| time_embed(t, time_features)).unwrap_or_default();

    let stacked: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut tok = input[i * cfg.token_width..(i + 1) * cfg.token_width].to_vec();
            tok.extend_from_slice(&t_emb);
            tok
        })
        .collect();
    let positional = temporal_encode(&(0..n).collect::<Vec<_>>(), d)?;
    let token_in = cfg.token_width + time_features;
    let mut x: Vec<Vec<f64>> = stacked
        .iter()
        .zip(positional.iter())
        .map(|(tok, pos)| {
            let mut e = dense(params, off.embed, token_in, d, tok);
            for (ei, pi) in e.iter_mut().zip(pos.iter()) {
                *ei += pi;
            }
            e
        })
        .collect();
    let mut hidden = vec![x.clone()];
    let mut blocks = Vec::with_capacity(cfg.blocks);
    let head_dim = d / cfg.heads;
    let scale = 1.0 / (head_dim as f64).sqrt();

    for (bi, bo) in off.blocks.iter().enumerate() {
        let q: Vec<Vec<f64>> = x.iter().map(|xi| dense(params, bo.wq, d, d, xi)).collect();
        let k: Vec<Vec<f64>> = x.iter().map(|xi| dense(params, bo.wk, d, d, xi)).collect();
        let v: Vec<Vec<f64>> = x.iter().map(|xi| dense(params, bo.wv, d, d, xi)).collect();

        let mut attn = vec![vec![vec![0.0; n]; n]; cfg.heads];
        let mut concat = vec![vec![0.0; d]; n];
        for h in 0..cfg.heads {
            let lo = h * head_dim;
            let hi = lo + head_dim;
            for i in 0..n {
                let mut scores = vec![0.0; n];
                for (j, s) in scores.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for (qe, ke) in q[i][lo..hi].iter().zip(k[j][lo..hi].iter()) {
                        acc += qe * ke;
                    }
                    *s = acc * scale;
                }
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - m).exp();
                    z += *s;
                }
                for (j, s) in scores.iter().enumerate() {
                    attn[h][i][j] = s / z;
                }
                for (j, &a) in attn[h][i].iter().enumerate() {
                    for (c, ve) in concat[i][lo..hi].iter_mut().zip(v[j][lo..hi].iter()) {
                        *c += a * ve;
                    }
                }
            }
        }
        let mut ffn_in = Vec::with_capacity(n);
        for (xi, ci) in x.iter().zip(concat.iter()) {
            let proj = dense(params, bo.wo, d, d, ci);
            let yi: Vec<f64> = xi.iter().zip(proj.iter()).map(|(a, b)| a + b).collect();
            ffn_in.push(yi);
        }
        let mut ffn_act = Vec::with_capacity(n);
        let mut x_out = Vec::with_capacity(n);
        for u in &ffn_in {
            let z1 = dense(params, bo.ffn1, d, 2 * d, u);
            let a1: Vec<f64> = z1.iter().map(|z| z.tanh()).collect();
            let f = dense(params, bo.ffn2, 2 * d, d, &a1);
            let out: Vec<f64> = u.iter().zip(f.iter()).map(|(a, b)| a + b).collect();
            ffn_act.push(a1);
            x_out.push(out);
        }
        if x_out.iter().flatten().any(|v| !v.is_finite()) {
            return Err(CtrlFlowError::overflow("attention block", Some(bi)));
        }
        blocks.push(BlockTape {
            q,
            k,
            v,
            attn,
            concat,
            ffn_in,
            ffn_act,
        });
        x = x_out;
        hidden.push(x.clone());
    }

    let mut out = Vec::with_capacity(n * cfg.out_width);
    for xi in &x {
        out.extend(dense(params, off.head, d, cfg.out_width, xi));
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(CtrlFlowError::overflow("attention head", None));
    }
    Ok((
        out,
        AttnTape {
            stacked,
            hidden,
            blocks,
        },
    ))
}

pub(super) fn backward(
    cfg: &AttnConfig,
    time_features: usize,
    params: &[f64],
    tape: &AttnTape,
    upstream: &[f64],
    grads: &mut Gradients,
) -> Result<()> {
    let n = tape.stacked.len();
    let d = cfg.d_model;
    if upstream.len() != n * cfg.out_width {
        return Err(CtrlFlowError::config("upstream gradient width mismatch"));
    }
    let off = offsets(cfg, time_features);
    let head_dim = d / cfg.heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let gp = &mut grads.params;

    let mut dx: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            dense_backward(
                params,
                gp,
                off.head,
                d,
                cfg.out_width,
                &tape.hidden[cfg.blocks][i],
                &upstream[i * cfg.out_width..(i + 1) * cfg.out_width],
            )
        })
        .collect();

    for (bi, bo) in off.blocks.iter().enumerate().rev() {
        let bt = &tape.blocks[bi];
        // FFN residual: x_out = u + W2 tanh(W1 u + b1) + b2.
        let mut du: Vec<Vec<f64>> = dx.clone();
        for i in 0..n {
            let da1 = dense_backward(params, gp, bo.ffn2, 2 * d, d, &bt.ffn_act[i], &dx[i]);
            let dz1: Vec<f64> = da1
                .iter()
                .zip(bt.ffn_act[i].iter())
                .map(|(g, a)| g * (1.0 - a * a))
                .collect();
            let dui = dense_backward(params, gp, bo.ffn1, d, 2 * d, &bt.ffn_in[i], &dz1);
            for (a, b) in du[i].iter_mut().zip(dui.iter()) {
                *a += b;
            }
        }
        // Attention residual: u = x + Wo concat + bo.
        let x_in = &tape.hidden[bi];
        let mut dxin = du.clone();
        let mut dconcat = Vec::with_capacity(n);
        for i in 0..n {
            dconcat.push(dense_backward(params, gp, bo.wo, d, d, &bt.concat[i], &du[i]));
        }
        let mut dq = vec![vec![0.0; d]; n];
        let mut dk = vec![vec![0.0; d]; n];
        let mut dv = vec![vec![0.0; d]; n];
        for h in 0..cfg.heads {
            let lo = h * head_dim;
            let hi = lo + head_dim;
            for i in 0..n {
                // concat[i][lo..hi] = sum_j attn[h][i][j] * v[j][lo..hi]
                let mut da = vec![0.0; n];
                for j in 0..n {
                    let a = bt.attn[h][i][j];
                    let mut acc = 0.0;
                    for (e, (dc, ve)) in dconcat[i][lo..hi]
                        .iter()
                        .zip(bt.v[j][lo..hi].iter())
                        .enumerate()
                    {
                        acc += dc * ve;
                        dv[j][lo + e] += a * dc;
                    }
                    da[j] = acc;
                }
                // Softmax backward: ds_j = a_j (da_j - sum_k da_k a_k).
                let dot: f64 = da
                    .iter()
                    .zip(bt.attn[h][i].iter())
                    .map(|(g, a)| g * a)
                    .sum();
                for j in 0..n {
                    let ds = bt.attn[h][i][j] * (da[j] - dot) * scale;
                    for e in 0..head_dim {
                        dq[i][lo + e] += ds * bt.k[j][lo + e];
                        dk[j][lo + e] += ds * bt.q[i][lo + e];
                    }
                }
            }
        }
        for i in 0..n {
            let dq_x = dense_backward(params, gp, bo.wq, d, d, &x_in[i], &dq[i]);
            let dk_x = dense_backward(params, gp, bo.wk, d, d, &x_in[i], &dk[i]);
            let dv_x = dense_backward(params, gp, bo.wv, d, d, &x_in[i], &dv[i]);
            for ((a, b), (c, e)) in dxin[i]
                .iter_mut()
                .zip(dq_x.iter())
                .zip(dk_x.iter().zip(dv_x.iter()))
            {
                *a += b + c + e;
            }
        }
        dx = dxin;
    }

    // Embedding (positional term is additive and parameter-free).
    let token_in = cfg.token_width + time_features;
    let mut dinput = vec![0.0; n * cfg.token_width];
    for i in 0..n {
        let dtok = dense_backward(params, gp, off.embed, token_in, d, &tape.stacked[i], &dx[i]);
        dinput[i * cfg.token_width..(i + 1) * cfg.token_width]
            .copy_from_slice(&dtok[..cfg.token_width]);
    }
    if grads.input.is_empty() {
        grads.input = dinput;
    } else {
        for (g, d) in grads.input.iter_mut().zip(dinput.iter()) {
            *g += d;
        }
    }
    Ok(())
}
