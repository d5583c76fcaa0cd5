//! Sinusoidal encodings: positions along a trajectory and the flow time `t`.

use crate::error::{CtrlFlowError, Result};

/// Encode integer positions as interleaved sine/cosine rows.
///
/// Row layout for position `p`: `(sin(p·w_0), cos(p·w_0), sin(p·w_1), ...)`
/// with geometric frequencies `w_k = 10000^(-2k/width)`, so position 0 maps to
/// `(0, 1, 0, 1, ...)`.
pub fn temporal_encode(positions: &[usize], width: usize) -> Result<Vec<Vec<f64>>> {
    if width == 0 || width % 2 != 0 {
        return Err(CtrlFlowError::config(format!(
            "temporal encoding width must be a positive even integer, got {width}"
        )));
    }
    let mut rows = Vec::with_capacity(positions.len());
    for &p in positions {
        let mut row = Vec::with_capacity(width);
        for k in 0..width / 2 {
            let freq = 10000f64.powf(-2.0 * k as f64 / width as f64);
            let arg = p as f64 * freq;
            row.push(arg.sin());
            row.push(arg.cos());
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Encode the flow time `t in [0,1]` as interleaved sine/cosine features with
/// octave frequencies, so nearby times stay distinguishable on [0,1].
pub fn time_embed(t: f64, width: usize) -> Vec<f64> {
    debug_assert!(width % 2 == 0, "time embedding width must be even");
    let mut out = Vec::with_capacity(width);
    for k in 0..width / 2 {
        let freq = std::f64::consts::TAU * (1 << k) as f64;
        out.push((freq * t).sin());
        out.push((freq * t).cos());
    }
    out
}
