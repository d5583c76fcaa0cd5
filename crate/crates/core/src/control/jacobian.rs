use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::flowmap::FlowMap;
use super::Field;
use crate::error::{CtrlFlowError, Result};
use crate::parallel;

/// Finite-difference stencil for Jacobian columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FdMethod {
    /// `(f(x + d e_j) - f(x - d e_j)) / 2d`, second order.
    Central,
    /// `(f(x + d e_j) - f(x)) / d`, first order, half the integrations.
    Forward,
}

/// Finite-difference estimate of the flow Jacobian `DPhi^{t,T}(x)`.
#[derive(Debug, Clone)]
pub struct JacobianEstimate {
    pub matrix: DMatrix<f64>,
    pub delta: f64,
    pub method: FdMethod,
}

/// Jacobian of the flow map by differencing whole integrations, one column
/// per state dimension. Columns evaluate on `map.threads` workers.
pub fn flow_jacobian(
    map: &FlowMap,
    x: &[f64],
    t_from: f64,
    t_to: f64,
    delta: f64,
    method: FdMethod,
) -> Result<JacobianEstimate> {
    if delta <= 0.0 || !delta.is_finite() {
        return Err(CtrlFlowError::config("jacobian probe radius must be positive"));
    }
    let d = x.len();
    let base = match method {
        FdMethod::Central => None,
        FdMethod::Forward => Some(map.advance(x, t_from, t_to)?),
    };
    let columns = parallel::indexed_map(d, map.threads, |j| -> Result<Vec<f64>> {
        let mut probe = x.to_vec();
        match method {
            FdMethod::Central => {
                probe[j] = x[j] + delta;
                let plus = map.advance(&probe, t_from, t_to)?;
                probe[j] = x[j] - delta;
                let minus = map.advance(&probe, t_from, t_to)?;
                Ok(plus
                    .iter()
                    .zip(minus.iter())
                    .map(|(p, m)| (p - m) / (2.0 * delta))
                    .collect())
            }
            FdMethod::Forward => {
                probe[j] = x[j] + delta;
                let plus = map.advance(&probe, t_from, t_to)?;
                Ok(plus
                    .iter()
                    .zip(base.as_ref().unwrap().iter())
                    .map(|(p, b)| (p - b) / delta)
                    .collect())
            }
        }
    });
    let mut matrix = DMatrix::zeros(d, d);
    for (j, col) in columns.into_iter().enumerate() {
        matrix.set_column(j, &nalgebra::DVector::from_vec(col?));
    }
    Ok(JacobianEstimate {
        matrix,
        delta,
        method,
    })
}

struct Perturbed<'a> {
    base: &'a dyn Field,
    bump: &'a (dyn Fn(&[f64], f64) -> Vec<f64> + Sync),
}

impl Field for Perturbed<'_> {
    fn velocity(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let mut v = self.base.velocity(x, t)?;
        let b = (self.bump)(x, t);
        if b.len() != v.len() {
            return Err(CtrlFlowError::config("perturbation width mismatch"));
        }
        for (vi, bi) in v.iter_mut().zip(b.iter()) {
            *vi += bi;
        }
        Ok(v)
    }
}

/// Residual of the first-order perturbation expansion of the flow:
/// integrates `xdot = v(x, t) + b(x, t)` from `t_from` to `t_to` and
/// compares the endpoint against
/// `Phi(x0) + int DPhi^{s,t_to}(x_s) b(x_s, s) ds` with the integral along
/// the unperturbed path, so the return value is `O(||b||^2)` up to
/// integrator tolerance. `breaks` lists discontinuity times of `b`;
/// quadrature is composite Simpson per smooth segment.
pub fn variation_of_constants_check(
    map: &FlowMap,
    x0: &[f64],
    t_from: f64,
    t_to: f64,
    bump: &(dyn Fn(&[f64], f64) -> Vec<f64> + Sync),
    breaks: &[f64],
    panels_per_segment: usize,
    jvp_delta: f64,
) -> Result<f64> {
    if panels_per_segment == 0 {
        return Err(CtrlFlowError::config("quadrature needs >= 1 panel"));
    }
    let perturbed = Perturbed {
        base: map.field,
        bump,
    };
    let pert_map = FlowMap::new(&perturbed, map.steps_per_unit, map.scheme)?;
    let endpoint = pert_map.advance(x0, t_from, t_to)?;
    let base_end = map.advance(x0, t_from, t_to)?;
    let d = x0.len();

    let lo = t_from.min(t_to);
    let hi = t_from.max(t_to);
    let mut cuts: Vec<f64> = breaks
        .iter()
        .cloned()
        .filter(|s| *s > lo && *s < hi)
        .collect();
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut edges = Vec::with_capacity(cuts.len() + 2);
    edges.push(t_from);
    if t_to >= t_from {
        edges.extend(cuts);
    } else {
        edges.extend(cuts.into_iter().rev());
    }
    edges.push(t_to);

    // Walk the unperturbed path segment by segment, evaluating
    // DPhi^{s,T} b(x_s, s) on each Simpson node.
    let mut integral = vec![0.0; d];
    let mut x_s = x0.to_vec();
    let mut s_cur = t_from;
    for seg in edges.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let dt = (b - a) / (2 * panels_per_segment) as f64;
        let mut node_vals: Vec<Vec<f64>> = Vec::with_capacity(2 * panels_per_segment + 1);
        for k in 0..=2 * panels_per_segment {
            let s = if k == 2 * panels_per_segment {
                b
            } else {
                a + k as f64 * dt
            };
            x_s = map.advance(&x_s, s_cur, s)?;
            s_cur = s;
            // Evaluate b at the segment interior to pick the right piece on
            // shared edges: nudge endpoint samples inward by nothing; the
            // bump is sampled exactly at s except on the closing edge of a
            // segment, where the midpoint of the last panel already fixed
            // the piece. Sampling uses the segment midpoint side.
            let interior = 0.5 * (a + b);
            let s_eval = if (s == a && !breaks.contains(&a)) || (s == b && !breaks.contains(&b)) {
                s
            } else if s == a || s == b {
                // On a declared break: lean into this segment.
                s + (interior - s) * 1e-9
            } else {
                s
            };
            let bs = bump(&x_s, s_eval);
            if bs.len() != d {
                return Err(CtrlFlowError::config("perturbation width mismatch"));
            }
            node_vals.push(map.jvp(&x_s, s, t_to, &bs, jvp_delta)?);
        }
        for p in 0..panels_per_segment {
            let i = 2 * p;
            for dim in 0..d {
                integral[dim] += (dt / 3.0)
                    * (node_vals[i][dim] + 4.0 * node_vals[i + 1][dim] + node_vals[i + 2][dim]);
            }
        }
    }

    let gap: f64 = endpoint
        .iter()
        .zip(base_end.iter())
        .zip(integral.iter())
        .map(|((e, b), i)| {
            let r = e - (b + i);
            r * r
        })
        .sum();
    Ok(gap.sqrt())
}
