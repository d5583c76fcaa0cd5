use serde::{Deserialize, Serialize};

use super::Field;
use crate::error::{CtrlFlowError, Result};
use crate::flow::VectorFieldModel;

/// Fixed-step integration scheme for the flow map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scheme {
    Euler,
    Midpoint,
}

/// Closure-backed field for oracles and tests.
pub struct FnField<F>(pub F);

impl<F> Field for FnField<F>
where
    F: Fn(&[f64], f64) -> Vec<f64> + Sync,
{
    fn velocity(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        Ok((self.0)(x, t))
    }
}

/// Field backed by a trained velocity model at a fixed trajectory length,
/// with the exact backward pass as its vector-Jacobian product.
pub struct ModelField<'a> {
    pub model: &'a VectorFieldModel,
    pub h: usize,
}

impl Field for ModelField<'_> {
    fn velocity(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.model.velocity(x, self.h, t)
    }

    fn vjp(&self, x: &[f64], t: f64, upstream: &[f64]) -> Result<Vec<f64>> {
        let (_, tape) = self.model.velocity_tape(x, self.h, t)?;
        Ok(self.model.backward(&tape, self.h, upstream)?.input)
    }
}

/// Numerical flow map `Phi^{t_from, t_to}` of `dx/dt = field(x, t)`.
/// `steps_per_unit` sets the grid density; integration runs backward when
/// `t_to < t_from`.
pub struct FlowMap<'a> {
    pub field: &'a dyn Field,
    pub steps_per_unit: usize,
    pub scheme: Scheme,
    /// Worker threads for Jacobian column sweeps.
    pub threads: usize,
}

impl<'a> FlowMap<'a> {
    pub fn new(field: &'a dyn Field, steps_per_unit: usize, scheme: Scheme) -> Result<Self> {
        if steps_per_unit == 0 {
            return Err(CtrlFlowError::config("flow map needs >= 1 step per unit time"));
        }
        Ok(Self {
            field,
            steps_per_unit,
            scheme,
            threads: 1,
        })
    }

    pub fn with_threads(mut self, threads: usize) -> Self {
        self.threads = threads.max(1);
        self
    }

    fn integrate(
        &self,
        x0: &[f64],
        t_from: f64,
        t_to: f64,
        record: bool,
    ) -> Result<(Vec<f64>, Vec<(f64, Vec<f64>)>)> {
        if !(t_from.is_finite() && t_to.is_finite()) {
            return Err(CtrlFlowError::config("flow times must be finite"));
        }
        if t_from == t_to {
            let states = if record {
                vec![(t_from, x0.to_vec())]
            } else {
                Vec::new()
            };
            return Ok((x0.to_vec(), states));
        }
        let span = t_to - t_from;
        let n = ((span.abs() * self.steps_per_unit as f64).ceil() as usize).max(1);
        let dt = span / n as f64;
        let mut x = x0.to_vec();
        let mut states = Vec::new();
        if record {
            states.reserve(n + 1);
            states.push((t_from, x.clone()));
        }
        for k in 0..n {
            let t = t_from + k as f64 * dt;
            match self.scheme {
                Scheme::Euler => {
                    let v = self.field.velocity(&x, t)?;
                    for (xi, vi) in x.iter_mut().zip(v.iter()) {
                        *xi += dt * vi;
                    }
                }
                Scheme::Midpoint => {
                    let v = self.field.velocity(&x, t)?;
                    let xm: Vec<f64> = x
                        .iter()
                        .zip(v.iter())
                        .map(|(xi, vi)| xi + 0.5 * dt * vi)
                        .collect();
                    let vm = self.field.velocity(&xm, t + 0.5 * dt)?;
                    for (xi, vi) in x.iter_mut().zip(vm.iter()) {
                        *xi += dt * vi;
                    }
                }
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(CtrlFlowError::overflow("flow integration state", Some(k)));
            }
            if record {
                let t_next = if k + 1 == n {
                    t_to
                } else {
                    t_from + (k + 1) as f64 * dt
                };
                states.push((t_next, x.clone()));
            }
        }
        Ok((x, states))
    }

    /// Terminal state of the flow started at `x0` at time `t_from`.
    pub fn advance(&self, x0: &[f64], t_from: f64, t_to: f64) -> Result<Vec<f64>> {
        self.integrate(x0, t_from, t_to, false).map(|(x, _)| x)
    }

    /// Full grid of `(t_k, x_k)` visited by [`FlowMap::advance`], endpoints
    /// included. Bitwise consistent with `advance`.
    pub fn advance_with_states(
        &self,
        x0: &[f64],
        t_from: f64,
        t_to: f64,
    ) -> Result<Vec<(f64, Vec<f64>)>> {
        self.integrate(x0, t_from, t_to, true).map(|(_, s)| s)
    }

    /// Directional derivative `DPhi(x0) dir` by central differences with an
    /// absolute probe radius of `delta`.
    pub fn jvp(
        &self,
        x0: &[f64],
        t_from: f64,
        t_to: f64,
        dir: &[f64],
        delta: f64,
    ) -> Result<Vec<f64>> {
        if dir.len() != x0.len() {
            return Err(CtrlFlowError::config("jvp direction width mismatch"));
        }
        if delta <= 0.0 {
            return Err(CtrlFlowError::config("jvp probe radius must be positive"));
        }
        let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Ok(vec![0.0; x0.len()]);
        }
        let eps = delta / norm;
        let plus: Vec<f64> = x0.iter().zip(dir.iter()).map(|(x, d)| x + eps * d).collect();
        let minus: Vec<f64> = x0.iter().zip(dir.iter()).map(|(x, d)| x - eps * d).collect();
        let fp = self.advance(&plus, t_from, t_to)?;
        let fm = self.advance(&minus, t_from, t_to)?;
        Ok(fp
            .iter()
            .zip(fm.iter())
            .map(|(p, m)| (p - m) / (2.0 * eps))
            .collect())
    }
}
