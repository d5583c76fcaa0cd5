use nalgebra::{DMatrix, DVector};

use crate::error::{CtrlFlowError, Result};

/// Linear time-invariant system `xdot = A x + B u` over `t in [0, T]`.
#[derive(Debug, Clone)]
pub struct LtiSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub horizon: f64,
}

impl LtiSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, horizon: f64) -> Result<Self> {
        if a.nrows() != a.ncols() || b.nrows() != a.nrows() {
            return Err(CtrlFlowError::config("LTI dimension mismatch"));
        }
        if horizon <= 0.0 || !horizon.is_finite() {
            return Err(CtrlFlowError::config("LTI horizon must be positive"));
        }
        if a.iter().chain(b.iter()).any(|x| !x.is_finite()) {
            return Err(CtrlFlowError::config("LTI entries must be finite"));
        }
        Ok(Self { a, b, horizon })
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    /// `e^{A t}` by scaling-and-squaring.
    pub fn expm(&self, t: f64) -> DMatrix<f64> {
        (self.a.clone() * t).exp()
    }
}

/// Controllability Gramian `W_c = int_0^T e^{At} B B^T e^{A^T t} dt` via
/// composite Simpson quadrature with `quad_nodes` panels.
pub fn lti_gramian(sys: &LtiSystem, quad_nodes: usize) -> Result<DMatrix<f64>> {
    if quad_nodes < 2 {
        return Err(CtrlFlowError::config("quadrature needs at least 2 panels"));
    }
    let n = sys.dim();
    let integrand = |t: f64| -> Result<DMatrix<f64>> {
        let e = sys.expm(t);
        if e.iter().any(|x| !x.is_finite()) {
            return Err(CtrlFlowError::overflow("matrix exponential", None));
        }
        let eb = &e * &sys.b;
        Ok(&eb * eb.transpose())
    };
    let mut w = DMatrix::zeros(n, n);
    let dt = sys.horizon / quad_nodes as f64;
    for k in 0..quad_nodes {
        let a = k as f64 * dt;
        let m = a + 0.5 * dt;
        let b = a + dt;
        w += (integrand(a)? + integrand(m)? * 4.0 + integrand(b)?) * (dt / 6.0);
    }
    Ok(w)
}

fn solve_spd(w: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    let eig = w.clone().symmetric_eigen();
    let lambda_min = eig.eigenvalues.min();
    if lambda_min <= super::EPS_PD {
        let idx = eig.eigenvalues.imin();
        let direction: Vec<f64> = eig.eigenvectors.column(idx).iter().cloned().collect();
        return Err(CtrlFlowError::Uncontrollable {
            lambda_min,
            direction,
        });
    }
    w.clone()
        .cholesky()
        .map(|c| c.solve(rhs))
        .ok_or_else(|| CtrlFlowError::domain("Cholesky failed on a PD Gramian"))
}

/// Minimum control energy `x0^T W_c^{-1} x0` to reach `x0` from the origin
/// over the horizon.
pub fn lti_min_energy(sys: &LtiSystem, x0: &[f64]) -> Result<f64> {
    let w = lti_gramian(sys, 64)?;
    let v = DVector::from_column_slice(x0);
    let y = solve_spd(&w, &v)?;
    Ok(v.dot(&y))
}

/// The minimum-energy open-loop input `u(t) = B^T e^{A^T (T - t)} W_c^{-1} x0`
/// that steers the origin to `x0` at `t = T`. Used to cross-check
/// [`lti_min_energy`] by explicit construction.
pub fn lti_min_energy_control(sys: &LtiSystem, x0: &[f64]) -> Result<impl Fn(f64) -> DVector<f64>> {
    let w = lti_gramian(sys, 64)?;
    let y = solve_spd(&w, &DVector::from_column_slice(x0))?;
    let a_t = sys.a.transpose();
    let b_t = sys.b.transpose();
    let horizon = sys.horizon;
    Ok(move |t: f64| &b_t * ((a_t.clone() * (horizon - t)).exp() * &y))
}
