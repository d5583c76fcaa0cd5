use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha12Rng;
use serde::Serialize;

use super::flowmap::FlowMap;
use super::jacobian::{flow_jacobian, FdMethod};
use super::{ControlGain, Field, EPS_PD, EPS_REG};
use crate::error::{CtrlFlowError, Result};

/// Beyond this state width, dense Jacobian assembly is refused and the
/// matrix-free eigenvalue path applies.
pub const DENSE_DIM_LIMIT: usize = 512;

/// Controllability Gramian of a controlled flow, with the spectral data the
/// control correction needs.
#[derive(Debug, Clone)]
pub struct GramianReport {
    /// Dense Gramian; `None` when built matrix-free.
    pub matrix: Option<DMatrix<f64>>,
    /// Ascending. Matrix-free reports carry only the two extreme estimates.
    pub eigenvalues: Vec<f64>,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub nodes: usize,
    pub dim: usize,
    pub t_end: f64,
    /// `Phi^{t0,T}(tau0)` along the sampled trajectory.
    pub terminal: Vec<f64>,
    /// All-zero gains: the Gramian is identically zero and steering is
    /// impossible; reported rather than raised so callers can decide.
    pub degenerate: bool,
}

/// JSON view of a report: spectra and provenance, no dense matrix.
#[derive(Debug, Clone, Serialize)]
pub struct GramianSummary {
    pub eigenvalues: Vec<f64>,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub nodes: usize,
    pub dim: usize,
    pub degenerate: bool,
    pub energy_bound: Option<f64>,
}

impl GramianReport {
    pub fn summary(&self, energy_bound: Option<f64>) -> GramianSummary {
        GramianSummary {
            eigenvalues: self.eigenvalues.clone(),
            lambda_min: self.lambda_min,
            lambda_max: self.lambda_max,
            nodes: self.nodes,
            dim: self.dim,
            degenerate: self.degenerate,
            energy_bound,
        }
    }
}

/// States of the uncontrolled flow at the `k` composite-midpoint quadrature
/// nodes of `[t0, t_end]`, plus the terminal state at `t_end`. Node states
/// chain forward so the whole path costs one traversal.
pub fn quadrature_path(
    map: &FlowMap,
    x0: &[f64],
    t0: f64,
    t_end: f64,
    k: usize,
) -> Result<(Vec<(f64, Vec<f64>)>, Vec<f64>)> {
    if k == 0 {
        return Err(CtrlFlowError::config("quadrature needs >= 1 node"));
    }
    if t_end <= t0 {
        return Err(CtrlFlowError::config("quadrature span must be forward in time"));
    }
    let delta = (t_end - t0) / k as f64;
    let mut nodes = Vec::with_capacity(k);
    let mut x = x0.to_vec();
    let mut t_cur = t0;
    for i in 0..k {
        let t_node = t0 + (i as f64 + 0.5) * delta;
        x = map.advance(&x, t_cur, t_node)?;
        t_cur = t_node;
        nodes.push((t_node, x.clone()));
    }
    let terminal = map.advance(&x, t_cur, t_end)?;
    Ok((nodes, terminal))
}

fn check_inputs(
    nodes: &[(f64, Vec<f64>)],
    gains: &[ControlGain],
    span: (f64, f64),
    terminal: &[f64],
) -> Result<usize> {
    if nodes.is_empty() {
        return Err(CtrlFlowError::config("gramian needs >= 1 quadrature node"));
    }
    if gains.len() != nodes.len() {
        return Err(CtrlFlowError::config("one gain per quadrature node"));
    }
    let (t0, t_end) = span;
    if t_end <= t0 {
        return Err(CtrlFlowError::config("gramian span must be forward in time"));
    }
    let d = terminal.len();
    let delta = (t_end - t0) / nodes.len() as f64;
    for (i, (t, x)) in nodes.iter().enumerate() {
        if x.len() != d {
            return Err(CtrlFlowError::config("node state width mismatch"));
        }
        let expect = t0 + (i as f64 + 0.5) * delta;
        if (t - expect).abs() > 1e-6 * (1.0 + expect.abs()) {
            return Err(CtrlFlowError::config(
                "nodes must sit on composite-midpoint quadrature points",
            ));
        }
    }
    Ok(d)
}

/// Dense Gramian `N = sum_k w_k DPhi^{t_k,T} diag(b_k^2) DPhi^{t_k,T}^T`
/// over the supplied path nodes, `w_k` the midpoint-rule weight. Symmetry
/// and positive semidefiniteness are enforced on the result.
pub fn nonlinear_gramian(
    map: &FlowMap,
    nodes: &[(f64, Vec<f64>)],
    gains: &[ControlGain],
    span: (f64, f64),
    terminal: &[f64],
    delta: f64,
) -> Result<GramianReport> {
    let d = check_inputs(nodes, gains, span, terminal)?;
    if d > DENSE_DIM_LIMIT {
        return Err(CtrlFlowError::config(format!(
            "state width {d} exceeds the dense Jacobian limit {DENSE_DIM_LIMIT}; use the matrix-free path"
        )));
    }
    let w = (span.1 - span.0) / nodes.len() as f64;
    let mut n = DMatrix::zeros(d, d);
    for ((t_k, x_k), gain) in nodes.iter().zip(gains.iter()) {
        let jac = flow_jacobian(map, x_k, *t_k, span.1, delta, FdMethod::Central)?;
        // Column j of J scaled by b_j makes M with N_k = M M^T, symmetric
        // PSD by construction.
        let mut m = jac.matrix;
        let b = match gain {
            ControlGain::Scalar(s) => vec![*s; d],
            ControlGain::Diagonal(v) => {
                if v.len() != d {
                    return Err(CtrlFlowError::config("diagonal gain width mismatch"));
                }
                v.clone()
            }
        };
        for (j, bj) in b.iter().enumerate() {
            let col = m.column(j) * *bj;
            m.set_column(j, &col);
        }
        n += (&m * m.transpose()) * w;
    }
    let asym = (&n - n.transpose()).abs().max();
    if asym > 1e-8 {
        return Err(CtrlFlowError::domain(format!(
            "gramian asymmetry {asym:.3e} exceeds 1e-8"
        )));
    }
    let n = (&n + n.transpose()) * 0.5;
    let eig = n.clone().symmetric_eigen();
    let mut eigenvalues: Vec<f64> = eig.eigenvalues.iter().cloned().collect();
    eigenvalues.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let lambda_min = eigenvalues[0];
    let lambda_max = *eigenvalues.last().unwrap();
    if lambda_min < -1e-8 {
        return Err(CtrlFlowError::domain(format!(
            "gramian indefinite: lambda_min {lambda_min:.3e}"
        )));
    }
    let degenerate = gains.iter().all(|g| g.is_zero());
    Ok(GramianReport {
        matrix: Some(n),
        eigenvalues,
        lambda_min,
        lambda_max,
        nodes: nodes.len(),
        dim: d,
        t_end: span.1,
        terminal: terminal.to_vec(),
        degenerate,
    })
}

fn field_jvp(field: &dyn Field, x: &[f64], t: f64, dir: &[f64], delta: f64) -> Result<Vec<f64>> {
    let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Ok(vec![0.0; x.len()]);
    }
    let eps = delta / norm;
    let plus: Vec<f64> = x.iter().zip(dir.iter()).map(|(a, b)| a + eps * b).collect();
    let minus: Vec<f64> = x.iter().zip(dir.iter()).map(|(a, b)| a - eps * b).collect();
    let vp = field.velocity(&plus, t)?;
    let vm = field.velocity(&minus, t)?;
    Ok(vp
        .iter()
        .zip(vm.iter())
        .map(|(p, m)| (p - m) / (2.0 * eps))
        .collect())
}

/// `N y` without materializing `N`: per node, pull `y` back through the
/// linearized flow (adjoint recursion), scale by `diag(b^2)`, and push
/// forward again (tangent recursion). Both recursions walk the grid the
/// flow map records between the node and `t_end`.
pub fn gramian_matvec(
    map: &FlowMap,
    nodes: &[(f64, Vec<f64>)],
    gains: &[ControlGain],
    span: (f64, f64),
    y: &[f64],
    delta: f64,
) -> Result<Vec<f64>> {
    let d = y.len();
    let w = (span.1 - span.0) / nodes.len() as f64;
    let mut acc = vec![0.0; d];
    for ((t_k, x_k), gain) in nodes.iter().zip(gains.iter()) {
        let grid = map.advance_with_states(x_k, *t_k, span.1)?;
        // z = DPhi^T y via backward sweep.
        let mut z = y.to_vec();
        for step in (0..grid.len() - 1).rev() {
            let (t_j, x_j) = &grid[step];
            let dt = grid[step + 1].0 - t_j;
            let pull = map.field.vjp(x_j, *t_j, &z)?;
            for (zi, pi) in z.iter_mut().zip(pull.iter()) {
                *zi += dt * pi;
            }
        }
        // diag(b^2) z.
        let b2 = gain.squared(d);
        for (zi, b) in z.iter_mut().zip(b2.iter()) {
            *zi *= b;
        }
        // DPhi z via forward sweep.
        for step in 0..grid.len() - 1 {
            let (t_j, x_j) = &grid[step];
            let dt = grid[step + 1].0 - t_j;
            let push = field_jvp(map.field, x_j, *t_j, &z, delta)?;
            for (zi, pi) in z.iter_mut().zip(push.iter()) {
                *zi += dt * pi;
            }
        }
        for (a, zi) in acc.iter_mut().zip(z.iter()) {
            *a += w * zi;
        }
    }
    Ok(acc)
}

/// Extreme eigenvalue estimates of a symmetric PSD operator from power
/// iteration (largest) and shifted power iteration (smallest).
pub fn extreme_eigs(
    matvec: &mut dyn FnMut(&[f64]) -> Result<Vec<f64>>,
    dim: usize,
    iters: usize,
    rng: &mut ChaCha12Rng,
) -> Result<(f64, f64)> {
    use rand::Rng;
    if dim == 0 || iters == 0 {
        return Err(CtrlFlowError::config("eigenvalue estimation needs dim, iters >= 1"));
    }
    let normalize = |v: &mut Vec<f64>| -> f64 {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            for x in v.iter_mut() {
                *x /= n;
            }
        }
        n
    };
    let mut v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    normalize(&mut v);
    let mut lambda_max = 0.0;
    for _ in 0..iters {
        let mut nv = matvec(&v)?;
        lambda_max = v.iter().zip(nv.iter()).map(|(a, b)| a * b).sum();
        if normalize(&mut nv) == 0.0 {
            lambda_max = 0.0;
            break;
        }
        v = nv;
    }
    // Smallest eigenvalue of N is mu - largest of (mu I - N).
    let mu = lambda_max * 1.01 + 1e-12;
    let mut u: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    normalize(&mut u);
    let mut shifted = 0.0;
    for _ in 0..iters {
        let nu = matvec(&u)?;
        let mut su: Vec<f64> = u
            .iter()
            .zip(nu.iter())
            .map(|(ui, ni)| mu * ui - ni)
            .collect();
        shifted = u.iter().zip(su.iter()).map(|(a, b)| a * b).sum();
        if normalize(&mut su) == 0.0 {
            shifted = 0.0;
            break;
        }
        u = su;
    }
    Ok((mu - shifted, lambda_max))
}

/// Matrix-free Gramian report: extreme eigenvalues only, no dense matrix,
/// for state widths past [`DENSE_DIM_LIMIT`].
pub fn nonlinear_gramian_matfree(
    map: &FlowMap,
    nodes: &[(f64, Vec<f64>)],
    gains: &[ControlGain],
    span: (f64, f64),
    terminal: &[f64],
    delta: f64,
    iters: usize,
    rng: &mut ChaCha12Rng,
) -> Result<GramianReport> {
    let d = check_inputs(nodes, gains, span, terminal)?;
    let mut mv = |y: &[f64]| gramian_matvec(map, nodes, gains, span, y, delta);
    let (lambda_min, lambda_max) = extreme_eigs(&mut mv, d, iters, rng)?;
    let degenerate = gains.iter().all(|g| g.is_zero());
    Ok(GramianReport {
        matrix: None,
        eigenvalues: vec![lambda_min, lambda_max],
        lambda_min,
        lambda_max,
        nodes: nodes.len(),
        dim: d,
        t_end: span.1,
        terminal: terminal.to_vec(),
        degenerate,
    })
}

/// Control produced by the Gramian solve.
#[derive(Debug, Clone)]
pub struct ControlSolve {
    pub u: Vec<f64>,
    /// The Gramian was numerically singular and `eps_reg I` was added.
    pub ridge_used: bool,
}

fn spd_solve(n: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    n.clone().cholesky().map(|c| c.solve(rhs))
}

/// The minimum-energy control at `(x_t, t)` toward `tau1`:
/// `u = B^T DPhi^{t,T}(x_t)^T N^{-1} (tau1 - Phi^{t0,T}(tau0))`, solved
/// through the factorization, never an explicit inverse. A singular Gramian
/// raises unless `allow_ridge` opts into the flagged `N + eps_reg I` solve.
pub fn control_input(
    report: &GramianReport,
    map: &FlowMap,
    x_t: &[f64],
    gain: &ControlGain,
    tau1: &[f64],
    t: f64,
    delta: f64,
    allow_ridge: bool,
) -> Result<ControlSolve> {
    let n = report.matrix.as_ref().ok_or_else(|| {
        CtrlFlowError::domain("control solve needs a dense gramian report")
    })?;
    if tau1.len() != report.dim || x_t.len() != report.dim {
        return Err(CtrlFlowError::config("control solve width mismatch"));
    }
    let err = DVector::from_iterator(
        report.dim,
        tau1.iter().zip(report.terminal.iter()).map(|(a, b)| a - b),
    );
    let mut ridge_used = false;
    let y = if report.lambda_min > EPS_PD {
        match spd_solve(n, &err) {
            Some(y) => y,
            None if allow_ridge => {
                ridge_used = true;
                let ridged = n + DMatrix::identity(report.dim, report.dim) * EPS_REG;
                spd_solve(&ridged, &err)
                    .ok_or_else(|| CtrlFlowError::domain("ridged gramian still singular"))?
            }
            None => {
                return Err(CtrlFlowError::domain(
                    "cholesky failed on a gramian above the eigenvalue floor",
                ))
            }
        }
    } else if allow_ridge {
        ridge_used = true;
        let ridged = n + DMatrix::identity(report.dim, report.dim) * EPS_REG;
        spd_solve(&ridged, &err)
            .ok_or_else(|| CtrlFlowError::domain("ridged gramian still singular"))?
    } else {
        let eig = n.clone().symmetric_eigen();
        let idx = eig.eigenvalues.imin();
        return Err(CtrlFlowError::Uncontrollable {
            lambda_min: report.lambda_min,
            direction: eig.eigenvectors.column(idx).iter().cloned().collect(),
        });
    };
    let jac = flow_jacobian(map, x_t, t, report.t_end, delta, FdMethod::Central)?;
    let z = jac.matrix.transpose() * y;
    let u = gain.apply(z.as_slice());
    Ok(ControlSolve { u, ridge_used })
}

/// Upper bound on the steering energy toward `tau1`:
/// `||tau1 - Phi^{t0,T}(tau0)||^2 / lambda_min`, infinite when the Gramian
/// has no spectral floor.
pub fn control_energy_bound(report: &GramianReport, tau1: &[f64]) -> f64 {
    let err_sq: f64 = tau1
        .iter()
        .zip(report.terminal.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    if err_sq == 0.0 {
        return 0.0;
    }
    if report.lambda_min <= 0.0 {
        return f64::INFINITY;
    }
    err_sq / report.lambda_min
}

/// Diagnostic estimate of the field's Lipschitz constant: the largest
/// velocity-difference ratio over random state pairs near `center`. No
/// contract attaches to the value; it calibrates step counts.
pub fn estimate_lipschitz(
    field: &dyn Field,
    center: &[f64],
    radius: f64,
    times: &[f64],
    pairs: usize,
    rng: &mut ChaCha12Rng,
) -> Result<f64> {
    use rand::Rng;
    if radius <= 0.0 || pairs == 0 || times.is_empty() {
        return Err(CtrlFlowError::config("lipschitz probe needs radius, pairs, times"));
    }
    let mut best: f64 = 0.0;
    for _ in 0..pairs {
        let t = times[rng.random_range(0..times.len())];
        let x: Vec<f64> = center
            .iter()
            .map(|c| c + rng.random_range(-radius..radius))
            .collect();
        let y: Vec<f64> = center
            .iter()
            .map(|c| c + rng.random_range(-radius..radius))
            .collect();
        let dist: f64 = x
            .iter()
            .zip(y.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        if dist < 1e-12 {
            continue;
        }
        let vx = field.velocity(&x, t)?;
        let vy = field.velocity(&y, t)?;
        let vdist: f64 = vx
            .iter()
            .zip(vy.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        best = best.max(vdist / dist);
    }
    Ok(best)
}
