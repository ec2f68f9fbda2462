//! Classical solvers for the relaxed quadratic assignment problem.
//!
//! All solvers maximise `z^T M z` over (relaxations of) permutation matrices,
//! written as flat vectors over the association space. The central routine is
//! a proximal-gradient update with entropic regularisation: each iteration
//! computes `exp(w_p * M z + w_z * ln z)` and projects back onto the
//! doubly-stochastic set with a truncated Sinkhorn; the weights derive from a
//! step size `beta` and regulariser strength `lambda`. Annealed
//! softmax-projection and power-iteration baselines share the interface.

use crate::affinity::AffinityMatrix;
use crate::error::{Error, Result};

/// Denominator clamp for normalisations; keeps all-zero rows at zero instead
/// of producing NaN.
pub const NORM_EPS: f64 = 1e-30;

/// Offset added to block inputs before they are treated as assignment
/// likelihoods, keeping logarithms finite.
pub const QAP_LAYER_EPS: f64 = 1e-5;

/// Largest argument fed to the exponential in solver updates and kernels.
/// Far above anything a sane parameter regime produces, but low enough that
/// saturated updates and their row sums stay finite.
pub const EXP_ARG_MAX: f64 = 500.0;

/// `exp` with the argument clamped at [`EXP_ARG_MAX`]; identical to `exp`
/// below the clamp.
#[inline]
pub fn safe_exp(x: f64) -> f64 {
    x.min(EXP_ARG_MAX).exp()
}

/// Fixed-point weights of the proximal update, derived from step size and
/// regulariser: `w_p = beta / (1 + lambda beta)`, `w_z = 1 / (1 + lambda beta)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverParams {
    pub w_p: f64,
    pub w_z: f64,
}

impl SolverParams {
    pub fn from_beta_lambda(beta: f64, lambda: f64) -> Result<Self> {
        if !beta.is_finite() || beta <= 0.0 {
            return Err(Error::Config(format!("step size must be positive, got {beta}")));
        }
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(Error::Config(format!(
                "regulariser weight must be non-negative, got {lambda}"
            )));
        }
        let denom = 1.0 + lambda * beta;
        Ok(Self { w_p: beta / denom, w_z: 1.0 / denom })
    }
}

/// Divide each row of the flat `n1 x n2` matrix by its sum; returns the sums.
pub fn row_normalize(x: &mut [f64], n1: usize, n2: usize) -> Vec<f64> {
    debug_assert_eq!(x.len(), n1 * n2);
    let mut sums = Vec::with_capacity(n1);
    for i in 0..n1 {
        let row = &mut x[i * n2..(i + 1) * n2];
        let mut s = 0.0;
        for &v in row.iter() {
            s += v;
        }
        let s = s.max(NORM_EPS);
        for v in row.iter_mut() {
            *v /= s;
        }
        sums.push(s);
    }
    sums
}

/// Divide each column of the flat `n1 x n2` matrix by its sum; returns the sums.
pub fn col_normalize(x: &mut [f64], n1: usize, n2: usize) -> Vec<f64> {
    debug_assert_eq!(x.len(), n1 * n2);
    let mut sums = vec![0.0; n2];
    for i in 0..n1 {
        for j in 0..n2 {
            sums[j] += x[i * n2 + j];
        }
    }
    for s in sums.iter_mut() {
        *s = s.max(NORM_EPS);
    }
    for i in 0..n1 {
        for j in 0..n2 {
            x[i * n2 + j] /= sums[j];
        }
    }
    sums
}

/// Truncated Sinkhorn projection: `rounds` alternations of row then column
/// normalisation, in place.
pub fn sinkhorn(x: &mut [f64], n1: usize, n2: usize, rounds: usize) {
    for _ in 0..rounds {
        row_normalize(x, n1, n2);
        col_normalize(x, n1, n2);
    }
}

/// One proximal update in place: `z <- Sinkhorn(exp(w_p * Mz + w_z * ln z))`.
pub fn dpgm_step(
    m: &AffinityMatrix,
    z: &mut Vec<f64>,
    params: SolverParams,
    sinkhorn_rounds: usize,
) -> Result<()> {
    let mv = m.matvec(z)?;
    for (zr, &mr) in z.iter_mut().zip(&mv) {
        *zr = safe_exp(params.w_p * mr + params.w_z * zr.ln());
    }
    sinkhorn(z, m.n1(), m.n2(), sinkhorn_rounds);
    Ok(())
}

fn require_square(m: &AffinityMatrix) -> Result<usize> {
    if m.n1() != m.n2() {
        return Err(Error::Input(format!(
            "solver needs a square association space, got {}x{}",
            m.n1(),
            m.n2()
        )));
    }
    Ok(m.n1())
}

/// Uniform doubly-stochastic start `1/n` everywhere.
pub fn uniform_start(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n * n]
}

/// Full proximal solve from the uniform start; returns the relaxed assignment.
pub fn dpgm_solve(
    m: &AffinityMatrix,
    beta: f64,
    lambda: f64,
    iters: usize,
    sinkhorn_rounds: usize,
) -> Result<Vec<f64>> {
    Ok(dpgm_trace(m, beta, lambda, iters, sinkhorn_rounds)?.0)
}

/// Proximal solve that also records the regularised objective after every
/// iteration (index 0 holds the start value).
pub fn dpgm_trace(
    m: &AffinityMatrix,
    beta: f64,
    lambda: f64,
    iters: usize,
    sinkhorn_rounds: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = require_square(m)?;
    let params = SolverParams::from_beta_lambda(beta, lambda)?;
    let mut z = uniform_start(n);
    let mut trace = Vec::with_capacity(iters + 1);
    trace.push(objective(m, &z, lambda)?);
    for _ in 0..iters {
        dpgm_step(m, &mut z, params, sinkhorn_rounds)?;
        trace.push(objective(m, &z, lambda)?);
    }
    Ok((z, trace))
}

/// Annealing schedule for the softmax-projection solver: step `l` (1-based)
/// uses inverse temperature `beta0 * growth^(l-1)`.
pub fn gagm_schedule(beta0: f64, growth: f64, step: usize) -> f64 {
    beta0 * growth.powi(step as i32 - 1)
}

/// Graduated-assignment solve: `x <- Sinkhorn(exp(beta_l * M x))` with the
/// inverse temperature annealed upward each iteration.
pub fn gagm_solve(
    m: &AffinityMatrix,
    beta0: f64,
    growth: f64,
    iters: usize,
    sinkhorn_rounds: usize,
) -> Result<Vec<f64>> {
    if !beta0.is_finite() || beta0 <= 0.0 || !growth.is_finite() || growth < 1.0 {
        return Err(Error::Config(format!(
            "annealing needs beta0 > 0 and growth >= 1, got {beta0} and {growth}"
        )));
    }
    let n = require_square(m)?;
    let mut x = uniform_start(n);
    for l in 1..=iters {
        let beta = gagm_schedule(beta0, growth, l);
        let mv = m.matvec(&x)?;
        for (xr, &mr) in x.iter_mut().zip(&mv) {
            *xr = safe_exp(beta * mr);
        }
        sinkhorn(&mut x, n, n, sinkhorn_rounds);
    }
    Ok(x)
}

/// Spectral-matching solve: power iteration `x <- M x / ||M x||_2` from the
/// uniform start. The leading eigenvector of a non-negative symmetric
/// affinity is itself non-negative.
pub fn sm_solve(m: &AffinityMatrix, iters: usize) -> Result<Vec<f64>> {
    let n = require_square(m)?;
    let mut x = uniform_start(n);
    for _ in 0..iters {
        let mv = m.matvec(&x)?;
        let norm = mv.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 0.0 || !norm.is_finite() {
            return Err(Error::DegenerateAffinity(
                "power iteration collapsed: affinity maps the iterate to zero".into(),
            ));
        }
        for (xr, &mr) in x.iter_mut().zip(&mv) {
            *xr = mr / norm;
        }
    }
    Ok(x)
}

/// One network-layer solver step on a likelihood plane `v`: shift by
/// [`QAP_LAYER_EPS`], apply the proximal update with explicit weights, and
/// return the projected plane.
pub fn qap_layer(
    m: &AffinityMatrix,
    v: &[f64],
    w_p: f64,
    w_z: f64,
    sinkhorn_rounds: usize,
) -> Result<Vec<f64>> {
    let mut z: Vec<f64> = v.iter().map(|&x| x + QAP_LAYER_EPS).collect();
    let mv = m.matvec(&z)?;
    for (zr, &mr) in z.iter_mut().zip(&mv) {
        *zr = safe_exp(w_p * mr + w_z * zr.ln());
    }
    sinkhorn(&mut z, m.n1(), m.n2(), sinkhorn_rounds);
    Ok(z)
}

/// Quadratic score `z^T M z`.
pub fn quadratic_form(m: &AffinityMatrix, z: &[f64]) -> Result<f64> {
    let mv = m.matvec(z)?;
    Ok(z.iter().zip(&mv).map(|(a, b)| a * b).sum())
}

/// Regularised objective `-z^T M z + lambda * z^T ln z`, with `0 ln 0 = 0`.
pub fn objective(m: &AffinityMatrix, z: &[f64], lambda: f64) -> Result<f64> {
    let quad = quadratic_form(m, z)?;
    let ent: f64 = z.iter().map(|&v| if v > 0.0 { v * v.ln() } else { 0.0 }).sum();
    Ok(-quad + lambda * ent)
}

/// Bregman inner product `(z' - z)^T (ln z' + 1 - ln z)` between consecutive
/// iterates; strong convexity of negative entropy on the simplex bounds it
/// below by half the squared step length.
pub fn kl_descent_inner(z_new: &[f64], z_old: &[f64]) -> f64 {
    z_new
        .iter()
        .zip(z_old)
        .map(|(&a, &b)| (a - b) * (a.ln() + 1.0 - b.ln()))
        .sum()
}

/// Largest eigenvalue magnitude (spectral norm, the matrix being symmetric)
/// via power iteration from a uniform positive start.
pub fn spectral_norm(m: &AffinityMatrix, iters: usize) -> Result<f64> {
    let dim = m.dim();
    let mut x = vec![1.0 / (dim as f64).sqrt(); dim];
    let mut lambda = 0.0;
    for _ in 0..iters {
        let mv = m.matvec(&x)?;
        let norm = mv.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 0.0 || !norm.is_finite() {
            return Err(Error::DegenerateAffinity(
                "spectral norm iteration collapsed to zero".into(),
            ));
        }
        lambda = x.iter().zip(&mv).map(|(a, b)| a * b).sum();
        for (xr, &mr) in x.iter_mut().zip(&mv) {
            *xr = mr / norm;
        }
    }
    Ok(lambda.abs())
}

/// Largest provably stable step size scaled by a safety margin in `(0, 1]`:
/// the update is a descent step whenever `beta < 1 / (2 ||M||_2)`.
pub fn stable_beta(m: &AffinityMatrix, margin: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&margin) || margin == 0.0 {
        return Err(Error::Config(format!("margin must lie in (0, 1], got {margin}")));
    }
    let norm = spectral_norm(m, 200)?;
    if norm <= 0.0 {
        return Err(Error::DegenerateAffinity("affinity has zero spectral norm".into()));
    }
    Ok(margin / (2.0 * norm))
}
