//! Gain synthesis on a lifted discrete-time system: LQR through the
//! discrete algebraic Riccati equation, H∞ state feedback through its game
//! version, a γ search and a unit-circle norm evaluator.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::Serialize;
use thiserror::Error;

use crate::linalg::{
    eigenvalues, max_abs, max_sym_eigenvalue, min_sym_eigenvalue, row_space_basis, solve_stein,
    spectral_radius, symmetrize,
};
use crate::sampled::DiscretizedSystem;

const SDA_MAX_ITERS: usize = 100;
const NEWTON_MAX_STEPS: usize = 8;
const FIXED_POINT_MAX_ITERS: usize = 200_000;
const DEAD_INPUT_TOL: f64 = 1e-12;
const NORM_GRID: usize = 4096;
/// Control-weight regularizations tried in turn, relative to γ².
const INPUT_REGULARIZATION: [f64; 5] = [0.0, 1e-12, 1e-10, 1e-8, 1e-6];

/// Which acceptance check rejected an H∞ design.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum HinfCheck {
    Riccati,
    PNotPsd,
    H3NotPositive,
    H1NotPositive,
    Unstable,
    NormNotCertified,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthesisError {
    #[error("pair is not stabilizable or the Riccati iteration diverged: {0}")]
    NotStabilizable(String),
    #[error("cost is indefinite: {0}")]
    IndefiniteCost(String),
    #[error("gamma = {gamma:.6e} is infeasible ({check:?})")]
    GammaInfeasible { gamma: f64, check: HinfCheck },
    #[error("no feasible gamma found after {doublings} doublings of the upper bracket")]
    NoFeasibleGamma { doublings: usize },
    #[error("system is not Schur stable (spectral radius {radius})")]
    UnstableSystem { radius: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Residual of `AᵀPA − P − L S⁻¹ Lᵀ + Q` with `L = AᵀPB + N`,
/// `S = R + BᵀPB`, relative to the largest of the four terms.
pub fn dare_residual(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    n: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> f64 {
    let s = r + b.transpose() * p * b;
    let l = a.transpose() * p * b + n;
    let corr = if b.ncols() == 0 {
        DMatrix::zeros(a.nrows(), a.nrows())
    } else {
        match s.lu().solve(&l.transpose()) {
            Some(x) => &l * x,
            None => return f64::INFINITY,
        }
    };
    let apa = a.transpose() * p * a;
    let scale = max_abs(&apa)
        .max(max_abs(p))
        .max(max_abs(&corr))
        .max(max_abs(q))
        .max(f64::MIN_POSITIVE);
    let res = apa - p - corr + q;
    max_abs(&res) / scale
}

/// Removes input directions that touch neither the dynamics nor the cost.
/// Returns the basis `V` with `u = V ũ`.
fn live_inputs(b: &DMatrix<f64>, n: &DMatrix<f64>, r: &DMatrix<f64>) -> DMatrix<f64> {
    let m = b.ncols();
    let scale_b = max_abs(b).max(f64::MIN_POSITIVE);
    let scale_c = max_abs(n).max(max_abs(r)).max(f64::MIN_POSITIVE);
    let mut stacked = DMatrix::zeros(b.nrows() + n.nrows() + r.nrows(), m);
    stacked.view_mut((0, 0), b.shape()).copy_from(&(b / scale_b));
    stacked
        .view_mut((b.nrows(), 0), n.shape())
        .copy_from(&(n / scale_c));
    stacked
        .view_mut((b.nrows() + n.nrows(), 0), r.shape())
        .copy_from(&(r / scale_c));
    row_space_basis(&stacked, DEAD_INPUT_TOL)
}

fn well_conditioned(r: &DMatrix<f64>) -> bool {
    if r.nrows() == 0 {
        return true;
    }
    let sv = r.clone().singular_values();
    let top = sv.max();
    top > 0.0 && sv.min() > 1e-10 * top
}

/// Structure-preserving doubling for `AᵀXA − X − (AᵀXB + N)(R + BᵀXB)⁻¹(·)ᵀ + Q = 0`.
fn sda(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    n: &DMatrix<f64>,
    r: &DMatrix<f64>,
    shift: f64,
) -> Option<DMatrix<f64>> {
    let nx = a.nrows();
    let eye = DMatrix::<f64>::identity(nx, nx);
    let s = &eye * shift;
    let q1 = q + a.transpose() * &s * a - &s;
    let n1 = n + a.transpose() * &s * b;
    let r1 = r + b.transpose() * &s * b;
    let r1_lu = r1.lu();
    let ri_nt = r1_lu.solve(&n1.transpose())?;
    let ri_bt = r1_lu.solve(&b.transpose())?;
    let mut ak = a - b * &ri_nt;
    let mut hk = symmetrize(&(&q1 - &n1 * &ri_nt));
    let mut gk = symmetrize(&(b * &ri_bt));
    for _ in 0..SDA_MAX_ITERS {
        let w = &eye + &gk * &hk;
        let w_lu = w.lu();
        // A W⁻¹ = (W⁻ᵀ Aᵀ)ᵀ
        let aw = w_lu.clone().solve(&eye)?;
        let aw = &ak * aw;
        let a_next = &aw * &ak;
        let g_next = symmetrize(&(&gk + &aw * &gk * ak.transpose()));
        let h_next = symmetrize(&(&hk + ak.transpose() * &hk * w_lu.solve(&ak)?));
        if !h_next.iter().all(|v| v.is_finite()) || !g_next.iter().all(|v| v.is_finite()) {
            return None;
        }
        let delta = max_abs(&(&h_next - &hk));
        let done = delta <= 1e-15 * max_abs(&h_next).max(1.0) || max_abs(&a_next) <= 1e-300;
        ak = a_next;
        gk = g_next;
        hk = h_next;
        if done {
            return Some(symmetrize(&(hk + s)));
        }
    }
    None
}

/// Whether the feedback of all players, `−(R + BᵀPB)⁻¹(BᵀPA + Nᵀ)`,
/// makes `A` Schur stable.
fn stabilizing(a: &DMatrix<f64>, b: &DMatrix<f64>, n: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> bool {
    let s = r + b.transpose() * p * b;
    let rhs = b.transpose() * p * a + n.transpose();
    match s.lu().solve(&rhs) {
        Some(k) => spectral_radius(&(a - b * k)) < 1.0,
        None => false,
    }
}

/// Newton steps on the Riccati residual from an approximate solution.
/// Each step solves a Stein equation for the closed loop of the current
/// iterate; stops as soon as the residual stops shrinking.
fn newton_refine(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    n: &DMatrix<f64>,
    r: &DMatrix<f64>,
    mut p: DMatrix<f64>,
    tol: f64,
) -> Option<DMatrix<f64>> {
    let mut res = dare_residual(a, b, q, n, r, &p);
    for _ in 0..NEWTON_MAX_STEPS {
        if res <= tol {
            return Some(p);
        }
        let s = r + b.transpose() * &p * b;
        let l = a.transpose() * &p * b + n;
        let k = -s.lu().solve(&l.transpose())?;
        let closed = a + b * &k;
        if !(spectral_radius(&closed) < 1.0) {
            return None;
        }
        let nk = n * &k;
        let qk = q + &nk + nk.transpose() + k.transpose() * r * &k;
        let next = solve_stein(&closed, &symmetrize(&qk))?;
        let next_res = dare_residual(a, b, q, n, r, &next);
        if !(next_res < res) {
            return None;
        }
        p = next;
        res = next_res;
    }
    (res <= tol).then_some(p)
}

/// Value iteration from `X = 0`.
fn fixed_point(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    n: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Option<DMatrix<f64>> {
    let mut p = DMatrix::zeros(a.nrows(), a.nrows());
    for _ in 0..FIXED_POINT_MAX_ITERS {
        let s = r + b.transpose() * &p * b;
        let l = a.transpose() * &p * b + n;
        let corr = &l * s.lu().solve(&l.transpose())?;
        let next = symmetrize(&(a.transpose() * &p * a - corr + q));
        if !next.iter().all(|v| v.is_finite()) {
            return None;
        }
        let delta = max_abs(&(&next - &p));
        p = next;
        if delta <= 1e-15 * max_abs(&p).max(f64::MIN_POSITIVE) {
            return Some(p);
        }
    }
    None
}

/// Riccati solution without the LQR-specific acceptance checks. Handles a
/// singular `R` by a congruence shift and indefinite `R` (game problems).
/// Value iteration is only a sensible fallback when `R` is positive.
fn riccati(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    n: &DMatrix<f64>,
    r: &DMatrix<f64>,
    tol: f64,
    value_iteration: bool,
) -> Option<DMatrix<f64>> {
    let q = symmetrize(q);
    let r = symmetrize(r);
    if b.ncols() == 0 {
        return solve_stein(a, &q).map(|p| symmetrize(&p));
    }
    let mut shifts = Vec::new();
    if well_conditioned(&r) {
        shifts.push(0.0);
    }
    let btb = max_abs(&(b.transpose() * b)).max(f64::MIN_POSITIVE);
    // shifts that bring BᵀSB to the scale of R, then to the scale of the cost
    let weight = max_abs(&r).max(f64::MIN_POSITIVE) / btb;
    shifts.extend([weight, 100.0 * weight, 0.01 * weight, 1e4 * weight]);
    let base = max_abs(&q).max(max_abs(&r)).max(max_abs(n)).max(f64::MIN_POSITIVE) / btb;
    shifts.extend([base, 10.0 * base, 0.1 * base]);
    let accept = |p: &DMatrix<f64>| dare_residual(a, b, &q, n, &r, p) <= tol && stabilizing(a, b, n, &r, p);
    for c in shifts {
        if let Some(p) = sda(a, b, &q, n, &r, c) {
            if accept(&p) {
                return Some(p);
            }
            if let Some(p) = newton_refine(a, b, &q, n, &r, p, tol) {
                return Some(p);
            }
        }
    }
    if !value_iteration {
        return None;
    }
    fixed_point(a, b, &q, n, &r).filter(accept)
}

/// LQR gain `F = −(R + BᵀPB)⁻¹(BᵀPA + Nᵀ)` restricted to live inputs.
fn lqr_gain_live(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    n: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Option<DMatrix<f64>> {
    if b.ncols() == 0 {
        return Some(DMatrix::zeros(0, a.nrows()));
    }
    let s = r + b.transpose() * p * b;
    let rhs = b.transpose() * p * a + n.transpose();
    s.lu().solve(&rhs).map(|x| -x)
}

/// Stabilizing solution of the discrete algebraic Riccati equation
/// `AᵀPA − P − (AᵀPB + N)(R + BᵀPB)⁻¹(BᵀPA + Nᵀ) + Q = 0`.
pub fn dare_solve(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    n: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>, SynthesisError> {
    Ok(lqr_core(a, b, q, n, r)?.p)
}

/// Solution of the LQR problem on explicit matrices.
pub fn lqr_core(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    n: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<LqrResult, SynthesisError> {
    let (nx, nu) = b.shape();
    if a.shape() != (nx, nx) || q.shape() != (nx, nx) || n.shape() != (nx, nu) || r.shape() != (nu, nu) {
        return Err(SynthesisError::Dimension(format!(
            "A {:?}, B {:?}, Q {:?}, N {:?}, R {:?}",
            a.shape(),
            b.shape(),
            q.shape(),
            n.shape(),
            r.shape()
        )));
    }
    let mut stacked = DMatrix::zeros(nx + nu, nx + nu);
    stacked.view_mut((0, 0), (nx, nx)).copy_from(q);
    stacked.view_mut((0, nx), (nx, nu)).copy_from(n);
    stacked.view_mut((nx, 0), (nu, nx)).copy_from(&n.transpose());
    stacked.view_mut((nx, nx), (nu, nu)).copy_from(r);
    let min_eig = min_sym_eigenvalue(&stacked);
    if nx + nu > 0 && min_eig < -1e-10 * max_abs(&stacked).max(f64::MIN_POSITIVE) {
        return Err(SynthesisError::IndefiniteCost(format!(
            "cost matrix has eigenvalue {min_eig:.3e}"
        )));
    }

    let v = live_inputs(b, n, r);
    let b_live = b * &v;
    let n_live = n * &v;
    let r_live = symmetrize(&(v.transpose() * r * &v));
    let tol = 1e-9;
    let p = riccati(a, &b_live, q, &n_live, &r_live, tol, true).ok_or_else(|| {
        SynthesisError::NotStabilizable("Riccati solvers did not reach the residual tolerance".into())
    })?;
    let s = &r_live + b_live.transpose() * &p * &b_live;
    if b_live.ncols() > 0 && min_sym_eigenvalue(&s) <= 0.0 {
        return Err(SynthesisError::IndefiniteCost(
            "R + BᵀPB is not positive definite".into(),
        ));
    }
    let f_live = lqr_gain_live(a, &b_live, &n_live, &r_live, &p)
        .ok_or_else(|| SynthesisError::IndefiniteCost("R + BᵀPB is singular".into()))?;
    let f = &v * f_live;
    let closed = a + b * &f;
    let radius = spectral_radius(&closed);
    if !(radius < 1.0) {
        return Err(SynthesisError::NotStabilizable(format!(
            "closed-loop spectral radius {radius}"
        )));
    }
    let residual = dare_residual(a, b, q, n, r, &p);
    Ok(LqrResult {
        f,
        p,
        closed_loop_radius: radius,
        residual,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LqrResult {
    /// Feedback `u_k = F z_k`.
    pub f: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub closed_loop_radius: f64,
    pub residual: f64,
}

impl LqrResult {
    /// Optimal cost from the lifted initial state.
    pub fn cost(&self, z0: &DVector<f64>) -> f64 {
        z0.dot(&(&self.p * z0))
    }
}

pub fn lqr_design(disc: &DiscretizedSystem) -> Result<LqrResult, SynthesisError> {
    lqr_core(&disc.a2, &disc.b2u, &disc.q2, &disc.n2, &disc.r2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HinfResult {
    /// Feedback `u_k = F z_k`.
    pub f: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub gamma: f64,
    /// Closed-loop norm reported by [`hinf_norm`].
    pub certified_norm: f64,
    pub closed_loop_radius: f64,
    /// True when the gain with the opposite sign convention was the one
    /// that passed certification.
    pub sign_flipped: bool,
}

fn infeasible(gamma: f64, check: HinfCheck) -> SynthesisError {
    SynthesisError::GammaInfeasible { gamma, check }
}

/// H∞ state feedback for the output `y = C z + D_u u + D_w w`.
pub fn hinf_design(disc: &DiscretizedSystem, gamma: f64) -> Result<HinfResult, SynthesisError> {
    hinf_core(
        &disc.a2, &disc.b2u, &disc.b2w, &disc.c2, &disc.d2u, &disc.d2w, gamma,
    )
}

#[allow(clippy::too_many_arguments)]
pub fn hinf_core(
    a: &DMatrix<f64>,
    b_u: &DMatrix<f64>,
    b_w: &DMatrix<f64>,
    c: &DMatrix<f64>,
    d_u: &DMatrix<f64>,
    d_w: &DMatrix<f64>,
    gamma: f64,
) -> Result<HinfResult, SynthesisError> {
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(SynthesisError::Dimension(format!("gamma = {gamma} must be positive")));
    }
    let nx = a.nrows();
    let (nu, nw, ny) = (b_u.ncols(), b_w.ncols(), c.nrows());
    if b_u.nrows() != nx || b_w.nrows() != nx || c.ncols() != nx || d_u.shape() != (ny, nu) || d_w.shape() != (ny, nw) {
        return Err(SynthesisError::Dimension("H∞ plant blocks are inconsistent".into()));
    }
    // drop control directions that reach neither state nor output
    let v = live_inputs(b_u, &(c.transpose() * d_u), &(d_u.transpose() * d_u));
    let bu = b_u * &v;
    let du = d_u * &v;
    let nl = bu.ncols();

    let mut b = DMatrix::zeros(nx, nl + nw);
    b.view_mut((0, 0), (nx, nl)).copy_from(&bu);
    b.view_mut((0, nl), (nx, nw)).copy_from(b_w);
    let mut d = DMatrix::zeros(ny, nl + nw);
    d.view_mut((0, 0), (ny, nl)).copy_from(&du);
    d.view_mut((0, nl), (ny, nw)).copy_from(d_w);
    let mut first_err = None;
    for reg in INPUT_REGULARIZATION {
        match hinf_attempt(a, b_u, &v, &b, b_w, c, d_u, &d, d_w, gamma, reg * gamma * gamma) {
            Ok(res) => return Ok(res),
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    Err(first_err.expect("at least one attempt"))
}

/// One H∞ design attempt with `reg · I` added to the control weight.
/// Certification always uses the unregularized output.
#[allow(clippy::too_many_arguments)]
fn hinf_attempt(
    a: &DMatrix<f64>,
    b_u: &DMatrix<f64>,
    v: &DMatrix<f64>,
    b: &DMatrix<f64>,
    b_w: &DMatrix<f64>,
    c: &DMatrix<f64>,
    d_u: &DMatrix<f64>,
    d: &DMatrix<f64>,
    d_w: &DMatrix<f64>,
    gamma: f64,
    reg: f64,
) -> Result<HinfResult, SynthesisError> {
    let nx = a.nrows();
    let nw = b_w.ncols();
    let nl = v.ncols();
    let bu = b.columns(0, nl).into_owned();
    let du = d.columns(0, nl).into_owned();
    let q = c.transpose() * c;
    let n = c.transpose() * d;
    let mut r = d.transpose() * d;
    for j in 0..nl {
        r[(j, j)] += reg;
    }
    for j in 0..nw {
        r[(nl + j, nl + j)] -= gamma * gamma;
    }
    let p = riccati(a, b, &q, &n, &r, 1e-9, false).ok_or_else(|| infeasible(gamma, HinfCheck::Riccati))?;

    let p_scale = max_abs(&p).max(max_abs(&q)).max(f64::MIN_POSITIVE);
    if min_sym_eigenvalue(&p) < -1e-8 * p_scale {
        return Err(infeasible(gamma, HinfCheck::PNotPsd));
    }
    let h3 = symmetrize(&(DMatrix::identity(nw, nw) * (gamma * gamma) - d_w.transpose() * d_w - b_w.transpose() * &p * b_w));
    if nw > 0 && min_sym_eigenvalue(&h3) <= 0.0 {
        return Err(infeasible(gamma, HinfCheck::H3NotPositive));
    }
    let h3_lu = h3.clone().lu();
    let h2 = bu.transpose() * &p * b_w + du.transpose() * d_w;
    let h4 = b_w.transpose() * &p * a + d_w.transpose() * c;
    let (h3i_h2t, h3i_h4) = if nw > 0 {
        (
            h3_lu.solve(&h2.transpose()).ok_or_else(|| infeasible(gamma, HinfCheck::H3NotPositive))?,
            h3_lu.solve(&h4).ok_or_else(|| infeasible(gamma, HinfCheck::H3NotPositive))?,
        )
    } else {
        (DMatrix::zeros(0, nl), DMatrix::zeros(0, nx))
    };
    let h1 = symmetrize(&(bu.transpose() * &p * &bu + du.transpose() * &du + DMatrix::identity(nl, nl) * reg + &h2 * h3i_h2t));
    if nl > 0 && !(min_sym_eigenvalue(&h1) > 1e-14 * max_sym_eigenvalue(&h1).max(f64::MIN_POSITIVE)) {
        return Err(infeasible(gamma, HinfCheck::H1NotPositive));
    }
    let f_dist_live = if nl > 0 {
        h1.lu()
            .solve(&(bu.transpose() * &p * a + du.transpose() * c + &h2 * h3i_h4))
            .ok_or_else(|| infeasible(gamma, HinfCheck::H1NotPositive))?
    } else {
        DMatrix::zeros(0, nx)
    };
    let f_dist = v * f_dist_live;

    let mut last = HinfCheck::Unstable;
    for (sign, flipped) in [(-1.0, false), (1.0, true)] {
        let f = &f_dist * sign;
        let closed = a + b_u * &f;
        let radius = spectral_radius(&closed);
        if !(radius < 1.0) {
            last = HinfCheck::Unstable;
            continue;
        }
        let norm = match hinf_norm(&closed, b_w, &(c + d_u * &f), d_w) {
            Ok(v) => v,
            Err(_) => {
                last = HinfCheck::Unstable;
                continue;
            }
        };
        if norm < gamma {
            if flipped {
                log::info!("H∞ gain accepted with the opposite sign convention at gamma = {gamma:.6e}");
            }
            return Ok(HinfResult {
                f,
                p,
                gamma,
                certified_norm: norm,
                closed_loop_radius: radius,
                sign_flipped: flipped,
            });
        }
        last = HinfCheck::NormNotCertified;
        if f_dist.iter().all(|x| *x == 0.0) {
            break;
        }
    }
    Err(infeasible(gamma, last))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GammaSearch {
    /// Smallest feasible γ found (upper end of the final bracket).
    pub gamma_star: f64,
    /// Largest γ found infeasible; zero when every tried γ was feasible.
    pub gamma_infeasible: f64,
    pub design: HinfResult,
    pub evaluations: usize,
}

/// Geometric bisection for the smallest feasible γ. The search halves the
/// bracket at most 60 times looking for an infeasible γ, so a problem whose
/// infimum is 0 returns a γ* that is tiny relative to the initial bracket.
pub fn gamma_min(disc: &DiscretizedSystem, tol: f64) -> Result<GammaSearch, SynthesisError> {
    gamma_min_core(
        &disc.a2, &disc.b2u, &disc.b2w, &disc.c2, &disc.d2u, &disc.d2w, tol,
    )
}

#[allow(clippy::too_many_arguments)]
pub fn gamma_min_core(
    a: &DMatrix<f64>,
    b_u: &DMatrix<f64>,
    b_w: &DMatrix<f64>,
    c: &DMatrix<f64>,
    d_u: &DMatrix<f64>,
    d_w: &DMatrix<f64>,
    tol: f64,
) -> Result<GammaSearch, SynthesisError> {
    if !(tol.is_finite() && tol > 0.0) {
        return Err(SynthesisError::Dimension(format!("tolerance {tol} must be positive")));
    }
    let mut evaluations = 0;
    let mut design = |g: f64| {
        evaluations += 1;
        hinf_core(a, b_u, b_w, c, d_u, d_w, g)
    };

    // upper bracket from the LQR on the output energy
    let q = c.transpose() * c;
    let n = c.transpose() * d_u;
    let r = d_u.transpose() * d_u;
    let seed = lqr_core(a, b_u, &q, &n, &r)
        .ok()
        .and_then(|lqr| {
            hinf_norm(&(a + b_u * &lqr.f), b_w, &(c + d_u * &lqr.f), d_w).ok()
        })
        .or_else(|| hinf_norm(a, b_w, c, d_w).ok())
        .filter(|g| g.is_finite() && *g > 0.0)
        .unwrap_or(1.0);
    let mut hi = 2.0 * seed;
    let mut best = None;
    for _ in 0..=60 {
        match design(hi) {
            Ok(res) => {
                best = Some(res);
                break;
            }
            Err(_) => hi *= 2.0,
        }
    }
    let Some(mut best) = best else {
        return Err(SynthesisError::NoFeasibleGamma { doublings: 60 });
    };

    let mut lo = 0.0;
    for _ in 0..60 {
        let g = 0.5 * hi;
        match design(g) {
            Ok(res) => {
                hi = g;
                best = res;
            }
            Err(_) => {
                lo = g;
                break;
            }
        }
    }
    if lo > 0.0 {
        while hi / lo > 1.0 + tol {
            let g = (hi * lo).sqrt();
            match design(g) {
                Ok(res) => {
                    hi = g;
                    best = res;
                }
                Err(_) => lo = g,
            }
        }
    }
    Ok(GammaSearch {
        gamma_star: hi,
        gamma_infeasible: lo,
        design: best,
        evaluations,
    })
}

/// Solves `(z I − H) X = Y` for upper-Hessenberg `H` by elimination with
/// adjacent-row pivoting. `work` holds `zI − H` on exit in reduced form.
fn hessenberg_solve(
    h: &DMatrix<f64>,
    z: Complex64,
    rhs: &DMatrix<Complex64>,
    work: &mut DMatrix<Complex64>,
    out: &mut DMatrix<Complex64>,
) -> bool {
    let n = h.nrows();
    let k = rhs.ncols();
    for j in 0..n {
        for i in 0..n {
            work[(i, j)] = Complex64::new(-h[(i, j)], 0.0);
        }
        work[(j, j)] += z;
    }
    out.copy_from(rhs);
    for col in 0..n.saturating_sub(1) {
        let below = col + 1;
        if work[(below, col)].norm() > work[(col, col)].norm() {
            for j in col..n {
                work.swap((col, j), (below, j));
            }
            for j in 0..k {
                out.swap((col, j), (below, j));
            }
        }
        let pivot = work[(col, col)];
        if pivot.norm() == 0.0 {
            return false;
        }
        let factor = work[(below, col)] / pivot;
        if factor.norm() != 0.0 {
            for j in col..n {
                let v = work[(col, j)];
                work[(below, j)] -= factor * v;
            }
            for j in 0..k {
                let v = out[(col, j)];
                out[(below, j)] -= factor * v;
            }
        }
    }
    for i in (0..n).rev() {
        let pivot = work[(i, i)];
        if pivot.norm() == 0.0 {
            return false;
        }
        for j in 0..k {
            let mut acc = out[(i, j)];
            for l in i + 1..n {
                acc -= work[(i, l)] * out[(l, j)];
            }
            out[(i, j)] = acc / pivot;
        }
    }
    true
}

struct FrequencyResponse {
    h: DMatrix<f64>,
    b: DMatrix<Complex64>,
    c: DMatrix<Complex64>,
    d: DMatrix<Complex64>,
    work: DMatrix<Complex64>,
    sol: DMatrix<Complex64>,
}

impl FrequencyResponse {
    fn new(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>, d: &DMatrix<f64>) -> Self {
        let n = a.nrows();
        let (q, h) = if n > 0 {
            a.clone().hessenberg().unpack()
        } else {
            (DMatrix::zeros(0, 0), DMatrix::zeros(0, 0))
        };
        let to_c = |m: DMatrix<f64>| m.map(|v| Complex64::new(v, 0.0));
        Self {
            h,
            b: to_c(q.transpose() * b),
            c: to_c(c * &q),
            d: to_c(d.clone()),
            work: DMatrix::zeros(n, n),
            sol: DMatrix::zeros(n, b.ncols()),
        }
    }

    /// Largest singular value of the transfer matrix at `e^{jθ}`.
    fn gain(&mut self, theta: f64) -> f64 {
        let z = Complex64::from_polar(1.0, theta);
        let g = if self.h.nrows() == 0 {
            self.d.clone()
        } else {
            if !hessenberg_solve(&self.h, z, &self.b, &mut self.work, &mut self.sol) {
                return f64::INFINITY;
            }
            &self.c * &self.sol + &self.d
        };
        if g.is_empty() {
            return 0.0;
        }
        g.singular_values().max()
    }
}

/// Peak gain over the unit circle of `C (zI − A)⁻¹ B + D`.
pub fn hinf_norm(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
    d: &DMatrix<f64>,
) -> Result<f64, SynthesisError> {
    let n = a.nrows();
    if b.nrows() != n || c.ncols() != n || d.shape() != (c.nrows(), b.ncols()) {
        return Err(SynthesisError::Dimension("transfer matrix blocks are inconsistent".into()));
    }
    let eig = eigenvalues(a);
    let radius = eig.iter().fold(0.0_f64, |m, l| m.max(l.norm()));
    if !(radius < 1.0) {
        return Err(SynthesisError::UnstableSystem { radius });
    }
    let mut fr = FrequencyResponse::new(a, b, c, d);
    let pi = std::f64::consts::PI;
    let spacing = pi / (NORM_GRID - 1) as f64;
    let mut candidates: Vec<(f64, f64)> = (0..NORM_GRID)
        .map(|k| {
            let th = k as f64 * spacing;
            (th, fr.gain(th))
        })
        .collect();
    // lightly damped poles give peaks narrower than the grid spacing
    for l in &eig {
        let th = l.im.atan2(l.re).abs();
        candidates.push((th, fr.gain(th)));
    }
    let mut best = candidates.iter().fold(0.0_f64, |m, c| m.max(c.1));
    candidates.sort_by(|x, y| y.1.total_cmp(&x.1));
    let golden = 0.5 * (5f64.sqrt() - 1.0);
    for &(th, _) in candidates.iter().take(8) {
        let (mut lo, mut hi) = ((th - spacing).max(0.0), (th + spacing).min(pi));
        let mut x1 = hi - golden * (hi - lo);
        let mut x2 = lo + golden * (hi - lo);
        let mut f1 = fr.gain(x1);
        let mut f2 = fr.gain(x2);
        while hi - lo > 1e-12 {
            if f1 > f2 {
                hi = x2;
                x2 = x1;
                f2 = f1;
                x1 = hi - golden * (hi - lo);
                f1 = fr.gain(x1);
            } else {
                lo = x1;
                x1 = x2;
                f1 = f2;
                x2 = lo + golden * (hi - lo);
                f2 = fr.gain(x2);
            }
        }
        best = best.max(f1).max(f2);
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, v)
    }

    #[test]
    fn scalar_dare_closed_form() {
        let p = dare_solve(&m(1, 1, &[0.5]), &m(1, 1, &[1.0]), &m(1, 1, &[1.0]), &m(1, 1, &[0.0]), &m(1, 1, &[1.0])).unwrap();
        let exact = (0.25 + 4.0625f64.sqrt()) / 2.0;
        assert!((p[(0, 0)] - exact).abs() < 1e-12);
    }

    #[test]
    fn no_control_reduces_to_stein() {
        let p = dare_solve(&m(1, 1, &[0.5]), &m(1, 1, &[0.0]), &m(1, 1, &[1.0]), &m(1, 1, &[0.0]), &m(1, 1, &[1.0])).unwrap();
        assert!((p[(0, 0)] - 4.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn zero_state_cost_gives_zero_gain() {
        let a = m(2, 2, &[0.5, 0.1, 0.0, 0.3]);
        let b = m(2, 1, &[1.0, 0.5]);
        let res = lqr_core(&a, &b, &DMatrix::zeros(2, 2), &DMatrix::zeros(2, 1), &m(1, 1, &[2.0])).unwrap();
        assert!(max_abs(&res.p) < 1e-14);
        assert!(max_abs(&res.f) < 1e-14);
    }

    #[test]
    fn singular_input_weight_is_handled() {
        // the input is priced only through the state it drives
        let a = m(2, 2, &[0.9, 0.2, 0.0, 0.0]);
        let b = m(2, 1, &[0.0, 1.0]);
        let q = m(2, 2, &[1.0, 0.0, 0.0, 0.5]);
        let res = lqr_core(&a, &b, &q, &DMatrix::zeros(2, 1), &DMatrix::zeros(1, 1)).unwrap();
        assert!(res.residual < 1e-9);
        assert!(res.closed_loop_radius < 1.0);
    }

    #[test]
    fn indefinite_cost_rejected() {
        let err = lqr_core(&m(1, 1, &[0.5]), &m(1, 1, &[1.0]), &m(1, 1, &[-1.0]), &m(1, 1, &[0.0]), &m(1, 1, &[1.0]));
        assert!(matches!(err, Err(SynthesisError::IndefiniteCost(_))));
    }

    #[test]
    fn unstabilizable_rejected() {
        let err = lqr_core(&m(2, 2, &[1.5, 0.0, 0.0, 0.5]), &m(2, 1, &[0.0, 1.0]), &DMatrix::identity(2, 2), &DMatrix::zeros(2, 1), &m(1, 1, &[1.0]));
        assert!(matches!(err, Err(SynthesisError::NotStabilizable(_))));
    }

    #[test]
    fn norm_of_static_gain() {
        let z = DMatrix::zeros(0, 0);
        let v = hinf_norm(&z, &DMatrix::zeros(0, 1), &DMatrix::zeros(1, 0), &m(1, 1, &[3.0])).unwrap();
        assert_eq!(v, 3.0);
    }

    #[test]
    fn norm_of_scalar_lowpass() {
        let v = hinf_norm(&m(1, 1, &[0.5]), &m(1, 1, &[1.0]), &m(1, 1, &[1.0]), &m(1, 1, &[0.0])).unwrap();
        assert!((v - 2.0).abs() < 1e-12);
    }

    #[test]
    fn norm_finds_narrow_resonance() {
        // pole pair at radius 0.9999, angle 0.3001: far off the grid
        let (r, th) = (0.9999f64, 0.3001f64);
        let a = m(2, 2, &[r * th.cos(), -r * th.sin(), r * th.sin(), r * th.cos()]);
        let b = m(2, 1, &[1.0, 0.0]);
        let c = m(1, 2, &[1.0, 0.0]);
        let d = DMatrix::zeros(1, 1);
        let v = hinf_norm(&a, &b, &c, &d).unwrap();
        // dense reference sweep near the pole angle
        let mut fr = FrequencyResponse::new(&a, &b, &c, &d);
        let reference = (0..200_001)
            .map(|k| fr.gain(th - 1e-3 + 1e-8 * k as f64))
            .fold(0.0_f64, f64::max);
        assert!(v >= reference * (1.0 - 1e-6));
        assert!(v > 1000.0);
    }

    #[test]
    fn norm_rejects_unstable() {
        let err = hinf_norm(&m(1, 1, &[1.0]), &m(1, 1, &[1.0]), &m(1, 1, &[1.0]), &m(1, 1, &[0.0]));
        assert!(matches!(err, Err(SynthesisError::UnstableSystem { .. })));
    }

    #[test]
    fn hessenberg_solve_matches_dense() {
        let a = m(3, 3, &[0.2, 0.1, -0.3, 0.4, 0.1, 0.2, -0.1, 0.3, 0.5]);
        let b = m(3, 1, &[1.0, -1.0, 0.5]);
        let c = m(1, 3, &[0.3, 0.0, 1.0]);
        let d = m(1, 1, &[0.1]);
        let mut fr = FrequencyResponse::new(&a, &b, &c, &d);
        let z = Complex64::from_polar(1.0, 0.7);
        let ac = a.map(|v| Complex64::new(v, 0.0));
        let zi = DMatrix::<Complex64>::identity(3, 3) * z - ac;
        let x = zi.lu().solve(&b.map(|v| Complex64::new(v, 0.0))).unwrap();
        let g = c.map(|v| Complex64::new(v, 0.0)) * x + d.map(|v| Complex64::new(v, 0.0));
        assert!((fr.gain(0.7) - g[(0, 0)].norm()).abs() < 1e-13);
    }

    #[test]
    fn static_gamma_search() {
        let z = DMatrix::zeros(1, 1);
        let res = gamma_min_core(&z, &z, &z, &z, &z, &m(1, 1, &[2.0]), 1e-4).unwrap();
        assert!((res.gamma_star - 2.0).abs() <= 2e-4 * 2.0);
        assert!(res.gamma_infeasible <= 2.0 && res.gamma_infeasible > 1.99);
    }

    #[test]
    fn gamma_below_feedthrough_is_infeasible() {
        let z = DMatrix::zeros(1, 1);
        let err = hinf_core(&m(1, 1, &[0.5]), &m(1, 1, &[1.0]), &z, &m(1, 1, &[1.0]), &m(1, 1, &[0.1]), &m(1, 1, &[2.0]), 1.5);
        assert!(matches!(err, Err(SynthesisError::GammaInfeasible { .. })));
    }
}
