//! Exact discretization of a linear system and its quadratic cost under a
//! zero-order-hold input that reaches the plant after a constant delay.
//!
//! The continuous plant is `ẋ = A x + B_u ū + B_w w`, `y = C x + D_u ū + D_w w`
//! with cost `∫ [x; ū]ᵀ [Q N; Nᵀ R] [x; ū] dt`. Samples are taken at `kh`;
//! the command `u_k` computed at `kh` is applied on `(kh + d, kh + h + d]`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg::{eigenvalues, expm, max_abs, solve_continuous_lyapunov, symmetrize};

/// Tolerance used to snap `d/h` onto an integer before splitting the delay.
const DELAY_SNAP: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SampledError {
    #[error("cost Lyapunov equation is ill posed: {0}")]
    IllPosedLyapunov(String),
    #[error("invalid sampling: {0}")]
    InvalidSampling(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Continuous-time plant with control input, disturbance and output.
#[derive(Debug, Clone, PartialEq)]
pub struct CtsSystem {
    pub a: DMatrix<f64>,
    pub b_u: DMatrix<f64>,
    pub b_w: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d_u: DMatrix<f64>,
    pub d_w: DMatrix<f64>,
}

impl CtsSystem {
    /// Plant without disturbance and output channels.
    pub fn state_only(a: DMatrix<f64>, b_u: DMatrix<f64>) -> Self {
        let n = a.nrows();
        let m = b_u.ncols();
        Self {
            a,
            b_u,
            b_w: DMatrix::zeros(n, 0),
            c: DMatrix::zeros(0, n),
            d_u: DMatrix::zeros(0, m),
            d_w: DMatrix::zeros(0, 0),
        }
    }

    pub fn n_x(&self) -> usize {
        self.a.nrows()
    }
    pub fn n_u(&self) -> usize {
        self.b_u.ncols()
    }
    pub fn n_w(&self) -> usize {
        self.b_w.ncols()
    }
    pub fn n_y(&self) -> usize {
        self.c.nrows()
    }

    pub fn validate(&self) -> Result<(), SampledError> {
        let (n, m, p, l) = (self.n_x(), self.n_u(), self.n_w(), self.n_y());
        let checks = [
            ("A", self.a.shape(), (n, n)),
            ("B_u", self.b_u.shape(), (n, m)),
            ("B_w", self.b_w.shape(), (n, p)),
            ("C", self.c.shape(), (l, n)),
            ("D_u", self.d_u.shape(), (l, m)),
            ("D_w", self.d_w.shape(), (l, p)),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(SampledError::Dimension(format!(
                    "{name} is {got:?}, expected {want:?}"
                )));
            }
        }
        Ok(())
    }
}

/// Quadratic running cost `[x; u]ᵀ [Q N; Nᵀ R] [x; u]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CtsCost {
    pub q: DMatrix<f64>,
    pub n: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl CtsCost {
    pub fn stacked(&self) -> DMatrix<f64> {
        stack_cost(&self.q, &self.n, &self.r)
    }

    fn validate(&self, n_x: usize, n_u: usize) -> Result<(), SampledError> {
        if self.q.shape() != (n_x, n_x) || self.n.shape() != (n_x, n_u) || self.r.shape() != (n_u, n_u) {
            return Err(SampledError::Dimension(format!(
                "cost blocks {:?}, {:?}, {:?} do not fit n_x = {n_x}, n_u = {n_u}",
                self.q.shape(),
                self.n.shape(),
                self.r.shape()
            )));
        }
        let s = self.stacked();
        let asym = max_abs(&(&s - s.transpose()));
        if asym > 1e-12 * max_abs(&s).max(f64::MIN_POSITIVE) {
            return Err(SampledError::Dimension(format!(
                "cost matrix is not symmetric (asymmetry {asym:.3e})"
            )));
        }
        Ok(())
    }
}

fn stack_cost(q: &DMatrix<f64>, n: &DMatrix<f64>, r: &DMatrix<f64>) -> DMatrix<f64> {
    let (nx, nu) = n.shape();
    let mut s = DMatrix::zeros(nx + nu, nx + nu);
    s.view_mut((0, 0), (nx, nx)).copy_from(q);
    s.view_mut((0, nx), (nx, nu)).copy_from(n);
    s.view_mut((nx, 0), (nu, nx)).copy_from(&n.transpose());
    s.view_mut((nx, nx), (nu, nu)).copy_from(r);
    s
}

/// Solution of `Q = PA + AᵀP`, `N = AᵀM + PB`, `R = BᵀM + MᵀB + U`.
#[derive(Debug, Clone, PartialEq)]
pub struct Pmu {
    pub p: DMatrix<f64>,
    pub m: DMatrix<f64>,
    pub u: DMatrix<f64>,
}

impl Pmu {
    /// Largest relative residual over the three defining equations.
    pub fn residual(&self, sys: &CtsSystem, cost: &CtsCost) -> f64 {
        let a = &sys.a;
        let b = &sys.b_u;
        let rel = |res: DMatrix<f64>, target: &DMatrix<f64>, scale: f64| {
            max_abs(&res) / (max_abs(target) + scale).max(f64::MIN_POSITIVE)
        };
        let pa = &self.p * a;
        let r1 = rel(&pa + pa.transpose() - &cost.q, &cost.q, max_abs(&pa));
        let atm = a.transpose() * &self.m;
        let pb = &self.p * b;
        let r2 = rel(&atm + &pb - &cost.n, &cost.n, max_abs(&atm).max(max_abs(&pb)));
        let btm = b.transpose() * &self.m;
        let r3 = rel(&btm + btm.transpose() + &self.u - &cost.r, &cost.r, max_abs(&btm));
        r1.max(r2).max(r3)
    }
}

/// `(Φ(α), Γ(α)) = (exp(αA), ∫₀^α exp(As) ds)` from one exponential of
/// the block matrix `α [[A, I], [0, 0]]`.
pub fn phi_gamma(a: &DMatrix<f64>, alpha: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let mut aug = DMatrix::zeros(2 * n, 2 * n);
    aug.view_mut((0, 0), (n, n)).copy_from(&(a * alpha));
    aug.view_mut((0, n), (n, n))
        .copy_from(&(DMatrix::identity(n, n) * alpha));
    let e = expm(&aug);
    (
        e.view((0, 0), (n, n)).into_owned(),
        e.view((0, n), (n, n)).into_owned(),
    )
}

/// Solves for `(P, M, U)`. Needs `A` nonsingular with no eigenvalue pair
/// summing to zero.
pub fn solve_pmu(sys: &CtsSystem, cost: &CtsCost) -> Result<Pmu, SampledError> {
    sys.validate()?;
    cost.validate(sys.n_x(), sys.n_u())?;
    let a = &sys.a;
    let scale = max_abs(a).max(1.0);
    let eig = eigenvalues(a);
    for (i, li) in eig.iter().enumerate() {
        if li.norm() <= 1e-12 * scale {
            return Err(SampledError::IllPosedLyapunov(format!(
                "A is singular (eigenvalue {li})"
            )));
        }
        for lj in &eig[i..] {
            if (li + lj).norm() <= 1e-10 * scale {
                return Err(SampledError::IllPosedLyapunov(format!(
                    "eigenvalues {li} and {lj} are mirrored about the imaginary axis"
                )));
            }
        }
    }
    let p = solve_continuous_lyapunov(a, &symmetrize(&cost.q))
        .ok_or_else(|| SampledError::IllPosedLyapunov("Lyapunov operator is singular".into()))?;
    let rhs = &cost.n - &p * &sys.b_u;
    let m = a
        .transpose()
        .lu()
        .solve(&rhs)
        .ok_or_else(|| SampledError::IllPosedLyapunov("A is singular".into()))?;
    let btm = sys.b_u.transpose() * &m;
    let u = symmetrize(&(&cost.r - &btm - btm.transpose()));
    Ok(Pmu { p, m, u })
}

/// Cost kernel `Ψ(b)` of one held-input interval of length `b`:
/// the integral of the running cost equals `[x(a); û]ᵀ Ψ(b) [x(a); û]`.
pub fn psi_blocks(pmu: &Pmu, sys: &CtsSystem, b: f64) -> DMatrix<f64> {
    let (phi, gamma) = phi_gamma(&sys.a, b);
    let gb = gamma * &sys.b_u;
    let p = &pmu.p;
    let m = &pmu.m;
    let psi1 = phi.transpose() * p * &phi - p;
    let psi3 = phi.transpose() * p * &gb + phi.transpose() * m - m;
    let mtgb = m.transpose() * &gb;
    let psi2 = gb.transpose() * p * &gb + &mtgb + mtgb.transpose() + &pmu.u * b;
    symmetrize(&stack_cost(&psi1, &psi3, &psi2))
}

/// Splits `d > 0` into `q h + r` with `q = max{k : k h < d}` and
/// `0 < r ≤ h`. Delays within a relative `1e-9` of a multiple of `h`
/// are treated as that multiple.
pub fn delay_split(h: f64, d: f64) -> Result<(usize, f64), SampledError> {
    if !(h.is_finite() && h > 0.0) {
        return Err(SampledError::InvalidSampling(format!("period h = {h} must be positive")));
    }
    if !(d.is_finite() && d > 0.0) {
        return Err(SampledError::InvalidSampling(format!("delay d = {d} must be positive")));
    }
    let ratio = d / h;
    let nearest = ratio.round();
    let (q, r) = if nearest >= 1.0 && (ratio - nearest).abs() <= DELAY_SNAP * nearest {
        (nearest as usize - 1, h)
    } else {
        let q = ratio.ceil() as usize - 1;
        (q, d - q as f64 * h)
    };
    Ok((q, r))
}

/// Lifted discrete-time system and cost.
///
/// With a delay the state is `z_k = [x_k; u_{k−q−1}; …; u_{k−1}]`;
/// without one it is `x_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretizedSystem {
    pub a2: DMatrix<f64>,
    pub b2u: DMatrix<f64>,
    pub b2w: DMatrix<f64>,
    pub c2: DMatrix<f64>,
    pub d2u: DMatrix<f64>,
    pub d2w: DMatrix<f64>,
    pub q2: DMatrix<f64>,
    pub n2: DMatrix<f64>,
    pub r2: DMatrix<f64>,
    pub h: f64,
    pub d: f64,
    pub q: usize,
    pub r: f64,
    pub n_x: usize,
}

impl DiscretizedSystem {
    pub fn n_z(&self) -> usize {
        self.a2.nrows()
    }
    pub fn n_u(&self) -> usize {
        self.b2u.ncols()
    }
    pub fn n_w(&self) -> usize {
        self.b2w.ncols()
    }
    pub fn has_delay(&self) -> bool {
        self.d > 0.0
    }
    /// Number of stored past inputs.
    pub fn memory_slots(&self) -> usize {
        if self.has_delay() {
            self.q + 1
        } else {
            0
        }
    }

    pub fn cost_matrix(&self) -> DMatrix<f64> {
        stack_cost(&self.q2, &self.n2, &self.r2)
    }

    /// Builds `z` from a plant state and the past inputs, oldest first.
    pub fn lifted_state(&self, x: &DVector<f64>, history: &[DVector<f64>]) -> DVector<f64> {
        assert_eq!(x.len(), self.n_x, "plant state length");
        assert_eq!(history.len(), self.memory_slots(), "input history length");
        let nu = self.n_u();
        let mut z = DVector::zeros(self.n_z());
        z.rows_mut(0, self.n_x).copy_from(x);
        for (j, u) in history.iter().enumerate() {
            z.rows_mut(self.n_x + j * nu, nu).copy_from(u);
        }
        z
    }
}

/// Lifts the plant and cost to the sampled, delayed setting.
pub fn discretize(sys: &CtsSystem, cost: &CtsCost, h: f64, d: f64) -> Result<DiscretizedSystem, SampledError> {
    if !(h.is_finite() && h > 0.0) {
        return Err(SampledError::InvalidSampling(format!("period h = {h} must be positive")));
    }
    if !(d.is_finite() && d >= 0.0) {
        return Err(SampledError::InvalidSampling(format!("delay d = {d} must be non-negative")));
    }
    let pmu = solve_pmu(sys, cost)?;
    let (n, nu, nw, ny) = (sys.n_x(), sys.n_u(), sys.n_w(), sys.n_y());
    let (phi_h, gamma_h) = phi_gamma(&sys.a, h);
    let b2w_x = &gamma_h * &sys.b_w;

    if d == 0.0 {
        let psi = psi_blocks(&pmu, sys, h);
        return Ok(DiscretizedSystem {
            a2: phi_h,
            b2u: &gamma_h * &sys.b_u,
            b2w: b2w_x,
            c2: sys.c.clone(),
            d2u: sys.d_u.clone(),
            d2w: sys.d_w.clone(),
            q2: psi.view((0, 0), (n, n)).into_owned(),
            n2: psi.view((0, n), (n, nu)).into_owned(),
            r2: psi.view((n, n), (nu, nu)).into_owned(),
            h,
            d,
            q: 0,
            r: 0.0,
            n_x: n,
        });
    }

    let (q, r) = delay_split(h, d)?;
    let nz = n + (q + 1) * nu;
    let (phi_r, gamma_r) = phi_gamma(&sys.a, r);
    let (phi_hr, gamma_hr) = phi_gamma(&sys.a, h - r);
    let gamma1 = &phi_hr * &gamma_r * &sys.b_u;
    let gamma0 = &gamma_hr * &sys.b_u;

    let mut a2 = DMatrix::zeros(nz, nz);
    let mut b2u = DMatrix::zeros(nz, nu);
    a2.view_mut((0, 0), (n, n)).copy_from(&phi_h);
    a2.view_mut((0, n), (n, nu)).copy_from(&gamma1);
    if q == 0 {
        b2u.view_mut((0, 0), (n, nu)).copy_from(&gamma0);
    } else {
        a2.view_mut((0, n + nu), (n, nu)).copy_from(&gamma0);
        for j in 0..q {
            a2.view_mut((n + j * nu, n + (j + 1) * nu), (nu, nu))
                .copy_from(&DMatrix::identity(nu, nu));
        }
    }
    b2u.view_mut((n + q * nu, 0), (nu, nu))
        .copy_from(&DMatrix::identity(nu, nu));

    let mut b2w = DMatrix::zeros(nz, nw);
    b2w.view_mut((0, 0), (n, nw)).copy_from(&b2w_x);

    // the input acting right after the sample is the oldest stored one
    let mut c2 = DMatrix::zeros(ny, nz);
    c2.view_mut((0, 0), (ny, n)).copy_from(&sys.c);
    c2.view_mut((0, n), (ny, nu)).copy_from(&sys.d_u);

    // cost over [x_k, u_{k−q−1}, u_{k−q}]: one held interval of length r,
    // then one of length h − r started from the propagated state
    let psi_r = psi_blocks(&pmu, sys, r);
    let psi_hr = psi_blocks(&pmu, sys, h - r);
    let mut phi1 = DMatrix::zeros(n + nu, n + 2 * nu);
    phi1.view_mut((0, 0), (n, n)).copy_from(&phi_r);
    phi1.view_mut((0, n), (n, nu)).copy_from(&(&gamma_r * &sys.b_u));
    phi1.view_mut((n, n + nu), (nu, nu))
        .copy_from(&DMatrix::identity(nu, nu));
    let mut c3 = phi1.transpose() * &psi_hr * &phi1;
    let mut head = c3.view_mut((0, 0), (n + nu, n + nu));
    head += &psi_r;
    let c3 = symmetrize(&c3);

    let mut full = DMatrix::zeros(nz + nu, nz + nu);
    // slot of u_{k−q}: memory slot 1, or the fresh input when q = 0
    let idx: Vec<usize> = (0..n + nu)
        .chain((0..nu).map(|j| if q == 0 { nz + j } else { n + nu + j }))
        .collect();
    for (i, &gi) in idx.iter().enumerate() {
        for (j, &gj) in idx.iter().enumerate() {
            full[(gi, gj)] += c3[(i, j)];
        }
    }

    Ok(DiscretizedSystem {
        a2,
        b2u,
        b2w,
        c2,
        d2u: DMatrix::zeros(ny, nu),
        d2w: sys.d_w.clone(),
        q2: full.view((0, 0), (nz, nz)).into_owned(),
        n2: full.view((0, nz), (nz, nu)).into_owned(),
        r2: full.view((nz, nz), (nu, nu)).into_owned(),
        h,
        d,
        q,
        r,
        n_x: n,
    })
}

/// Independent reference computations on the continuous plant.
pub mod oracle {
    use super::*;

    /// Sampled command sequence with the commands issued before `t = 0`.
    #[derive(Debug, Clone, PartialEq)]
    pub struct HeldInputs {
        /// `u_{−p}, …, u_{−1}`, oldest first.
        pub history: Vec<DVector<f64>>,
        /// `u_0, u_1, …`
        pub inputs: Vec<DVector<f64>>,
        /// `w_0, w_1, …`; missing samples are zero.
        pub disturbances: Vec<DVector<f64>>,
    }

    impl HeldInputs {
        fn command(&self, k: i64, n_u: usize) -> DVector<f64> {
            if k < 0 {
                let idx = self.history.len() as i64 + k;
                if idx < 0 {
                    DVector::zeros(n_u)
                } else {
                    self.history[idx as usize].clone()
                }
            } else {
                self.inputs
                    .get(k as usize)
                    .cloned()
                    .unwrap_or_else(|| DVector::zeros(n_u))
            }
        }

        fn disturbance(&self, k: usize, n_w: usize) -> DVector<f64> {
            self.disturbances
                .get(k)
                .cloned()
                .unwrap_or_else(|| DVector::zeros(n_w))
        }
    }

    /// Intervals `[t0, t1]` on which both the delayed command and the
    /// disturbance are constant, over `[0, steps·h]`.
    fn segments(h: f64, d: f64, steps: usize, inputs: &HeldInputs, n_u: usize, n_w: usize) -> Vec<(f64, f64, DVector<f64>, DVector<f64>)> {
        let offset = if d == 0.0 {
            0.0
        } else {
            delay_split(h, d).expect("valid delay").1
        };
        let mut out = Vec::new();
        for k in 0..steps {
            let t0 = k as f64 * h;
            let w = inputs.disturbance(k, n_w);
            // applied command index at a time just after t: ceil((t − d)/h) − 1
            let applied = |t: f64| {
                let x = (t - d) / h;
                let snapped = if (x - x.round()).abs() < 1e-9 { x.round() } else { x };
                snapped.ceil() as i64 - 1
            };
            if offset > 0.0 && offset < h {
                let tm = t0 + offset;
                out.push((t0, tm, inputs.command(applied(0.5 * (t0 + tm)), n_u), w.clone()));
                out.push((tm, t0 + h, inputs.command(applied(0.5 * (tm + t0 + h)), n_u), w));
            } else {
                out.push((t0, t0 + h, inputs.command(applied(t0 + 0.5 * h), n_u), w));
            }
        }
        out
    }

    /// Plant states at `kh`, `k = 0..=steps`, from classic RK4 with
    /// `substeps` steps per constant-input interval.
    pub fn rk4_trajectory(
        sys: &CtsSystem,
        h: f64,
        d: f64,
        inputs: &HeldInputs,
        x0: &DVector<f64>,
        steps: usize,
        substeps: usize,
    ) -> Vec<DVector<f64>> {
        let (nu, nw) = (sys.n_u(), sys.n_w());
        let mut x = x0.clone();
        let mut out = vec![x.clone()];
        let segs = segments(h, d, steps, inputs, nu, nw);
        let per_sample = segs.len() / steps.max(1);
        for (i, (t0, t1, u, w)) in segs.iter().enumerate() {
            let forcing = &sys.b_u * u + &sys.b_w * w;
            let dt = (t1 - t0) / substeps as f64;
            let f = |x: &DVector<f64>| &sys.a * x + &forcing;
            for _ in 0..substeps {
                let k1 = f(&x);
                let k2 = f(&(&x + &k1 * (0.5 * dt)));
                let k3 = f(&(&x + &k2 * (0.5 * dt)));
                let k4 = f(&(&x + &k3 * dt));
                x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
            }
            if (i + 1) % per_sample == 0 {
                out.push(x.clone());
            }
        }
        out
    }

    /// Running cost integrated over `[0, horizon]`, with `horizon` a
    /// multiple of `h`. The trajectory is propagated exactly over sub-steps
    /// of at most `h/1000` and the integrand summed by composite Simpson.
    pub fn quadrature_cost_oracle(
        sys: &CtsSystem,
        cost: &CtsCost,
        h: f64,
        d: f64,
        inputs: &HeldInputs,
        x0: &DVector<f64>,
        horizon: f64,
    ) -> f64 {
        quadrature_cost_with_resolution(sys, cost, h, d, inputs, x0, horizon, 1000)
    }

    /// As [`quadrature_cost_oracle`] with `per_sample` Simpson panels per
    /// period (rounded up to even per constant-input interval).
    #[allow(clippy::too_many_arguments)]
    pub fn quadrature_cost_with_resolution(
        sys: &CtsSystem,
        cost: &CtsCost,
        h: f64,
        d: f64,
        inputs: &HeldInputs,
        x0: &DVector<f64>,
        horizon: f64,
        per_sample: usize,
    ) -> f64 {
        let (n, nu, nw) = (sys.n_x(), sys.n_u(), sys.n_w());
        let steps = (horizon / h).round() as usize;
        let s = cost.stacked();
        let mut x = x0.clone();
        let mut total = 0.0;
        let integrand = |x: &DVector<f64>, u: &DVector<f64>| {
            let mut v = DVector::zeros(n + nu);
            v.rows_mut(0, n).copy_from(x);
            v.rows_mut(n, nu).copy_from(u);
            v.dot(&(&s * &v))
        };
        for (t0, t1, u, w) in segments(h, d, steps, inputs, nu, nw) {
            let len = t1 - t0;
            let mut panels = ((per_sample as f64) * len / h).ceil() as usize;
            panels += panels % 2;
            panels = panels.max(2);
            let dt = len / panels as f64;
            // one augmented exponential propagates [x; 1] with the constant forcing
            let mut aug = DMatrix::zeros(n + 1, n + 1);
            aug.view_mut((0, 0), (n, n)).copy_from(&(&sys.a * dt));
            let forcing = (&sys.b_u * &u + &sys.b_w * &w) * dt;
            aug.view_mut((0, n), (n, 1)).copy_from(&forcing);
            let step = expm(&aug);
            let phi = step.view((0, 0), (n, n)).into_owned();
            let g = step.view((0, n), (n, 1)).column(0).into_owned();
            let mut acc = integrand(&x, &u);
            for j in 1..=panels {
                x = &phi * &x + &g;
                let weight = if j == panels {
                    1.0
                } else if j % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                acc += weight * integrand(&x, &u);
            }
            total += acc * dt / 3.0;
        }
        total
    }
}
