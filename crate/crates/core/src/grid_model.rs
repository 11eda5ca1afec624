//! Multi-machine grid: generator electrical equations, static network,
//! equilibrium and small-signal linearization.
//!
//! Every machine carries the state `[δ, ω, ψ_f]` (rotor angle against the
//! synchronous frame, rotor speed, field flux), the control input `e_f`
//! (field voltage) and a two-component disturbance current injected at
//! its load bus. All quantities are in SI units.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::max_abs;

pub const STATES_PER_MACHINE: usize = 3;
pub const INPUTS_PER_MACHINE: usize = 1;
pub const DISTURBANCES_PER_MACHINE: usize = 2;

/// Unknowns of the algebraic subsystem per machine:
/// `i_d, i_q, i_f, e_d, e_q, ψ_d, ψ_q`.
const ALGEBRAIC_UNKNOWNS: usize = 7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("invalid generator parameter `{field}`: {reason}")]
    InvalidParameter { field: &'static str, reason: String },
    #[error("invalid impedance for {branch}: {reason}")]
    InvalidImpedance { branch: &'static str, reason: String },
    #[error("network node elimination hit a singular internal admittance block")]
    SingularNetwork,
    #[error("algebraic stator/network system is singular at the given rotor angles")]
    SingularAlgebraicSystem,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("equilibrium needs at least one machine with a fixed rotor angle")]
    NoAngleReference,
    #[error("equilibrium Newton iteration did not converge in {max_iters} iterations (final scaled residual {final_residual:.3e})")]
    NoConvergence {
        max_iters: usize,
        final_residual: f64,
        history: Vec<f64>,
    },
    #[error("finite-difference Jacobian column {column} is inconsistent under step halving")]
    JacobianInconsistent { column: usize },
}

/// Physical parameters of one synchronous generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    /// Stator self-inductance, constant part (H).
    pub l_a0: f64,
    /// Stator self-inductance, angle-dependent part (H).
    pub l_a2: f64,
    /// Field self-inductance (H).
    pub l_f: f64,
    /// Field/stator mutual inductance (H).
    pub l_af: f64,
    /// Stator resistance (Ω).
    pub r_a: f64,
    /// Field resistance (Ω).
    pub r_f: f64,
    /// Rotor moment of inertia (kg·m²).
    pub inertia: f64,
    /// Friction coefficient (kg·m²/s).
    pub friction: f64,
    pub pole_pairs: u32,
    /// Mechanical torque (N·m), constant.
    pub mech_torque: f64,
    /// Nominal field voltage (V).
    pub field_voltage: f64,
}

impl GeneratorParams {
    /// Machine data of the symmetric dual-machine benchmark. Torque and
    /// field voltage are operating-point choices, not machine data.
    pub fn benchmark() -> Self {
        Self {
            l_a0: 4.9e-3,
            l_a2: 46e-6,
            l_f: 577e-3,
            l_af: 4e-3,
            r_a: 3e-3,
            r_f: 71.5e-3,
            inertia: 27548.0,
            friction: 10.0,
            pole_pairs: 2,
            mech_torque: 0.0,
            field_voltage: 900.0,
        }
    }

    pub fn validate(&self) -> Result<(), GridError> {
        let positive = [
            ("l_a0", self.l_a0),
            ("l_a2", self.l_a2),
            ("l_f", self.l_f),
            ("l_af", self.l_af),
            ("r_a", self.r_a),
            ("r_f", self.r_f),
            ("inertia", self.inertia),
        ];
        for (field, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(GridError::InvalidParameter {
                    field,
                    reason: format!("must be strictly positive, got {v}"),
                });
            }
        }
        if !(self.friction.is_finite() && self.friction >= 0.0) {
            return Err(GridError::InvalidParameter {
                field: "friction",
                reason: format!("must be non-negative, got {}", self.friction),
            });
        }
        if self.pole_pairs == 0 {
            return Err(GridError::InvalidParameter {
                field: "pole_pairs",
                reason: "must be a positive integer".into(),
            });
        }
        if !self.mech_torque.is_finite() || !self.field_voltage.is_finite() {
            return Err(GridError::InvalidParameter {
                field: "mech_torque/field_voltage",
                reason: "must be finite".into(),
            });
        }
        Ok(())
    }

    /// Stator inductance matrix `L_s(δ)` in the synchronous dq frame.
    fn stator_inductance(&self, delta: f64) -> [[f64; 2]; 2] {
        let (s2, c2) = (2.0 * delta).sin_cos();
        let k = 1.5 * self.l_a2;
        [
            [self.l_a0 + k * c2, k * s2],
            [k * s2, self.l_a0 - k * c2],
        ]
    }
}

/// Two-terminal branch impedance. `Open` and `Short` are exact sentinels
/// for an infinite and a zero impedance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Impedance {
    Finite(Complex64),
    Open,
    Short,
}

impl Impedance {
    pub fn ohms(re: f64, im: f64) -> Self {
        Impedance::Finite(Complex64::new(re, im))
    }

    fn admittance(&self, branch: &'static str) -> Result<Complex64, GridError> {
        match *self {
            Impedance::Finite(z) => {
                if z.norm() == 0.0 || !z.re.is_finite() || !z.im.is_finite() {
                    Err(GridError::InvalidImpedance {
                        branch,
                        reason: format!("{z} is not a valid finite nonzero impedance"),
                    })
                } else {
                    Ok(z.inv())
                }
            }
            Impedance::Open => Ok(Complex64::new(0.0, 0.0)),
            Impedance::Short => Err(GridError::InvalidImpedance {
                branch,
                reason: "a short circuit is only supported for the load shunt".into(),
            }),
        }
    }
}

/// Static network seen from the generator ports at synchronous frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    /// Port admittance matrix (S): port voltage phasors to port currents.
    pub y: DMatrix<Complex64>,
    /// Disturbance transfer matrix: load-bus injected currents to port currents.
    pub h: DMatrix<Complex64>,
    /// Synchronous speed (rad/s).
    pub omega0: f64,
}

impl NetworkModel {
    pub fn ports(&self) -> usize {
        self.y.nrows()
    }
}

/// Two generators, each feeding its own load bus through `z_t`; each load
/// bus has a shunt load `z_l` and the load buses are tied through `z_c`.
/// Disturbance currents are injected at the load buses.
pub fn build_two_area_network(
    z_t: Impedance,
    z_l: Impedance,
    z_c: Impedance,
    omega0: f64,
) -> Result<NetworkModel, GridError> {
    if !(omega0.is_finite() && omega0 > 0.0) {
        return Err(GridError::InvalidParameter {
            field: "omega0",
            reason: format!("must be strictly positive, got {omega0}"),
        });
    }
    let zero = Complex64::new(0.0, 0.0);
    let y_t = z_t.admittance("Z_T")?;
    let y_c = z_c.admittance("Z_C")?;
    let load_grounded = matches!(z_l, Impedance::Short);
    let y_l = if load_grounded {
        zero
    } else {
        z_l.admittance("Z_L")?
    };

    let y_gg = DMatrix::from_diagonal_element(2, 2, y_t);
    if load_grounded {
        // both load buses sit at ground potential: injected currents vanish
        // into the shunt and ports see only their series branch
        return Ok(NetworkModel {
            y: y_gg,
            h: DMatrix::from_element(2, 2, zero),
            omega0,
        });
    }
    let y_gl = DMatrix::from_diagonal_element(2, 2, -y_t);
    let y_lg = y_gl.clone();
    let self_l = y_t + y_l + y_c;
    let y_ll = DMatrix::from_row_slice(2, 2, &[self_l, -y_c, -y_c, self_l]);
    let y_ll_inv = y_ll.try_inverse().ok_or(GridError::SingularNetwork)?;
    if y_ll_inv.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(GridError::SingularNetwork);
    }
    let h = &y_gl * &y_ll_inv;
    let y = &y_gg - &h * &y_lg;
    Ok(NetworkModel { y, h, omega0 })
}

/// Electrical variables of one machine for a given rotor state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MachineElectrical {
    pub i_d: f64,
    pub i_q: f64,
    pub i_f: f64,
    pub e_d: f64,
    pub e_q: f64,
    pub psi_d: f64,
    pub psi_q: f64,
    /// Electrical torque (N·m).
    pub torque: f64,
}

impl MachineElectrical {
    pub fn terminal_voltage(&self) -> f64 {
        self.e_d.hypot(self.e_q)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlgebraicSolution {
    pub machines: Vec<MachineElectrical>,
}

fn check_dims(
    gens: &[GeneratorParams],
    net: &NetworkModel,
    x: &DVector<f64>,
    w: &DVector<f64>,
) -> Result<usize, GridError> {
    let m = gens.len();
    if net.ports() != m || net.h.ncols() != m {
        return Err(GridError::Dimension(format!(
            "{m} machines but a {}-port network",
            net.ports()
        )));
    }
    if x.len() != STATES_PER_MACHINE * m {
        return Err(GridError::Dimension(format!(
            "state has length {}, expected {}",
            x.len(),
            STATES_PER_MACHINE * m
        )));
    }
    if w.len() != DISTURBANCES_PER_MACHINE * m {
        return Err(GridError::Dimension(format!(
            "disturbance has length {}, expected {}",
            w.len(),
            DISTURBANCES_PER_MACHINE * m
        )));
    }
    Ok(m)
}

/// Solves the stator, field-flux and network equations for fixed rotor
/// states. With the stator transients dropped the system is linear in the
/// currents, voltages and fluxes, so it is assembled and solved directly.
pub fn solve_algebraic(
    gens: &[GeneratorParams],
    net: &NetworkModel,
    x: &DVector<f64>,
    w: &DVector<f64>,
) -> Result<AlgebraicSolution, GridError> {
    let m = check_dims(gens, net, x, w)?;
    let n = ALGEBRAIC_UNKNOWNS * m;
    let mut a = DMatrix::<f64>::zeros(n, n);
    let mut rhs = DVector::<f64>::zeros(n);
    let col = |i: usize, k: usize| ALGEBRAIC_UNKNOWNS * i + k;
    let (i_d, i_q, i_f, e_d, e_q, psi_d, psi_q) = (0, 1, 2, 3, 4, 5, 6);
    let w0 = net.omega0;

    let mut row = 0;
    for (i, g) in gens.iter().enumerate() {
        let delta = x[STATES_PER_MACHINE * i];
        let psi_f = x[STATES_PER_MACHINE * i + 2];
        let (s, c) = delta.sin_cos();
        let ls = g.stator_inductance(delta);

        // ψ_f = L_f i_f − 3/2 L_af (cos δ i_d + sin δ i_q)
        a[(row, col(i, i_f))] = g.l_f;
        a[(row, col(i, i_d))] = -1.5 * g.l_af * c;
        a[(row, col(i, i_q))] = -1.5 * g.l_af * s;
        rhs[row] = psi_f;
        row += 1;

        // ψ_dq + L_s(δ) i_dq − L_af [cos δ; sin δ] i_f = 0
        for (k, (psi, trig)) in [(psi_d, c), (psi_q, s)].into_iter().enumerate() {
            a[(row, col(i, psi))] = 1.0;
            a[(row, col(i, i_d))] = ls[k][0];
            a[(row, col(i, i_q))] = ls[k][1];
            a[(row, col(i, i_f))] = -g.l_af * trig;
            row += 1;
        }

        // e_d = −ω₀ ψ_q − R_a i_d ; e_q = ω₀ ψ_d − R_a i_q
        a[(row, col(i, e_d))] = 1.0;
        a[(row, col(i, psi_q))] = w0;
        a[(row, col(i, i_d))] = g.r_a;
        row += 1;
        a[(row, col(i, e_q))] = 1.0;
        a[(row, col(i, psi_d))] = -w0;
        a[(row, col(i, i_q))] = g.r_a;
        row += 1;
    }

    // i = Y e + H i_w, split into real and imaginary rows
    for i in 0..m {
        let (re_row, im_row) = (row, row + 1);
        a[(re_row, col(i, i_d))] = 1.0;
        a[(im_row, col(i, i_q))] = 1.0;
        let mut inj = Complex64::new(0.0, 0.0);
        for k in 0..m {
            let y = net.y[(i, k)];
            a[(re_row, col(k, e_d))] -= y.re;
            a[(re_row, col(k, e_q))] += y.im;
            a[(im_row, col(k, e_d))] -= y.im;
            a[(im_row, col(k, e_q))] -= y.re;
            inj += net.h[(i, k)]
                * Complex64::new(
                    w[DISTURBANCES_PER_MACHINE * k],
                    w[DISTURBANCES_PER_MACHINE * k + 1],
                );
        }
        rhs[re_row] = inj.re;
        rhs[im_row] = inj.im;
        row += 2;
    }
    debug_assert_eq!(row, n);

    // row equilibration: the rows mix henries, ohms and ω₀
    for r in 0..n {
        let s = a.row(r).iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
        if s > 0.0 {
            a.row_mut(r).scale_mut(1.0 / s);
            rhs[r] /= s;
        }
    }

    let lu = a.lu();
    let sol = lu.solve(&rhs).ok_or(GridError::SingularAlgebraicSystem)?;
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(GridError::SingularAlgebraicSystem);
    }

    let machines = gens
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let v = |k| sol[col(i, k)];
            let (id, iq, pd, pq) = (v(i_d), v(i_q), v(psi_d), v(psi_q));
            MachineElectrical {
                i_d: id,
                i_q: iq,
                i_f: v(i_f),
                e_d: v(e_d),
                e_q: v(e_q),
                psi_d: pd,
                psi_q: pq,
                torque: 1.5 * g.pole_pairs as f64 * (pd * iq - pq * id),
            }
        })
        .collect();
    Ok(AlgebraicSolution { machines })
}

/// State derivative `[δ̇, ω̇, ψ̇_f]` per machine.
pub fn dynamics_rhs(
    gens: &[GeneratorParams],
    net: &NetworkModel,
    x: &DVector<f64>,
    u: &DVector<f64>,
    w: &DVector<f64>,
) -> Result<DVector<f64>, GridError> {
    let sol = solve_algebraic(gens, net, x, w)?;
    Ok(rhs_from_solution(gens, net, x, u, &sol))
}

fn rhs_from_solution(
    gens: &[GeneratorParams],
    net: &NetworkModel,
    x: &DVector<f64>,
    u: &DVector<f64>,
    sol: &AlgebraicSolution,
) -> DVector<f64> {
    let mut dx = DVector::zeros(x.len());
    for (i, g) in gens.iter().enumerate() {
        let b = STATES_PER_MACHINE * i;
        let omega = x[b + 1];
        let el = &sol.machines[i];
        dx[b] = omega - net.omega0;
        dx[b + 1] = (g.mech_torque - el.torque - g.friction * omega) / g.inertia;
        dx[b + 2] = u[i] - g.r_f * el.i_f;
    }
    dx
}

/// Infinity norm of the state derivative with each component scaled to a
/// characteristic magnitude of its machine (ω₀ for δ̇, torque for ω̇,
/// field voltage for ψ̇_f).
pub fn scaled_rhs_norm(gens: &[GeneratorParams], net: &NetworkModel, dx: &DVector<f64>) -> f64 {
    gens.iter()
        .enumerate()
        .map(|(i, g)| {
            let b = STATES_PER_MACHINE * i;
            let t_ref = g
                .mech_torque
                .abs()
                .max(g.friction * net.omega0)
                .max(1.0);
            let e_ref = g.field_voltage.abs().max(1.0);
            (dx[b] / net.omega0)
                .abs()
                .max((dx[b + 1] * g.inertia / t_ref).abs())
                .max((dx[b + 2] / e_ref).abs())
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MechanicalSetpoint {
    /// Rotor angle held at this value; the mechanical torque is balanced.
    Angle(f64),
    /// Mechanical torque held at this value; the rotor angle is solved.
    Torque(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum FieldSetpoint {
    /// Field voltage (V).
    FieldVoltage(f64),
    /// Terminal voltage magnitude (V); the field voltage is solved.
    TerminalVoltage(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MachineSetpoint {
    pub mechanical: MechanicalSetpoint,
    pub field: FieldSetpoint,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EquilibriumOptions {
    pub max_iters: usize,
    /// Bound on the scaled state-derivative norm at the returned point.
    pub tol: f64,
}

impl Default for EquilibriumOptions {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OperatingPoint {
    /// Machine data with the balanced torques and solved field voltages filled in.
    pub machines: Vec<GeneratorParams>,
    /// Equilibrium state `[δ, ω, ψ_f]` per machine.
    pub state: DVector<f64>,
    /// Field voltages at equilibrium.
    pub input: DVector<f64>,
    pub algebraic: AlgebraicSolution,
    pub residual_history: Vec<f64>,
}

impl OperatingPoint {
    pub fn delta(&self, i: usize) -> f64 {
        self.state[STATES_PER_MACHINE * i]
    }
    pub fn omega(&self, i: usize) -> f64 {
        self.state[STATES_PER_MACHINE * i + 1]
    }
    pub fn psi_f(&self, i: usize) -> f64 {
        self.state[STATES_PER_MACHINE * i + 2]
    }
    pub fn disturbance(&self) -> DVector<f64> {
        DVector::zeros(DISTURBANCES_PER_MACHINE * self.machines.len())
    }
}

#[derive(Debug, Clone, Copy)]
enum Unknown {
    Delta(usize),
    PsiF(usize),
    FieldVoltage(usize),
}

struct EquilibriumProblem<'a> {
    gens: Vec<GeneratorParams>,
    net: &'a NetworkModel,
    setpoints: &'a [MachineSetpoint],
    unknowns: Vec<Unknown>,
    scales: Vec<f64>,
    base_state: DVector<f64>,
    base_input: DVector<f64>,
}

impl EquilibriumProblem<'_> {
    fn assemble(&self, xi: &[f64]) -> (DVector<f64>, DVector<f64>) {
        let mut x = self.base_state.clone();
        let mut u = self.base_input.clone();
        for (k, unk) in self.unknowns.iter().enumerate() {
            let v = xi[k] * self.scales[k];
            match *unk {
                Unknown::Delta(i) => x[STATES_PER_MACHINE * i] = v,
                Unknown::PsiF(i) => x[STATES_PER_MACHINE * i + 2] = v,
                Unknown::FieldVoltage(i) => u[i] = v,
            }
        }
        (x, u)
    }

    /// Scaled residuals: torque balance of torque-driven machines, field
    /// flux stationarity, terminal-voltage targets.
    fn residual(&self, xi: &[f64]) -> Result<Vec<f64>, GridError> {
        let (x, u) = self.assemble(xi);
        let w = DVector::zeros(DISTURBANCES_PER_MACHINE * self.gens.len());
        let sol = solve_algebraic(&self.gens, self.net, &x, &w)?;
        let mut r = Vec::with_capacity(self.unknowns.len());
        for (i, (g, sp)) in self.gens.iter().zip(self.setpoints).enumerate() {
            let el = &sol.machines[i];
            if let MechanicalSetpoint::Torque(tm) = sp.mechanical {
                let t_ref = tm.abs().max(g.friction * self.net.omega0).max(1.0);
                r.push((tm - el.torque - g.friction * self.net.omega0) / t_ref);
            }
            let e_ref = u[i].abs().max(g.r_f * el.i_f.abs()).max(1.0);
            r.push((u[i] - g.r_f * el.i_f) / e_ref);
            if let FieldSetpoint::TerminalVoltage(v) = sp.field {
                r.push((el.terminal_voltage() - v) / v.abs().max(1.0));
            }
        }
        Ok(r)
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Damped Newton on the rotor angles of torque-driven machines, all field
/// fluxes, and the field voltages of voltage-regulated machines. Machines
/// with a fixed angle take the torque that balances them at ω₀.
pub fn solve_equilibrium(
    gens: &[GeneratorParams],
    net: &NetworkModel,
    setpoints: &[MachineSetpoint],
    opts: EquilibriumOptions,
) -> Result<OperatingPoint, GridError> {
    let m = gens.len();
    if setpoints.len() != m || net.ports() != m {
        return Err(GridError::Dimension(format!(
            "{m} machines, {} setpoints, {}-port network",
            setpoints.len(),
            net.ports()
        )));
    }
    for g in gens {
        g.validate()?;
    }
    let reference = setpoints.iter().find_map(|s| match s.mechanical {
        MechanicalSetpoint::Angle(a) => Some(a),
        MechanicalSetpoint::Torque(_) => None,
    });
    let Some(reference) = reference else {
        return Err(GridError::NoAngleReference);
    };

    let mut gens = gens.to_vec();
    let mut base_state = DVector::zeros(STATES_PER_MACHINE * m);
    let mut base_input = DVector::zeros(m);
    let mut unknowns = Vec::new();
    let mut guess = Vec::new();
    for (i, (g, sp)) in gens.iter_mut().zip(setpoints).enumerate() {
        let b = STATES_PER_MACHINE * i;
        base_state[b + 1] = net.omega0;
        match sp.mechanical {
            MechanicalSetpoint::Angle(a) => base_state[b] = a,
            MechanicalSetpoint::Torque(t) => {
                g.mech_torque = t;
                base_state[b] = reference;
                unknowns.push(Unknown::Delta(i));
                guess.push(reference);
            }
        }
        let field_current = match sp.field {
            FieldSetpoint::FieldVoltage(e) => {
                g.field_voltage = e;
                base_input[i] = e;
                e / g.r_f
            }
            FieldSetpoint::TerminalVoltage(v) => v / (net.omega0 * g.l_af),
        };
        unknowns.push(Unknown::PsiF(i));
        guess.push(g.l_f * field_current);
        if let FieldSetpoint::TerminalVoltage(_) = sp.field {
            unknowns.push(Unknown::FieldVoltage(i));
            guess.push(g.r_f * field_current);
            g.field_voltage = g.r_f * field_current;
        }
    }
    let scales: Vec<f64> = unknowns
        .iter()
        .zip(&guess)
        .map(|(u, g)| match u {
            Unknown::Delta(_) => 1.0,
            _ => g.abs().max(1.0),
        })
        .collect();
    let problem = EquilibriumProblem {
        gens: gens.clone(),
        net,
        setpoints,
        unknowns,
        scales,
        base_state,
        base_input,
    };
    let mut xi: Vec<f64> = guess
        .iter()
        .zip(&problem.scales)
        .map(|(g, s)| g / s)
        .collect();

    let n = xi.len();
    let mut r = problem.residual(&xi)?;
    let mut history = vec![inf_norm(&r)];
    let newton_tol = 1e-13;
    let mut iters = 0;
    while inf_norm(&r) > newton_tol {
        if iters == opts.max_iters {
            break;
        }
        iters += 1;
        // finite-difference Jacobian in scaled unknowns
        let mut jac = DMatrix::<f64>::zeros(n, n);
        for k in 0..n {
            let step = 1e-7 * xi[k].abs().max(1.0);
            let mut plus = xi.clone();
            let mut minus = xi.clone();
            plus[k] += step;
            minus[k] -= step;
            let rp = problem.residual(&plus)?;
            let rm = problem.residual(&minus)?;
            for j in 0..n {
                jac[(j, k)] = (rp[j] - rm[j]) / (2.0 * step);
            }
        }
        let rhs = DVector::from_iterator(n, r.iter().map(|v| -v));
        let Some(dxi) = jac.lu().solve(&rhs) else {
            break;
        };
        let current = inf_norm(&r);
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let trial: Vec<f64> = xi.iter().zip(dxi.iter()).map(|(a, d)| a + lambda * d).collect();
            if let Ok(rt) = problem.residual(&trial) {
                if inf_norm(&rt) < current {
                    xi = trial;
                    r = rt;
                    accepted = true;
                    break;
                }
            }
            lambda *= 0.5;
        }
        history.push(inf_norm(&r));
        if !accepted {
            break;
        }
    }

    let (state, input) = problem.assemble(&xi);
    let w = DVector::zeros(DISTURBANCES_PER_MACHINE * m);
    let algebraic = solve_algebraic(&gens, net, &state, &w)?;
    for (i, (g, sp)) in gens.iter_mut().zip(setpoints).enumerate() {
        g.field_voltage = input[i];
        if let MechanicalSetpoint::Angle(_) = sp.mechanical {
            g.mech_torque = algebraic.machines[i].torque + g.friction * net.omega0;
        }
    }
    let dx = rhs_from_solution(&gens, net, &state, &input, &algebraic);
    let final_residual = scaled_rhs_norm(&gens, net, &dx);
    if !(final_residual <= opts.tol) {
        return Err(GridError::NoConvergence {
            max_iters: opts.max_iters,
            final_residual,
            history,
        });
    }
    Ok(OperatingPoint {
        machines: gens,
        state,
        input,
        algebraic,
        residual_history: history,
    })
}

/// Continuous small-signal model `ẋ = A x + B_u u + B_w w`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPlant {
    pub a: DMatrix<f64>,
    pub b_u: DMatrix<f64>,
    pub b_w: DMatrix<f64>,
    pub machines: usize,
}

impl LinearPlant {
    pub fn n_x(&self) -> usize {
        self.a.nrows()
    }
    pub fn n_u(&self) -> usize {
        self.b_u.ncols()
    }
    pub fn n_w(&self) -> usize {
        self.b_w.ncols()
    }

    /// Relative residuals of the three machine-swap commutation identities
    /// `P A = A P`, `P B_u = B_u Π`, `P B_w = B_w Π_w` (two machines only).
    pub fn swap_residuals(&self) -> Option<[f64; 3]> {
        if self.machines != 2 {
            return None;
        }
        let px = swap_permutation(STATES_PER_MACHINE);
        let pu = swap_permutation(INPUTS_PER_MACHINE);
        let pw = swap_permutation(DISTURBANCES_PER_MACHINE);
        let rel = |lhs: DMatrix<f64>, rhs: DMatrix<f64>, scale: f64| {
            max_abs(&(lhs - rhs)) / scale.max(f64::MIN_POSITIVE)
        };
        Some([
            rel(&px * &self.a, &self.a * &px, max_abs(&self.a)),
            rel(&px * &self.b_u, &self.b_u * &pu, max_abs(&self.b_u)),
            rel(&px * &self.b_w, &self.b_w * &pw, max_abs(&self.b_w)),
        ])
    }
}

/// Permutation exchanging the two machine blocks of size `block`.
pub fn swap_permutation(block: usize) -> DMatrix<f64> {
    let mut p = DMatrix::zeros(2 * block, 2 * block);
    for k in 0..block {
        p[(k, block + k)] = 1.0;
        p[(block + k, k)] = 1.0;
    }
    p
}

/// Power-of-two difference step near `1e-6 · max(c, |x|)`, so that
/// `x ± s` and `2 s` are exact in binary floating point. `c` is the
/// characteristic magnitude of the coordinate.
fn fd_step(x: f64, c: f64) -> f64 {
    let target = 1e-6 * x.abs().max(c);
    2f64.powi(target.log2().round() as i32)
}

fn central_column<F>(f: &F, x0: &DVector<f64>, k: usize, s: f64) -> Result<DVector<f64>, GridError>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>, GridError>,
{
    let mut xp = x0.clone();
    let mut xm = x0.clone();
    xp[k] += s;
    xm[k] -= s;
    Ok((f(&xp)? - f(&xm)?) / (2.0 * s))
}

/// `row_scale` bounds the magnitude of the terms that cancel in each
/// component of `f`, which sets the round-off floor of the differences.
fn checked_jacobian<F>(
    f: F,
    x0: &DVector<f64>,
    col_scale: &[f64],
    row_scale: &DVector<f64>,
    col_offset: usize,
) -> Result<DMatrix<f64>, GridError>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>, GridError>,
{
    let rows = row_scale.len();
    let n = x0.len();
    let mut jac = DMatrix::zeros(rows, n);
    for k in 0..n {
        let s = fd_step(x0[k], col_scale[k]);
        let full = central_column(&f, x0, k, s)?;
        let half = central_column(&f, x0, k, 0.5 * s)?;
        // cancellation noise of a central difference at step s/2
        let noise = |j: usize| 256.0 * f64::EPSILON * row_scale[j] / s;
        let agrees = (0..rows).all(|j| (full[j] - half[j]).abs() <= 1e-5 * full[j].abs() + noise(j));
        let column = if agrees {
            full
        } else {
            // truncation dominated: require second-order convergence
            let quarter = central_column(&f, x0, k, 0.25 * s)?;
            let diff = (&full - &half).amax();
            let next = (&half - &quarter).amax();
            let ratio = diff / next.max(f64::MIN_POSITIVE);
            if (ratio / 4.0 - 1.0).abs() > 0.1 {
                return Err(GridError::JacobianInconsistent {
                    column: col_offset + k,
                });
            }
            (&half * 4.0 - &full) / 3.0
        };
        jac.set_column(k, &column);
    }
    Ok(jac)
}

/// Jacobians of the dynamics at the operating point by central differences.
pub fn linearize(net: &NetworkModel, op: &OperatingPoint) -> Result<LinearPlant, GridError> {
    let gens = &op.machines;
    let m = gens.len();
    let x0 = &op.state;
    let u0 = &op.input;
    let w0 = op.disturbance();
    let n_x = x0.len();
    let mut scale = DVector::zeros(n_x);
    for (i, g) in gens.iter().enumerate() {
        let el = &op.algebraic.machines[i];
        let b = STATES_PER_MACHINE * i;
        scale[b] = net.omega0;
        scale[b + 1] =
            (g.mech_torque.abs() + el.torque.abs() + g.friction * op.omega(i).abs()) / g.inertia;
        scale[b + 2] = u0[i].abs() + g.r_f * el.i_f.abs();
    }
    let unit_x = vec![1.0; n_x];
    let unit_u = vec![1.0; u0.len()];
    // the right-hand side is quadratic in the disturbance currents, so
    // central differences are exact up to round-off and a wide step is used
    let current = op
        .algebraic
        .machines
        .iter()
        .map(|el| el.i_d.hypot(el.i_q))
        .fold(1.0_f64, f64::max);
    let current_w = vec![1e3 * current; w0.len()];
    let a = checked_jacobian(|x| dynamics_rhs(gens, net, x, u0, &w0), x0, &unit_x, &scale, 0)?;
    let b_u = checked_jacobian(|u| dynamics_rhs(gens, net, x0, u, &w0), u0, &unit_u, &scale, n_x)?;
    let b_w = checked_jacobian(
        |w| dynamics_rhs(gens, net, x0, u0, w),
        &w0,
        &current_w,
        &scale,
        n_x + m,
    )?;
    Ok(LinearPlant {
        a,
        b_u,
        b_w,
        machines: m,
    })
}

/// The symmetric two-machine benchmark network.
pub fn benchmark_network() -> NetworkModel {
    build_two_area_network(
        Impedance::ohms(0.011, 0.106),
        Impedance::ohms(6.2, 2.1),
        Impedance::ohms(0.054, 0.53),
        377.0,
    )
    .expect("benchmark impedances are valid")
}

/// Field voltage of the default benchmark operating point (V).
pub const BENCHMARK_FIELD_VOLTAGE: f64 = 900.0;

/// Both machines at zero rotor angle with field voltage `e_f`.
pub fn benchmark_setpoints(e_f: f64) -> Vec<MachineSetpoint> {
    vec![
        MachineSetpoint {
            mechanical: MechanicalSetpoint::Angle(0.0),
            field: FieldSetpoint::FieldVoltage(e_f),
        };
        2
    ]
}

/// Equilibrium and linearization of the benchmark at its default point.
pub fn benchmark_plant() -> Result<(OperatingPoint, LinearPlant), GridError> {
    let net = benchmark_network();
    let gens = vec![GeneratorParams::benchmark(); 2];
    let op = solve_equilibrium(
        &gens,
        &net,
        &benchmark_setpoints(BENCHMARK_FIELD_VOLTAGE),
        EquilibriumOptions::default(),
    )?;
    let plant = linearize(&net, &op)?;
    Ok((op, plant))
}
