//! Distributed networked control: local loops, modal coordinates,
//! per-mode objectives, delay bookkeeping, per-mode gain design and the
//! runtime that turns modal commands back into per-machine commands.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::grid_model::{LinearPlant, DISTURBANCES_PER_MACHINE, INPUTS_PER_MACHINE, STATES_PER_MACHINE};
use crate::linalg::{block_diag, eigenvalues, max_abs, spectral_abscissa, spectral_radius};
use crate::sampled::{discretize, CtsCost, CtsSystem, DiscretizedSystem, SampledError};
use crate::synthesis::{gamma_min, lqr_design, SynthesisError};

/// Entries below this fraction of the largest entry are structural zeros.
const STRUCTURAL_ZERO: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DncsError {
    #[error(
        "local closed loop is not Hurwitz (spectral abscissa {abscissa:.6e}); \
         check the sign convention of the stator voltage equations (generator vs motor) \
         and the local gains"
    )]
    NotHurwitz { abscissa: f64 },
    #[error("plant or gains are not swap symmetric (residual {residual:.3e})")]
    NotSymmetric { residual: f64 },
    #[error("transform does not block-diagonalize {which} (residual {residual:.3e})")]
    NotBlockDiagonalizable { which: &'static str, residual: f64 },
    #[error("transform {0} is singular")]
    SingularTransform(&'static str),
    #[error("delay matrix is not symmetric")]
    AsymmetricDelays,
    #[error("invalid delays: {0}")]
    InvalidDelays(String),
    #[error("schedule mismatch: {0}")]
    ScheduleMismatch(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Sampled(#[from] SampledError),
    #[error(transparent)]
    Synthesis(#[from] SynthesisError),
}

/// Benchmark local gain for cost-based design, on `[δ, ω, ψ_f]`.
pub const K_LQR: [f64; 3] = [169.6, 201.0, -3.04];
/// Benchmark local gain for attenuation-based design.
pub const K_HINF: [f64; 3] = [544750.0, 700010.0, -9890.0];
/// Field-voltage weight of the benchmark cost.
pub const BENCHMARK_R_WEIGHT: f64 = 2.5e-5;
/// Field-voltage weight of the benchmark output.
pub const BENCHMARK_OUTPUT_WEIGHT: f64 = 1e-2;

/// Local state feedback `u_i = K_i x_i + ū_i` per machine.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalGains {
    pub per_machine: Vec<DMatrix<f64>>,
}

impl LocalGains {
    /// The same row gain on every machine.
    pub fn uniform(k: &[f64], machines: usize) -> Self {
        Self {
            per_machine: vec![DMatrix::from_row_slice(1, k.len(), k); machines],
        }
    }

    pub fn block(&self) -> DMatrix<f64> {
        block_diag(&self.per_machine)
    }

    /// `Ā = A + B_u K`, required to be Hurwitz.
    pub fn closed_loop(&self, plant: &LinearPlant) -> Result<DMatrix<f64>, DncsError> {
        let k = self.block();
        if k.shape() != (plant.n_u(), plant.n_x()) {
            return Err(DncsError::Dimension(format!(
                "local gain is {:?}, plant needs {:?}",
                k.shape(),
                (plant.n_u(), plant.n_x())
            )));
        }
        let a_bar = &plant.a + &plant.b_u * k;
        let abscissa = spectral_abscissa(&a_bar);
        if !(abscissa < 0.0) {
            return Err(DncsError::NotHurwitz { abscissa });
        }
        Ok(a_bar)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ModeDims {
    pub n_x: usize,
    pub n_u: usize,
    pub n_w: usize,
}

/// Coordinates `x = M_x x̂`, `ū = M_u û`, `w = M_w ŵ` in which the local
/// closed loop splits into independent modes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalDecomposition {
    pub m_x: DMatrix<f64>,
    pub m_x_inv: DMatrix<f64>,
    pub m_u: DMatrix<f64>,
    pub m_u_inv: DMatrix<f64>,
    pub m_w: DMatrix<f64>,
    pub modes: Vec<ModeDims>,
    pub labels: Vec<String>,
    /// `[M_u]_{ρi} ≠ 0`, indexed `[machine][mode]`.
    pub mu_pattern: Vec<Vec<bool>>,
    /// `[M_x⁻¹]_{iβ} ≠ 0`, indexed `[mode][machine]`.
    pub mx_inv_pattern: Vec<Vec<bool>>,
    /// Worst relative off-block residual over the three transformed matrices.
    pub residual: f64,
}

impl ModalDecomposition {
    pub fn mode_count(&self) -> usize {
        self.modes.len()
    }

    fn offsets(&self, f: impl Fn(&ModeDims) -> usize) -> Vec<usize> {
        let mut off = Vec::with_capacity(self.modes.len());
        let mut acc = 0;
        for m in &self.modes {
            off.push(acc);
            acc += f(m);
        }
        off
    }
    pub fn x_offsets(&self) -> Vec<usize> {
        self.offsets(|m| m.n_x)
    }
    pub fn u_offsets(&self) -> Vec<usize> {
        self.offsets(|m| m.n_u)
    }
    pub fn w_offsets(&self) -> Vec<usize> {
        self.offsets(|m| m.n_w)
    }

    pub fn mode_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

/// Largest entry outside the diagonal blocks relative to the whole matrix.
fn off_block_residual(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> f64 {
    let scale = max_abs(m).max(f64::MIN_POSITIVE);
    let mut worst = 0.0_f64;
    let mut r0 = 0;
    for (bi, &nr) in rows.iter().enumerate() {
        let mut c0 = 0;
        for (bj, &nc) in cols.iter().enumerate() {
            if bi != bj {
                worst = worst.max(max_abs(&m.view((r0, c0), (nr, nc)).into_owned()));
            }
            c0 += nc;
        }
        r0 += nr;
    }
    worst / scale
}

fn block_pattern(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> Vec<Vec<bool>> {
    let thresh = STRUCTURAL_ZERO * max_abs(m);
    let mut out = Vec::with_capacity(rows.len());
    let mut r0 = 0;
    for &nr in rows {
        let mut row = Vec::with_capacity(cols.len());
        let mut c0 = 0;
        for &nc in cols {
            let blk = m.view((r0, c0), (nr, nc));
            row.push(blk.iter().any(|v| v.abs() > thresh));
            c0 += nc;
        }
        out.push(row);
        r0 += nr;
    }
    out
}

/// Validates a user-supplied decomposition and extracts its patterns.
pub fn accept_decomposition(
    plant: &LinearPlant,
    gains: &LocalGains,
    m_x: &DMatrix<f64>,
    m_u: &DMatrix<f64>,
    m_w: &DMatrix<f64>,
    modes: &[ModeDims],
    labels: &[String],
    tol: f64,
) -> Result<ModalDecomposition, DncsError> {
    let (nx, nu, nw) = (plant.n_x(), plant.n_u(), plant.n_w());
    if m_x.shape() != (nx, nx) || m_u.shape() != (nu, nu) || m_w.shape() != (nw, nw) {
        return Err(DncsError::Dimension("transforms must be square and match the plant".into()));
    }
    let sums = (
        modes.iter().map(|m| m.n_x).sum::<usize>(),
        modes.iter().map(|m| m.n_u).sum::<usize>(),
        modes.iter().map(|m| m.n_w).sum::<usize>(),
    );
    if sums != (nx, nu, nw) || labels.len() != modes.len() {
        return Err(DncsError::Dimension(format!(
            "mode dimensions sum to {sums:?}, plant has {:?}",
            (nx, nu, nw)
        )));
    }
    let m_x_inv = m_x.clone().try_inverse().ok_or(DncsError::SingularTransform("M_x"))?;
    let m_u_inv = m_u.clone().try_inverse().ok_or(DncsError::SingularTransform("M_u"))?;
    if m_w.clone().try_inverse().is_none() {
        return Err(DncsError::SingularTransform("M_w"));
    }
    let a_bar = gains.closed_loop(plant)?;
    let rx: Vec<usize> = modes.iter().map(|m| m.n_x).collect();
    let ru: Vec<usize> = modes.iter().map(|m| m.n_u).collect();
    let rw: Vec<usize> = modes.iter().map(|m| m.n_w).collect();
    let checks = [
        ("M_x⁻¹ Ā M_x", &m_x_inv * &a_bar * m_x, &rx),
        ("M_x⁻¹ B_u M_u", &m_x_inv * &plant.b_u * m_u, &ru),
        ("M_x⁻¹ B_w M_w", &m_x_inv * &plant.b_w * m_w, &rw),
    ];
    let mut residual = 0.0_f64;
    for (which, m, cols) in checks {
        let r = off_block_residual(&m, &rx, cols);
        if !(r <= tol) {
            return Err(DncsError::NotBlockDiagonalizable { which, residual: r });
        }
        residual = residual.max(r);
    }
    let machines = plant.machines;
    let mu_pattern = block_pattern(m_u, &vec![INPUTS_PER_MACHINE; machines], &ru);
    let mx_inv_pattern = block_pattern(&m_x_inv, &rx, &vec![STATES_PER_MACHINE; machines]);
    Ok(ModalDecomposition {
        m_x: m_x.clone(),
        m_x_inv,
        m_u: m_u.clone(),
        m_u_inv,
        m_w: m_w.clone(),
        modes: modes.to_vec(),
        labels: labels.to_vec(),
        mu_pattern,
        mx_inv_pattern,
        residual,
    })
}

/// `T⁻¹ = [[I, −I], [I, I]]` on blocks of size `block`, and its inverse.
fn difference_sum(block: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut inv = DMatrix::zeros(2 * block, 2 * block);
    let mut t = DMatrix::zeros(2 * block, 2 * block);
    for k in 0..block {
        inv[(k, k)] = 1.0;
        inv[(k, block + k)] = -1.0;
        inv[(block + k, k)] = 1.0;
        inv[(block + k, block + k)] = 1.0;
        t[(k, k)] = 0.5;
        t[(k, block + k)] = 0.5;
        t[(block + k, k)] = -0.5;
        t[(block + k, block + k)] = 0.5;
    }
    (t, inv)
}

pub const OSCILLATION: &str = "oscillation";
pub const COMMON: &str = "common";

/// Oscillation mode `x₁ − x₂` and common mode `x₁ + x₂` of two identical
/// machines with identical local gains.
pub fn symmetric_modes(plant: &LinearPlant, gains: &LocalGains) -> Result<ModalDecomposition, DncsError> {
    let residual = plant
        .swap_residuals()
        .ok_or_else(|| DncsError::Dimension("symmetric modes need exactly two machines".into()))?
        .into_iter()
        .fold(0.0_f64, f64::max);
    let gain_gap = if gains.per_machine.len() == 2 {
        max_abs(&(&gains.per_machine[0] - &gains.per_machine[1]))
            / max_abs(&gains.per_machine[0]).max(f64::MIN_POSITIVE)
    } else {
        f64::INFINITY
    };
    let worst = residual.max(gain_gap);
    if !(worst <= 1e-7) {
        return Err(DncsError::NotSymmetric { residual: worst });
    }
    let (m_x, _) = difference_sum(STATES_PER_MACHINE);
    let (m_u, _) = difference_sum(INPUTS_PER_MACHINE);
    let (m_w, _) = difference_sum(DISTURBANCES_PER_MACHINE);
    let dims = ModeDims {
        n_x: STATES_PER_MACHINE,
        n_u: INPUTS_PER_MACHINE,
        n_w: DISTURBANCES_PER_MACHINE,
    };
    accept_decomposition(
        plant,
        gains,
        &m_x,
        &m_u,
        &m_w,
        &[dims, dims],
        &[OSCILLATION.to_string(), COMMON.to_string()],
        1e-8,
    )
}

/// One decoupled mode `x̂̇_i = Â_i x̂_i + B̂ᵘ_i û_i + B̂ʷ_i ŵ_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalSubsystem {
    pub a: DMatrix<f64>,
    pub b_u: DMatrix<f64>,
    pub b_w: DMatrix<f64>,
}

pub fn modal_subsystem(
    plant: &LinearPlant,
    gains: &LocalGains,
    dec: &ModalDecomposition,
    i: usize,
) -> Result<ModalSubsystem, DncsError> {
    if i >= dec.mode_count() {
        return Err(DncsError::Dimension(format!("mode {i} out of range")));
    }
    let a_bar = gains.closed_loop(plant)?;
    let (xo, uo, wo) = (dec.x_offsets()[i], dec.u_offsets()[i], dec.w_offsets()[i]);
    let md = dec.modes[i];
    let a_hat = &dec.m_x_inv * a_bar * &dec.m_x;
    let bu_hat = &dec.m_x_inv * &plant.b_u * &dec.m_u;
    let bw_hat = &dec.m_x_inv * &plant.b_w * &dec.m_w;
    Ok(ModalSubsystem {
        a: a_hat.view((xo, xo), (md.n_x, md.n_x)).into_owned(),
        b_u: bu_hat.view((xo, uo), (md.n_x, md.n_u)).into_owned(),
        b_w: bw_hat.view((xo, wo), (md.n_x, md.n_w)).into_owned(),
    })
}

/// Cost `∫ xᵀQx + uᵀRu` and output `y = Cx + D_u u + D_w w` in machine
/// coordinates, where `u` is the total field voltage deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct PerformanceSpec {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d_u: DMatrix<f64>,
    pub d_w: DMatrix<f64>,
}

impl PerformanceSpec {
    /// Rotor angles weighted by one and field voltages by `r_weight`;
    /// output of rotor angles plus `out_weight` times field voltages.
    pub fn benchmark(machines: usize, r_weight: f64, out_weight: f64) -> Self {
        let nx = STATES_PER_MACHINE * machines;
        let mut q = DMatrix::zeros(nx, nx);
        let mut c = DMatrix::zeros(machines, nx);
        for i in 0..machines {
            q[(STATES_PER_MACHINE * i, STATES_PER_MACHINE * i)] = 1.0;
            c[(i, STATES_PER_MACHINE * i)] = 1.0;
        }
        Self {
            q,
            r: DMatrix::identity(machines, machines) * r_weight,
            c,
            d_u: DMatrix::identity(machines, machines) * out_weight,
            d_w: DMatrix::zeros(machines, DISTURBANCES_PER_MACHINE * machines),
        }
    }
}

/// Objectives of one mode in terms of `(x̂_i, û_i, ŵ_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalObjectives {
    pub q: DMatrix<f64>,
    pub n: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d_u: DMatrix<f64>,
    pub d_w: DMatrix<f64>,
}

/// Full modal cost matrix `Û` over `[x̂; û]`.
pub fn modal_cost_matrix(spec: &PerformanceSpec, gains: &LocalGains, dec: &ModalDecomposition) -> DMatrix<f64> {
    let k = gains.block();
    let (nx, nu) = (k.ncols(), k.nrows());
    let rk = &spec.r * &k;
    let mut phys = DMatrix::zeros(nx + nu, nx + nu);
    phys.view_mut((0, 0), (nx, nx))
        .copy_from(&(&spec.q + k.transpose() * &rk));
    phys.view_mut((0, nx), (nx, nu)).copy_from(&rk.transpose());
    phys.view_mut((nx, 0), (nu, nx)).copy_from(&rk);
    phys.view_mut((nx, nx), (nu, nu)).copy_from(&spec.r);
    let t = block_diag(&[dec.m_x.clone(), dec.m_u.clone()]);
    let u = t.transpose() * phys * &t;
    (&u + u.transpose()) * 0.5
}

pub fn modal_objectives(
    spec: &PerformanceSpec,
    gains: &LocalGains,
    dec: &ModalDecomposition,
    i: usize,
) -> Result<ModalObjectives, DncsError> {
    if i >= dec.mode_count() {
        return Err(DncsError::Dimension(format!("mode {i} out of range")));
    }
    let k = gains.block();
    let nx = k.ncols();
    let u_hat = modal_cost_matrix(spec, gains, dec);
    let md = dec.modes[i];
    let (xo, uo, wo) = (dec.x_offsets()[i], dec.u_offsets()[i], dec.w_offsets()[i]);
    let c_hat = (&spec.c + &spec.d_u * &k) * &dec.m_x;
    let du_hat = &spec.d_u * &dec.m_u;
    let dw_hat = &spec.d_w * &dec.m_w;
    let ny = spec.c.nrows();
    Ok(ModalObjectives {
        q: u_hat.view((xo, xo), (md.n_x, md.n_x)).into_owned(),
        n: u_hat.view((xo, nx + uo), (md.n_x, md.n_u)).into_owned(),
        r: u_hat.view((nx + uo, nx + uo), (md.n_u, md.n_u)).into_owned(),
        c: c_hat.view((0, xo), (ny, md.n_x)).into_owned(),
        d_u: du_hat.view((0, uo), (ny, md.n_u)).into_owned(),
        d_w: dw_hat.view((0, wo), (ny, md.n_w)).into_owned(),
    })
}

/// Link delays and the derived per-mode and per-machine waits.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DelaySchedule {
    pub h: f64,
    /// `d[α][β]`: delay of the link carrying machine β's data to machine α.
    pub d: Vec<Vec<f64>>,
    pub d_hat: Vec<f64>,
    pub d_rho: Vec<f64>,
}

/// Minimum per-mode waits and the resulting per-machine command delays.
pub fn delay_map(
    mu_pattern: &[Vec<bool>],
    mx_inv_pattern: &[Vec<bool>],
    d: &[Vec<f64>],
) -> Result<(Vec<f64>, Vec<f64>), DncsError> {
    let m = d.len();
    if d.iter().any(|row| row.len() != m) || mu_pattern.len() != m {
        return Err(DncsError::Dimension("delay matrix and M_u pattern must be m×m / m×m̂".into()));
    }
    let modes = mx_inv_pattern.len();
    if mu_pattern.iter().any(|r| r.len() != modes) || mx_inv_pattern.iter().any(|r| r.len() != m) {
        return Err(DncsError::Dimension("pattern shapes disagree".into()));
    }
    for a in 0..m {
        if d[a][a] != 0.0 {
            return Err(DncsError::InvalidDelays(format!("d[{a}][{a}] = {} must be zero", d[a][a])));
        }
        for b in 0..m {
            if !(d[a][b].is_finite() && d[a][b] >= 0.0) {
                return Err(DncsError::InvalidDelays(format!("d[{a}][{b}] = {} must be non-negative", d[a][b])));
            }
            if d[a][b] != d[b][a] {
                return Err(DncsError::AsymmetricDelays);
            }
        }
    }
    let d_hat: Vec<f64> = (0..modes)
        .map(|i| {
            let mut best = 0.0_f64;
            for (alpha, row) in mu_pattern.iter().enumerate() {
                if !row[i] {
                    continue;
                }
                for (beta, &reads) in mx_inv_pattern[i].iter().enumerate() {
                    if reads {
                        best = best.max(d[alpha][beta]);
                    }
                }
            }
            best
        })
        .collect();
    let d_rho = mu_pattern
        .iter()
        .map(|row| {
            row.iter()
                .zip(&d_hat)
                .filter(|(on, _)| **on)
                .fold(0.0_f64, |acc, (_, v)| acc.max(*v))
        })
        .collect();
    Ok((d_hat, d_rho))
}

impl DelaySchedule {
    pub fn new(dec: &ModalDecomposition, d: Vec<Vec<f64>>, h: f64) -> Result<Self, DncsError> {
        if !(h.is_finite() && h > 0.0) {
            return Err(DncsError::InvalidDelays(format!("sampling period {h} must be positive")));
        }
        let (d_hat, d_rho) = delay_map(&dec.mu_pattern, &dec.mx_inv_pattern, &d)?;
        Ok(Self { h, d, d_hat, d_rho })
    }

    /// Two machines linked in both directions by delay `tau`.
    pub fn symmetric_pair(dec: &ModalDecomposition, tau: f64, h: f64) -> Result<Self, DncsError> {
        Self::new(dec, vec![vec![0.0, tau], vec![tau, 0.0]], h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum DesignMethod {
    Lqr,
    Hinf { tol: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Certificate {
    /// Optimal cost `z₀ᵀ P z₀`.
    Lqr { p: DMatrix<f64> },
    Hinf {
        gamma_star: f64,
        gamma_infeasible: f64,
        certified_norm: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModeDesign {
    pub mode: usize,
    pub disc: DiscretizedSystem,
    /// `v̂_k = F z_k`.
    pub f: DMatrix<f64>,
    pub certificate: Certificate,
}

impl ModeDesign {
    /// Design with remote feedback switched off.
    pub fn zero_gain(mode: usize, disc: DiscretizedSystem, certificate: Certificate) -> Self {
        let f = DMatrix::zeros(disc.n_u(), disc.n_z());
        Self {
            mode,
            disc,
            f,
            certificate,
        }
    }
}

/// Continuous description of one mode with its objectives.
pub fn modal_continuous(sub: &ModalSubsystem, obj: &ModalObjectives) -> (CtsSystem, CtsCost) {
    (
        CtsSystem {
            a: sub.a.clone(),
            b_u: sub.b_u.clone(),
            b_w: sub.b_w.clone(),
            c: obj.c.clone(),
            d_u: obj.d_u.clone(),
            d_w: obj.d_w.clone(),
        },
        CtsCost {
            q: obj.q.clone(),
            n: obj.n.clone(),
            r: obj.r.clone(),
        },
    )
}

pub fn design_mode(
    mode: usize,
    sub: &ModalSubsystem,
    obj: &ModalObjectives,
    h: f64,
    d_hat: f64,
    method: DesignMethod,
) -> Result<ModeDesign, DncsError> {
    let (sys, cost) = modal_continuous(sub, obj);
    let disc = discretize(&sys, &cost, h, d_hat)?;
    match method {
        DesignMethod::Lqr => {
            let res = lqr_design(&disc)?;
            Ok(ModeDesign {
                mode,
                disc,
                f: res.f,
                certificate: Certificate::Lqr { p: res.p },
            })
        }
        DesignMethod::Hinf { tol } => {
            let res = gamma_min(&disc, tol)?;
            Ok(ModeDesign {
                mode,
                disc,
                f: res.design.f.clone(),
                certificate: Certificate::Hinf {
                    gamma_star: res.gamma_star,
                    gamma_infeasible: res.gamma_infeasible,
                    certified_norm: res.design.certified_norm,
                },
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ModeRuntime {
    f: DMatrix<f64>,
    n_x: usize,
    n_u: usize,
    slots: usize,
    /// Spectral radius of the lifted closed loop.
    radius: f64,
    /// Past modal commands, oldest first.
    history: VecDeque<DVector<f64>>,
}

/// Output of one sampling instant.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    /// `v̂_{i,k}` per mode.
    pub v_hat: Vec<DVector<f64>>,
    /// `v_{ρ,k}` stacked over machines.
    pub v: DVector<f64>,
}

/// Local gains plus per-mode sampled feedback with delayed delivery.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributedController {
    pub k: DMatrix<f64>,
    pub dec: ModalDecomposition,
    pub schedule: DelaySchedule,
    modes: Vec<ModeRuntime>,
}

pub fn assemble_controller(
    gains: &LocalGains,
    dec: &ModalDecomposition,
    schedule: &DelaySchedule,
    designs: &[ModeDesign],
) -> Result<DistributedController, DncsError> {
    let modes = dec.mode_count();
    if designs.len() != modes || schedule.d_hat.len() != modes {
        return Err(DncsError::ScheduleMismatch(format!(
            "{} designs and {} mode delays for {modes} modes",
            designs.len(),
            schedule.d_hat.len()
        )));
    }
    let (d_hat, d_rho) = delay_map(&dec.mu_pattern, &dec.mx_inv_pattern, &schedule.d)?;
    if d_hat != schedule.d_hat || d_rho != schedule.d_rho {
        return Err(DncsError::ScheduleMismatch(
            "stored waits differ from those implied by the link delays".into(),
        ));
    }
    for (rho, row) in dec.mu_pattern.iter().enumerate() {
        for (i, &on) in row.iter().enumerate() {
            if on && schedule.d_rho[rho] != schedule.d_hat[i] {
                return Err(DncsError::ScheduleMismatch(format!(
                    "machine {rho} applies mode {i} after {} s but the mode was designed for {} s",
                    schedule.d_rho[rho], schedule.d_hat[i]
                )));
            }
        }
    }
    let mut runtime = Vec::with_capacity(modes);
    for (i, design) in designs.iter().enumerate() {
        if design.mode != i {
            return Err(DncsError::ScheduleMismatch(format!("design {i} is for mode {}", design.mode)));
        }
        let disc = &design.disc;
        if (disc.d - schedule.d_hat[i]).abs() > 1e-12 || (disc.h - schedule.h).abs() > 1e-12 {
            return Err(DncsError::ScheduleMismatch(format!(
                "mode {i} was discretized at h = {}, d = {} but the schedule has h = {}, d = {}",
                disc.h, disc.d, schedule.h, schedule.d_hat[i]
            )));
        }
        let md = dec.modes[i];
        if disc.n_x != md.n_x || disc.n_u() != md.n_u || design.f.shape() != (md.n_u, disc.n_z()) {
            return Err(DncsError::Dimension(format!("design for mode {i} has the wrong shape")));
        }
        let slots = disc.memory_slots();
        runtime.push(ModeRuntime {
            f: design.f.clone(),
            n_x: md.n_x,
            n_u: md.n_u,
            slots,
            radius: spectral_radius(&(&disc.a2 + &disc.b2u * &design.f)),
            history: (0..slots).map(|_| DVector::zeros(md.n_u)).collect(),
        });
    }
    Ok(DistributedController {
        k: gains.block(),
        dec: dec.clone(),
        schedule: schedule.clone(),
        modes: runtime,
    })
}

impl DistributedController {
    pub fn h(&self) -> f64 {
        self.schedule.h
    }

    /// Per-machine delay between sampling and command application.
    pub fn command_delays(&self) -> &[f64] {
        &self.schedule.d_rho
    }

    /// Time constant of the lifted closed loop of `mode`.
    pub fn time_constant(&self, mode: usize) -> f64 {
        let radius = self.modes[mode].radius;
        if radius >= 1.0 {
            f64::INFINITY
        } else if radius <= 0.0 {
            0.0
        } else {
            -self.schedule.h / radius.ln()
        }
    }

    /// Slowest time constant over the lifted closed loops of all modes.
    pub fn slowest_time_constant(&self) -> f64 {
        (0..self.modes.len())
            .map(|i| self.time_constant(i))
            .fold(0.0, f64::max)
    }

    pub fn memory_slots(&self, mode: usize) -> usize {
        self.modes[mode].slots
    }

    /// Replaces the stored command histories (oldest first per mode).
    pub fn set_history(&mut self, histories: &[Vec<DVector<f64>>]) -> Result<(), DncsError> {
        if histories.len() != self.modes.len() {
            return Err(DncsError::Dimension("one history per mode required".into()));
        }
        for (m, h) in self.modes.iter_mut().zip(histories) {
            if h.len() != m.slots || h.iter().any(|v| v.len() != m.n_u) {
                return Err(DncsError::Dimension("history length or width mismatch".into()));
            }
            m.history = h.iter().cloned().collect();
        }
        Ok(())
    }

    pub fn reset(&mut self) {
        for m in &mut self.modes {
            m.history = (0..m.slots).map(|_| DVector::zeros(m.n_u)).collect();
        }
    }

    /// Local part of the input, `K x`.
    pub fn local_input(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.k * x
    }

    /// Processes the plant state sampled at `kh` and returns the modal and
    /// per-machine commands issued at that instant.
    pub fn sample(&mut self, x: &DVector<f64>) -> SampleOutput {
        let x_hat = &self.dec.m_x_inv * x;
        let x_off = self.dec.x_offsets();
        let u_off = self.dec.u_offsets();
        let mut u_hat = DVector::zeros(self.dec.m_u.ncols());
        let mut v_hat = Vec::with_capacity(self.modes.len());
        for (i, m) in self.modes.iter_mut().enumerate() {
            let mut z = DVector::zeros(m.n_x + m.slots * m.n_u);
            z.rows_mut(0, m.n_x).copy_from(&x_hat.rows(x_off[i], m.n_x));
            for (j, past) in m.history.iter().enumerate() {
                z.rows_mut(m.n_x + j * m.n_u, m.n_u).copy_from(past);
            }
            let v = &m.f * z;
            if m.slots > 0 {
                m.history.pop_front();
                m.history.push_back(v.clone());
            }
            u_hat.rows_mut(u_off[i], m.n_u).copy_from(&v);
            v_hat.push(v);
        }
        let v = &self.dec.m_u * u_hat;
        SampleOutput { v_hat, v }
    }
}

/// Eigenvalue multiset distance: each eigenvalue of `parts` matched
/// greedily to the nearest unused eigenvalue of `whole`.
pub fn spectrum_mismatch(whole: &DMatrix<f64>, parts: &[DMatrix<f64>]) -> f64 {
    let mut pool = eigenvalues(whole);
    let mut worst = 0.0_f64;
    let mut count = 0;
    for p in parts {
        for l in eigenvalues(p) {
            count += 1;
            let Some((idx, dist)) = pool
                .iter()
                .enumerate()
                .map(|(k, v)| (k, (v - l).norm()))
                .min_by(|x, y| x.1.total_cmp(&y.1))
            else {
                return f64::INFINITY;
            };
            worst = worst.max(dist);
            pool.swap_remove(idx);
        }
    }
    if count != whole.nrows() {
        return f64::INFINITY;
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_plant() -> LinearPlant {
        // two decoupled, stable machines
        let mut a = DMatrix::zeros(6, 6);
        for b in [0, 3] {
            a[(b, b + 1)] = 1.0;
            a[(b + 1, b)] = -2.0;
            a[(b + 1, b + 1)] = -0.5;
            a[(b + 2, b + 2)] = -1.0;
        }
        let mut b_u = DMatrix::zeros(6, 2);
        b_u[(2, 0)] = 1.0;
        b_u[(5, 1)] = 1.0;
        let mut b_w = DMatrix::zeros(6, 4);
        b_w[(1, 0)] = 1.0;
        b_w[(4, 2)] = 1.0;
        LinearPlant { a, b_u, b_w, machines: 2 }
    }

    #[test]
    fn transforms_are_exact_inverses() {
        for block in [1, 2, 3] {
            let (t, inv) = difference_sum(block);
            assert_eq!(&t * &inv, DMatrix::identity(2 * block, 2 * block));
        }
    }

    #[test]
    fn identity_decomposition_on_block_plant() {
        let plant = toy_plant();
        let gains = LocalGains::uniform(&[0.0, 0.0, 0.0], 2);
        let dims = ModeDims { n_x: 3, n_u: 1, n_w: 2 };
        let dec = accept_decomposition(
            &plant,
            &gains,
            &DMatrix::identity(6, 6),
            &DMatrix::identity(2, 2),
            &DMatrix::identity(4, 4),
            &[dims, dims],
            &["a".into(), "b".into()],
            1e-12,
        )
        .unwrap();
        assert_eq!(dec.mu_pattern, vec![vec![true, false], vec![false, true]]);
        let sub = modal_subsystem(&plant, &gains, &dec, 1).unwrap();
        assert_eq!(sub.a, plant.a.view((3, 3), (3, 3)).into_owned());
        assert_eq!(sub.b_u, plant.b_u.view((3, 1), (3, 1)).into_owned());
    }

    #[test]
    fn unstable_local_loop_is_reported() {
        let plant = toy_plant();
        let gains = LocalGains::uniform(&[0.0, 0.0, 5.0], 2);
        assert!(matches!(gains.closed_loop(&plant), Err(DncsError::NotHurwitz { .. })));
    }

    #[test]
    fn uniform_delays_map_uniformly() {
        let full = vec![vec![true; 3]; 3];
        let d = vec![vec![0.0, 0.2, 0.2], vec![0.2, 0.0, 0.2], vec![0.2, 0.2, 0.0]];
        let (d_hat, d_rho) = delay_map(&full, &full, &d).unwrap();
        assert_eq!(d_hat, vec![0.2; 3]);
        assert_eq!(d_rho, vec![0.2; 3]);
    }

    #[test]
    fn asymmetric_delays_rejected() {
        let full = vec![vec![true; 2]; 2];
        let d = vec![vec![0.0, 0.1], vec![0.2, 0.0]];
        assert_eq!(delay_map(&full, &full, &d), Err(DncsError::AsymmetricDelays));
    }

    #[test]
    fn zero_gains_emit_nothing() {
        let plant = toy_plant();
        let gains = LocalGains::uniform(&[0.0, 0.0, 0.0], 2);
        let dims = ModeDims { n_x: 3, n_u: 1, n_w: 2 };
        let dec = accept_decomposition(
            &plant,
            &gains,
            &DMatrix::identity(6, 6),
            &DMatrix::identity(2, 2),
            &DMatrix::identity(4, 4),
            &[dims, dims],
            &["a".into(), "b".into()],
            1e-12,
        )
        .unwrap();
        let sched = DelaySchedule::symmetric_pair(&dec, 0.0, 0.1).unwrap();
        let spec = PerformanceSpec::benchmark(2, 1.0, 0.1);
        let designs: Vec<_> = (0..2)
            .map(|i| {
                let sub = modal_subsystem(&plant, &gains, &dec, i).unwrap();
                let obj = modal_objectives(&spec, &gains, &dec, i).unwrap();
                let (sys, cost) = modal_continuous(&sub, &obj);
                let disc = discretize(&sys, &cost, 0.1, 0.0).unwrap();
                ModeDesign::zero_gain(i, disc, Certificate::Lqr { p: DMatrix::zeros(3, 3) })
            })
            .collect();
        let mut ctl = assemble_controller(&gains, &dec, &sched, &designs).unwrap();
        let out = ctl.sample(&DVector::from_element(6, 1.0));
        assert!(out.v.iter().all(|v| *v == 0.0));
    }
}
