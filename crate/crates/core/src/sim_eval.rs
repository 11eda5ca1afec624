//! Closed-loop simulation under the distributed timing rules, per-mode
//! performance measures, decentralized / global bounds and delay sweeps.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::dncs::{
    assemble_controller, design_mode, modal_continuous, modal_objectives, modal_subsystem, Certificate,
    DelaySchedule, DesignMethod, DistributedController, DncsError, LocalGains, ModalDecomposition, ModeDesign,
    PerformanceSpec, symmetric_modes, BENCHMARK_OUTPUT_WEIGHT, BENCHMARK_R_WEIGHT,
};
use crate::grid_model::{benchmark_plant, GridError, LinearPlant};
use crate::linalg::{solve_stein, spectral_radius};
use crate::sampled::{discretize, DiscretizedSystem, SampledError};
use crate::synthesis::{gamma_min, hinf_norm, lqr_design, SynthesisError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("no integrator step up to {max_refinement}× finer than h/{base} hits every event (h = {h}, delays {delays:?})")]
    EventGridMismatch {
        h: f64,
        delays: Vec<f64>,
        base: usize,
        max_refinement: usize,
    },
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("closed loop is not stable (radius {0})")]
    Unstable(f64),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Dncs(#[from] DncsError),
    #[error(transparent)]
    Sampled(#[from] SampledError),
    #[error(transparent)]
    Synthesis(#[from] SynthesisError),
}

/// Largest refinement factor tried when searching for an event-aligned step.
const MAX_REFINEMENT: usize = 64;

/// Disturbance held constant over each sampling interval.
#[derive(Debug, Clone, PartialEq)]
pub enum Disturbance {
    Zero,
    /// `w_0, w_1, …`; zero after the last sample.
    Held(Vec<DVector<f64>>),
    /// `w_0 = amplitude`, zero afterwards.
    Pulse(DVector<f64>),
}

impl Disturbance {
    pub fn is_zero(&self) -> bool {
        match self {
            Disturbance::Zero => true,
            Disturbance::Held(seq) => seq.iter().all(|w| w.amax() == 0.0),
            Disturbance::Pulse(a) => a.amax() == 0.0,
        }
    }

    fn at(&self, k: usize, n_w: usize) -> DVector<f64> {
        match self {
            Disturbance::Zero => DVector::zeros(n_w),
            Disturbance::Held(seq) => seq.get(k).cloned().unwrap_or_else(|| DVector::zeros(n_w)),
            Disturbance::Pulse(a) if k == 0 => a.clone(),
            Disturbance::Pulse(_) => DVector::zeros(n_w),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    /// Physical initial state.
    pub x0: DVector<f64>,
    pub disturbance: Disturbance,
    /// Requested integrator step; refined to hit every event.
    pub step: Option<f64>,
    /// Fixed horizon; chosen automatically when absent.
    pub horizon: Option<f64>,
    pub record_trace: bool,
    /// Spacing of recorded trace rows, rounded to whole integrator steps;
    /// every step when absent.
    pub trace_interval: Option<f64>,
}

impl Scenario {
    pub fn from_state(x0: DVector<f64>) -> Self {
        Self {
            x0,
            disturbance: Disturbance::Zero,
            step: None,
            horizon: None,
            record_trace: false,
            trace_interval: None,
        }
    }
}

/// Recorded samples, every integrator step or every `trace_interval`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub t: Vec<f64>,
    pub x: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
    pub u_bar: Vec<DVector<f64>>,
    pub y: Vec<DVector<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub cost: f64,
    pub step: f64,
    /// True when the requested step had to be refined to hit the events.
    pub refined: bool,
    pub horizon: f64,
    /// False when the automatic horizon hit its cap before the cost settled.
    pub converged: bool,
    pub trace: Option<Trace>,
}

/// Number of integrator steps per period such that every command switch
/// lands on a step boundary.
pub fn event_aligned_steps(h: f64, delays: &[f64], step: f64) -> Result<(usize, bool), EvalError> {
    if !(step.is_finite() && step > 0.0) {
        return Err(EvalError::InvalidScenario(format!("integrator step {step} must be positive")));
    }
    let base = ((h / step) * (1.0 - 1e-12)).ceil().max(1.0) as usize;
    let base_exact = ((h / base as f64) - step).abs() <= 1e-12 * step;
    for k in 1..=MAX_REFINEMENT {
        let n = base * k;
        let dt = h / n as f64;
        let aligned = delays.iter().all(|&d| {
            let m = d / dt;
            (m - m.round()).abs() <= 1e-9 * m.round().max(1.0)
        });
        if aligned {
            return Ok((n, k > 1 || !base_exact));
        }
    }
    Err(EvalError::EventGridMismatch {
        h,
        delays: delays.to_vec(),
        base,
        max_refinement: MAX_REFINEMENT,
    })
}

/// Preallocated buffers for one RK4 step of `ẋ = Ā x + g` together with
/// the running cost at the four stages.
struct Rk4Work {
    forcing: DVector<f64>,
    k: [DVector<f64>; 4],
    stage: DVector<f64>,
    qx: DVector<f64>,
    u: DVector<f64>,
    ru: DVector<f64>,
}

impl Rk4Work {
    fn new(nx: usize, nu: usize) -> Self {
        Self {
            forcing: DVector::zeros(nx),
            k: std::array::from_fn(|_| DVector::zeros(nx)),
            stage: DVector::zeros(nx),
            qx: DVector::zeros(nx),
            u: DVector::zeros(nu),
            ru: DVector::zeros(nu),
        }
    }

    /// `xᵀQx + uᵀRu` with `u = K x + ū`, evaluated at `self.stage`.
    fn running(&mut self, k_gain: &DMatrix<f64>, spec: &PerformanceSpec, u_bar: &DVector<f64>) -> f64 {
        self.u.copy_from(u_bar);
        self.u.gemv(1.0, k_gain, &self.stage, 1.0);
        self.qx.gemv(1.0, &spec.q, &self.stage, 0.0);
        self.ru.gemv(1.0, &spec.r, &self.u, 0.0);
        self.stage.dot(&self.qx) + self.u.dot(&self.ru)
    }

    /// Advances `x` by `dt` and returns the cost increment.
    fn step(
        &mut self,
        a_bar: &DMatrix<f64>,
        k_gain: &DMatrix<f64>,
        spec: &PerformanceSpec,
        x: &mut DVector<f64>,
        u_bar: &DVector<f64>,
        dt: f64,
    ) -> f64 {
        let offsets = [0.0, 0.5 * dt, 0.5 * dt, dt];
        let mut c = [0.0; 4];
        for i in 0..4 {
            self.stage.copy_from(x);
            if i > 0 {
                let (done, _) = self.k.split_at(i);
                self.stage.axpy(offsets[i], &done[i - 1], 1.0);
            }
            c[i] = self.running(k_gain, spec, u_bar);
            let ki = &mut self.k[i];
            ki.copy_from(&self.forcing);
            ki.gemv(1.0, a_bar, &self.stage, 1.0);
        }
        let [k1, k2, k3, k4] = &self.k;
        x.axpy(dt / 6.0, k1, 1.0);
        x.axpy(dt / 3.0, k2, 1.0);
        x.axpy(dt / 3.0, k3, 1.0);
        x.axpy(dt / 6.0, k4, 1.0);
        (c[0] + 2.0 * c[1] + 2.0 * c[2] + c[3]) * (dt / 6.0)
    }
}

/// Integrates the physical closed loop with the controller's sampling and
/// delayed command delivery, accumulating `∫ xᵀQx + uᵀRu` with `u = Kx + ū`.
pub fn simulate_closed_loop(
    plant: &LinearPlant,
    spec: &PerformanceSpec,
    controller: &mut DistributedController,
    scn: &Scenario,
) -> Result<Simulation, EvalError> {
    let (nx, nu, nw) = (plant.n_x(), plant.n_u(), plant.n_w());
    if scn.x0.len() != nx {
        return Err(EvalError::InvalidScenario(format!("initial state has {} entries, plant has {nx}", scn.x0.len())));
    }
    let h = controller.h();
    let k_gain = controller.k.clone();
    let a_bar = &plant.a + &plant.b_u * &k_gain;
    let rho = spectral_radius(&a_bar).max(f64::MIN_POSITIVE);
    let requested = scn.step.unwrap_or_else(|| (h / 10.0).min(1.0 / rho));
    let delays = controller.command_delays().to_vec();
    let (n_per, refined) = event_aligned_steps(h, &delays, requested)?;
    let dt = h / n_per as f64;
    let switch_steps: Vec<usize> = delays.iter().map(|d| (d / dt).round() as usize).collect();

    let (auto, mut horizon) = match scn.horizon {
        Some(t) if t.is_finite() && t >= 0.0 => (false, t),
        Some(t) => return Err(EvalError::InvalidScenario(format!("horizon {t} must be non-negative"))),
        None => {
            let slowest = controller.slowest_time_constant();
            if !slowest.is_finite() {
                return Err(EvalError::Unstable(slowest));
            }
            // modes that start at rest and receive no disturbance stay at rest
            let forced = !scn.disturbance.is_zero();
            let x_hat = &controller.dec.m_x_inv * &scn.x0;
            let offsets = controller.dec.x_offsets();
            let tau = (0..controller.dec.mode_count())
                .filter(|&i| forced || x_hat.rows(offsets[i], controller.dec.modes[i].n_x).amax() > 0.0)
                .map(|i| controller.time_constant(i))
                .fold(0.0, f64::max);
            (true, (20.0 * tau).max(h))
        }
    };
    let cap = 50.0 * horizon;
    let mut total_steps = (horizon / dt).ceil() as usize;

    controller.reset();
    let mut x = scn.x0.clone();
    let mut u_bar = DVector::zeros(nu);
    let mut pending: VecDeque<(usize, usize, f64)> = VecDeque::new();
    let mut cost = 0.0;
    let mut trace = scn.record_trace.then(Trace::default);
    let stride = match scn.trace_interval {
        None => 1,
        Some(t) if t.is_finite() && t > 0.0 => ((t / dt).round() as usize).max(1),
        Some(t) => return Err(EvalError::InvalidScenario(format!("trace interval {t} must be positive"))),
    };
    let output = |x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>| &spec.c * x + &spec.d_u * u + &spec.d_w * w;
    let mut work = Rk4Work::new(nx, nu);
    let mut s = 0usize;
    let mut chunk_start_cost = 0.0;
    let mut converged = true;
    loop {
        while s < total_steps {
            let k = s / n_per;
            if s.is_multiple_of(n_per) {
                let out = controller.sample(&x);
                for (rho, &lag) in switch_steps.iter().enumerate() {
                    pending.push_back((s + lag, rho, out.v[rho]));
                }
                pending.make_contiguous().sort_by_key(|e| e.0);
            }
            while let Some(&(at, rho, v)) = pending.front() {
                if at > s {
                    break;
                }
                u_bar[rho] = v;
                pending.pop_front();
            }
            let w = scn.disturbance.at(k, nw);
            if let Some(tr) = trace.as_mut().filter(|_| s.is_multiple_of(stride)) {
                let u = &k_gain * &x + &u_bar;
                tr.t.push(s as f64 * dt);
                tr.y.push(output(&x, &u, &w));
                tr.x.push(x.clone());
                tr.u.push(u);
                tr.u_bar.push(u_bar.clone());
            }
            work.forcing.gemv(1.0, &plant.b_u, &u_bar, 0.0);
            work.forcing.gemv(1.0, &plant.b_w, &w, 1.0);
            cost += work.step(&a_bar, &k_gain, spec, &mut x, &u_bar, dt);
            s += 1;
        }
        if !auto {
            break;
        }
        let increment = cost - chunk_start_cost;
        if increment.abs() <= 1e-9 * cost.abs() || cost == 0.0 {
            break;
        }
        if horizon >= cap {
            converged = false;
            break;
        }
        chunk_start_cost = cost;
        let extra = (0.25 * horizon).max(h);
        horizon += extra;
        total_steps = (horizon / dt).ceil() as usize;
    }
    if let Some(tr) = trace.as_mut() {
        let w = scn.disturbance.at(s / n_per, nw);
        let u = &k_gain * &x + &u_bar;
        tr.t.push(s as f64 * dt);
        tr.y.push(output(&x, &u, &w));
        tr.x.push(x.clone());
        tr.u.push(u);
        tr.u_bar.push(u_bar.clone());
    }
    Ok(Simulation {
        cost,
        step: dt,
        refined,
        horizon: s as f64 * dt,
        converged,
        trace,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Measure {
    LqrCost,
    HinfGamma,
}

impl Measure {
    pub fn name(self) -> &'static str {
        match self {
            Measure::LqrCost => "lqr_cost",
            Measure::HinfGamma => "hinf_gamma",
        }
    }
}

/// Everything needed to design and score the modes of one plant.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalContext {
    pub plant: LinearPlant,
    pub gains: LocalGains,
    pub dec: ModalDecomposition,
    pub spec: PerformanceSpec,
    pub h: f64,
    pub hinf_tol: f64,
}

impl EvalContext {
    /// Benchmark plant with identical local gains `k`, the default cost and
    /// output, and the swap-symmetric modes.
    pub fn benchmark(k: &[f64], h: f64, hinf_tol: f64) -> Result<Self, EvalError> {
        let (_, plant) = benchmark_plant()?;
        let gains = LocalGains::uniform(k, plant.machines);
        let dec = symmetric_modes(&plant, &gains)?;
        let spec = PerformanceSpec::benchmark(plant.machines, BENCHMARK_R_WEIGHT, BENCHMARK_OUTPUT_WEIGHT);
        Ok(Self {
            plant,
            gains,
            dec,
            spec,
            h,
            hinf_tol,
        })
    }

    /// Continuous mode `i` discretized with delay `d`.
    pub fn discretize_mode(&self, i: usize, d: f64) -> Result<DiscretizedSystem, EvalError> {
        let sub = modal_subsystem(&self.plant, &self.gains, &self.dec, i)?;
        let obj = modal_objectives(&self.spec, &self.gains, &self.dec, i)?;
        let (sys, cost) = modal_continuous(&sub, &obj);
        Ok(discretize(&sys, &cost, self.h, d)?)
    }

    pub fn design(&self, i: usize, d: f64, measure: Measure) -> Result<ModeDesign, EvalError> {
        let sub = modal_subsystem(&self.plant, &self.gains, &self.dec, i)?;
        let obj = modal_objectives(&self.spec, &self.gains, &self.dec, i)?;
        let method = match measure {
            Measure::LqrCost => DesignMethod::Lqr,
            Measure::HinfGamma => DesignMethod::Hinf { tol: self.hinf_tol },
        };
        Ok(design_mode(i, &sub, &obj, self.h, d, method)?)
    }

    /// Designs every mode for link delay `tau` on both directions and
    /// assembles the runtime controller.
    pub fn controller(&self, tau: f64, measure: Measure) -> Result<(DistributedController, Vec<ModeDesign>), EvalError> {
        let d = symmetric_delays(self.plant.machines, tau);
        let schedule = DelaySchedule::new(&self.dec, d, self.h)?;
        let designs = (0..self.dec.mode_count())
            .map(|i| self.design(i, schedule.d_hat[i], measure))
            .collect::<Result<Vec<_>, _>>()?;
        let ctl = assemble_controller(&self.gains, &self.dec, &schedule, &designs)?;
        Ok((ctl, designs))
    }

    /// Unit initial state on the first (rotor angle) component of mode `i`.
    pub fn default_modal_state(&self, i: usize) -> DVector<f64> {
        let mut z = DVector::zeros(self.dec.modes[i].n_x);
        z[0] = 1.0;
        z
    }

    /// Physical state whose mode-`i` coordinates are `x_hat` and all other
    /// modes are zero.
    pub fn physical_state(&self, i: usize, x_hat: &DVector<f64>) -> DVector<f64> {
        let mut full = DVector::zeros(self.plant.n_x());
        full.rows_mut(self.dec.x_offsets()[i], x_hat.len()).copy_from(x_hat);
        &self.dec.m_x * full
    }
}

/// Every pair of distinct machines linked by delay `tau`.
pub fn symmetric_delays(machines: usize, tau: f64) -> Vec<Vec<f64>> {
    (0..machines)
        .map(|a| (0..machines).map(|b| if a == b { 0.0 } else { tau }).collect())
        .collect()
}

/// Optimal LQR cost from modal state `x_hat` with an empty command history.
pub fn lqr_value(disc: &DiscretizedSystem, p: &DMatrix<f64>, x_hat: &DVector<f64>) -> f64 {
    let z = disc.lifted_state(x_hat, &vec![DVector::zeros(disc.n_u()); disc.memory_slots()]);
    z.dot(&(p * &z))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attenuation {
    pub gamma_star: f64,
    pub gamma_infeasible: f64,
    /// Closed-loop norm of the returned design, evaluated independently.
    pub certified_norm: f64,
    pub f: DMatrix<f64>,
}

/// Closed-loop peak gain of a lifted design `u = F z`.
pub fn closed_loop_norm(disc: &DiscretizedSystem, f: &DMatrix<f64>) -> Result<f64, SynthesisError> {
    hinf_norm(
        &(&disc.a2 + &disc.b2u * f),
        &disc.b2w,
        &(&disc.c2 + &disc.d2u * f),
        &disc.d2w,
    )
}

pub fn attenuation_of_mode(ctx: &EvalContext, i: usize, d_hat: f64) -> Result<Attenuation, EvalError> {
    let disc = ctx.discretize_mode(i, d_hat)?;
    let search = gamma_min(&disc, ctx.hinf_tol)?;
    let certified_norm = closed_loop_norm(&disc, &search.design.f)?;
    Ok(Attenuation {
        gamma_star: search.gamma_star,
        gamma_infeasible: search.gamma_infeasible,
        certified_norm,
        f: search.design.f,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Bounds {
    /// Remote commands disabled.
    pub upper: f64,
    /// Joint design of all inputs without delay.
    pub lower: f64,
}

/// Decentralized (upper) and global (lower) values of `measure` on mode `i`.
pub fn compute_bounds(ctx: &EvalContext, i: usize, measure: Measure, x_hat: &DVector<f64>) -> Result<Bounds, EvalError> {
    let disc = ctx.discretize_mode(i, 0.0)?;
    match measure {
        Measure::LqrCost => {
            let radius = spectral_radius(&disc.a2);
            let p0 = solve_stein(&disc.a2, &disc.q2).ok_or(EvalError::Unstable(radius))?;
            let lqr = lqr_design(&disc)?;
            Ok(Bounds {
                upper: lqr_value(&disc, &p0, x_hat),
                lower: lqr_value(&disc, &lqr.p, x_hat),
            })
        }
        Measure::HinfGamma => {
            let upper = hinf_norm(&disc.a2, &disc.b2w, &disc.c2, &disc.d2w)?;
            let lower = gamma_min(&disc, ctx.hinf_tol)?.gamma_star;
            Ok(Bounds { upper, lower })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub delay_s: f64,
    pub mode: String,
    pub measure: Measure,
    pub value: f64,
    pub lower_bound: f64,
    pub upper_bound: f64,
    pub status: String,
}

impl SweepRow {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// Soft findings that do not fail the run.
    pub warnings: Vec<String>,
    /// Relative slack allowed on both sides of the bound check.
    pub bound_slack: f64,
}

impl SweepResult {
    pub fn all_within_bounds(&self) -> bool {
        self.rows.iter().all(SweepRow::ok)
    }
}

pub const BOUND_SLACK: f64 = 1e-9;

/// Whether `lower ≤ value ≤ upper` up to the relative slack.
pub fn within_bounds(value: f64, b: Bounds) -> bool {
    value.is_finite()
        && value >= b.lower - BOUND_SLACK * b.lower.abs()
        && value <= b.upper + BOUND_SLACK * b.upper.abs()
}

fn measure_at(ctx: &EvalContext, i: usize, tau: f64, measure: Measure, x_hat: &DVector<f64>) -> Result<f64, EvalError> {
    let schedule = DelaySchedule::new(&ctx.dec, symmetric_delays(ctx.plant.machines, tau), ctx.h)?;
    let d_hat = schedule.d_hat[i];
    match measure {
        Measure::LqrCost => {
            let design = ctx.design(i, d_hat, measure)?;
            match &design.certificate {
                Certificate::Lqr { p } => Ok(lqr_value(&design.disc, p, x_hat)),
                Certificate::Hinf { .. } => unreachable!("LQR design returns an LQR certificate"),
            }
        }
        Measure::HinfGamma => Ok(attenuation_of_mode(ctx, i, d_hat)?.gamma_star),
    }
}

/// Scores mode `i` for every link delay of `grid`, in parallel.
pub fn sweep_delays(ctx: &EvalContext, i: usize, measure: Measure, grid: &[f64], x_hat: &DVector<f64>) -> Result<SweepResult, EvalError> {
    if grid.is_empty() {
        return Err(EvalError::InvalidScenario("delay grid is empty".into()));
    }
    if grid.iter().any(|t| !(t.is_finite() && *t >= 0.0)) || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(EvalError::InvalidScenario("delay grid must be non-negative and strictly ascending".into()));
    }
    let bounds = compute_bounds(ctx, i, measure, x_hat)?;
    let label = ctx.dec.labels[i].clone();
    let rows: Vec<SweepRow> = grid
        .par_iter()
        .map(|&tau| {
            let (value, status) = match measure_at(ctx, i, tau, measure, x_hat) {
                Ok(v) if within_bounds(v, bounds) => (v, "ok".to_string()),
                Ok(v) => (v, "bound_violation".to_string()),
                Err(e) => (f64::NAN, format!("error: {e}")),
            };
            SweepRow {
                delay_s: tau,
                mode: label.clone(),
                measure,
                value,
                lower_bound: bounds.lower,
                upper_bound: bounds.upper,
                status,
            }
        })
        .collect();
    let warnings = trend_warnings(&rows);
    Ok(SweepResult {
        rows,
        warnings,
        bound_slack: BOUND_SLACK,
    })
}

/// Fraction of consecutive pairs along which the value does not decrease.
pub fn nondecreasing_fraction(rows: &[SweepRow]) -> f64 {
    let pairs: Vec<_> = rows.windows(2).filter(|w| w[0].ok() && w[1].ok()).collect();
    if pairs.is_empty() {
        return 1.0;
    }
    let up = pairs
        .iter()
        .filter(|w| w[1].value >= w[0].value * (1.0 - BOUND_SLACK))
        .count();
    up as f64 / pairs.len() as f64
}

fn trend_warnings(rows: &[SweepRow]) -> Vec<String> {
    rows.windows(2)
        .filter(|w| w[0].ok() && w[1].ok() && w[1].value < w[0].value * (1.0 - BOUND_SLACK))
        .map(|w| {
            format!(
                "{} {} decreases from {:.6e} at {} s to {:.6e} at {} s",
                w[0].mode,
                w[0].measure.name(),
                w[0].value,
                w[0].delay_s,
                w[1].value,
                w[1].delay_s
            )
        })
        .collect()
}
