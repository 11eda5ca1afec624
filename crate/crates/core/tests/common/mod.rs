#![allow(dead_code)]

use dncs::dncs::{
    assemble_controller, delay_map, modal_subsystem, spectrum_mismatch, Certificate, DelaySchedule, LocalGains,
    ModeDesign, K_HINF, K_LQR,
};
use dncs::grid_model::benchmark_plant;
use dncs::linalg::{block_diag, max_abs, spectral_abscissa};
use dncs::sampled::oracle::{quadrature_cost_oracle, rk4_trajectory, HeldInputs};
use dncs::sampled::{discretize, CtsCost, CtsSystem};
use dncs::sim_eval::{
    closed_loop_norm, lqr_value, nondecreasing_fraction, simulate_closed_loop, sweep_delays, symmetric_delays,
    EvalContext, Measure, Scenario, SweepResult,
};
use dncs::synthesis::{gamma_min, hinf_design};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<String, String>;

pub const H: f64 = 0.02;
pub const HINF_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| scale * rng.random_range(-1.0..1.0))
}

pub fn random_vector(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| scale * rng.random_range(-1.0..1.0))
}

/// Hurwitz `A` with abscissa in `[-0.7, -0.2]`.
pub fn random_stable(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let a = random_matrix(rng, n, n, 2.0);
    let shift = spectral_abscissa(&a) + rng.random_range(0.2..0.7);
    a - DMatrix::identity(n, n) * shift
}

pub fn random_system(rng: &mut ChaCha8Rng) -> CtsSystem {
    let n = rng.random_range(1..=4);
    let m = rng.random_range(1..=2);
    let p = rng.random_range(0..=2);
    let l = rng.random_range(1..=2);
    CtsSystem {
        a: random_stable(rng, n),
        b_u: random_matrix(rng, n, m, 1.0),
        b_w: random_matrix(rng, n, p, 1.0),
        c: random_matrix(rng, l, n, 1.0),
        d_u: random_matrix(rng, l, m, 0.5),
        d_w: random_matrix(rng, l, p, 0.1),
    }
}

/// Positive definite stacked cost.
pub fn random_cost(rng: &mut ChaCha8Rng, n: usize, m: usize) -> CtsCost {
    let l = random_matrix(rng, n + m, n + m, 1.0);
    let s = &l * l.transpose() + DMatrix::identity(n + m, n + m) * 0.1;
    CtsCost {
        q: s.view((0, 0), (n, n)).into_owned(),
        n: s.view((0, n), (n, m)).into_owned(),
        r: s.view((n, n), (m, m)).into_owned(),
    }
}

pub fn rel_gap(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

pub const DELAY_RATIOS: [f64; 5] = [0.0, 0.3, 1.0, 1.7, 3.2];

/// Worst relative trajectory and cost errors of the lifted model against
/// the continuous-time oracles.
pub fn discretization_errors(seed: u64, systems: usize) -> Result<(f64, f64), String> {
    let mut rng = rng(seed);
    let h = 0.1;
    let steps = 30;
    let (mut traj_err, mut cost_err) = (0.0_f64, 0.0_f64);
    for s in 0..systems {
        let sys = random_system(&mut rng);
        let cost = random_cost(&mut rng, sys.n_x(), sys.n_u());
        let x0 = random_vector(&mut rng, sys.n_x(), 1.0);
        let inputs = HeldInputs {
            history: (0..5).map(|_| random_vector(&mut rng, sys.n_u(), 1.0)).collect(),
            inputs: (0..steps).map(|_| random_vector(&mut rng, sys.n_u(), 1.0)).collect(),
            disturbances: (0..steps).map(|_| random_vector(&mut rng, sys.n_w(), 1.0)).collect(),
        };
        for ratio in DELAY_RATIOS {
            let d = ratio * h;
            let disc = discretize(&sys, &cost, h, d).map_err(|e| format!("system {s}, d/h = {ratio}: {e}"))?;
            let slots = disc.memory_slots();
            let history = inputs.history[inputs.history.len() - slots..].to_vec();
            let held = HeldInputs {
                history: history.clone(),
                ..inputs.clone()
            };
            let reference = rk4_trajectory(&sys, h, d, &held, &x0, steps, 200);
            let scale = reference.iter().map(|x| x.norm()).fold(0.0, f64::max);
            let mut z = disc.lifted_state(&x0, &history);
            for k in 0..steps {
                let x = z.rows(0, sys.n_x()).into_owned();
                traj_err = traj_err.max((&x - &reference[k]).norm() / scale);
                z = &disc.a2 * &z + &disc.b2u * &held.inputs[k] + &disc.b2w * &held.disturbances[k];
            }
            let x = z.rows(0, sys.n_x()).into_owned();
            traj_err = traj_err.max((&x - &reference[steps]).norm() / scale);

            let quiet = HeldInputs {
                disturbances: vec![],
                ..held
            };
            let mut z = disc.lifted_state(&x0, &quiet.history);
            let mut lifted = 0.0;
            for u in &quiet.inputs {
                lifted += z.dot(&(&disc.q2 * &z)) + 2.0 * z.dot(&(&disc.n2 * u)) + u.dot(&(&disc.r2 * u));
                z = &disc.a2 * &z + &disc.b2u * u;
            }
            let quad = quadrature_cost_oracle(&sys, &cost, h, d, &quiet, &x0, steps as f64 * h);
            cost_err = cost_err.max(rel_gap(lifted, quad));
        }
    }
    Ok((traj_err, cost_err))
}

pub fn check_discretization() -> Check {
    let start = std::time::Instant::now();
    let (traj, cost) = discretization_errors(11, 50)?;
    let secs = start.elapsed().as_secs_f64();
    let msg = format!("trajectory error {traj:.2e}, cost error {cost:.2e}, {secs:.1} s");
    if traj <= 1e-8 && cost <= 1e-8 && secs < 30.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

pub fn lqr_context() -> EvalContext {
    EvalContext::benchmark(&K_LQR, H, HINF_TOL).expect("benchmark context")
}

pub fn hinf_context() -> EvalContext {
    EvalContext::benchmark(&K_HINF, H, HINF_TOL).expect("benchmark context")
}

/// Simulated cost from modal state `x_hat` of mode `i` with the designs
/// for link delay `tau`, the mode-`i` gain replaced by `f` when given.
pub fn simulated_cost(
    ctx: &EvalContext,
    i: usize,
    tau: f64,
    x_hat: &DVector<f64>,
    f: Option<&DMatrix<f64>>,
) -> Result<(f64, f64), String> {
    let (_, mut designs) = ctx.controller(tau, Measure::LqrCost).map_err(|e| e.to_string())?;
    let certificate = match &designs[i].certificate {
        Certificate::Lqr { p } => lqr_value(&designs[i].disc, p, x_hat),
        Certificate::Hinf { .. } => return Err("LQR design returned an H-infinity certificate".into()),
    };
    if let Some(f) = f {
        designs[i] = ModeDesign {
            f: f.clone(),
            ..designs[i].clone()
        };
    }
    let schedule = DelaySchedule::new(&ctx.dec, symmetric_delays(ctx.plant.machines, tau), ctx.h)
        .map_err(|e| e.to_string())?;
    let mut ctl = assemble_controller(&ctx.gains, &ctx.dec, &schedule, &designs).map_err(|e| e.to_string())?;
    let scn = Scenario::from_state(ctx.physical_state(i, x_hat));
    let sim = simulate_closed_loop(&ctx.plant, &ctx.spec, &mut ctl, &scn).map_err(|e| e.to_string())?;
    Ok((sim.cost, certificate))
}

pub fn check_lqr_certificate() -> Check {
    let ctx = lqr_context();
    let x_hat = ctx.default_modal_state(0);
    let mut notes = Vec::new();
    for tau in [0.0, 0.06, 0.14] {
        let (sim, cert) = simulated_cost(&ctx, 0, tau, &x_hat, None)?;
        let gap = rel_gap(sim, cert);
        if gap > 5e-3 {
            return Err(format!("d = {tau}: simulated {sim:.6e} vs certificate {cert:.6e}"));
        }
        let design = &ctx.controller(tau, Measure::LqrCost).map_err(|e| e.to_string())?.1[0];
        let mut tried = 0;
        for j in 0..design.f.len() {
            if design.f[j] == 0.0 {
                continue;
            }
            let mut f = design.f.clone();
            f[j] *= 1.01;
            let (perturbed, _) = simulated_cost(&ctx, 0, tau, &x_hat, Some(&f))?;
            if !(perturbed > sim) {
                return Err(format!(
                    "d = {tau}: raising gain entry {j} by 1% gave {perturbed:.12e} <= {sim:.12e}"
                ));
            }
            tried += 1;
        }
        notes.push(format!("d={tau}: gap {gap:.1e}, {tried} perturbations"));
    }
    Ok(notes.join("; "))
}

/// Every accepted γ on a log grid around γ* must certify; the bracket must
/// be tight and consistent.
pub fn hinf_certificate_on(disc: &dncs::sampled::DiscretizedSystem, label: &str) -> Result<usize, String> {
    let search = gamma_min(disc, HINF_TOL).map_err(|e| format!("{label}: {e}"))?;
    let (star, lo) = (search.gamma_star, search.gamma_infeasible);
    if lo > 0.0 {
        if star / lo - 1.0 > 2.0 * HINF_TOL {
            return Err(format!("{label}: bracket [{lo:.6e}, {star:.6e}] wider than 2 tol"));
        }
        if hinf_design(disc, lo).is_ok() {
            return Err(format!("{label}: infeasible end {lo:.6e} accepted"));
        }
    }
    if hinf_design(disc, star).is_err() {
        return Err(format!("{label}: gamma* = {star:.6e} rejected on re-run"));
    }
    let mut accepted = 0;
    for k in -4..=12 {
        let gamma = star * 1.5f64.powi(k);
        if let Ok(res) = hinf_design(disc, gamma) {
            let norm = closed_loop_norm(disc, &res.f).map_err(|e| format!("{label}: {e}"))?;
            if !(norm < gamma) {
                return Err(format!("{label}: gamma {gamma:.6e} accepted with norm {norm:.6e}"));
            }
            accepted += 1;
        }
    }
    Ok(accepted)
}

pub fn check_hinf_certificate() -> Check {
    let mut accepted = 0;
    let mut cases = 0;
    let mut rng = rng(23);
    for s in 0..10 {
        let sys = random_system(&mut rng);
        let cost = random_cost(&mut rng, sys.n_x(), sys.n_u());
        for d in [0.0, 0.03, 0.1] {
            let disc = discretize(&sys, &cost, 0.1, d).map_err(|e| e.to_string())?;
            if disc.n_w() == 0 {
                continue;
            }
            accepted += hinf_certificate_on(&disc, &format!("random system {s}, d = {d}"))?;
            cases += 1;
        }
    }
    let ctx = hinf_context();
    for i in 0..ctx.dec.mode_count() {
        for d in [0.0, 0.05, 0.14] {
            let disc = ctx.discretize_mode(i, d).map_err(|e| e.to_string())?;
            accepted += hinf_certificate_on(&disc, &format!("{} mode, d = {d}", ctx.dec.labels[i]))?;
            cases += 1;
        }
    }
    Ok(format!("{cases} problems, {accepted} accepted gammas certified"))
}

pub fn delay_grid() -> Vec<f64> {
    (0..=25).map(|k| (k as f64 * 0.02 * 1e12).round() / 1e12).collect()
}

/// Full sweeps of both modes for one measure.
pub fn benchmark_sweeps(measure: Measure) -> Result<Vec<SweepResult>, String> {
    let ctx = match measure {
        Measure::LqrCost => lqr_context(),
        Measure::HinfGamma => hinf_context(),
    };
    let grid = delay_grid();
    (0..ctx.dec.mode_count())
        .map(|i| sweep_delays(&ctx, i, measure, &grid, &ctx.default_modal_state(i)).map_err(|e| e.to_string()))
        .collect()
}

pub fn check_bound_sandwich(sweeps: &[(Measure, Vec<SweepResult>)], secs: f64) -> Check {
    let mut rows = 0;
    for (_, results) in sweeps {
        for res in results {
            for row in &res.rows {
                rows += 1;
                if !row.ok() {
                    return Err(format!(
                        "{} {} at {} s: {} not in [{}, {}] ({})",
                        row.measure.name(),
                        row.mode,
                        row.delay_s,
                        row.value,
                        row.lower_bound,
                        row.upper_bound,
                        row.status
                    ));
                }
            }
        }
    }
    let msg = format!("{rows} rows within bounds, {secs:.1} s single-threaded");
    if secs < 300.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

/// Minimum wait found by scanning candidate waits in increasing order.
pub fn brute_force_delays(mu: &[Vec<bool>], mx_inv: &[Vec<bool>], d: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let m = d.len();
    let mut candidates: Vec<f64> = d.iter().flatten().copied().collect();
    candidates.push(0.0);
    candidates.sort_by(f64::total_cmp);
    let d_hat: Vec<f64> = (0..mx_inv.len())
        .map(|i| {
            *candidates
                .iter()
                .find(|&&t| {
                    (0..m).all(|a| (0..m).all(|b| !(mu[a][i] && mx_inv[i][b]) || d[a][b] <= t))
                })
                .expect("largest delay always suffices")
        })
        .collect();
    let d_rho = (0..m)
        .map(|rho| {
            *candidates
                .iter()
                .find(|&&t| (0..mx_inv.len()).all(|i| !mu[rho][i] || d_hat[i] <= t))
                .expect("largest delay always suffices")
        })
        .collect();
    (d_hat, d_rho)
}

pub fn random_pattern(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<Vec<bool>> {
    (0..rows).map(|_| (0..cols).map(|_| rng.random_bool(0.5)).collect()).collect()
}

pub fn random_delays(rng: &mut ChaCha8Rng, m: usize) -> Vec<Vec<f64>> {
    let mut d = vec![vec![0.0; m]; m];
    for a in 0..m {
        for b in a + 1..m {
            let v = rng.random_range(0..25) as f64 * 0.02;
            d[a][b] = v;
            d[b][a] = v;
        }
    }
    d
}

pub fn check_delay_map() -> Check {
    let mut rng = rng(5);
    for t in 0..50 {
        let m = rng.random_range(1..=4);
        let modes = rng.random_range(1..=4);
        let mu = random_pattern(&mut rng, m, modes);
        let mx_inv = random_pattern(&mut rng, modes, m);
        let d = random_delays(&mut rng, m);
        let got = delay_map(&mu, &mx_inv, &d).map_err(|e| format!("pattern {t}: {e}"))?;
        let want = brute_force_delays(&mu, &mx_inv, &d);
        if got != want {
            return Err(format!("pattern {t}: {got:?} != {want:?}"));
        }
    }
    Ok("50 random patterns match exactly".into())
}

/// Largest off-block entry of `M⁻¹ X M` relative to its norm, over `Ā`,
/// `B_u` and `B_w`.
pub fn off_block_residual(ctx: &EvalContext) -> f64 {
    let dec = &ctx.dec;
    let a_bar = ctx.gains.closed_loop(&ctx.plant).expect("Hurwitz");
    let transformed = [
        (&dec.m_x_inv * &a_bar * &dec.m_x, dec.modes.iter().map(|m| m.n_x).collect::<Vec<_>>()),
        (&dec.m_x_inv * &ctx.plant.b_u * &dec.m_u, dec.modes.iter().map(|m| m.n_u).collect()),
        (&dec.m_x_inv * &ctx.plant.b_w * &dec.m_w, dec.modes.iter().map(|m| m.n_w).collect()),
    ];
    let row_dims: Vec<usize> = dec.modes.iter().map(|m| m.n_x).collect();
    let mut worst = 0.0_f64;
    for (mat, col_dims) in transformed {
        let mask = block_diag(
            &row_dims
                .iter()
                .zip(&col_dims)
                .map(|(&r, &c)| DMatrix::from_element(r, c, 1.0))
                .collect::<Vec<_>>(),
        );
        let off = mat.zip_map(&mask, |v, keep| if keep == 0.0 { v } else { 0.0 });
        worst = worst.max(max_abs(&off) / mat.norm());
    }
    worst
}

pub fn check_modal_decomposition() -> Check {
    let mut notes = Vec::new();
    for ctx in [lqr_context(), hinf_context()] {
        let residual = off_block_residual(&ctx);
        let a_bar = ctx.gains.closed_loop(&ctx.plant).map_err(|e| e.to_string())?;
        let parts: Vec<DMatrix<f64>> = (0..ctx.dec.mode_count())
            .map(|i| modal_subsystem(&ctx.plant, &ctx.gains, &ctx.dec, i).map(|s| s.a))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        let mismatch = spectrum_mismatch(&a_bar, &parts);
        if residual > 1e-8 || mismatch > 1e-7 {
            return Err(format!("off-block residual {residual:.2e}, spectrum mismatch {mismatch:.2e}"));
        }
        notes.push(format!("residual {residual:.1e}, spectrum {mismatch:.1e}"));
    }
    Ok(notes.join("; "))
}

pub fn check_realizability() -> Check {
    let (_, plant) = benchmark_plant().map_err(|e| e.to_string())?;
    let mut notes = Vec::new();
    for (name, k) in [("K_lqr", K_LQR), ("K_hinf", K_HINF)] {
        let gains = LocalGains::uniform(&k, plant.machines);
        let a_bar = gains.closed_loop(&plant).map_err(|e| format!("{name}: {e}"))?;
        notes.push(format!("{name} abscissa {:.4e}", spectral_abscissa(&a_bar)));
    }
    Ok(notes.join(", "))
}

/// Soft check: the fraction of nondecreasing consecutive pairs.
pub fn trend_report(sweeps: &[(Measure, Vec<SweepResult>)]) -> (bool, String) {
    let mut ok = true;
    let mut notes = Vec::new();
    for (measure, results) in sweeps {
        for res in results {
            let frac = nondecreasing_fraction(&res.rows);
            ok &= frac >= 0.9;
            let mode = res.rows.first().map_or("?", |r| r.mode.as_str());
            notes.push(format!("{} {mode} {:.0}%", measure.name(), 100.0 * frac));
        }
    }
    (ok, notes.join(", "))
}
