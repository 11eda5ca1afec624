//! Command-line front end: configuration, orchestration and artifacts.

pub mod config;
pub mod io;

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::dncs::{symmetric_modes, Certificate, DelaySchedule, DncsError};
use crate::grid_model::{linearize, solve_equilibrium, GridError, LinearPlant, OperatingPoint};
use crate::linalg::eigenvalues;
use crate::sim_eval::{
    lqr_value, simulate_closed_loop, sweep_delays, symmetric_delays, Disturbance, EvalContext, EvalError, Measure,
    Scenario, SweepRow,
};
use config::{BenchmarkConfig, ConfigError, DisturbanceKind, InitialState};
use io::{format_matrix, format_sweep, format_trace, sha256_hex};

pub const REPORT_FILE: &str = "report.json";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Dncs(#[from] DncsError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum MeasureArg {
    Lqr,
    Hinf,
}

impl From<MeasureArg> for Measure {
    fn from(m: MeasureArg) -> Self {
        match m {
            MeasureArg::Lqr => Measure::LqrCost,
            MeasureArg::Hinf => Measure::HinfGamma,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum ModeArg {
    Oscillation,
    Common,
    All,
}

/// Which configured local gain to apply, overriding the measure's default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum GainArg {
    KLqr,
    KHinf,
}

#[derive(Debug, Parser)]
#[command(name = "dncs", version, about = "Distributed networked damping control of a two-machine grid")]
pub struct Cli {
    /// TOML configuration; the built-in benchmark when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Seed for randomized initial states.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for sweeps (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
pub enum Command {
    /// Operating point and small-signal matrices.
    Linearize {
        /// Measure whose default local gain forms the closed loop.
        #[arg(long, value_enum, default_value = "lqr")]
        measure: MeasureArg,
        #[arg(long, value_enum)]
        gains: Option<GainArg>,
    },
    /// Per-mode remote feedback for one link delay.
    Design {
        #[arg(long, value_enum)]
        measure: MeasureArg,
        /// Link delay (s).
        #[arg(long)]
        delay: f64,
        #[arg(long, value_enum)]
        gains: Option<GainArg>,
    },
    /// Performance versus link delay with decentralized and global bounds.
    Sweep {
        #[arg(long, value_enum)]
        measure: MeasureArg,
        #[arg(long, value_enum, default_value = "oscillation")]
        mode: ModeArg,
        #[arg(long, value_enum)]
        gains: Option<GainArg>,
    },
    /// Closed-loop time response for one link delay.
    Simulate {
        #[arg(long, value_enum, default_value = "lqr")]
        measure: MeasureArg,
        /// Link delay (s).
        #[arg(long)]
        delay: f64,
        #[arg(long, value_enum)]
        gains: Option<GainArg>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Linearize { .. } => "linearize",
            Command::Design { .. } => "design",
            Command::Sweep { .. } => "sweep",
            Command::Simulate { .. } => "simulate",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Timing {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct OutputDigest {
    pub file: String,
    pub bytes: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub arguments: Value,
    pub seed: u64,
    pub config: BenchmarkConfig,
    pub config_sha256: String,
    pub timings: Vec<Timing>,
    pub warnings: Vec<String>,
    pub outputs: Vec<OutputDigest>,
    pub summary: Value,
    pub success: bool,
}

struct Run {
    dir: PathBuf,
    timings: Vec<Timing>,
    warnings: Vec<String>,
    outputs: Vec<OutputDigest>,
    clock: Instant,
}

impl Run {
    fn new(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(|source| CliError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        Ok(Self {
            dir: dir.to_path_buf(),
            timings: Vec::new(),
            warnings: Vec::new(),
            outputs: Vec::new(),
            clock: Instant::now(),
        })
    }

    fn lap(&mut self, stage: &str) {
        self.timings.push(Timing {
            stage: stage.into(),
            seconds: self.clock.elapsed().as_secs_f64(),
        });
        self.clock = Instant::now();
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<(), CliError> {
        let path = self.dir.join(name);
        std::fs::write(&path, contents).map_err(|source| CliError::Io {
            path: path.display().to_string(),
            source,
        })?;
        self.outputs.push(OutputDigest {
            file: name.into(),
            bytes: contents.len(),
            sha256: sha256_hex(contents.as_bytes()),
        });
        Ok(())
    }
}

/// Parses `args` and runs; returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(&cli, std::env::vars()) {
        Ok(report) => {
            if report.success {
                0
            } else {
                1
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run<I>(cli: &Cli, env: I) -> Result<RunReport, CliError>
where
    I: IntoIterator<Item = (String, String)>,
{
    let cfg = BenchmarkConfig::load(cli.config.as_deref(), env)?;
    if let Command::Sweep { .. } = cli.command {
        if cfg.sampling.grid().is_empty() {
            return Err(CliError::Usage("the delay grid is empty".into()));
        }
    }
    if let Command::Design { delay, .. } | Command::Simulate { delay, .. } = cli.command {
        if !(delay.is_finite() && delay >= 0.0) {
            return Err(CliError::Usage(format!("--delay must be a non-negative number of seconds, got {delay}")));
        }
    }
    if cli.threads == Some(0) {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    let pool = {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(n) = cli.threads {
            b = b.num_threads(n);
        }
        b.build().map_err(|e| CliError::Usage(format!("cannot start worker threads: {e}")))?
    };
    let mut run = Run::new(&cli.out)?;
    let resolved = cfg.to_toml();
    run.write(RESOLVED_CONFIG_FILE, &resolved)?;
    let (summary, success) = pool.install(|| match cli.command {
        Command::Linearize { measure, gains } => cmd_linearize(&cfg, &mut run, measure.into(), gains),
        Command::Design { measure, delay, gains } => cmd_design(&cfg, &mut run, measure.into(), delay, gains),
        Command::Sweep { measure, mode, gains } => cmd_sweep(&cfg, &mut run, measure.into(), mode, gains),
        Command::Simulate { measure, delay, gains } => cmd_simulate(&cfg, &mut run, measure.into(), delay, gains, cli.seed),
    })?;
    let report = RunReport {
        tool: "dncs".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: cli.command.name().into(),
        arguments: serde_json::to_value(&cli.command).expect("arguments serialize"),
        seed: cli.seed,
        config: cfg,
        config_sha256: sha256_hex(resolved.as_bytes()),
        timings: run.timings,
        warnings: run.warnings,
        outputs: run.outputs,
        summary,
        success,
    };
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    let path = run.dir.join(REPORT_FILE);
    std::fs::write(&path, text + "\n").map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    Ok(report)
}

fn plant_of(cfg: &BenchmarkConfig) -> Result<(OperatingPoint, LinearPlant), CliError> {
    let net = cfg.network()?;
    let op = solve_equilibrium(&cfg.generators(), &net, &cfg.setpoints(), cfg.equilibrium_options())?;
    let plant = linearize(&net, &op)?;
    Ok((op, plant))
}

fn context(cfg: &BenchmarkConfig, measure: Measure, gains: Option<GainArg>) -> Result<EvalContext, CliError> {
    let (_, plant) = plant_of(cfg)?;
    let gain_measure = match gains {
        Some(GainArg::KLqr) => Measure::LqrCost,
        Some(GainArg::KHinf) => Measure::HinfGamma,
        None => measure,
    };
    let gains = cfg.gains_for(gain_measure);
    let dec = symmetric_modes(&plant, &gains)?;
    Ok(EvalContext {
        plant,
        gains,
        dec,
        spec: cfg.performance(),
        h: cfg.sampling.h_s,
        hinf_tol: cfg.tolerances.gamma_rel,
    })
}

fn eig_json(m: &DMatrix<f64>) -> Vec<[f64; 2]> {
    let mut e: Vec<[f64; 2]> = eigenvalues(m).iter().map(|l| [l.re, l.im]).collect();
    e.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    e
}

fn column(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(v.len(), 1, v.as_slice())
}

fn cmd_linearize(
    cfg: &BenchmarkConfig,
    run: &mut Run,
    measure: Measure,
    gains: Option<GainArg>,
) -> Result<(Value, bool), CliError> {
    let (op, plant) = plant_of(cfg)?;
    run.lap("linearize");
    run.write("A.txt", &format_matrix(&plant.a))?;
    run.write("B_u.txt", &format_matrix(&plant.b_u))?;
    run.write("B_w.txt", &format_matrix(&plant.b_w))?;
    run.write("x0.txt", &format_matrix(&column(&op.state)))?;
    run.write("u0.txt", &format_matrix(&column(&op.input)))?;
    let eig_a = eig_json(&plant.a);
    println!("eigenvalues of A:");
    for [re, im] in &eig_a {
        println!("  {re:+.6e} {im:+.6e}i");
    }
    let gain_measure = match gains {
        Some(GainArg::KLqr) => Measure::LqrCost,
        Some(GainArg::KHinf) => Measure::HinfGamma,
        None => measure,
    };
    let local = cfg.gains_for(gain_measure);
    let a_bar = &plant.a + &plant.b_u * local.block();
    run.write("A_bar.txt", &format_matrix(&a_bar))?;
    let eig_bar = eig_json(&a_bar);
    println!("eigenvalues of A + B_u K:");
    for [re, im] in &eig_bar {
        println!("  {re:+.6e} {im:+.6e}i");
    }
    // fails loudly with the sign-convention diagnostic when not Hurwitz
    local.closed_loop(&plant)?;
    run.lap("closed loop");
    Ok((
        json!({
            "operating_point": {
                "state": op.state.as_slice(),
                "field_voltage_V": op.input.as_slice(),
                "mech_torque_Nm": op.machines.iter().map(|g| g.mech_torque).collect::<Vec<_>>(),
            },
            "eigenvalues_A": eig_a,
            "eigenvalues_A_bar": eig_bar,
        }),
        true,
    ))
}

fn cmd_design(
    cfg: &BenchmarkConfig,
    run: &mut Run,
    measure: Measure,
    delay: f64,
    gains: Option<GainArg>,
) -> Result<(Value, bool), CliError> {
    let ctx = context(cfg, measure, gains)?;
    run.lap("model");
    let schedule = DelaySchedule::new(&ctx.dec, symmetric_delays(ctx.plant.machines, delay), ctx.h)?;
    let (_, designs) = ctx.controller(delay, measure)?;
    run.lap("design");
    let mut modes = Vec::new();
    for d in &designs {
        let label = &ctx.dec.labels[d.mode];
        run.write(&format!("F_{label}.txt"), &format_matrix(&d.f))?;
        let cert = match &d.certificate {
            Certificate::Lqr { p } => {
                run.write(&format!("P_{label}.txt"), &format_matrix(p))?;
                let x_hat = DVector::from_column_slice(&cfg.scenario.modal_state);
                json!({ "cost": lqr_value(&d.disc, p, &x_hat) })
            }
            Certificate::Hinf {
                gamma_star,
                gamma_infeasible,
                certified_norm,
            } => json!({
                "gamma_star": gamma_star,
                "gamma_infeasible": gamma_infeasible,
                "certified_norm": certified_norm,
            }),
        };
        println!("{label}: d_hat = {} s, q = {}, r = {} s, {cert}", d.disc.d, d.disc.q, d.disc.r);
        modes.push(json!({
            "mode": label,
            "d_hat_s": d.disc.d,
            "q": d.disc.q,
            "r_s": d.disc.r,
            "lifted_states": d.disc.n_z(),
            "certificate": cert,
        }));
    }
    Ok((
        json!({
            "measure": measure.name(),
            "delay_s": delay,
            "machine_wait_s": schedule.d_rho,
            "modes": modes,
        }),
        true,
    ))
}

fn selected_modes(ctx: &EvalContext, mode: ModeArg) -> Vec<usize> {
    match mode {
        ModeArg::All => (0..ctx.dec.mode_count()).collect(),
        ModeArg::Oscillation => ctx.dec.mode_index(crate::dncs::OSCILLATION).into_iter().collect(),
        ModeArg::Common => ctx.dec.mode_index(crate::dncs::COMMON).into_iter().collect(),
    }
}

fn cmd_sweep(
    cfg: &BenchmarkConfig,
    run: &mut Run,
    measure: Measure,
    mode: ModeArg,
    gains: Option<GainArg>,
) -> Result<(Value, bool), CliError> {
    let ctx = context(cfg, measure, gains)?;
    run.lap("model");
    let grid = cfg.sampling.grid();
    let x_hat = DVector::from_column_slice(&cfg.scenario.modal_state);
    let mut rows: Vec<SweepRow> = Vec::new();
    let mut fractions = serde_json::Map::new();
    for i in selected_modes(&ctx, mode) {
        let res = sweep_delays(&ctx, i, measure, &grid, &x_hat)?;
        fractions.insert(
            ctx.dec.labels[i].clone(),
            json!(crate::sim_eval::nondecreasing_fraction(&res.rows)),
        );
        run.warnings.extend(res.warnings);
        rows.extend(res.rows);
        run.lap(&format!("sweep {}", ctx.dec.labels[i]));
    }
    run.write("sweep.csv", &format_sweep(&rows))?;
    let failed: Vec<String> = rows
        .iter()
        .filter(|r| !r.ok())
        .map(|r| format!("{} at {} s: {}", r.mode, r.delay_s, r.status))
        .collect();
    for f in &failed {
        eprintln!("row failed: {f}");
    }
    println!(
        "{} rows, {} within bounds ({} {})",
        rows.len(),
        rows.len() - failed.len(),
        measure.name(),
        match mode {
            ModeArg::All => "all modes",
            ModeArg::Oscillation => "oscillation mode",
            ModeArg::Common => "common mode",
        }
    );
    Ok((
        json!({
            "measure": measure.name(),
            "rows": rows.len(),
            "failed_rows": failed,
            "bound_slack": crate::sim_eval::BOUND_SLACK,
            "gamma_rel_tol": cfg.tolerances.gamma_rel,
            "nondecreasing_fraction": fractions,
        }),
        failed.is_empty(),
    ))
}

fn initial_modal_state(cfg: &BenchmarkConfig, n: usize, seed: u64) -> DVector<f64> {
    match cfg.scenario.initial {
        InitialState::Modal => DVector::from_column_slice(&cfg.scenario.modal_state),
        InitialState::Zero => DVector::zeros(n),
        InitialState::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))
        }
    }
}

fn cmd_simulate(
    cfg: &BenchmarkConfig,
    run: &mut Run,
    measure: Measure,
    delay: f64,
    gains: Option<GainArg>,
    seed: u64,
) -> Result<(Value, bool), CliError> {
    let ctx = context(cfg, measure, gains)?;
    run.lap("model");
    let (mut ctl, designs) = ctx.controller(delay, measure)?;
    run.lap("design");
    let mode = ctx
        .dec
        .mode_index(&cfg.scenario.mode)
        .ok_or_else(|| CliError::Usage(format!("unknown mode {}", cfg.scenario.mode)))?;
    let x_hat = initial_modal_state(cfg, ctx.dec.modes[mode].n_x, seed);
    let x0 = ctx.physical_state(mode, &x_hat);
    let disturbance = match cfg.scenario.disturbance {
        DisturbanceKind::None => Disturbance::Zero,
        DisturbanceKind::Impulse => Disturbance::Pulse(DVector::from_column_slice(&cfg.scenario.impulse_A)),
    };
    let scn = Scenario {
        x0,
        disturbance: disturbance.clone(),
        step: Some(cfg.scenario.step_s),
        horizon: (cfg.scenario.horizon_s > 0.0).then_some(cfg.scenario.horizon_s),
        record_trace: true,
        trace_interval: Some(cfg.scenario.trace_interval_s),
    };
    let sim = simulate_closed_loop(&ctx.plant, &ctx.spec, &mut ctl, &scn)?;
    run.lap("simulate");
    if sim.refined {
        run.warnings.push(format!(
            "integrator step refined from {} s to {} s so that every command switch lands on a step",
            cfg.scenario.step_s, sim.step
        ));
    }
    if !sim.converged {
        run.warnings.push(format!("cost had not settled at the horizon cap of {} s", sim.horizon));
    }
    run.write("trace.csv", &format_trace(sim.trace.as_ref().expect("trace recorded")))?;

    let mut summary = json!({
        "measure": measure.name(),
        "delay_s": delay,
        "mode": cfg.scenario.mode,
        "modal_state": x_hat.as_slice(),
        "J_measured": sim.cost,
        "step_s": sim.step,
        "step_refined": sim.refined,
        "horizon_s": sim.horizon,
        "horizon_converged": sim.converged,
    });
    let mut ok = true;
    match &designs[mode].certificate {
        Certificate::Lqr { p } if matches!(disturbance, Disturbance::Zero) => {
            let cert = lqr_value(&designs[mode].disc, p, &x_hat);
            let rel = if cert == 0.0 { sim.cost.abs() } else { (sim.cost - cert).abs() / cert };
            println!("J_measured = {:.9e}, certificate = {cert:.9e}, relative gap = {rel:.3e}", sim.cost);
            summary["certificate"] = json!(cert);
            summary["relative_gap"] = json!(rel);
            // a fixed horizon truncates the tail, so only the automatic one is judged
            if cfg.scenario.horizon_s <= 0.0 && rel > 5e-3 {
                run.warnings.push(format!("simulated cost differs from the certificate by {:.3}%", 100.0 * rel));
                ok = false;
            }
        }
        Certificate::Lqr { .. } => {
            println!("J_measured = {:.9e}", sim.cost);
        }
        Certificate::Hinf {
            gamma_star,
            certified_norm,
            ..
        } => {
            println!(
                "J_measured = {:.9e}, gamma_star = {gamma_star:.6e}, certified norm = {certified_norm:.6e}",
                sim.cost
            );
            summary["gamma_star"] = json!(gamma_star);
            summary["certified_norm"] = json!(certified_norm);
        }
    }
    Ok((summary, ok))
}
