//! Run configuration. Every numeric key carries its unit in its name.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dncs::{LocalGains, PerformanceSpec, K_HINF, K_LQR};
use crate::grid_model::{
    build_two_area_network, EquilibriumOptions, FieldSetpoint, GeneratorParams, Impedance, MachineSetpoint,
    MechanicalSetpoint, NetworkModel, DISTURBANCES_PER_MACHINE, STATES_PER_MACHINE,
};
use crate::sim_eval::Measure;

/// Prefix of environment variables that override config keys. Nested keys
/// are joined with `__`, array elements addressed by index, e.g.
/// `DNCS_CFG_sampling__h_s=0.01` or `DNCS_CFG_generators__0__J_kg_m2=3e4`.
pub const ENV_PREFIX: &str = "DNCS_CFG_";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config {origin}: {message}")]
    Parse { origin: String, message: String },
    #[error("config key `{key}`: {reason}")]
    Invalid { key: String, reason: String },
    #[error("environment override {var}: {reason}")]
    Env { var: String, reason: String },
}

fn invalid(key: impl Into<String>, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.into(),
        reason: reason.into(),
    }
}

/// Branch impedance: `[re, im]` in ohms, or `"open"` / `"short"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ImpedanceSpec {
    Ohms([f64; 2]),
    Sentinel(String),
}

impl ImpedanceSpec {
    fn to_impedance(&self, key: &str) -> Result<Impedance, ConfigError> {
        match self {
            ImpedanceSpec::Ohms([re, im]) => Ok(Impedance::ohms(*re, *im)),
            ImpedanceSpec::Sentinel(s) if s == "open" => Ok(Impedance::Open),
            ImpedanceSpec::Sentinel(s) if s == "short" => Ok(Impedance::Short),
            ImpedanceSpec::Sentinel(s) => Err(invalid(key, format!("expected [re, im], \"open\" or \"short\", got \"{s}\""))),
        }
    }
}

#[allow(non_snake_case)]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub omega0_rad_s: f64,
    pub Z_T_ohm: ImpedanceSpec,
    pub Z_L_ohm: ImpedanceSpec,
    pub Z_C_ohm: ImpedanceSpec,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            omega0_rad_s: 377.0,
            Z_T_ohm: ImpedanceSpec::Ohms([0.011, 0.106]),
            Z_L_ohm: ImpedanceSpec::Ohms([6.2, 2.1]),
            Z_C_ohm: ImpedanceSpec::Ohms([0.054, 0.53]),
        }
    }
}

#[allow(non_snake_case)]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub L_a0_mH: f64,
    pub L_a2_uH: f64,
    pub L_f_mH: f64,
    pub L_af_mH: f64,
    pub R_a_mOhm: f64,
    pub R_f_mOhm: f64,
    pub J_kg_m2: f64,
    pub B_fric_kg_m2_s: f64,
    pub pole_pairs: u32,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            L_a0_mH: 4.9,
            L_a2_uH: 46.0,
            L_f_mH: 577.0,
            L_af_mH: 4.0,
            R_a_mOhm: 3.0,
            R_f_mOhm: 71.5,
            J_kg_m2: 27548.0,
            B_fric_kg_m2_s: 10.0,
            pole_pairs: 2,
        }
    }
}

impl GeneratorConfig {
    fn validate(&self, prefix: &str) -> Result<(), ConfigError> {
        let positive = [
            ("L_a0_mH", self.L_a0_mH),
            ("L_a2_uH", self.L_a2_uH),
            ("L_f_mH", self.L_f_mH),
            ("L_af_mH", self.L_af_mH),
            ("R_a_mOhm", self.R_a_mOhm),
            ("R_f_mOhm", self.R_f_mOhm),
            ("J_kg_m2", self.J_kg_m2),
        ];
        for (k, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(invalid(format!("{prefix}.{k}"), format!("must be positive, got {v}")));
            }
        }
        if !(self.B_fric_kg_m2_s.is_finite() && self.B_fric_kg_m2_s >= 0.0) {
            return Err(invalid(
                format!("{prefix}.B_fric_kg_m2_s"),
                format!("must be non-negative, got {}", self.B_fric_kg_m2_s),
            ));
        }
        if self.pole_pairs == 0 {
            return Err(invalid(format!("{prefix}.pole_pairs"), "must be at least 1"));
        }
        Ok(())
    }

    fn params(&self, field_voltage: f64) -> GeneratorParams {
        GeneratorParams {
            l_a0: self.L_a0_mH / 1e3,
            l_a2: self.L_a2_uH / 1e6,
            l_f: self.L_f_mH / 1e3,
            l_af: self.L_af_mH / 1e3,
            r_a: self.R_a_mOhm / 1e3,
            r_f: self.R_f_mOhm / 1e3,
            inertia: self.J_kg_m2,
            friction: self.B_fric_kg_m2_s,
            pole_pairs: self.pole_pairs,
            mech_torque: 0.0,
            field_voltage,
        }
    }
}

/// Both machines are held at `rotor_angle_rad` with field voltage
/// `field_voltage_V`; mechanical torques balance the electrical ones.
#[allow(non_snake_case)]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OperatingPointConfig {
    pub field_voltage_V: f64,
    pub rotor_angle_rad: f64,
}

impl Default for OperatingPointConfig {
    fn default() -> Self {
        Self {
            field_voltage_V: 900.0,
            rotor_angle_rad: 0.0,
        }
    }
}

/// Local gains on `[δ, ω, ψ_f]` in V/rad, V·s/rad, V/Wb.
#[allow(non_snake_case)]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GainConfig {
    pub K_lqr: [f64; 3],
    pub K_hinf: [f64; 3],
}

impl Default for GainConfig {
    fn default() -> Self {
        Self {
            K_lqr: K_LQR,
            K_hinf: K_HINF,
        }
    }
}

/// Integrand `q_delta δ² + q_omega ω² + q_psi_f ψ_f² + r_field e_f²` per machine.
#[allow(non_snake_case)]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostConfig {
    pub q_delta_per_rad2: f64,
    pub q_omega_s2_per_rad2: f64,
    pub q_psi_f_per_Wb2: f64,
    pub r_field_per_V2: f64,
}

impl Default for CostConfig {
    fn default() -> Self {
        Self {
            q_delta_per_rad2: 1.0,
            q_omega_s2_per_rad2: 0.0,
            q_psi_f_per_Wb2: 0.0,
            r_field_per_V2: 2.5e-5,
        }
    }
}

/// Output per machine `y = delta_weight δ + field_weight e_f`.
#[allow(non_snake_case)]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub delta_weight_per_rad: f64,
    pub field_weight_per_V: f64,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            delta_weight_per_rad: 1.0,
            field_weight_per_V: 1e-2,
        }
    }
}

/// Sampling period and link-delay grid. `delays_s`, when present,
/// replaces the `delay_min_s..=delay_max_s` range.
#[allow(non_snake_case)]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub h_s: f64,
    pub delay_min_s: f64,
    pub delay_max_s: f64,
    pub delay_step_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delays_s: Option<Vec<f64>>,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            h_s: 0.02,
            delay_min_s: 0.0,
            delay_max_s: 0.5,
            delay_step_s: 0.02,
            delays_s: None,
        }
    }
}

impl SamplingConfig {
    pub fn grid(&self) -> Vec<f64> {
        if let Some(d) = &self.delays_s {
            return d.clone();
        }
        if !(self.delay_step_s > 0.0) || self.delay_max_s < self.delay_min_s {
            return Vec::new();
        }
        let n = ((self.delay_max_s - self.delay_min_s) / self.delay_step_s + 1e-9).floor() as usize;
        (0..=n)
            .map(|i| {
                let t = self.delay_min_s + i as f64 * self.delay_step_s;
                // snap to 12 decimals so multiples of the step print cleanly
                (t * 1e12).round() / 1e12
            })
            .collect()
    }
}

#[allow(non_snake_case)]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToleranceConfig {
    pub gamma_rel: f64,
    pub equilibrium_residual: f64,
    pub equilibrium_max_iters: usize,
}

impl Default for ToleranceConfig {
    fn default() -> Self {
        Self {
            gamma_rel: 1e-4,
            equilibrium_residual: 1e-8,
            equilibrium_max_iters: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitialState {
    /// `modal_state` on the chosen mode.
    Modal,
    /// Standard-normal modal state drawn from `--seed`.
    Random,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DisturbanceKind {
    None,
    /// One-sample pulse of `impulse_A` at the load buses.
    Impulse,
}

#[allow(non_snake_case)]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub mode: String,
    pub initial: InitialState,
    /// Modal state on `[δ̂, ω̂, ψ̂_f]` in rad, rad/s, Wb.
    pub modal_state: Vec<f64>,
    pub disturbance: DisturbanceKind,
    /// Load-bus currents `[i_wd1, i_wq1, i_wd2, i_wq2]` in A.
    pub impulse_A: Vec<f64>,
    pub step_s: f64,
    /// Zero selects the horizon automatically.
    pub horizon_s: f64,
    /// Spacing of the rows written to the trace.
    pub trace_interval_s: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            mode: crate::dncs::OSCILLATION.into(),
            initial: InitialState::Modal,
            modal_state: vec![1.0, 0.0, 0.0],
            disturbance: DisturbanceKind::None,
            impulse_A: vec![0.0; 4],
            step_s: 1e-3,
            horizon_s: 0.0,
            trace_interval_s: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    #[serde(default)]
    pub network: NetworkConfig,
    /// One entry shared by both machines, or one per machine.
    #[serde(default = "default_generators")]
    pub generators: Vec<GeneratorConfig>,
    #[serde(default)]
    pub operating_point: OperatingPointConfig,
    #[serde(default)]
    pub gains: GainConfig,
    #[serde(default)]
    pub cost: CostConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub tolerances: ToleranceConfig,
    #[serde(default)]
    pub scenario: ScenarioConfig,
}

fn default_generators() -> Vec<GeneratorConfig> {
    vec![GeneratorConfig::default()]
}

pub const MACHINES: usize = 2;

impl BenchmarkConfig {
    pub fn benchmark() -> Self {
        Self {
            generators: default_generators(),
            ..Self::default()
        }
    }

    /// Reads `path` (or the built-in benchmark when `None`) and applies
    /// environment overrides from `env`.
    pub fn load<I>(path: Option<&Path>, env: I) -> Result<Self, ConfigError>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let (text, origin) = match path {
            Some(p) => (
                std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                    path: p.display().to_string(),
                    source,
                })?,
                p.display().to_string(),
            ),
            None => (String::new(), "<built-in>".to_string()),
        };
        Self::parse(&text, &origin, env)
    }

    pub fn parse<I>(text: &str, origin: &str, env: I) -> Result<Self, ConfigError>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let overrides: Vec<(String, String)> = env.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        let cfg: Self = if overrides.is_empty() {
            toml::from_str(text).map_err(|e| ConfigError::Parse {
                origin: origin.into(),
                message: e.to_string(),
            })?
        } else {
            let mut table: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Parse {
                origin: origin.into(),
                message: e.to_string(),
            })?;
            let mut sorted = overrides;
            sorted.sort();
            for (var, value) in &sorted {
                apply_override(&mut table, &var[ENV_PREFIX.len()..], value).map_err(|reason| ConfigError::Env {
                    var: var.clone(),
                    reason,
                })?;
            }
            toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| ConfigError::Parse {
                origin: format!("{origin} with environment overrides"),
                message: e.to_string(),
            })?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let n = &self.network;
        if !(n.omega0_rad_s.is_finite() && n.omega0_rad_s > 0.0) {
            return Err(invalid("network.omega0_rad_s", "must be positive"));
        }
        match self.generators.len() {
            1 | MACHINES => {}
            k => return Err(invalid("generators", format!("expected 1 or {MACHINES} entries, got {k}"))),
        }
        for (i, g) in self.generators.iter().enumerate() {
            g.validate(&format!("generators[{i}]"))?;
        }
        let op = &self.operating_point;
        if !op.field_voltage_V.is_finite() {
            return Err(invalid("operating_point.field_voltage_V", "must be finite"));
        }
        if !op.rotor_angle_rad.is_finite() {
            return Err(invalid("operating_point.rotor_angle_rad", "must be finite"));
        }
        for (key, k) in [("gains.K_lqr", &self.gains.K_lqr), ("gains.K_hinf", &self.gains.K_hinf)] {
            if k.iter().any(|v| !v.is_finite()) {
                return Err(invalid(key, "entries must be finite"));
            }
        }
        let c = &self.cost;
        for (key, v) in [
            ("cost.q_delta_per_rad2", c.q_delta_per_rad2),
            ("cost.q_omega_s2_per_rad2", c.q_omega_s2_per_rad2),
            ("cost.q_psi_f_per_Wb2", c.q_psi_f_per_Wb2),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid(key, format!("must be non-negative, got {v}")));
            }
        }
        if !(c.r_field_per_V2.is_finite() && c.r_field_per_V2 > 0.0) {
            return Err(invalid("cost.r_field_per_V2", "must be positive"));
        }
        let o = &self.output;
        if !o.delta_weight_per_rad.is_finite() || !o.field_weight_per_V.is_finite() {
            return Err(invalid("output", "weights must be finite"));
        }
        let s = &self.sampling;
        if !(s.h_s.is_finite() && s.h_s > 0.0) {
            return Err(invalid("sampling.h_s", "must be positive"));
        }
        if s.delays_s.is_none() {
            if !(s.delay_step_s.is_finite() && s.delay_step_s > 0.0) {
                return Err(invalid("sampling.delay_step_s", "must be positive"));
            }
            if !(s.delay_min_s.is_finite() && s.delay_max_s.is_finite()) {
                return Err(invalid("sampling.delay_min_s", "range must be finite"));
            }
        }
        let grid = s.grid();
        if grid.iter().any(|t| !(t.is_finite() && *t >= 0.0)) || grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("sampling.delays_s", "delays must be non-negative and strictly ascending"));
        }
        let t = &self.tolerances;
        if !(t.gamma_rel > 0.0 && t.gamma_rel < 1.0) {
            return Err(invalid("tolerances.gamma_rel", "must lie in (0, 1)"));
        }
        if !(t.equilibrium_residual > 0.0) {
            return Err(invalid("tolerances.equilibrium_residual", "must be positive"));
        }
        if t.equilibrium_max_iters == 0 {
            return Err(invalid("tolerances.equilibrium_max_iters", "must be at least 1"));
        }
        let sc = &self.scenario;
        if sc.mode != crate::dncs::OSCILLATION && sc.mode != crate::dncs::COMMON {
            return Err(invalid("scenario.mode", format!("unknown mode \"{}\"", sc.mode)));
        }
        if sc.modal_state.len() != STATES_PER_MACHINE || sc.modal_state.iter().any(|v| !v.is_finite()) {
            return Err(invalid("scenario.modal_state", format!("expected {STATES_PER_MACHINE} finite entries")));
        }
        if sc.impulse_A.len() != DISTURBANCES_PER_MACHINE * MACHINES || sc.impulse_A.iter().any(|v| !v.is_finite()) {
            return Err(invalid(
                "scenario.impulse_A",
                format!("expected {} finite entries", DISTURBANCES_PER_MACHINE * MACHINES),
            ));
        }
        if !(sc.step_s.is_finite() && sc.step_s > 0.0) {
            return Err(invalid("scenario.step_s", "must be positive"));
        }
        if !(sc.horizon_s.is_finite() && sc.horizon_s >= 0.0) {
            return Err(invalid("scenario.horizon_s", "must be non-negative"));
        }
        if !(sc.trace_interval_s.is_finite() && sc.trace_interval_s > 0.0) {
            return Err(invalid("scenario.trace_interval_s", "must be positive"));
        }
        Ok(())
    }

    pub fn network(&self) -> Result<NetworkModel, ConfigError> {
        let n = &self.network;
        build_two_area_network(
            n.Z_T_ohm.to_impedance("network.Z_T_ohm")?,
            n.Z_L_ohm.to_impedance("network.Z_L_ohm")?,
            n.Z_C_ohm.to_impedance("network.Z_C_ohm")?,
            n.omega0_rad_s,
        )
        .map_err(|e| invalid("network", e.to_string()))
    }

    pub fn generators(&self) -> Vec<GeneratorParams> {
        let e_f = self.operating_point.field_voltage_V;
        (0..MACHINES)
            .map(|i| self.generators[i.min(self.generators.len() - 1)].params(e_f))
            .collect()
    }

    pub fn setpoints(&self) -> Vec<MachineSetpoint> {
        vec![
            MachineSetpoint {
                mechanical: MechanicalSetpoint::Angle(self.operating_point.rotor_angle_rad),
                field: FieldSetpoint::FieldVoltage(self.operating_point.field_voltage_V),
            };
            MACHINES
        ]
    }

    pub fn equilibrium_options(&self) -> EquilibriumOptions {
        EquilibriumOptions {
            max_iters: self.tolerances.equilibrium_max_iters,
            tol: self.tolerances.equilibrium_residual,
        }
    }

    /// `K₁` for the cost measure, `K₂` for attenuation.
    pub fn gains_for(&self, measure: Measure) -> LocalGains {
        let k = match measure {
            Measure::LqrCost => &self.gains.K_lqr,
            Measure::HinfGamma => &self.gains.K_hinf,
        };
        LocalGains::uniform(k, MACHINES)
    }

    pub fn performance(&self) -> PerformanceSpec {
        let nx = STATES_PER_MACHINE * MACHINES;
        let c = &self.cost;
        let o = &self.output;
        let mut q = DMatrix::zeros(nx, nx);
        let mut cm = DMatrix::zeros(MACHINES, nx);
        for i in 0..MACHINES {
            let b = STATES_PER_MACHINE * i;
            q[(b, b)] = c.q_delta_per_rad2;
            q[(b + 1, b + 1)] = c.q_omega_s2_per_rad2;
            q[(b + 2, b + 2)] = c.q_psi_f_per_Wb2;
            cm[(i, b)] = o.delta_weight_per_rad;
        }
        PerformanceSpec {
            q,
            r: DMatrix::identity(MACHINES, MACHINES) * c.r_field_per_V2,
            c: cm,
            d_u: DMatrix::identity(MACHINES, MACHINES) * o.field_weight_per_V,
            d_w: DMatrix::zeros(MACHINES, DISTURBANCES_PER_MACHINE * MACHINES),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn parse_scalar(value: &str) -> toml::Value {
    let wrapped = format!("v = {value}");
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(value.to_string()),
    }
}

fn apply_override(table: &mut toml::Table, path: &str, value: &str) -> Result<(), String> {
    let parts: Vec<&str> = path.split("__").collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(format!("malformed key path `{path}`"));
    }
    let mut node = table;
    for (depth, part) in parts.iter().enumerate() {
        let last = depth + 1 == parts.len();
        if last {
            node.insert(part.to_string(), parse_scalar(value));
            return Ok(());
        }
        let next = parts[depth + 1];
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        if let (toml::Value::Array(items), Ok(idx)) = (&mut *entry, next.parse::<usize>()) {
            while items.len() <= idx {
                items.push(toml::Value::Table(toml::Table::new()));
            }
            let item = &mut items[idx];
            if depth + 2 == parts.len() {
                *item = parse_scalar(value);
                return Ok(());
            }
            let toml::Value::Table(t) = item else {
                return Err(format!("`{part}[{idx}]` is not a table"));
            };
            return apply_override(t, &parts[depth + 2..].join("__"), value);
        }
        if matches!(entry, toml::Value::Table(t) if t.is_empty()) {
            if let Ok(idx) = next.parse::<usize>() {
                *entry = toml::Value::Array(vec![toml::Value::Table(toml::Table::new()); idx + 1]);
                let toml::Value::Array(items) = entry else { unreachable!() };
                let toml::Value::Table(t) = &mut items[idx] else { unreachable!() };
                return apply_override(t, &parts[depth + 2..].join("__"), value);
            }
        }
        node = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(format!("`{part}` is not a table")),
        };
    }
    Ok(())
}
