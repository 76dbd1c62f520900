//! Virtual three-well gas-lift plant.
//!
//! Each well is a lumped two-state system (gas and liquid mass holdups) fed by
//! a reservoir valve and a gas injection line and discharging through a top
//! valve. The algebraic chain is explicit, so the states are integrated with a
//! fixed-step RK4 scheme and no nonlinear solve is needed.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const N_WELLS: usize = 3;

/// Column header of the trajectory CSV.
pub const TRAJECTORY_HEADER: &str =
    "t,Qg1,Qg2,Qg3,Ppump,CV101,CV102,CV103,mg1,ml1,mg2,ml2,mg3,ml3";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlantError {
    #[error("negative square-root argument in {relation} of well {well} ({value:.6e} Pa)")]
    NegativeSqrtArgument {
        well: usize,
        relation: &'static str,
        value: f64,
    },
    #[error("degenerate holdup in well {well}: gas volume {v_g:.6e} m^3")]
    DegenerateHoldup { well: usize, v_g: f64 },
    #[error("integration left the physical holdup bounds in well {well} at t = {t} s")]
    IntegrationUnstable { well: usize, t: f64 },
    #[error("invalid plant parameter `{name}`: {reason}")]
    InvalidParams { name: &'static str, reason: String },
    #[error("invalid time step {0} s")]
    InvalidStep(f64),
    #[error("malformed trajectory csv: {0}")]
    Csv(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for PlantError {
    fn from(e: std::io::Error) -> Self {
        PlantError::Io(e.to_string())
    }
}

/// Physical constants of the rig. Pressures are absolute, in Pa.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantParams {
    pub rho_l: f64,
    pub mu_mix: f64,
    pub molar_mass_gas: f64,
    pub gas_constant: f64,
    pub temperature: f64,
    pub gravity: f64,
    pub p_atm: f64,
    pub diameter: f64,
    pub length: f64,
    pub delta_h: f64,
    pub v_total: f64,
    pub theta_res: [f64; N_WELLS],
    pub theta_top: [f64; N_WELLS],
    /// Mass of one standard litre of injected gas (kg), 0 °C and 1 atm.
    pub std_litre_mass: f64,
}

impl Default for PlantParams {
    fn default() -> Self {
        let diameter = 0.02;
        let length = 1.5 + 2.2;
        Self {
            rho_l: 1000.0,
            mu_mix: 1.0e-3,
            molar_mass_gas: 0.02897,
            gas_constant: 8.314,
            temperature: 298.15,
            gravity: 9.81,
            p_atm: 1.01325e5,
            diameter,
            length,
            delta_h: 2.2,
            v_total: std::f64::consts::PI * (diameter / 2.0).powi(2) * length,
            // Calibrated so every corner of the nominal input box keeps
            // P_pump > P_bi > P_rh > P_atm with positive flows.
            theta_res: [6.0e-6; N_WELLS],
            theta_top: [4.0e-5; N_WELLS],
            std_litre_mass: 1.292e-3,
        }
    }
}

impl PlantParams {
    pub fn validate(&self) -> Result<(), PlantError> {
        let scalars = [
            ("rho_l", self.rho_l),
            ("mu_mix", self.mu_mix),
            ("molar_mass_gas", self.molar_mass_gas),
            ("gas_constant", self.gas_constant),
            ("temperature", self.temperature),
            ("gravity", self.gravity),
            ("p_atm", self.p_atm),
            ("diameter", self.diameter),
            ("length", self.length),
            ("delta_h", self.delta_h),
            ("v_total", self.v_total),
            ("std_litre_mass", self.std_litre_mass),
        ];
        for (name, v) in scalars {
            if !(v.is_finite() && v > 0.0) {
                return Err(PlantError::InvalidParams {
                    name,
                    reason: format!("must be finite and positive, got {v}"),
                });
            }
        }
        for (name, arr) in [("theta_res", self.theta_res), ("theta_top", self.theta_top)] {
            if arr.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(PlantError::InvalidParams {
                    name,
                    reason: format!("must be finite and positive, got {arr:?}"),
                });
            }
        }
        let pipe = std::f64::consts::PI * (self.diameter / 2.0).powi(2) * self.length;
        if ((self.v_total - pipe) / pipe).abs() > 0.01 {
            return Err(PlantError::InvalidParams {
                name: "v_total",
                reason: format!("{} m^3 is inconsistent with pipe volume {pipe} m^3", self.v_total),
            });
        }
        Ok(())
    }

    /// Pump pressure setpoints are gauge readings in bar.
    pub fn pump_pressure_pa(&self, p_pump_bar: f64) -> f64 {
        self.p_atm + p_pump_bar * 1.0e5
    }

    /// Injected gas mass flow (kg/s) for a standard volumetric flow in sL/min.
    pub fn gas_mass_flow(&self, q_g_slpm: f64) -> f64 {
        q_g_slpm * self.std_litre_mass / 60.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WellHoldup {
    pub m_g: f64,
    pub m_l: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    pub wells: [WellHoldup; N_WELLS],
    pub t: f64,
}

impl PlantState {
    /// Start-up state: liquid fills `fill` of each pipe, gas sits at the
    /// hydrostatic head plus 1 kPa so the riser discharges from t = 0.
    pub fn initial(params: &PlantParams, fill: f64) -> Self {
        let m_l = fill * params.rho_l * params.v_total;
        let v_g = params.v_total - m_l / params.rho_l;
        let gas_density_per_pa = params.molar_mass_gas / (params.gas_constant * params.temperature);
        let mut m_g = 0.0;
        for _ in 0..3 {
            let rho_mix = (m_g + m_l) / params.v_total;
            let p = params.p_atm + rho_mix * params.gravity * params.delta_h + 1.0e3;
            m_g = p * gas_density_per_pa * v_g;
        }
        Self {
            wells: [WellHoldup { m_g, m_l }; N_WELLS],
            t: 0.0,
        }
    }

    pub fn check_bounds(&self, params: &PlantParams) -> Result<(), PlantError> {
        let m_l_max = params.rho_l * params.v_total;
        for (w, h) in self.wells.iter().enumerate() {
            let ok = h.m_g.is_finite()
                && h.m_l.is_finite()
                && h.m_g > 0.0
                && h.m_l > 0.0
                && h.m_l < m_l_max;
            if !ok {
                return Err(PlantError::IntegrationUnstable { well: w, t: self.t });
            }
        }
        Ok(())
    }
}

/// Manipulated inputs and disturbances applied to the rig.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantInputs {
    /// Injected gas, sL/min.
    pub q_g: [f64; N_WELLS],
    /// Reservoir valve openings CV101..CV103, fraction.
    pub valve: [f64; N_WELLS],
    /// Pump outlet pressure, bar (gauge).
    pub p_pump: f64,
}

impl PlantInputs {
    pub fn nominal() -> Self {
        Self {
            q_g: [3.0; N_WELLS],
            valve: [1.0; N_WELLS],
            p_pump: 2.65,
        }
    }

    /// The four measured exogenous channels: Qg1, Qg2, Qg3, Ppump.
    pub fn exogenous(&self) -> [f64; 4] {
        [self.q_g[0], self.q_g[1], self.q_g[2], self.p_pump]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct WellFlows {
    pub w_l: f64,
    pub w_g: f64,
    pub p_bi: f64,
    pub p_rh: f64,
    pub rho_g: f64,
    pub rho_mix: f64,
    pub v_g: f64,
    pub v_l: f64,
    pub alpha_l: f64,
    pub w_total: f64,
    pub w_l_out: f64,
    pub w_g_out: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AlgebraicOutputs {
    pub wells: [WellFlows; N_WELLS],
    /// Number of square-root arguments clamped to zero (clamp policy only).
    pub clamped: usize,
}

/// What to do when a valve sees a reversed pressure difference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum SqrtPolicy {
    /// Abort; used for data generation.
    #[default]
    Strict,
    /// Treat the flow as zero; used by the live loop.
    ClampToZero,
}

fn checked_sqrt(
    arg: f64,
    pressure_diff: f64,
    well: usize,
    relation: &'static str,
    policy: SqrtPolicy,
    clamped: &mut usize,
) -> Result<f64, PlantError> {
    if pressure_diff >= 0.0 {
        return Ok(arg.sqrt());
    }
    match policy {
        SqrtPolicy::Strict => Err(PlantError::NegativeSqrtArgument {
            well,
            relation,
            value: pressure_diff,
        }),
        SqrtPolicy::ClampToZero => {
            *clamped += 1;
            Ok(0.0)
        }
    }
}

/// Evaluates the algebraic relations of one well in their causal order.
fn well_flows(
    well: usize,
    h: &WellHoldup,
    inputs: &PlantInputs,
    params: &PlantParams,
    policy: SqrtPolicy,
    clamped: &mut usize,
) -> Result<WellFlows, PlantError> {
    let v_l = h.m_l / params.rho_l;
    let v_g = params.v_total - v_l;
    if v_g <= 0.0 || !v_g.is_finite() {
        return Err(PlantError::DegenerateHoldup { well, v_g });
    }
    let rho_g = h.m_g / v_g;
    let p_bi = rho_g * params.gas_constant * params.temperature / params.molar_mass_gas;

    let p_pump = params.pump_pressure_pa(inputs.p_pump);
    let dp_res = p_pump - p_bi;
    let w_l = inputs.valve[well]
        * params.theta_res[well]
        * checked_sqrt(params.rho_l * dp_res, dp_res, well, "reservoir valve", policy, clamped)?;
    let w_g = params.gas_mass_flow(inputs.q_g[well]);

    let m_total = h.m_g + h.m_l;
    let rho_mix = m_total / params.v_total;
    let friction = 128.0 * params.mu_mix * (w_g + w_l) * params.length
        / (std::f64::consts::PI * rho_mix * params.diameter.powi(4));
    let p_rh = p_bi - rho_mix * params.gravity * params.delta_h - friction;

    let dp_top = p_rh - params.p_atm;
    let w_total = params.theta_top[well]
        * checked_sqrt(rho_mix * dp_top, dp_top, well, "top valve", policy, clamped)?;
    let alpha_l = h.m_l / m_total;
    let w_l_out = alpha_l * w_total;
    let w_g_out = w_total - w_l_out;

    Ok(WellFlows {
        w_l,
        w_g,
        p_bi,
        p_rh,
        rho_g,
        rho_mix,
        v_g,
        v_l,
        alpha_l,
        w_total,
        w_l_out,
        w_g_out,
    })
}

pub fn solve_algebraic(
    state: &PlantState,
    inputs: &PlantInputs,
    params: &PlantParams,
) -> Result<AlgebraicOutputs, PlantError> {
    solve_algebraic_with(state, inputs, params, SqrtPolicy::Strict)
}

pub fn solve_algebraic_with(
    state: &PlantState,
    inputs: &PlantInputs,
    params: &PlantParams,
    policy: SqrtPolicy,
) -> Result<AlgebraicOutputs, PlantError> {
    let mut out = AlgebraicOutputs::default();
    for w in 0..N_WELLS {
        out.wells[w] = well_flows(w, &state.wells[w], inputs, params, policy, &mut out.clamped)?;
    }
    Ok(out)
}

type Derivative = [[f64; 2]; N_WELLS];

fn derivative(
    wells: &[WellHoldup; N_WELLS],
    inputs: &PlantInputs,
    params: &PlantParams,
    policy: SqrtPolicy,
    clamped: &mut usize,
) -> Result<Derivative, PlantError> {
    let mut d = [[0.0; 2]; N_WELLS];
    for w in 0..N_WELLS {
        let f = well_flows(w, &wells[w], inputs, params, policy, clamped)?;
        d[w] = [f.w_g - f.w_g_out, f.w_l - f.w_l_out];
    }
    Ok(d)
}

fn offset(wells: &[WellHoldup; N_WELLS], d: &Derivative, h: f64) -> [WellHoldup; N_WELLS] {
    let mut out = *wells;
    for w in 0..N_WELLS {
        out[w].m_g += h * d[w][0];
        out[w].m_l += h * d[w][1];
    }
    out
}

/// Mass derivatives (ṁ_g, ṁ_l) per well at the given state.
pub fn mass_derivative(
    state: &PlantState,
    inputs: &PlantInputs,
    params: &PlantParams,
) -> Result<[[f64; 2]; N_WELLS], PlantError> {
    derivative(&state.wells, inputs, params, SqrtPolicy::Strict, &mut 0)
}

/// One explicit RK4 step of size `dt`.
pub fn step(
    state: &PlantState,
    inputs: &PlantInputs,
    params: &PlantParams,
    dt: f64,
) -> Result<PlantState, PlantError> {
    step_with(state, inputs, params, dt, SqrtPolicy::Strict).map(|(s, _)| s)
}

/// RK4 step returning the number of clamped square roots encountered.
pub fn step_with(
    state: &PlantState,
    inputs: &PlantInputs,
    params: &PlantParams,
    dt: f64,
    policy: SqrtPolicy,
) -> Result<(PlantState, usize), PlantError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(PlantError::InvalidStep(dt));
    }
    let mut clamped = 0;
    let x = &state.wells;
    let k1 = derivative(x, inputs, params, policy, &mut clamped)?;
    let k2 = derivative(&offset(x, &k1, dt / 2.0), inputs, params, policy, &mut clamped)?;
    let k3 = derivative(&offset(x, &k2, dt / 2.0), inputs, params, policy, &mut clamped)?;
    let k4 = derivative(&offset(x, &k3, dt), inputs, params, policy, &mut clamped)?;
    let mut next = PlantState {
        wells: *x,
        t: state.t + dt,
    };
    for w in 0..N_WELLS {
        for (j, v) in [&mut next.wells[w].m_g, &mut next.wells[w].m_l].into_iter().enumerate() {
            *v += dt / 6.0 * (k1[w][j] + 2.0 * k2[w][j] + 2.0 * k3[w][j] + k4[w][j]);
        }
    }
    next.check_bounds(params)?;
    Ok((next, clamped))
}

/// Integration settings shared by data generation and the live loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    /// Internal RK4 step, s.
    pub dt: f64,
    /// Logging period, s. Must be an integer multiple of `dt`.
    pub sample_period: f64,
    /// Relative-derivative threshold (1/s) for declaring steady state.
    pub steady_tol: f64,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            sample_period: 1.0,
            steady_tol: 1.0e-3,
        }
    }
}

impl IntegratorConfig {
    pub fn substeps(&self) -> usize {
        ((self.sample_period / self.dt).round() as usize).max(1)
    }
}

/// Advances the state over one logging period with constant inputs.
pub fn advance_period(
    state: &PlantState,
    inputs: &PlantInputs,
    params: &PlantParams,
    cfg: &IntegratorConfig,
    policy: SqrtPolicy,
) -> Result<(PlantState, usize), PlantError> {
    let n = cfg.substeps();
    let h = cfg.sample_period / n as f64;
    let t_end = state.t + cfg.sample_period;
    let mut s = *state;
    let mut clamped = 0;
    for _ in 0..n {
        let (next, c) = step_with(&s, inputs, params, h, policy)?;
        s = next;
        clamped += c;
    }
    // keep the logging grid exact
    s.t = t_end;
    Ok((s, clamped))
}

/// Largest relative mass derivative over all wells and phases (1/s).
pub fn max_relative_derivative(
    state: &PlantState,
    inputs: &PlantInputs,
    params: &PlantParams,
) -> Result<f64, PlantError> {
    let d = mass_derivative(state, inputs, params)?;
    let mut worst: f64 = 0.0;
    for w in 0..N_WELLS {
        worst = worst
            .max((d[w][0] / state.wells[w].m_g).abs())
            .max((d[w][1] / state.wells[w].m_l).abs());
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub t: f64,
    /// Inputs held over `[t, t + sample_period)`.
    pub inputs: PlantInputs,
    pub state: PlantState,
}

impl TrajectorySample {
    /// Output channel value: `var` 0 is m_g, 1 is m_l.
    pub fn channel(&self, well: usize, var: usize) -> f64 {
        let h = &self.state.wells[well];
        if var == 0 {
            h.m_g
        } else {
            h.m_l
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub samples: Vec<TrajectorySample>,
    /// Algebraic outputs aligned with `samples`.
    pub outputs: Vec<AlgebraicOutputs>,
    pub steady_state_reached: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn to_csv(&self) -> String {
        trajectory_csv(&self.samples)
    }
}

/// Holds `inputs` constant for `duration` seconds from `initial`.
pub fn simulate_experiment(
    inputs: &PlantInputs,
    duration: f64,
    params: &PlantParams,
    initial: &PlantState,
    cfg: &IntegratorConfig,
) -> Result<Trajectory, PlantError> {
    let periods = if duration > 0.0 {
        (duration / cfg.sample_period).floor() as usize
    } else {
        0
    };
    let mut traj = Trajectory::default();
    let mut s = *initial;
    traj.outputs.push(solve_algebraic(&s, inputs, params)?);
    traj.samples.push(TrajectorySample {
        t: s.t,
        inputs: *inputs,
        state: s,
    });
    for _ in 0..periods {
        s = advance_period(&s, inputs, params, cfg, SqrtPolicy::Strict)?.0;
        traj.outputs.push(solve_algebraic(&s, inputs, params)?);
        traj.samples.push(TrajectorySample {
            t: s.t,
            inputs: *inputs,
            state: s,
        });
    }
    traj.steady_state_reached = max_relative_derivative(&s, inputs, params)? < cfg.steady_tol;
    Ok(traj)
}

/// Adds zero-mean Gaussian noise of standard deviation `std` (kg) to every
/// logged holdup. A zero `std` leaves the samples untouched.
pub fn add_measurement_noise(samples: &mut [TrajectorySample], std: f64, seed: u64) -> Result<(), PlantError> {
    if std == 0.0 {
        return Ok(());
    }
    let normal = Normal::new(0.0, std).map_err(|e| PlantError::InvalidParams {
        name: "measurement_noise",
        reason: e.to_string(),
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for s in samples {
        for h in &mut s.state.wells {
            h.m_g += rng.sample(normal);
            h.m_l += rng.sample(normal);
        }
    }
    Ok(())
}

pub fn trajectory_csv(samples: &[TrajectorySample]) -> String {
    let mut out = String::with_capacity(samples.len() * 200 + 64);
    out.push_str(TRAJECTORY_HEADER);
    out.push('\n');
    for s in samples {
        let i = &s.inputs;
        let _ = write!(
            out,
            "{},{},{},{},{},{},{},{}",
            s.t, i.q_g[0], i.q_g[1], i.q_g[2], i.p_pump, i.valve[0], i.valve[1], i.valve[2]
        );
        for h in &s.state.wells {
            let _ = write!(out, ",{},{}", h.m_g, h.m_l);
        }
        out.push('\n');
    }
    out
}

pub fn parse_trajectory_csv(text: &str) -> Result<Vec<TrajectorySample>, PlantError> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == TRAJECTORY_HEADER => {}
        other => return Err(PlantError::Csv(format!("unexpected header {other:?}"))),
    }
    let mut samples = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: Vec<f64> = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| PlantError::Csv(format!("line {}: {e}", n + 2)))?;
        if v.len() != 14 {
            return Err(PlantError::Csv(format!(
                "line {}: expected 14 fields, found {}",
                n + 2,
                v.len()
            )));
        }
        let wells = [
            WellHoldup { m_g: v[8], m_l: v[9] },
            WellHoldup { m_g: v[10], m_l: v[11] },
            WellHoldup { m_g: v[12], m_l: v[13] },
        ];
        samples.push(TrajectorySample {
            t: v[0],
            inputs: PlantInputs {
                q_g: [v[1], v[2], v[3]],
                p_pump: v[4],
                valve: [v[5], v[6], v[7]],
            },
            state: PlantState { wells, t: v[0] },
        });
    }
    Ok(samples)
}

pub fn write_trajectory_csv(path: &Path, samples: &[TrajectorySample]) -> Result<(), PlantError> {
    std::fs::write(path, trajectory_csv(samples))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn settled(inputs: &PlantInputs, p: &PlantParams) -> PlantState {
        let init = PlantState::initial(p, 0.8);
        let cfg = IntegratorConfig::default();
        let traj = simulate_experiment(inputs, 400.0, p, &init, &cfg).unwrap();
        traj.samples.last().unwrap().state
    }

    #[test]
    fn default_params_are_consistent() {
        let p = PlantParams::default();
        p.validate().unwrap();
        assert!((p.v_total - 1.16239e-3).abs() < 1e-7);
    }

    #[test]
    fn ideal_gas_density_hand_value() {
        // P_bi = 1.2e5 Pa, T = 298.15 K, M_g = 0.02897 kg/mol
        let p = PlantParams::default();
        let m_l = 0.9;
        let v_g = p.v_total - m_l / p.rho_l;
        let rho_target = 1.2e5 * p.molar_mass_gas / (p.gas_constant * p.temperature);
        let state = PlantState {
            wells: [WellHoldup { m_g: rho_target * v_g, m_l }; 3],
            t: 0.0,
        };
        let out = solve_algebraic(&state, &PlantInputs::nominal(), &p).unwrap();
        let f = out.wells[0];
        assert!((f.p_bi - 1.2e5).abs() < 1e-6);
        assert!((f.rho_g - 1.4025).abs() < 1e-3, "rho_g = {}", f.rho_g);
        assert!((f.rho_g - 1.40).abs() < 0.01);
    }

    #[test]
    fn closed_valve_gives_zero_inflow() {
        let p = PlantParams::default();
        let mut u = PlantInputs::nominal();
        u.valve = [0.0; 3];
        let out = solve_algebraic(&PlantState::initial(&p, 0.8), &u, &p).unwrap();
        for f in &out.wells {
            assert_eq!(f.w_l, 0.0);
        }
    }

    #[test]
    fn outlet_split_and_volume_identities() {
        let p = PlantParams::default();
        let s = settled(&PlantInputs::nominal(), &p);
        let out = solve_algebraic(&s, &PlantInputs::nominal(), &p).unwrap();
        for (w, f) in out.wells.iter().enumerate() {
            assert_eq!(f.w_l_out + f.w_g_out - f.w_total, 0.0);
            let h = s.wells[w];
            assert!((f.alpha_l * (h.m_g + h.m_l) - h.m_l).abs() < 1e-15);
            assert!((f.v_g + f.v_l - p.v_total).abs() < 1e-18);
            assert!((0.0..=1.0).contains(&f.alpha_l));
        }
    }

    #[test]
    fn steady_state_is_a_fixed_point() {
        let p = PlantParams::default();
        let u = PlantInputs::nominal();
        let mut s = settled(&u, &p);
        for _ in 0..5 {
            s = settled_more(&s, &u, &p);
        }
        let next = step(&s, &u, &p, 0.1).unwrap();
        for w in 0..3 {
            assert!(((next.wells[w].m_g - s.wells[w].m_g) / s.wells[w].m_g).abs() < 1e-12);
            assert!(((next.wells[w].m_l - s.wells[w].m_l) / s.wells[w].m_l).abs() < 1e-12);
        }
    }

    fn settled_more(s: &PlantState, u: &PlantInputs, p: &PlantParams) -> PlantState {
        let cfg = IntegratorConfig::default();
        let traj = simulate_experiment(u, 400.0, p, s, &cfg).unwrap();
        traj.samples.last().unwrap().state
    }

    #[test]
    fn reversed_pump_pressure_is_an_error_unless_clamped() {
        let p = PlantParams::default();
        let s = PlantState::initial(&p, 0.8);
        let mut u = PlantInputs::nominal();
        u.p_pump = -0.5;
        let err = solve_algebraic(&s, &u, &p).unwrap_err();
        assert!(matches!(err, PlantError::NegativeSqrtArgument { relation: "reservoir valve", .. }));
        let out = solve_algebraic_with(&s, &u, &p, SqrtPolicy::ClampToZero).unwrap();
        assert_eq!(out.clamped, 3);
        assert_eq!(out.wells[0].w_l, 0.0);
    }

    #[test]
    fn flooded_pipe_is_degenerate() {
        let p = PlantParams::default();
        let mut s = PlantState::initial(&p, 0.8);
        s.wells[1].m_l = p.rho_l * p.v_total;
        assert!(matches!(
            solve_algebraic(&s, &PlantInputs::nominal(), &p),
            Err(PlantError::DegenerateHoldup { well: 1, .. })
        ));
    }

    #[test]
    fn zero_duration_gives_single_sample() {
        let p = PlantParams::default();
        let init = PlantState::initial(&p, 0.8);
        let t = simulate_experiment(&PlantInputs::nominal(), 0.0, &p, &init, &Default::default())
            .unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.samples[0].state, init);
    }

    #[test]
    fn csv_round_trip() {
        let p = PlantParams::default();
        let init = PlantState::initial(&p, 0.8);
        let t = simulate_experiment(&PlantInputs::nominal(), 5.0, &p, &init, &Default::default())
            .unwrap();
        let text = t.to_csv();
        assert!(text.starts_with(TRAJECTORY_HEADER));
        let back = parse_trajectory_csv(&text).unwrap();
        assert_eq!(back, t.samples);
    }
}
