//! Joint torque tracking: settle under the position baseline, switch to a
//! torque loop and log `‖τ_measured − τ_desired‖`.

use serde::{Deserialize, Serialize};

use phri_core::lowlevel::LowLevelKind;
use phri_core::model::RobotModel;
use phri_core::modes::{ComplianceMode, ModeCommand, Scenario};
use phri_core::plant::Payload;
use phri_core::sim::{home_posture, SimCommand, Simulation};

use super::{extension_posture, mean, sim_config, ticks, HarnessConfig, RunOptions};
use crate::output::{fmt_f64, Check, Report, Table};
use crate::HarnessError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TorqueTrackingParams {
    pub static_q0: Vec<f64>,
    /// Tool payload of the static scenario (kg).
    pub payload_mass: f64,
    /// Delay after the switch at which the payload is hung on the tool (s).
    pub payload_at: f64,
    pub dynamic_q0: Vec<f64>,
    /// Time under position control before the switch (s).
    pub settle: f64,
    /// Logged time after the switch (s).
    pub duration: f64,
    /// Trailing window averaged as steady state (s).
    pub steady_window: f64,
    /// Upper bound on the steady static error of the torque loop (N·m).
    pub static_bound: f64,
}

impl Default for TorqueTrackingParams {
    fn default() -> Self {
        Self {
            static_q0: extension_posture(),
            payload_mass: 1.25,
            payload_at: 0.5,
            dynamic_q0: home_posture(),
            settle: 1.0,
            duration: 8.0,
            steady_window: 4.0,
            static_bound: 0.35,
        }
    }
}

pub const CONTROLLERS: [LowLevelKind; 2] = [LowLevelKind::PhriTorque, LowLevelKind::KinovaHighvel];

/// Error-norm series starting at the switch.
pub fn track(model: &RobotModel, cfg: &HarnessConfig, scenario: Scenario, controller: LowLevelKind, seed: u64) -> Result<Vec<(f64, f64)>, HarnessError> {
    let p = &cfg.torque_tracking;
    let q0 = if scenario == Scenario::Static { &p.static_q0 } else { &p.dynamic_q0 };
    let mut sc = sim_config(&cfg.sim, q0, LowLevelKind::Position, seed);
    (sc.mode, sc.scenario) = (ComplianceMode::NullSpace, scenario);
    let mut sim = Simulation::new(model.clone(), sc)?;
    let dt = sim.plant.config.dt;
    sim.run(ticks(dt, p.settle), |_| {})?;
    sim.apply(SimCommand::Mode(ModeCommand::SetLowlevel { lowlevel: controller }))?;
    let t0 = sim.time();
    let n = ticks(dt, p.duration);
    let attach = (scenario == Scenario::Static && p.payload_mass > 0.0).then(|| ticks(dt, p.payload_at));
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        if attach == Some(k) {
            sim.plant.attach_payload(Payload { mass: p.payload_mass });
        }
        let i = sim.step()?;
        out.push((i.t - t0, (&i.sensors.joint_torque - &i.tau_desired).norm()));
    }
    Ok(out)
}

pub fn run(model: &RobotModel, cfg: &HarnessConfig, opts: &RunOptions) -> Result<Report, HarnessError> {
    use rayon::prelude::*;
    let p = &cfg.torque_tracking;
    let controllers = opts.select(&CONTROLLERS)?;
    let scenarios = [Scenario::Static, Scenario::Dynamic];
    let jobs: Vec<(Scenario, LowLevelKind)> = scenarios.iter().flat_map(|s| controllers.iter().map(move |c| (*s, *c))).collect();
    // both controllers see the same seed so their histories agree up to the switch
    let series = jobs.par_iter().map(|&(s, c)| track(model, cfg, s, c, opts.seed)).collect::<Result<Vec<_>, _>>()?;

    let mut tables = Vec::new();
    let mut checks = Vec::new();
    let mut summary = serde_json::Map::new();
    for (si, scenario) in scenarios.iter().enumerate() {
        let cols: Vec<&Vec<(f64, f64)>> = (0..controllers.len()).map(|ci| &series[si * controllers.len() + ci]).collect();
        let mut headers = vec!["t_s".to_string()];
        headers.extend(controllers.iter().map(|c| format!("{}_err_nm", c.as_str())));
        let mut table = Table { headers, rows: Vec::new() };
        for k in 0..cols[0].len() {
            let mut row = vec![cols[0][k].0];
            row.extend(cols.iter().map(|c| c[k].1));
            table.push_numbers(&row);
        }
        tables.push((format!("torque_tracking_{}.csv", scenario.as_str()), table));

        let window_start = p.duration - p.steady_window;
        let steady: Vec<f64> = cols
            .iter()
            .map(|c| mean(&c.iter().filter(|(t, _)| *t >= window_start).map(|(_, e)| *e).collect::<Vec<_>>()))
            .collect();
        let mut s = serde_json::Map::new();
        for (c, v) in controllers.iter().zip(&steady) {
            s.insert(c.as_str().into(), serde_json::json!({ "steady_error_nm": v, "initial_error_nm": cols[0][0].1 }));
        }
        summary.insert(scenario.as_str().into(), serde_json::Value::Object(s));

        let find = |k: LowLevelKind| controllers.iter().position(|c| *c == k).map(|i| (i, steady[i]));
        if let (Some((i, phri)), Some((j, high))) = (find(LowLevelKind::PhriTorque), find(LowLevelKind::KinovaHighvel)) {
            checks.push(Check::new(
                &format!("{}_phri_below_highvel", scenario.as_str()),
                phri < high,
                format!("steady error {phri:.4} vs {high:.4} N·m"),
            ));
            let (a, b) = (cols[i][0].1, cols[j][0].1);
            checks.push(Check::new(
                &format!("{}_identical_initial_error", scenario.as_str()),
                a == b,
                format!("{} vs {}", fmt_f64(a), fmt_f64(b)),
            ));
        }
        if let (Scenario::Static, Some((_, phri))) = (scenario, find(LowLevelKind::PhriTorque)) {
            checks.push(Check::new(
                "static_phri_within_bound",
                phri < p.static_bound,
                format!("steady error {phri:.4} N·m, bound {}", p.static_bound),
            ));
        }
    }
    Ok(Report { experiment: "torque-tracking".into(), seed: opts.seed, tables, summary: serde_json::Value::Object(summary), checks })
}
