//! Dynamic tracking of the sinusoid/triangle tool trajectory under each low level.

use serde::{Deserialize, Serialize};

use phri_core::lowlevel::LowLevelKind;
use phri_core::model::RobotModel;
use phri_core::modes::{ComplianceMode, Scenario};
use phri_core::sim::{home_posture, Simulation};

use super::{rms, sim_config, ticks, HarnessConfig, RunOptions};
use crate::output::{fmt_f64, Check, Report, Table};
use crate::HarnessError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicTrackingParams {
    pub q0: Vec<f64>,
    pub duration: f64,
    /// Start-up excluded from the RMS figures (s).
    pub skip: f64,
    /// Allowed ratio of torque-loop to position-control RMS error.
    pub position_ratio: f64,
}

impl Default for DynamicTrackingParams {
    fn default() -> Self {
        Self { q0: home_posture(), duration: 24.0, skip: 4.0, position_ratio: 2.0 }
    }
}

pub const CONTROLLERS: [LowLevelKind; 3] = [LowLevelKind::PhriTorque, LowLevelKind::Position, LowLevelKind::KinovaHighvel];

/// Per-tick `[t, e_y, e_z, ė_y, ė_z]`, positions in mm and velocities in mm/s.
pub fn tracking_errors(model: &RobotModel, cfg: &HarnessConfig, controller: LowLevelKind, seed: u64) -> Result<Vec<[f64; 5]>, HarnessError> {
    let p = &cfg.dynamic_tracking;
    let mut sc = sim_config(&cfg.sim, &p.q0, controller, seed);
    (sc.mode, sc.scenario) = (ComplianceMode::NullSpace, Scenario::Dynamic);
    let mut sim = Simulation::new(model.clone(), sc)?;
    let n = ticks(sim.plant.config.dt, p.duration);
    let mut out = Vec::with_capacity(n);
    sim.run(n, |i| {
        let e = (i.ee_pose.translation.vector - i.ee_reference.translation.vector) * 1e3;
        let v = (i.ee_twist.fixed_rows::<3>(3) - i.ee_reference_velocity) * 1e3;
        out.push([i.t, e.y, e.z, v.y, v.z]);
    })?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrackingSummary {
    pub rms_y_mm: f64,
    pub rms_z_mm: f64,
    pub rms_position_mm: f64,
    pub rms_velocity_mm_s: f64,
}

pub fn summarize_errors(rows: &[[f64; 5]], skip: f64) -> TrackingSummary {
    let kept: Vec<&[f64; 5]> = rows.iter().filter(|r| r[0] >= skip).collect();
    let col = |k: usize| kept.iter().map(|r| r[k]).collect::<Vec<_>>();
    let pos: Vec<f64> = kept.iter().map(|r| r[1].hypot(r[2])).collect();
    let vel: Vec<f64> = kept.iter().map(|r| r[3].hypot(r[4])).collect();
    TrackingSummary { rms_y_mm: rms(&col(1)), rms_z_mm: rms(&col(2)), rms_position_mm: rms(&pos), rms_velocity_mm_s: rms(&vel) }
}

pub fn run(model: &RobotModel, cfg: &HarnessConfig, opts: &RunOptions) -> Result<Report, HarnessError> {
    use rayon::prelude::*;
    let p = &cfg.dynamic_tracking;
    let controllers = opts.select(&CONTROLLERS)?;
    let series = controllers.par_iter().map(|c| tracking_errors(model, cfg, *c, opts.seed)).collect::<Result<Vec<_>, _>>()?;

    let mut tables = Vec::new();
    let mut summary_table = Table::new(&["controller", "rms_y_mm", "rms_z_mm", "rms_position_mm", "rms_velocity_mm_s"]);
    let mut summary = serde_json::Map::new();
    let mut sums = Vec::new();
    for (c, rows) in controllers.iter().zip(&series) {
        let mut t = Table::new(&["t_s", "y_err_mm", "z_err_mm", "vy_err_mm_s", "vz_err_mm_s"]);
        for r in rows {
            t.push_numbers(r);
        }
        tables.push((format!("dynamic_tracking_{}.csv", c.as_str()), t));
        let s = summarize_errors(rows, p.skip);
        summary_table.push(vec![
            c.as_str().into(),
            fmt_f64(s.rms_y_mm),
            fmt_f64(s.rms_z_mm),
            fmt_f64(s.rms_position_mm),
            fmt_f64(s.rms_velocity_mm_s),
        ]);
        summary.insert(c.as_str().into(), serde_json::to_value(s)?);
        sums.push((*c, s));
    }
    tables.push(("dynamic_tracking_summary.csv".into(), summary_table));

    let get = |k: LowLevelKind| sums.iter().find(|(c, _)| *c == k).map(|(_, s)| s.rms_position_mm);
    let mut checks = Vec::new();
    if let (Some(phri), Some(pos)) = (get(LowLevelKind::PhriTorque), get(LowLevelKind::Position)) {
        checks.push(Check::new(
            "phri_comparable_to_position",
            phri <= p.position_ratio * pos,
            format!("rms {phri:.4} mm vs position {pos:.4} mm (limit ×{})", p.position_ratio),
        ));
    }
    if let (Some(phri), Some(high)) = (get(LowLevelKind::PhriTorque), get(LowLevelKind::KinovaHighvel)) {
        checks.push(Check::new("highvel_worse_than_phri", high > phri, format!("rms {high:.4} mm vs {phri:.4} mm")));
    }
    Ok(Report { experiment: "dynamic-tracking".into(), seed: opts.seed, tables, summary: serde_json::Value::Object(summary), checks })
}
