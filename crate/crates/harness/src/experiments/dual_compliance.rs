//! Dual-compliance timeline: scripted trapezoidal pushes on the tool and the
//! elbow while the Schmitt trigger switches the tool task between stiff and
//! compliant.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use phri_core::lowlevel::LowLevelKind;
use phri_core::model::RobotModel;
use phri_core::modes::{ComplianceMode, Scenario};
use phri_core::sim::{SimCommand, Simulation, WrenchCommand};

use super::{intervals, sim_config, ticks, HarnessConfig, RunOptions};
use crate::output::{fmt_f64, Check, Report, Table};
use crate::HarnessError;

/// Trapezoidal force profile applied to a frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PushProfile {
    /// `"ee"` or a link name.
    pub frame: String,
    pub at: f64,
    /// Peak force (N), world frame.
    pub force: [f64; 3],
    pub rise: f64,
    pub hold: f64,
    pub fall: f64,
}

impl PushProfile {
    fn ee(at: f64, force: [f64; 3]) -> Self {
        Self { frame: "ee".into(), at, force, rise: 0.3, hold: 0.6, fall: 0.3 }
    }

    pub fn end(&self) -> f64 {
        self.at + self.rise + self.hold + self.fall
    }

    /// Force at time `t`.
    pub fn force_at(&self, t: f64) -> Vector3<f64> {
        let s = t - self.at;
        let scale = if s < 0.0 || s >= self.rise + self.hold + self.fall {
            0.0
        } else if s < self.rise {
            s / self.rise
        } else if s < self.rise + self.hold {
            1.0
        } else {
            1.0 - (s - self.rise - self.hold) / self.fall
        };
        Vector3::from(self.force) * scale
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DualComplianceParams {
    pub q0: Vec<f64>,
    pub duration: f64,
    pub pushes: Vec<PushProfile>,
    /// Tool drift allowed while only the elbow is pushed (mm).
    pub elbow_ee_tolerance_mm: f64,
    /// Joint motion the elbow push must produce (rad).
    pub elbow_min_joint_motion: f64,
}

impl Default for DualComplianceParams {
    fn default() -> Self {
        Self {
            q0: phri_core::sim::home_posture(),
            duration: 11.0,
            pushes: vec![
                PushProfile::ee(1.0, [0.0, 12.0, 0.0]),
                PushProfile::ee(3.0, [0.0, -12.0, 0.0]),
                PushProfile::ee(5.0, [0.0, 0.0, 12.0]),
                PushProfile { frame: "forearm_link".into(), at: 7.5, force: [0.0, 6.0, 0.0], rise: 0.3, hold: 1.0, fall: 0.3 },
            ],
            elbow_ee_tolerance_mm: 1.0,
            elbow_min_joint_motion: 0.002,
        }
    }
}

/// Independent re-scan of a norm signal through a two-threshold switch.
pub fn schmitt_oracle(norms: &[f64], high: f64, low: f64) -> Vec<bool> {
    let mut on = false;
    norms
        .iter()
        .map(|&w| {
            on = if on { w >= low } else { w > high };
            on
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Timeline {
    pub t: Vec<f64>,
    pub push_force: Vec<f64>,
    pub ee_force: Vec<f64>,
    pub joint_torque: Vec<f64>,
    pub ext_torque: Vec<f64>,
    pub ee_velocity: Vec<f64>,
    pub joint_velocity: Vec<f64>,
    pub wrench_norm: Vec<f64>,
    pub engaged: Vec<bool>,
    /// Reference pose as `[x, y, z, qw, qx, qy, qz]`.
    pub reference: Vec<[f64; 7]>,
    pub ee_position: Vec<Vector3<f64>>,
    pub q: Vec<Vec<f64>>,
}

pub fn timeline(model: &RobotModel, cfg: &HarnessConfig, seed: u64) -> Result<Timeline, HarnessError> {
    let p = &cfg.dual_compliance;
    let mut sc = sim_config(&cfg.sim, &p.q0, LowLevelKind::PhriTorque, seed);
    (sc.mode, sc.scenario) = (ComplianceMode::Dual, Scenario::Static);
    let mut sim = Simulation::new(model.clone(), sc)?;
    let dt = sim.plant.config.dt;
    let n = ticks(dt, p.duration);
    let mut tl = Timeline {
        t: Vec::with_capacity(n),
        push_force: vec![],
        ee_force: vec![],
        joint_torque: vec![],
        ext_torque: vec![],
        ee_velocity: vec![],
        joint_velocity: vec![],
        wrench_norm: vec![],
        engaged: vec![],
        reference: vec![],
        ee_position: vec![],
        q: vec![],
    };
    for _ in 0..n {
        let t = sim.time();
        let mut total = 0.0f64;
        for push in &p.pushes {
            let f = push.force_at(t);
            if f.norm() > 0.0 {
                total = total.max(f.norm());
                // one tick at a time, so the profile is sampled at the control rate
                sim.apply(SimCommand::ApplyWrench(WrenchCommand {
                    frame: push.frame.clone(),
                    wrench: [f.x, f.y, f.z, 0.0, 0.0, 0.0],
                    duration_ms: dt * 1e3,
                }))?;
            }
        }
        let i = sim.step()?;
        tl.t.push(i.t);
        tl.push_force.push(total);
        tl.ee_force.push(i.sensors.ft_wrench.linear.norm());
        tl.joint_torque.push(i.sensors.joint_torque.norm());
        tl.ext_torque.push(i.tau_ext_estimate.norm());
        tl.ee_velocity.push(i.ee_twist.fixed_rows::<3>(3).norm());
        tl.joint_velocity.push(i.sensors.dq.norm());
        tl.wrench_norm.push(i.wrench_norm);
        tl.engaged.push(i.engaged);
        tl.reference.push(phri_core::sim::pose_array(&i.ee_reference));
        tl.ee_position.push(i.ee_pose.translation.vector);
        tl.q.push(i.sensors.q.as_slice().to_vec());
    }
    Ok(tl)
}

pub fn run(model: &RobotModel, cfg: &HarnessConfig, opts: &RunOptions) -> Result<Report, HarnessError> {
    let p = &cfg.dual_compliance;
    let tl = timeline(model, cfg, opts.seed)?;
    let mut table = Table::new(&[
        "t_s",
        "push_force_n",
        "ee_force_norm_n",
        "joint_torque_norm_nm",
        "ext_torque_norm_nm",
        "ee_velocity_m_s",
        "joint_velocity_rad_s",
        "wrench_norm",
        "engaged",
    ]);
    for k in 0..tl.t.len() {
        table.push_numbers(&[
            tl.t[k],
            tl.push_force[k],
            tl.ee_force[k],
            tl.joint_torque[k],
            tl.ext_torque[k],
            tl.ee_velocity[k],
            tl.joint_velocity[k],
            tl.wrench_norm[k],
            f64::from(u8::from(tl.engaged[k])),
        ]);
    }

    let engaged_runs = intervals(&tl.engaged);
    let mut iv = Table::new(&["start_s", "end_s"]);
    for &(a, b) in &engaged_runs {
        let end = tl.t.get(b).copied().unwrap_or(p.duration);
        iv.push(vec![fmt_f64(tl.t[a]), fmt_f64(end)]);
    }

    let mut checks = Vec::new();
    let s = &cfg.sim.schmitt;
    let oracle = schmitt_oracle(&tl.wrench_norm, s.high, s.low);
    let mismatches = oracle.iter().zip(&tl.engaged).filter(|(a, b)| a != b).count();
    checks.push(Check::new("engaged_matches_thresholds", mismatches == 0, format!("{mismatches} ticks differ from the threshold re-scan")));

    let tool_pushes = p.pushes.iter().filter(|x| x.frame == "ee" && Vector3::from(x.force).norm() > s.high).count();
    checks.push(Check::new(
        "one_interval_per_tool_push",
        engaged_runs.len() == tool_pushes,
        format!("{} engaged intervals, {tool_pushes} pushes above threshold", engaged_runs.len()),
    ));

    // disengaged stretches hold one reference
    let mut drift = 0.0f64;
    for (a, b) in intervals(&tl.engaged.iter().map(|e| !e).collect::<Vec<_>>()) {
        let r0 = tl.reference[a];
        for r in &tl.reference[a..b] {
            drift = drift.max(r.iter().zip(&r0).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
        }
    }
    checks.push(Check::new("reference_constant_while_disengaged", drift <= 1e-9, format!("max drift {drift:.3e}")));

    let mut summary = serde_json::json!({
        "engaged_intervals": engaged_runs.len(),
        "reference_drift": drift,
    });
    for (k, push) in p.pushes.iter().enumerate().filter(|(_, x)| x.frame != "ee") {
        let dt = tl.t.get(1).map_or(1e-3, |t1| t1 - tl.t[0]);
        let a = ((push.at / dt).round() as usize).min(tl.t.len().saturating_sub(1));
        let b = ((push.end() / dt).round() as usize + ticks(dt, 0.5)).min(tl.t.len());
        let x0 = tl.ee_position[a];
        let ee_mm = tl.ee_position[a..b].iter().map(|x| (x - x0).norm() * 1e3).fold(0.0, f64::max);
        let joint = tl.q[a..b]
            .iter()
            .map(|q| q.iter().zip(&tl.q[a]).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        let name = format!("{}_push_{k}", push.frame);
        checks.push(Check::new(
            &format!("{name}_keeps_tool"),
            ee_mm < p.elbow_ee_tolerance_mm && !tl.engaged[a..b].iter().any(|e| *e),
            format!("tool moved {ee_mm:.4} mm"),
        ));
        checks.push(Check::new(&format!("{name}_moves_joints"), joint > p.elbow_min_joint_motion, format!("largest joint motion {joint:.4} rad")));
        summary[name] = serde_json::json!({ "ee_displacement_mm": ee_mm, "joint_motion_rad": joint });
    }
    Ok(Report {
        experiment: "dual-compliance".into(),
        seed: opts.seed,
        tables: vec![("dual_compliance_timeline.csv".into(), table), ("dual_compliance_intervals.csv".into(), iv)],
        summary,
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trapezoid() {
        let p = PushProfile::ee(1.0, [0.0, 12.0, 0.0]);
        assert_eq!(p.force_at(0.5).norm(), 0.0);
        assert!((p.force_at(1.15).y - 6.0).abs() < 1e-9);
        assert_eq!(p.force_at(1.5).y, 12.0);
        assert!((p.force_at(2.05).y - 6.0).abs() < 1e-9);
        assert_eq!(p.force_at(2.2).norm(), 0.0);
    }

    #[test]
    fn oracle_hysteresis() {
        let w = [0.0, 9.0, 5.0, 4.0, 3.9, 8.0, 8.1];
        assert_eq!(schmitt_oracle(&w, 8.0, 4.0), vec![false, true, true, true, false, false, true]);
    }
}
