//! Friction identification: constant current on one continuous joint at a
//! time, upright stance so gravity loads none of them, then a least-squares
//! fit of Coulomb and viscous coefficients per actuator class.

use nalgebra::{DVector, Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use phri_core::dynamics::gravity_torques;
use phri_core::lowlevel::{current_to_torque, FrictionParams};
use phri_core::model::{ActuatorClass, RobotModel};
use phri_core::plant::{torque_currents, Plant};

use super::{derive_seed, HarnessConfig, RunOptions};
use crate::output::{fmt_f64, Check, Report, Table};
use crate::HarnessError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrictionIdParams {
    /// Current magnitudes (A); each is applied in both directions.
    pub currents: Vec<f64>,
    /// Zero-based joint indices to excite.
    pub joints: Vec<usize>,
    /// Length of each constant-current run (s).
    pub duration: f64,
    /// Trailing window averaged as steady state (s).
    pub window: f64,
    /// Relative recovery tolerance for the checks.
    pub tolerance: f64,
}

impl Default for FrictionIdParams {
    fn default() -> Self {
        Self { currents: vec![0.25, 0.30, 0.35, 0.40], joints: vec![0, 2, 4, 6], duration: 2.0, window: 0.5, tolerance: 0.05 }
    }
}

/// One constant-current run reduced to its steady state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FrictionSample {
    pub joint: usize,
    pub current: f64,
    pub velocity: f64,
    /// Motor torque minus link torque minus rotor inertial torque.
    pub friction: f64,
}

/// Velocities below this are treated as "did not break away".
const MIN_SPEED: f64 = 1e-3;

/// Least-squares `friction = τ_c·sign(dq) + τ_v·dq`.
pub fn fit_friction(samples: &[FrictionSample]) -> Result<(f64, f64), HarnessError> {
    let moving: Vec<&FrictionSample> = samples.iter().filter(|s| s.velocity.abs() > MIN_SPEED).collect();
    let mut speeds: Vec<f64> = moving.iter().map(|s| s.velocity).collect();
    speeds.sort_by(f64::total_cmp);
    speeds.dedup_by(|a, b| (*a - *b).abs() < 1e-6);
    if speeds.len() < 2 {
        return Err(HarnessError::InsufficientData(format!("{} distinct steady velocities", speeds.len())));
    }
    let mut ata = Matrix2::zeros();
    let mut atb = Vector2::zeros();
    for s in moving {
        let row = Vector2::new(s.velocity.signum(), s.velocity);
        ata += row * row.transpose();
        atb += row * s.friction;
    }
    let x = ata
        .try_inverse()
        .ok_or_else(|| HarnessError::InsufficientData("degenerate regression".into()))?
        * atb;
    Ok((x[0], x[1]))
}

fn run_one(model: &RobotModel, cfg: &HarnessConfig, p: &FrictionIdParams, joint: usize, current: f64, seed: u64) -> Result<FrictionSample, HarnessError> {
    let n = model.dof();
    let q0 = DVector::zeros(n);
    let mut plant = Plant::new(model.clone(), cfg.sim.plant.clone(), q0.clone(), seed)?;
    let dt = plant.config.dt;
    let mut currents = torque_currents(model, &gravity_torques(model, &q0)?);
    currents[joint] = current;
    let spec = &model.joints[joint];
    let tau_m = current_to_torque(current, spec.torque_constant, spec.gear_ratio);
    let steps = super::ticks(dt, p.duration);
    let window = super::ticks(dt, p.window).clamp(2, steps);
    let (mut ts, mut vs, mut gaps) = (Vec::new(), Vec::new(), Vec::new());
    for k in 0..steps {
        plant.step(&currents)?;
        if k + window >= steps {
            let s = plant.read_sensors();
            ts.push(plant.time());
            vs.push(s.dq[joint]);
            gaps.push(tau_m - s.joint_torque[joint]);
        }
    }
    // residual acceleration from the velocity slope over the window
    let (tm, vm) = (super::mean(&ts), super::mean(&vs));
    let num: f64 = ts.iter().zip(&vs).map(|(t, v)| (t - tm) * (v - vm)).sum();
    let den: f64 = ts.iter().map(|t| (t - tm).powi(2)).sum();
    let accel = num / den;
    Ok(FrictionSample { joint, current, velocity: vm, friction: super::mean(&gaps) - spec.rotor_inertia * accel })
}

pub fn run(model: &RobotModel, cfg: &HarnessConfig, opts: &RunOptions) -> Result<Report, HarnessError> {
    let p = &cfg.friction_id;
    if let Some(&j) = p.joints.iter().find(|&&j| j >= model.dof()) {
        return Err(HarnessError::Config(format!("joint index {j} out of range")));
    }
    if !(p.window > 0.0 && p.duration >= p.window) {
        return Err(HarnessError::Config("friction_id window must be positive and no longer than duration".into()));
    }
    let mut runs = Vec::new();
    for &j in &p.joints {
        for &c in &p.currents {
            runs.push((j, c));
            runs.push((j, -c));
        }
    }
    let samples = {
        use rayon::prelude::*;
        runs.par_iter()
            .enumerate()
            .map(|(i, &(j, c))| run_one(model, cfg, p, j, c, derive_seed(opts.seed, i as u64)))
            .collect::<Result<Vec<_>, _>>()?
    };

    let mut table = Table::new(&["joint", "actuator_class", "current_a", "velocity_rad_s", "friction_nm"]);
    for s in &samples {
        table.push(vec![
            (s.joint + 1).to_string(),
            model.joints[s.joint].actuator_class.as_str().into(),
            fmt_f64(s.current),
            fmt_f64(s.velocity),
            fmt_f64(s.friction),
        ]);
    }

    let mut fit = Table::new(&["actuator_class", "tau_c_nm", "tau_v_nms", "true_tau_c_nm", "true_tau_v_nms"]);
    let mut checks = Vec::new();
    let mut summary = serde_json::Map::new();
    for class in [ActuatorClass::Large, ActuatorClass::Small] {
        let of_class: Vec<FrictionSample> = samples.iter().filter(|s| model.joints[s.joint].actuator_class == class).copied().collect();
        if of_class.is_empty() {
            continue;
        }
        let (tau_c, tau_v) = fit_friction(&of_class)?;
        let truth = if cfg.sim.plant.friction_enabled {
            match class {
                ActuatorClass::Large => cfg.sim.plant.friction_large,
                ActuatorClass::Small => cfg.sim.plant.friction_small,
            }
        } else {
            FrictionParams::zero()
        };
        fit.push(vec![class.as_str().into(), fmt_f64(tau_c), fmt_f64(tau_v), fmt_f64(truth.tau_c), fmt_f64(truth.tau_v)]);
        summary.insert(class.as_str().into(), serde_json::json!({ "tau_c": tau_c, "tau_v": tau_v }));
        for (name, got, want) in [("tau_c", tau_c, truth.tau_c), ("tau_v", tau_v, truth.tau_v)] {
            // relative where the truth is non-zero, otherwise an absolute floor
            let err = if want != 0.0 { ((got - want) / want).abs() } else { got.abs() };
            checks.push(Check::new(
                &format!("{}_{name}_recovered", class.as_str()),
                err <= p.tolerance,
                format!("fit {got:.4}, plant {want:.4}, error {err:.4}"),
            ));
        }
    }
    Ok(Report {
        experiment: "friction-id".into(),
        seed: opts.seed,
        tables: vec![("friction_samples.csv".into(), table), ("friction_fit.csv".into(), fit)],
        summary: serde_json::Value::Object(summary),
        checks,
    })
}
