//! Ground-truth arm simulator.
//!
//! Motor torque `τ_m = K_T·G_r·i` drives the link chain through the reflected
//! rotor inertia and joint friction:
//!
//! ```text
//! (M(q) + diag(I_r)) q̈ = τ_m − τ_f − h(q, dq) + τ_ext
//! ```
//!
//! Friction is Coulomb + viscous while sliding. A joint at rest stays stuck
//! while the torque needed to hold it is within `τ_s`; the stuck set is found
//! iteratively each step. Velocity zero-crossings snap to rest. Integration is
//! semi-implicit Euler.
//!
//! The joint torque sensor sits after the gearbox and reads the link-side
//! torque `τ_m − τ_f − I_r q̈`. The F/T sensor at the tool point reads the
//! external wrench applied beyond it (pushes and payload) in the sensor frame.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{
    bias_acceleration, gravity_torques, link_mass_matrix_from, nonlinear_terms, DynamicsError, Kinematics, SpatialVector,
};
use crate::lowlevel::{current_to_torque, torque_to_current, FrictionParams};
use crate::model::{ActuatorClass, RobotModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlantError {
    #[error("non-finite plant state at t = {0} s")]
    NonFiniteState(f64),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("invalid plant input: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Joint torque sensor std (N·m).
    pub torque_std: f64,
    /// F/T force std (N).
    pub force_std: f64,
    /// F/T moment std (N·m).
    pub moment_std: f64,
    pub position_std: f64,
    pub velocity_std: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { torque_std: 0.05, force_std: 0.1, moment_std: 0.0, position_std: 0.0, velocity_std: 0.0 }
    }
}

impl NoiseConfig {
    pub fn off() -> Self {
        Self { torque_std: 0.0, force_std: 0.0, moment_std: 0.0, position_std: 0.0, velocity_std: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantConfig {
    pub friction_enabled: bool,
    pub friction_large: FrictionParams,
    pub friction_small: FrictionParams,
    pub noise: NoiseConfig,
    pub dt: f64,
    /// Integration substeps per control period (inputs held).
    pub substeps: usize,
    /// Default duration of an impulse disturbance (s).
    pub impact_window: f64,
}

impl Default for PlantConfig {
    fn default() -> Self {
        Self {
            friction_enabled: true,
            friction_large: FrictionParams::large(),
            friction_small: FrictionParams::small(),
            noise: NoiseConfig::default(),
            dt: 0.001,
            substeps: 1,
            impact_window: 0.01,
        }
    }
}

impl PlantConfig {
    /// No friction and no sensor noise.
    pub fn ideal() -> Self {
        Self { friction_enabled: false, noise: NoiseConfig::off(), ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), PlantError> {
        if !(self.dt > 0.0) || self.substeps == 0 || !(self.impact_window > 0.0) {
            return Err(PlantError::Invalid("dt, substeps and impact_window must be positive".into()));
        }
        let n = &self.noise;
        if [n.torque_std, n.force_std, n.moment_std, n.position_std, n.velocity_std].iter().any(|s| !(*s >= 0.0)) {
            return Err(PlantError::Invalid("noise std must be >= 0".into()));
        }
        Ok(())
    }
}

/// Point mass rigidly attached at the tool point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Payload {
    pub mass: f64,
}

/// Wrench applied on `link` at `point` (link frame) during `[start, end)`.
/// `wrench.linear` is the force, `wrench.angular` a pure moment, both world frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Disturbance {
    pub link: usize,
    pub point: Vector3<f64>,
    pub wrench: SpatialVector,
    pub start: f64,
    pub end: f64,
}

impl Disturbance {
    pub fn is_active(&self, t: f64) -> bool {
        t >= self.start && t < self.end
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantState {
    pub q: DVector<f64>,
    pub dq: DVector<f64>,
    /// Acceleration of the last step.
    pub ddq: DVector<f64>,
    pub motor_currents: DVector<f64>,
    /// Ground-truth external torque of the last step (disturbances, payload excluded).
    pub external_joint_torques: DVector<f64>,
    /// Ground-truth external wrench at the tool point, sensor frame (payload included).
    pub ee_external_wrench: SpatialVector,
    /// Link-side joint torque of the last step.
    pub joint_torques: DVector<f64>,
    /// Friction torque of the last step.
    pub friction_torques: DVector<f64>,
    pub time: f64,
    pub steps: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorReadings {
    pub q: DVector<f64>,
    pub dq: DVector<f64>,
    pub joint_torque: DVector<f64>,
    /// Sensor frame; `angular` is the moment, `linear` the force.
    pub ft_wrench: SpatialVector,
}

#[derive(Debug, Clone)]
pub struct Plant {
    /// Nominal model (what a controller knows).
    pub model: RobotModel,
    /// Model with the payload merged into the tool link.
    physical: RobotModel,
    pub config: PlantConfig,
    pub state: PlantState,
    friction: Vec<FrictionParams>,
    disturbances: Vec<Disturbance>,
    /// Constant extra joint torque (test hook for joint-space disturbances).
    pub joint_disturbance: DVector<f64>,
    payload: Option<Payload>,
    rng: ChaCha8Rng,
}

impl Plant {
    pub fn new(model: RobotModel, config: PlantConfig, q0: DVector<f64>, seed: u64) -> Result<Self, PlantError> {
        config.validate()?;
        let n = model.dof();
        if q0.len() != n {
            return Err(DynamicsError::DimensionMismatch { expected: n, got: q0.len() }.into());
        }
        let friction = model
            .joints
            .iter()
            .map(|j| match j.actuator_class {
                ActuatorClass::Large => config.friction_large,
                ActuatorClass::Small => config.friction_small,
            })
            .collect();
        let z = DVector::zeros(n);
        let mut plant = Self {
            physical: model.clone(),
            model,
            config,
            state: PlantState {
                q: q0,
                dq: z.clone(),
                ddq: z.clone(),
                motor_currents: z.clone(),
                external_joint_torques: z.clone(),
                ee_external_wrench: SpatialVector::zero(),
                joint_torques: z.clone(),
                friction_torques: z.clone(),
                time: 0.0,
                steps: 0,
            },
            friction,
            disturbances: Vec::new(),
            joint_disturbance: z,
            payload: None,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        // consistent sensor values before the first step
        plant.state.joint_torques = gravity_torques(&plant.physical, &plant.state.q)?;
        Ok(plant)
    }

    pub fn dof(&self) -> usize {
        self.model.dof()
    }

    pub fn time(&self) -> f64 {
        self.state.time
    }

    pub fn set_velocity(&mut self, dq: DVector<f64>) {
        self.state.dq = dq;
    }

    pub fn payload(&self) -> Option<Payload> {
        self.payload
    }

    pub fn attach_payload(&mut self, payload: Payload) {
        self.payload = Some(payload);
        let ee = self.model.ee_index();
        let mut physical = self.model.clone();
        let link = &mut physical.links[ee];
        let (m1, c1) = (link.mass, link.com);
        let (m2, c2) = (payload.mass, self.model.ee_offset);
        let m = m1 + m2;
        let c = (c1 * m1 + c2 * m2) / m;
        // parallel-axis shift of both bodies to the merged center of mass
        let shift = |mass: f64, d: Vector3<f64>| (Matrix3::identity() * d.dot(&d) - d * d.transpose()) * mass;
        link.inertia = link.inertia + shift(m1, c1 - c) + shift(m2, c2 - c);
        link.mass = m;
        link.com = c;
        self.physical = physical;
    }

    pub fn detach_payload(&mut self) {
        self.payload = None;
        self.physical = self.model.clone();
    }

    pub fn schedule(&mut self, d: Disturbance) {
        self.disturbances.push(d);
    }

    pub fn clear_disturbances(&mut self) {
        self.disturbances.clear();
    }

    pub fn active_disturbances(&self) -> impl Iterator<Item = &Disturbance> {
        let t = self.state.time;
        self.disturbances.iter().filter(move |d| d.is_active(t))
    }

    /// Constant world-frame force and moment at the tool point for `duration` seconds from now.
    pub fn inject_ee_force(&mut self, wrench: SpatialVector, duration: f64) {
        let t = self.state.time;
        self.schedule(Disturbance {
            link: self.model.ee_index(),
            point: self.model.ee_offset,
            wrench,
            start: t,
            end: t + duration,
        });
    }

    /// Delivers linear `momentum` at the tool point over the configured impact window.
    pub fn inject_ee_impulse(&mut self, momentum: Vector3<f64>) {
        let w = self.config.impact_window;
        self.inject_ee_force(SpatialVector::new(Vector3::zeros(), momentum / w), w);
    }

    fn external_torque(&self, kin: &Kinematics, t: f64) -> DVector<f64> {
        let mut tau = self.joint_disturbance.clone();
        for d in self.disturbances.iter().filter(|d| d.is_active(t)) {
            let jac = kin.jacobian(d.link, &d.point);
            tau += jac.transpose() * DVector::from_column_slice(d.wrench.to_vector6().as_slice());
        }
        tau
    }

    /// Advances one control period with the motor currents held.
    pub fn step(&mut self, currents: &DVector<f64>) -> Result<(), PlantError> {
        let n = self.dof();
        if currents.len() != n {
            return Err(DynamicsError::DimensionMismatch { expected: n, got: currents.len() }.into());
        }
        if currents.iter().any(|c| !c.is_finite()) {
            return Err(PlantError::NonFiniteState(self.state.time));
        }
        let h = self.config.dt / self.config.substeps as f64;
        let t_start = self.state.time;
        for _ in 0..self.config.substeps {
            self.substep(currents, h)?;
        }
        self.state.steps += 1;
        self.state.time = self.state.steps as f64 * self.config.dt;
        self.state.motor_currents = currents.clone();
        // the sensor reports what acted during this step, so even a
        // single-period push is seen
        self.update_ee_wrench(t_start)?;
        let t = self.state.time;
        self.disturbances.retain(|d| d.end > t);
        Ok(())
    }

    fn substep(&mut self, currents: &DVector<f64>, dt: f64) -> Result<(), PlantError> {
        let n = self.dof();
        let (q, dq) = (&self.state.q, &self.state.dq);
        let kin = Kinematics::new(&self.physical, q)?;
        let m_link = link_mass_matrix_from(&self.physical, &kin);
        let mut m = m_link.clone();
        for (j, joint) in self.model.joints.iter().enumerate() {
            m[(j, j)] += joint.rotor_inertia;
        }
        let bias = nonlinear_terms(&self.physical, q, dq)?;
        let tau_ext = self.external_torque(&kin, self.state.time);
        let tau_m = DVector::from_fn(n, |j, _| {
            let joint = &self.model.joints[j];
            current_to_torque(currents[j], joint.torque_constant, joint.gear_ratio)
        });
        let rhs = &tau_m - &bias + &tau_ext;

        let mut friction = DVector::zeros(n);
        let mut stuck = vec![false; n];
        if self.config.friction_enabled {
            for j in 0..n {
                let p = &self.friction[j];
                if dq[j] == 0.0 {
                    stuck[j] = p.tau_s > 0.0;
                } else {
                    friction[j] = p.tau_c * dq[j].signum() + p.tau_v * dq[j];
                }
            }
        }
        let ddq = loop {
            let free: Vec<usize> = (0..n).filter(|j| !stuck[*j]).collect();
            let mut ddq = DVector::zeros(n);
            if !free.is_empty() {
                let mff = DMatrix::from_fn(free.len(), free.len(), |a, b| m[(free[a], free[b])]);
                let rf = DVector::from_fn(free.len(), |a, _| rhs[free[a]] - friction[free[a]]);
                let sol = mff.cholesky().ok_or(PlantError::NonFiniteState(self.state.time))?.solve(&rf);
                for (a, &j) in free.iter().enumerate() {
                    ddq[j] = sol[a];
                }
            }
            // holding friction each stuck joint needs; release the worst offender
            let held = &rhs - &m * &ddq;
            let mut worst: Option<(usize, f64)> = None;
            for j in (0..n).filter(|j| stuck[*j]) {
                let excess = held[j].abs() - self.friction[j].tau_s;
                if excess > 0.0 && worst.is_none_or(|(_, e)| excess > e) {
                    worst = Some((j, excess));
                }
            }
            match worst {
                Some((j, _)) => {
                    stuck[j] = false;
                    friction[j] = self.friction[j].tau_c * held[j].signum();
                }
                None => {
                    for j in (0..n).filter(|j| stuck[*j]) {
                        friction[j] = held[j];
                    }
                    break ddq;
                }
            }
        };

        let mut dq_new = dq + &ddq * dt;
        if self.config.friction_enabled {
            for j in 0..n {
                // sliding friction cannot reverse the motion by itself
                if dq[j] != 0.0 && dq_new[j].signum() != dq[j].signum() {
                    dq_new[j] = 0.0;
                }
            }
        }
        let q_new = q + &dq_new * dt;
        if q_new.iter().chain(dq_new.iter()).any(|v| !v.is_finite()) {
            return Err(PlantError::NonFiniteState(self.state.time));
        }
        let rotor = DVector::from_fn(n, |j, _| self.model.joints[j].rotor_inertia * ddq[j]);
        self.state.joint_torques = &tau_m - &friction - rotor;
        self.state.friction_torques = friction;
        self.state.external_joint_torques = tau_ext;
        self.state.ddq = ddq;
        self.state.q = q_new;
        self.state.dq = dq_new;
        Ok(())
    }

    /// Recomputes the tool-point wrench: active tool disturbances plus the
    /// payload's weight and inertial reaction.
    fn update_ee_wrench(&mut self, t: f64) -> Result<(), PlantError> {
        let ee = self.model.ee_index();
        let kin = Kinematics::new(&self.model, &self.state.q)?;
        let mut force = Vector3::zeros();
        let mut moment = Vector3::zeros();
        let tool = kin.point(ee, &self.model.ee_offset);
        for d in self.disturbances.iter().filter(|d| d.is_active(t) && d.link == ee) {
            force += d.wrench.linear;
            // moment about the sensor origin
            moment += d.wrench.angular + (kin.point(ee, &d.point) - tool).cross(&d.wrench.linear);
        }
        if let Some(p) = self.payload {
            let jac = kin.jacobian(ee, &self.model.ee_offset);
            let lin = (jac * &self.state.ddq).fixed_rows::<3>(3).into_owned();
            let bias = bias_acceleration(&self.model, &self.state.q, &self.state.dq, ee, &self.model.ee_offset)?.linear;
            force += (self.model.gravity - lin - bias) * p.mass;
        }
        let rot = kin.poses[ee].rotation.inverse();
        self.state.ee_external_wrench = SpatialVector::new(rot * moment, rot * force);
        Ok(())
    }

    /// Samples every sensor; noise comes from the plant's seeded stream.
    pub fn read_sensors(&mut self) -> SensorReadings {
        let n = self.dof();
        let noise = self.config.noise;
        let mut sample = |std: f64| if std > 0.0 { Normal::new(0.0, std).unwrap().sample(&mut self.rng) } else { 0.0 };
        let q = DVector::from_fn(n, |j, _| self.state.q[j] + sample(noise.position_std));
        let dq = DVector::from_fn(n, |j, _| self.state.dq[j] + sample(noise.velocity_std));
        let joint_torque = DVector::from_fn(n, |j, _| self.state.joint_torques[j] + sample(noise.torque_std));
        let w = self.state.ee_external_wrench;
        let moment = w.angular + Vector3::from_fn(|_, _| sample(noise.moment_std));
        let force = w.linear + Vector3::from_fn(|_, _| sample(noise.force_std));
        SensorReadings { q, dq, joint_torque, ft_wrench: SpatialVector::new(moment, force) }
    }

    /// `½ dqᵀ M dq` with the physical (payload-merged) inertia, rotors included.
    pub fn kinetic_energy(&self) -> f64 {
        let kin = Kinematics::new(&self.physical, &self.state.q).expect("dimensions checked");
        let mut m = link_mass_matrix_from(&self.physical, &kin);
        for (j, joint) in self.model.joints.iter().enumerate() {
            m[(j, j)] += joint.rotor_inertia;
        }
        0.5 * self.state.dq.dot(&(m * &self.state.dq))
    }
}

/// Per-joint PD gains of the baseline position controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionGains {
    pub kp: Vec<f64>,
    pub kd: Vec<f64>,
}

impl PositionGains {
    /// Gains giving natural frequency `omega` and damping ratio `zeta` on the
    /// diagonal joint inertia at `q`.
    pub fn tuned(model: &RobotModel, q: &DVector<f64>, omega: f64, zeta: f64) -> Result<Self, DynamicsError> {
        let kin = Kinematics::new(model, q)?;
        let m = link_mass_matrix_from(model, &kin);
        let inertia: Vec<f64> = (0..model.dof()).map(|j| m[(j, j)] + model.joints[j].rotor_inertia).collect();
        Ok(Self {
            kp: inertia.iter().map(|i| i * omega * omega).collect(),
            kd: inertia.iter().map(|i| 2.0 * zeta * omega * i).collect(),
        })
    }
}

/// High-gain joint PD with gravity feedforward, converted to motor current and
/// saturated at the torque limits.
pub fn position_control_step(
    model: &RobotModel,
    q: &DVector<f64>,
    dq: &DVector<f64>,
    q_ref: &DVector<f64>,
    dq_ref: &DVector<f64>,
    gains: &PositionGains,
) -> Result<DVector<f64>, DynamicsError> {
    let g = gravity_torques(model, q)?;
    Ok(DVector::from_fn(model.dof(), |j, _| {
        let joint = &model.joints[j];
        let tau = gains.kp[j] * (q_ref[j] - q[j]) + gains.kd[j] * (dq_ref[j] - dq[j]) + g[j];
        let tau = tau.clamp(-joint.torque_limit, joint.torque_limit);
        torque_to_current(tau, joint.torque_constant, joint.gear_ratio)
    }))
}

/// Current that produces `tau` at the motor on every joint.
pub fn torque_currents(model: &RobotModel, tau: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(model.dof(), |j, _| {
        let joint = &model.joints[j];
        torque_to_current(tau[j], joint.torque_constant, joint.gear_ratio)
    })
}
