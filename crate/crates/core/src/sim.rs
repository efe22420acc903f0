//! Closed-loop simulation: sensors → observer → modes → QP → low level → plant.

use nalgebra::{DVector, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{ConstraintMargin, ControlStatus, Controller, ControllerConfig, ControllerError, RobotTerms, Task, TaskSet};
use crate::dynamics::{gravity_torques, DynamicsError, Pose, SpatialVector};
use crate::lowlevel::{current_to_torque, FrictionParams, LowLevelConfig, LowLevelKind, LowLevelState};
use crate::model::RobotModel;
use crate::modes::{
    ee_reference_pose, mode_tick, set_ee_reference, set_posture_reference, wrench_norm, ComplianceMode, DynamicParams,
    FsmEvent, ModeCommand, ModeError, ModeFsm, ModeState, MomentumObserver, OffsetSample, Scenario, ScenarioTrajectory,
    SchmittTrigger, Transition, WrenchNorm,
};
use crate::plant::{position_control_step, torque_currents, Disturbance, Plant, PlantConfig, PlantError, PositionGains, SensorReadings};

/// Largest force an operator command may apply (N).
pub const MAX_COMMAND_FORCE: f64 = 500.0;
/// Longest duration of an operator push (s).
pub const MAX_COMMAND_DURATION: f64 = 10.0;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Mode(#[from] ModeError),
    #[error("invalid command: {0}")]
    InvalidCommand(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchmittConfig {
    pub high: f64,
    pub low: f64,
    pub norm: WrenchNorm,
}

impl Default for SchmittConfig {
    fn default() -> Self {
        Self { high: 8.0, low: 4.0, norm: WrenchNorm::Mixed }
    }
}

/// Joint PD baseline tuned to a natural frequency (rad/s) and damping ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PositionConfig {
    pub omega: f64,
    pub zeta: f64,
}

impl Default for PositionConfig {
    fn default() -> Self {
        Self { omega: 60.0, zeta: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub q0: Vec<f64>,
    pub mode: ComplianceMode,
    pub lowlevel: LowLevelKind,
    pub scenario: Scenario,
    pub seed: u64,
    pub observer_gain: f64,
    pub schmitt: SchmittConfig,
    pub dynamic: DynamicParams,
    pub position: PositionConfig,
    pub controller: ControllerConfig,
    pub torque_loop: LowLevelConfig,
    pub plant: PlantConfig,
}

/// Elbow-up pose with the tool in front of the base.
pub fn home_posture() -> Vec<f64> {
    vec![0.0, 0.4, 0.0, 1.6, 0.0, 0.9, 0.0]
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            q0: home_posture(),
            mode: ComplianceMode::NullSpace,
            lowlevel: LowLevelKind::PhriTorque,
            scenario: Scenario::Static,
            seed: 0,
            observer_gain: 50.0,
            schmitt: SchmittConfig::default(),
            dynamic: DynamicParams::default(),
            position: PositionConfig::default(),
            controller: ControllerConfig::default(),
            torque_loop: LowLevelConfig::default(),
            plant: PlantConfig::default(),
        }
    }
}

impl SimConfig {
    /// Frictionless, noiseless plant. The torque loop's friction model is
    /// zeroed too: feeding forward friction the plant doesn't have acts as
    /// positive velocity feedback and destabilises the light wrist joints.
    pub fn frictionless() -> Self {
        let mut c = Self { plant: PlantConfig::ideal(), ..Self::default() };
        c.torque_loop.friction_large = FrictionParams::zero();
        c.torque_loop.friction_small = FrictionParams::zero();
        c
    }

    pub fn from_toml_str(s: &str) -> Result<Self, SimError> {
        toml::from_str(s).map_err(|e| SimError::Config(e.to_string()))
    }

    pub fn validate(&self, model: &RobotModel) -> Result<(), SimError> {
        let cfg = |m: String| SimError::Config(m);
        if self.q0.len() != model.dof() {
            return Err(cfg(format!("q0 has {} entries, model has {} joints", self.q0.len(), model.dof())));
        }
        if !(self.observer_gain > 0.0 && self.observer_gain.is_finite()) {
            return Err(cfg("observer_gain must be positive".into()));
        }
        if (self.torque_loop.dt - self.plant.dt).abs() > 1e-12 {
            return Err(cfg("torque loop and plant must share dt".into()));
        }
        if !(self.position.omega > 0.0 && self.position.zeta > 0.0) {
            return Err(cfg("position gains must be positive".into()));
        }
        SchmittTrigger::new(self.schmitt.high, self.schmitt.low)?;
        ModeState::new(self.mode, self.lowlevel, self.scenario)?;
        self.controller.validate()?;
        self.torque_loop.validate().map_err(cfg)?;
        self.plant.validate()?;
        Ok(())
    }
}

/// Operator push: world-frame force and moment on a link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WrenchCommand {
    /// `"ee"` for the tool point, otherwise a link name (applied at its origin).
    pub frame: String,
    /// `[fx, fy, fz, tx, ty, tz]`.
    pub wrench: [f64; 6],
    pub duration_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SimCommand {
    Mode(ModeCommand),
    ApplyWrench(WrenchCommand),
    ClearWrench,
}

/// Everything observed and commanded during one control tick.
#[derive(Debug, Clone, PartialEq)]
pub struct TickInfo {
    /// Time at which the sensors were read.
    pub t: f64,
    pub sensors: SensorReadings,
    pub tau_ext_estimate: DVector<f64>,
    pub ddq_desired: DVector<f64>,
    pub tau_desired: DVector<f64>,
    pub tau_commanded: DVector<f64>,
    pub status: ControlStatus,
    pub active_constraints: Vec<String>,
    pub margins: Vec<ConstraintMargin>,
    pub ee_pose: Pose,
    pub ee_twist: Vector6<f64>,
    pub ee_reference: Pose,
    pub ee_reference_velocity: Vector3<f64>,
    pub wrench_norm: f64,
    pub engaged: bool,
    pub transitions: Vec<Transition>,
}

/// Telemetry snapshot; field names are the wire names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSnapshot {
    pub seq: u64,
    pub t: f64,
    pub q: Vec<f64>,
    pub dq: Vec<f64>,
    pub tau_measured: Vec<f64>,
    pub tau_desired: Vec<f64>,
    /// `[x, y, z, qw, qx, qy, qz]`.
    pub ee_pose: [f64; 7],
    /// `[fx, fy, fz, tx, ty, tz]` in the sensor frame.
    pub ee_wrench: [f64; 6],
    pub wrench_norm: f64,
    pub mode: ComplianceMode,
    pub lowlevel: LowLevelKind,
    pub scenario: Scenario,
    pub engaged: bool,
    pub paused: bool,
    pub emergency: bool,
    pub constraint_margins: Vec<ConstraintMargin>,
    pub qp_status: String,
}

pub fn pose_array(p: &Pose) -> [f64; 7] {
    let t = p.translation.vector;
    let r = p.rotation.quaternion();
    [t.x, t.y, t.z, r.w, r.i, r.j, r.k]
}

fn force_first(w: &SpatialVector) -> [f64; 6] {
    [w.linear.x, w.linear.y, w.linear.z, w.angular.x, w.angular.y, w.angular.z]
}

pub struct Simulation {
    pub model: RobotModel,
    pub config: SimConfig,
    pub plant: Plant,
    pub fsm: ModeFsm,
    pub tasks: TaskSet,
    pub controller: Controller,
    pub torque_loop: LowLevelState,
    pub observer: MomentumObserver,
    pub schmitt: SchmittTrigger,
    pub trajectory: ScenarioTrajectory,
    /// Centre of the end-effector reference; the trajectory offset is added to it.
    pub anchor: Pose,
    position_gains: PositionGains,
    q_cmd: DVector<f64>,
    dq_cmd: DVector<f64>,
    pending: Vec<Transition>,
    seq: u64,
    last: Option<TickInfo>,
}

impl Simulation {
    pub fn new(model: RobotModel, config: SimConfig) -> Result<Self, SimError> {
        config.validate(&model)?;
        let q0 = DVector::from_vec(config.q0.clone());
        let plant = Plant::new(model.clone(), config.plant.clone(), q0.clone(), config.seed)?;
        let terms = RobotTerms::compute(&model, &q0, &DVector::zeros(model.dof()))?;
        let anchor = terms.point_pose(model.ee_index(), &model.ee_offset);
        let tasks = TaskSet {
            tasks: vec![Task::ee(&model, anchor, &config.controller.ee)],
            posture: Task::posture(q0.clone(), &config.controller.posture),
        };
        let state = ModeState::new(config.mode, config.lowlevel, config.scenario)?;
        Ok(Self {
            fsm: ModeFsm::new(state),
            controller: Controller::new(config.controller.clone()),
            torque_loop: LowLevelState::new(&model, &config.torque_loop),
            observer: MomentumObserver::new(model.dof(), config.observer_gain),
            schmitt: SchmittTrigger::new(config.schmitt.high, config.schmitt.low)?,
            trajectory: ScenarioTrajectory::new(config.dynamic, config.scenario == Scenario::Dynamic),
            position_gains: PositionGains::tuned(&model, &q0, config.position.omega, config.position.zeta)?,
            dq_cmd: DVector::zeros(model.dof()),
            q_cmd: q0,
            anchor,
            tasks,
            plant,
            model,
            config,
            pending: Vec::new(),
            seq: 0,
            last: None,
        })
    }

    pub fn state(&self) -> ModeState {
        self.fsm.state
    }

    pub fn time(&self) -> f64 {
        self.plant.time()
    }

    pub fn last(&self) -> Option<&TickInfo> {
        self.last.as_ref()
    }

    /// Validates and applies a command; effects that need measurements
    /// (re-anchoring, loop resets) happen at the start of the next tick.
    pub fn apply(&mut self, cmd: SimCommand) -> Result<(), SimError> {
        match cmd {
            SimCommand::Mode(c) => {
                let t = self.fsm.step(&FsmEvent::Command(c))?;
                self.pending.push(t);
            }
            SimCommand::ApplyWrench(w) => {
                let d = self.wrench_disturbance(&w)?;
                if d.wrench.norm() > 0.0 && d.end > d.start {
                    self.plant.schedule(d);
                }
            }
            SimCommand::ClearWrench => self.plant.clear_disturbances(),
        }
        Ok(())
    }

    fn wrench_disturbance(&self, w: &WrenchCommand) -> Result<Disturbance, SimError> {
        let bad = |m: String| Err(SimError::InvalidCommand(m));
        if w.wrench.iter().any(|v| !v.is_finite()) || !w.duration_ms.is_finite() {
            return bad("non-finite wrench".into());
        }
        let force = Vector3::new(w.wrench[0], w.wrench[1], w.wrench[2]);
        let moment = Vector3::new(w.wrench[3], w.wrench[4], w.wrench[5]);
        if force.norm() > MAX_COMMAND_FORCE {
            return bad(format!("force {:.1} N exceeds {MAX_COMMAND_FORCE} N", force.norm()));
        }
        let duration = w.duration_ms / 1000.0;
        if !(0.0..=MAX_COMMAND_DURATION).contains(&duration) {
            return bad(format!("duration {duration} s outside [0, {MAX_COMMAND_DURATION}] s"));
        }
        let (link, point) = if w.frame == "ee" {
            (self.model.ee_index(), self.model.ee_offset)
        } else {
            match self.model.link_index(&w.frame) {
                Some(i) => (i, Vector3::zeros()),
                None => return bad(format!("unknown frame `{}`", w.frame)),
            }
        };
        let t = self.plant.time();
        Ok(Disturbance { link, point, wrench: SpatialVector::new(moment, force), start: t, end: t + duration })
    }

    fn ee_pose_and_twist(&self, terms: &RobotTerms) -> (Pose, Vector6<f64>) {
        let (ee, off) = (self.model.ee_index(), self.model.ee_offset);
        let twist = terms.kin.jacobian(ee, &off) * &terms.dq;
        (terms.point_pose(ee, &off), Vector6::from_column_slice(twist.as_slice()))
    }

    /// Anchor such that `anchor + offset` is the current pose.
    fn reanchor_ee(&mut self, pose: &Pose) {
        let offset = self.trajectory.sample();
        let mut a = *pose;
        a.translation.vector -= offset.position;
        self.anchor = a;
    }

    fn handle_transition(&mut self, t: &Transition, terms: &RobotTerms, pose: &Pose) {
        let (from, to) = (t.from, t.to);
        if to.lowlevel != from.lowlevel {
            self.torque_loop.reset();
            self.controller.reset();
            self.q_cmd = terms.q.clone();
            self.dq_cmd = terms.dq.clone();
        }
        if to.mode != from.mode {
            self.schmitt.engaged = false;
        }
        if to.scenario != from.scenario {
            self.trajectory.set_running(to.scenario == Scenario::Dynamic);
        }
        if from.emergency && !to.emergency {
            self.controller.reset();
            self.torque_loop.reset();
            set_posture_reference(&mut self.tasks, &terms.q);
            self.q_cmd = terms.q.clone();
            self.dq_cmd = terms.dq.clone();
        }
        if t.reanchor {
            self.reanchor_ee(pose);
        }
        if !to.emergency {
            let previous = self.last.as_ref().map(|l| l.ddq_desired.clone()).unwrap_or_else(|| DVector::zeros(self.model.dof()));
            self.controller.begin_transfer(previous, self.config.plant.dt);
        }
    }

    /// One control period. A paused simulation does not advance.
    pub fn step(&mut self) -> Result<&TickInfo, SimError> {
        let pending = std::mem::take(&mut self.pending);
        // `if let` here would hold the borrow past the early return
        #[allow(clippy::unnecessary_unwrap)]
        if self.fsm.state.paused && self.last.is_some() {
            let last = self.last.as_mut().expect("checked");
            last.transitions = pending;
            return Ok(last);
        }
        let dt = self.plant.config.dt;
        let n = self.model.dof();
        let sensors = self.plant.read_sensors();
        let t = self.plant.time();
        let terms = RobotTerms::compute(&self.model, &sensors.q, &sensors.dq)?;
        let tau_ext = self.observer.update(&terms.m_link, &terms.h, &sensors.dq, &sensors.joint_torque, dt).clone();
        let (ee_pose, ee_twist) = self.ee_pose_and_twist(&terms);

        for tr in &pending {
            self.handle_transition(tr, &terms, &ee_pose);
        }
        let state = self.fsm.state;

        let norm = wrench_norm(&sensors.ft_wrench, self.config.schmitt.norm);
        let was_engaged = self.schmitt.engaged;
        let engaged = state.mode == ComplianceMode::Dual && self.schmitt.update(norm);
        if state.mode == ComplianceMode::Dual && was_engaged && !engaged {
            // "the new position becomes the updated reference"
            self.reanchor_ee(&ee_pose);
        }
        mode_tick(&state, engaged, &mut self.tasks, &self.config.controller)?;

        let offset = if state.paused { self.trajectory.sample() } else { self.trajectory.advance(dt) };
        if engaged {
            // zero stiffness: only damp towards rest
            set_ee_reference(&mut self.tasks, &ee_pose, &OffsetSample::zero());
        } else {
            set_ee_reference(&mut self.tasks, &self.anchor, &offset);
        }

        let (ddq_desired, tau_desired, currents, status, active, margins);
        if state.emergency {
            let g = gravity_torques(&self.model, &sensors.q)?;
            currents = torque_currents(&self.model, &g);
            (ddq_desired, tau_desired, status, active, margins) =
                (DVector::zeros(n), g, ControlStatus::Optimal, Vec::new(), Vec::new());
        } else {
            let out = if state.lowlevel == LowLevelKind::Position {
                let cmd_terms = RobotTerms::compute(&self.model, &self.q_cmd, &self.dq_cmd)?;
                self.controller.compute(&self.model, &cmd_terms, &self.tasks, &DVector::zeros(n))?
            } else {
                self.controller.compute(&self.model, &terms, &self.tasks, &tau_ext)?
            };
            if out.status.is_emergency() {
                log::warn!("t={t:.3}: qp {}, entering emergency stop", out.status.as_str());
                let tr = self.fsm.step(&FsmEvent::Emergency(out.status.as_str().into()))?;
                self.pending.push(tr);
                currents = torque_currents(&self.model, &out.tau_desired);
            } else {
                currents = match state.lowlevel {
                    LowLevelKind::Position => {
                        self.dq_cmd += &out.ddq_desired * dt;
                        self.q_cmd += &self.dq_cmd * dt;
                        position_control_step(&self.model, &sensors.q, &sensors.dq, &self.q_cmd, &self.dq_cmd, &self.position_gains)?
                    }
                    LowLevelKind::PhriTorque => {
                        self.torque_loop.step(&out.tau_desired, &out.ddq_desired, &sensors.dq, &sensors.joint_torque)
                    }
                    LowLevelKind::KinovaHighvel => self.torque_loop.highvel_step(&out.tau_desired, &sensors.joint_torque),
                };
            }
            (ddq_desired, tau_desired, status, active, margins) =
                (out.ddq_desired, out.tau_desired, out.status, out.active_constraints, out.margins);
        }
        let tau_commanded = DVector::from_fn(n, |j, _| {
            let joint = &self.model.joints[j];
            current_to_torque(currents[j], joint.torque_constant, joint.gear_ratio)
        });
        self.plant.step(&currents)?;

        let ee_reference = ee_reference_pose(&self.tasks).expect("ee task present");
        let ee_reference_velocity = if engaged { Vector3::zeros() } else { offset.velocity };
        self.seq += 1;
        self.last = Some(TickInfo {
            t,
            sensors,
            tau_ext_estimate: tau_ext,
            ddq_desired,
            tau_desired,
            tau_commanded,
            status,
            active_constraints: active,
            margins,
            ee_pose,
            ee_twist,
            ee_reference,
            ee_reference_velocity,
            wrench_norm: norm,
            engaged,
            transitions: pending,
        });
        Ok(self.last.as_ref().expect("just set"))
    }

    /// Runs `steps` ticks, calling `f` after each.
    pub fn run(&mut self, steps: usize, mut f: impl FnMut(&TickInfo)) -> Result<(), SimError> {
        for _ in 0..steps {
            f(self.step()?);
        }
        Ok(())
    }

    pub fn snapshot(&self) -> StateSnapshot {
        let s = self.fsm.state;
        let n = self.model.dof();
        let zeros = || vec![0.0; n];
        match &self.last {
            Some(l) => StateSnapshot {
                seq: self.seq,
                t: l.t,
                q: l.sensors.q.as_slice().to_vec(),
                dq: l.sensors.dq.as_slice().to_vec(),
                tau_measured: l.sensors.joint_torque.as_slice().to_vec(),
                tau_desired: l.tau_desired.as_slice().to_vec(),
                ee_pose: pose_array(&l.ee_pose),
                ee_wrench: force_first(&l.sensors.ft_wrench),
                wrench_norm: l.wrench_norm,
                mode: s.mode,
                lowlevel: s.lowlevel,
                scenario: s.scenario,
                engaged: l.engaged,
                paused: s.paused,
                emergency: s.emergency,
                constraint_margins: l.margins.clone(),
                qp_status: l.status.as_str().into(),
            },
            None => StateSnapshot {
                seq: self.seq,
                t: self.plant.time(),
                q: self.plant.state.q.as_slice().to_vec(),
                dq: self.plant.state.dq.as_slice().to_vec(),
                tau_measured: self.plant.state.joint_torques.as_slice().to_vec(),
                tau_desired: zeros(),
                ee_pose: pose_array(&self.anchor),
                ee_wrench: [0.0; 6],
                wrench_norm: 0.0,
                mode: s.mode,
                lowlevel: s.lowlevel,
                scenario: s.scenario,
                engaged: false,
                paused: s.paused,
                emergency: s.emergency,
                constraint_margins: Vec::new(),
                qp_status: "idle".into(),
            },
        }
    }
}
