//! External-effort estimation, compliance modes and the mode state machine.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{ControllerConfig, TaskReference, TaskSet};
use crate::dynamics::{Pose, SpatialVector};
use crate::lowlevel::LowLevelKind;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModeError {
    #[error("rejected transition: {0}")]
    RejectedTransition(String),
    #[error("invalid mode combination: {0}")]
    InvalidModeCombination(String),
    #[error("unknown value `{0}`")]
    Unknown(String),
}

/// First-order momentum observer on the link-side dynamics
/// `M q̈ + h = τ_J + τ_ext`:
///
/// ```text
/// r = K_obs (p − p₀ − ∫(τ_J − h + Ṁ dq + r) dt),   p = M dq
/// ```
///
/// `r` tracks `τ_ext` with time constant `1/K_obs`. `Ṁ dq` is taken from the
/// change of `M` between calls.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumObserver {
    pub gain: f64,
    integral: DVector<f64>,
    residual: DVector<f64>,
    p0: Option<DVector<f64>>,
    prev_m: Option<DMatrix<f64>>,
}

impl MomentumObserver {
    pub fn new(n: usize, gain: f64) -> Self {
        Self { gain, integral: DVector::zeros(n), residual: DVector::zeros(n), p0: None, prev_m: None }
    }

    pub fn reset(&mut self) {
        self.integral.fill(0.0);
        self.residual.fill(0.0);
        self.p0 = None;
        self.prev_m = None;
    }

    /// `m_link` and `h` from the nominal model at the measured state.
    pub fn update(
        &mut self,
        m_link: &DMatrix<f64>,
        h: &DVector<f64>,
        dq: &DVector<f64>,
        tau_measured: &DVector<f64>,
        dt: f64,
    ) -> &DVector<f64> {
        let p = m_link * dq;
        let Some(p0) = &self.p0 else {
            self.p0 = Some(p);
            self.prev_m = Some(m_link.clone());
            return &self.residual;
        };
        let m_dot_dq = match &self.prev_m {
            Some(prev) => (m_link - prev) * dq / dt,
            None => DVector::zeros(dq.len()),
        };
        self.integral += (tau_measured - h + m_dot_dq + &self.residual) * dt;
        self.residual = (p - p0 - &self.integral) * self.gain;
        self.prev_m = Some(m_link.clone());
        &self.residual
    }

    pub fn estimate(&self) -> &DVector<f64> {
        &self.residual
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WrenchNorm {
    /// Force (N) and moment (N·m) in one 6-norm, mixing units.
    Mixed,
    ForceOnly,
}

pub fn wrench_norm(w: &SpatialVector, kind: WrenchNorm) -> f64 {
    match kind {
        WrenchNorm::Mixed => w.norm(),
        WrenchNorm::ForceOnly => w.linear.norm(),
    }
}

/// Two-threshold switch: engages strictly above `high`, releases strictly below `low`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchmittTrigger {
    pub high: f64,
    pub low: f64,
    pub engaged: bool,
}

impl SchmittTrigger {
    pub fn new(high: f64, low: f64) -> Result<Self, ModeError> {
        if !(high > low && low > 0.0) {
            return Err(ModeError::InvalidModeCombination(format!("need high > low > 0, got {high}/{low}")));
        }
        Ok(Self { high, low, engaged: false })
    }

    /// Returns the new state.
    pub fn update(&mut self, norm: f64) -> bool {
        if !self.engaged && norm > self.high {
            self.engaged = true;
        } else if self.engaged && norm < self.low {
            self.engaged = false;
        }
        self.engaged
    }
}

impl Default for SchmittTrigger {
    fn default() -> Self {
        Self { high: 8.0, low: 4.0, engaged: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComplianceMode {
    NullSpace,
    FullBody,
    Dual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Static,
    Dynamic,
}

macro_rules! string_enum {
    ($ty:ty, $($variant:path => $name:literal),+) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self { $($variant => $name),+ }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
        impl FromStr for $ty {
            type Err = ModeError;
            fn from_str(s: &str) -> Result<Self, ModeError> {
                match s.replace('-', "_").as_str() {
                    $($name => Ok($variant),)+
                    _ => Err(ModeError::Unknown(s.to_string())),
                }
            }
        }
    };
}

string_enum!(ComplianceMode, ComplianceMode::NullSpace => "null_space", ComplianceMode::FullBody => "full_body", ComplianceMode::Dual => "dual");
string_enum!(Scenario, Scenario::Static => "static", Scenario::Dynamic => "dynamic");

impl ComplianceMode {
    pub const ALL: [ComplianceMode; 3] = [ComplianceMode::NullSpace, ComplianceMode::FullBody, ComplianceMode::Dual];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeState {
    pub mode: ComplianceMode,
    pub lowlevel: LowLevelKind,
    pub scenario: Scenario,
    pub paused: bool,
    pub emergency: bool,
    /// Overrides of the mode's γ values.
    pub gamma_ee: Option<f64>,
    pub gamma_posture: Option<f64>,
}

impl ModeState {
    pub fn new(mode: ComplianceMode, lowlevel: LowLevelKind, scenario: Scenario) -> Result<Self, ModeError> {
        let s = Self { mode, lowlevel, scenario, paused: false, emergency: false, gamma_ee: None, gamma_posture: None };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), ModeError> {
        if self.mode == ComplianceMode::Dual && self.lowlevel == LowLevelKind::Position {
            return Err(ModeError::InvalidModeCombination("dual compliance needs a torque-controlled low level".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaTarget {
    Ee,
    Posture,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModeCommand {
    SetMode { mode: ComplianceMode },
    SetLowlevel { lowlevel: LowLevelKind },
    SetScenario { scenario: Scenario },
    /// `value: None` removes the override.
    SetGamma { task: GammaTarget, value: Option<f64> },
    Pause,
    Resume,
    EmergencyStop,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FsmEvent {
    Command(ModeCommand),
    Emergency(String),
    Tick,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub from: ModeState,
    pub to: ModeState,
    /// Task references must be re-anchored at the measured state.
    pub reanchor: bool,
}

/// Mode/low-level/scenario state machine. Commands are validated before they
/// change anything; a rejected command leaves the state untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeFsm {
    pub state: ModeState,
    pub trace: Vec<ModeState>,
}

impl ModeFsm {
    pub fn new(state: ModeState) -> Self {
        Self { state, trace: vec![state] }
    }

    pub fn step(&mut self, event: &FsmEvent) -> Result<Transition, ModeError> {
        let from = self.state;
        let mut to = from;
        let mut reanchor = false;
        match event {
            FsmEvent::Tick => {}
            FsmEvent::Emergency(_) | FsmEvent::Command(ModeCommand::EmergencyStop) => to.emergency = true,
            FsmEvent::Command(cmd) => match *cmd {
                ModeCommand::SetMode { mode } => {
                    to.mode = mode;
                    reanchor = mode != from.mode;
                }
                ModeCommand::SetLowlevel { lowlevel } => {
                    to.lowlevel = lowlevel;
                    reanchor = lowlevel != from.lowlevel;
                }
                ModeCommand::SetScenario { scenario } => {
                    to.scenario = scenario;
                    reanchor = scenario != from.scenario;
                }
                ModeCommand::SetGamma { task, value } => {
                    if let Some(v) = value {
                        if !(0.0..=1.0).contains(&v) {
                            return Err(ModeError::RejectedTransition(format!("gamma {v} outside [0, 1]")));
                        }
                    }
                    match task {
                        GammaTarget::Ee => to.gamma_ee = value,
                        GammaTarget::Posture => to.gamma_posture = value,
                    }
                }
                ModeCommand::Pause => to.paused = true,
                ModeCommand::Resume => {
                    reanchor = from.paused || from.emergency;
                    to.paused = false;
                    to.emergency = false;
                }
                ModeCommand::EmergencyStop => unreachable!(),
            },
        }
        if from.emergency && to.emergency && matches!(event, FsmEvent::Command(ModeCommand::SetMode { .. } | ModeCommand::SetLowlevel { .. } | ModeCommand::SetScenario { .. })) {
            return Err(ModeError::RejectedTransition("in emergency stop; resume first".into()));
        }
        to.validate().map_err(|e| ModeError::RejectedTransition(e.to_string()))?;
        self.state = to;
        if to != from {
            self.trace.push(to);
        }
        Ok(Transition { from, to, reanchor })
    }
}

/// Sets γ values and end-effector gains for the current mode.
pub fn mode_tick(state: &ModeState, engaged: bool, tasks: &mut TaskSet, cfg: &ControllerConfig) -> Result<(), ModeError> {
    state.validate()?;
    let (gamma_ee, gains) = match state.mode {
        ComplianceMode::NullSpace => (0.0, cfg.ee),
        ComplianceMode::FullBody => (1.0, cfg.ee),
        ComplianceMode::Dual if engaged => (1.0, cfg.dual_engaged),
        ComplianceMode::Dual => (0.0, cfg.ee),
    };
    if let Some(ee) = tasks.ee_task_mut() {
        ee.gamma = state.gamma_ee.unwrap_or(gamma_ee);
        ee.set_gains(gains.kp, gains.kd);
        ee.weight = gains.weight;
    }
    tasks.posture.gamma = state.gamma_posture.unwrap_or(1.0);
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicParams {
    /// Vertical sine amplitude (m) and frequency (Hz).
    pub a_z: f64,
    pub f_z: f64,
    /// Horizontal triangle amplitude (m) and frequency (Hz).
    pub a_y: f64,
    pub f_y: f64,
    /// Parabolic blend duration at the triangle's vertices (s).
    pub blend: f64,
    /// Time for the trajectory to speed up from rest or come to rest (s).
    pub ramp: f64,
}

impl Default for DynamicParams {
    fn default() -> Self {
        Self { a_z: 0.10, f_z: 0.5, a_y: 0.20, f_y: 0.1, blend: 0.2, ramp: 2.0 }
    }
}

/// Offset of the tool point from its anchor: position, velocity, acceleration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OffsetSample {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub acceleration: Vector3<f64>,
}

impl OffsetSample {
    pub fn zero() -> Self {
        Self { position: Vector3::zeros(), velocity: Vector3::zeros(), acceleration: Vector3::zeros() }
    }
}

/// Triangle wave of amplitude `a` and period `period` starting upward at 0,
/// with parabolic blends of duration `blend` that still peak at exactly `a`.
fn triangle(t: f64, a: f64, period: f64, blend: f64) -> (f64, f64, f64) {
    if a == 0.0 {
        return (0.0, 0.0, 0.0);
    }
    let quarter = period / 4.0;
    let blend = blend.clamp(0.0, quarter);
    let slope = a / (quarter - blend / 4.0);
    let acc = if blend > 0.0 { 2.0 * slope / blend } else { 0.0 };
    let u = t.rem_euclid(period);
    // mirror the second half onto the first with a sign flip
    let (u, sign) = if u < 2.0 * quarter { (u, 1.0) } else { (u - 2.0 * quarter, -1.0) };
    // first half: rise, vertex at `quarter`, fall back to zero at 2·quarter
    let d = u - quarter;
    let (p, v, ac) = if d.abs() <= blend / 2.0 {
        (a - 0.5 * acc * d * d, -acc * d, -acc)
    } else if d < 0.0 {
        (slope * u, slope, 0.0)
    } else {
        (slope * (2.0 * quarter - u), -slope, 0.0)
    };
    (sign * p, sign * v, sign * ac)
}

/// Vertical sine plus horizontal triangle, as a function of time since start.
pub fn dynamic_reference(t: f64, p: &DynamicParams) -> OffsetSample {
    let w = 2.0 * std::f64::consts::PI * p.f_z;
    let (z, dz, ddz) = (p.a_z * (w * t).sin(), p.a_z * w * (w * t).cos(), -p.a_z * w * w * (w * t).sin());
    let (y, dy, ddy) = if p.f_y > 0.0 { triangle(t, p.a_y, 1.0 / p.f_y, p.blend) } else { (0.0, 0.0, 0.0) };
    OffsetSample {
        position: Vector3::new(0.0, y, z),
        velocity: Vector3::new(0.0, dy, dz),
        acceleration: Vector3::new(0.0, ddy, ddz),
    }
}

/// Runs [`dynamic_reference`] through a phase whose rate ramps smoothly between
/// 0 (static) and 1 (full speed), so starting and stopping are free of
/// velocity and acceleration jumps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenarioTrajectory {
    pub params: DynamicParams,
    pub phase: f64,
    rate: f64,
    ramp_from: f64,
    ramp_to: f64,
    ramp_elapsed: f64,
}

impl ScenarioTrajectory {
    pub fn new(params: DynamicParams, running: bool) -> Self {
        let r = if running { 1.0 } else { 0.0 };
        Self { params, phase: 0.0, rate: r, ramp_from: r, ramp_to: r, ramp_elapsed: f64::INFINITY }
    }

    pub fn set_running(&mut self, running: bool) {
        let target = if running { 1.0 } else { 0.0 };
        if target != self.ramp_to {
            self.ramp_from = self.rate;
            self.ramp_to = target;
            self.ramp_elapsed = 0.0;
        }
    }

    pub fn is_stopped(&self) -> bool {
        self.rate == 0.0 && self.ramp_to == 0.0
    }

    fn rate_and_derivative(&self) -> (f64, f64) {
        let t = self.params.ramp;
        if t <= 0.0 || self.ramp_elapsed >= t {
            return (self.ramp_to, 0.0);
        }
        // smoothstep
        let s = self.ramp_elapsed / t;
        let k = s * s * (3.0 - 2.0 * s);
        let dk = 6.0 * s * (1.0 - s) / t;
        let span = self.ramp_to - self.ramp_from;
        (self.ramp_from + span * k, span * dk)
    }

    /// Advances by `dt` and returns the offset sample.
    pub fn advance(&mut self, dt: f64) -> OffsetSample {
        self.ramp_elapsed += dt;
        let (rate, drate) = self.rate_and_derivative();
        self.rate = rate;
        self.phase += rate * dt;
        self.sample_with(rate, drate)
    }

    pub fn sample(&self) -> OffsetSample {
        let (rate, drate) = self.rate_and_derivative();
        self.sample_with(rate, drate)
    }

    fn sample_with(&self, rate: f64, drate: f64) -> OffsetSample {
        let s = dynamic_reference(self.phase, &self.params);
        OffsetSample {
            position: s.position,
            velocity: s.velocity * rate,
            acceleration: s.acceleration * rate * rate + s.velocity * drate,
        }
    }
}

/// Points the end-effector task at `anchor + offset`.
pub fn set_ee_reference(tasks: &mut TaskSet, anchor: &Pose, offset: &OffsetSample) {
    if let Some(ee) = tasks.ee_task_mut() {
        if let TaskReference::EePose { pose, velocity, acceleration, .. } = &mut ee.reference {
            let mut p = *anchor;
            p.translation.vector += offset.position;
            *pose = p;
            *velocity = Vector6::new(0.0, 0.0, 0.0, offset.velocity.x, offset.velocity.y, offset.velocity.z);
            *acceleration =
                Vector6::new(0.0, 0.0, 0.0, offset.acceleration.x, offset.acceleration.y, offset.acceleration.z);
        }
    }
}

pub fn ee_reference_pose(tasks: &TaskSet) -> Option<Pose> {
    match tasks.ee_task()?.reference {
        TaskReference::EePose { pose, .. } => Some(pose),
        _ => None,
    }
}

pub fn set_posture_reference(tasks: &mut TaskSet, q: &DVector<f64>) {
    if let TaskReference::Posture { q: r, dq, ddq } = &mut tasks.posture.reference {
        *r = q.clone();
        dq.fill(0.0);
        ddq.fill(0.0);
    }
}
