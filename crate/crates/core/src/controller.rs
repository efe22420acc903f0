//! Compliance-weighted second-order QP controller.
//!
//! Each tick the decision variable is the joint acceleration `q̈ʳ`. Every
//! operational-space task `k` contributes
//!
//! ```text
//! w_k ‖J_k q̈ʳ + J̇_k dq − ë*_k − γ_k J_k q̂̈ᵉ‖²
//! ```
//!
//! and the posture task `w₀ ‖q̈ʳ − q̈* − γ₀ q̂̈ᵉ‖²`, where `q̂̈ᵉ = M⁻¹ τ̂ᵉ` is the
//! acceleration the estimated external torque would cause. `γ = 0` rejects the
//! external effort in that task, `γ = 1` lets it through.
//!
//! Safety enters as hard constraints: second-order velocity dampers on joint
//! limits and capsule distances, joint velocity limits, and torque limits
//! mapped through the link dynamics.
//!
//! Task-space vectors are ordered `[angular; linear]`, like the Jacobians.

use nalgebra::{DMatrix, DVector, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{
    bias_acceleration, bias_acceleration_world, gravity_torques, link_mass_matrix_from, nonlinear_terms, pair_distance,
    rotation_error, DynamicsError, Kinematics, Pose,
};
use crate::model::RobotModel;
use crate::qp::{QpError, QpProblem, QpSolver, QpStatus};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControllerError {
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error("conflicting acceleration bounds on joint {joint}: {lower} > {upper}")]
    ConflictingBounds { joint: usize, lower: f64, upper: f64 },
    #[error("invalid task `{0}`")]
    InvalidTask(String),
    #[error("invalid controller config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskReference {
    /// Pose of a point on `link` (given by `offset` in the link frame).
    EePose {
        link: usize,
        offset: Vector3<f64>,
        pose: Pose,
        velocity: Vector6<f64>,
        acceleration: Vector6<f64>,
    },
    Posture {
        q: DVector<f64>,
        dq: DVector<f64>,
        ddq: DVector<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub name: String,
    pub weight: f64,
    pub kp: DVector<f64>,
    pub kd: DVector<f64>,
    pub gamma: f64,
    pub reference: TaskReference,
}

impl Task {
    /// End-effector task holding `pose` with uniform gains.
    pub fn ee(model: &RobotModel, pose: Pose, gains: &TaskGains) -> Self {
        Self {
            name: "ee".into(),
            weight: gains.weight,
            kp: DVector::from_element(6, gains.kp),
            kd: DVector::from_element(6, gains.kd),
            gamma: 0.0,
            reference: TaskReference::EePose {
                link: model.ee_index(),
                offset: model.ee_offset,
                pose,
                velocity: Vector6::zeros(),
                acceleration: Vector6::zeros(),
            },
        }
    }

    /// Posture task holding `q` with uniform gains.
    pub fn posture(q: DVector<f64>, gains: &TaskGains) -> Self {
        let n = q.len();
        Self {
            name: "posture".into(),
            weight: gains.weight,
            kp: DVector::from_element(n, gains.kp),
            kd: DVector::from_element(n, gains.kd),
            gamma: 1.0,
            reference: TaskReference::Posture { q, dq: DVector::zeros(n), ddq: DVector::zeros(n) },
        }
    }

    pub fn dim(&self) -> usize {
        match &self.reference {
            TaskReference::EePose { .. } => 6,
            TaskReference::Posture { q, .. } => q.len(),
        }
    }

    pub fn set_gains(&mut self, kp: f64, kd: f64) {
        self.kp.fill(kp);
        self.kd.fill(kd);
    }

    pub fn validate(&self) -> Result<(), ControllerError> {
        let ok = (0.0..=1.0).contains(&self.gamma)
            && self.weight > 0.0
            && self.weight.is_finite()
            && self.kp.len() == self.dim()
            && self.kd.len() == self.dim()
            && self.kp.iter().chain(self.kd.iter()).all(|v| *v >= 0.0 && v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(ControllerError::InvalidTask(self.name.clone()))
        }
    }
}

/// Operational-space tasks plus the joint-space posture task (the `w₀`, `γ₀` term).
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSet {
    pub tasks: Vec<Task>,
    pub posture: Task,
}

impl TaskSet {
    pub fn ee_task(&self) -> Option<&Task> {
        self.tasks.iter().find(|t| matches!(t.reference, TaskReference::EePose { .. }))
    }

    pub fn ee_task_mut(&mut self) -> Option<&mut Task> {
        self.tasks.iter_mut().find(|t| matches!(t.reference, TaskReference::EePose { .. }))
    }

    /// Multiplies every weight, the posture one included.
    pub fn scale_weights(&mut self, c: f64) {
        for t in &mut self.tasks {
            t.weight *= c;
        }
        self.posture.weight *= c;
    }
}

/// Measured quantity a task compares against its reference.
#[derive(Debug, Clone, Copy)]
pub enum TaskFeedback<'a> {
    Ee { pose: &'a Pose, twist: &'a Vector6<f64> },
    Posture { q: &'a DVector<f64>, dq: &'a DVector<f64> },
}

/// `ë* = ë_ref + K_d (ė_ref − ė) + K_p err`.
pub fn task_reference_acceleration(task: &Task, feedback: TaskFeedback<'_>) -> DVector<f64> {
    match (&task.reference, feedback) {
        (TaskReference::EePose { pose, velocity, acceleration, .. }, TaskFeedback::Ee { pose: cur, twist }) => {
            let rot = rotation_error(&pose.rotation, &cur.rotation);
            let pos = pose.translation.vector - cur.translation.vector;
            let err = Vector6::new(rot.x, rot.y, rot.z, pos.x, pos.y, pos.z);
            let v = acceleration + (velocity - twist).component_mul(&Vector6::from_column_slice(task.kd.as_slice()))
                + err.component_mul(&Vector6::from_column_slice(task.kp.as_slice()));
            DVector::from_column_slice(v.as_slice())
        }
        (TaskReference::Posture { q, dq, ddq }, TaskFeedback::Posture { q: cur, dq: vel }) => {
            ddq + (dq - vel).component_mul(&task.kd) + (q - cur).component_mul(&task.kp)
        }
        _ => panic!("feedback kind does not match task `{}`", task.name),
    }
}

/// Dynamic quantities shared by every piece of the tick.
#[derive(Debug, Clone)]
pub struct RobotTerms {
    pub q: DVector<f64>,
    pub dq: DVector<f64>,
    pub kin: Kinematics,
    /// Links only: maps `q̈` to link-side (torque sensor) torque.
    pub m_link: DMatrix<f64>,
    /// Links plus reflected rotors.
    pub m_full: DMatrix<f64>,
    pub h: DVector<f64>,
}

impl RobotTerms {
    pub fn compute(model: &RobotModel, q: &DVector<f64>, dq: &DVector<f64>) -> Result<Self, ControllerError> {
        let kin = Kinematics::new(model, q)?;
        let m_link = link_mass_matrix_from(model, &kin);
        let mut m_full = m_link.clone();
        for (j, joint) in model.joints.iter().enumerate() {
            m_full[(j, j)] += joint.rotor_inertia;
        }
        let h = nonlinear_terms(model, q, dq)?;
        Ok(Self { q: q.clone(), dq: dq.clone(), kin, m_link, m_full, h })
    }

    /// `M⁻¹ τ` with the full mass matrix.
    pub fn solve_full(&self, tau: &DVector<f64>) -> DVector<f64> {
        self.m_full.clone().cholesky().expect("mass matrix is positive definite").solve(tau)
    }

    pub fn point_pose(&self, link: usize, offset: &Vector3<f64>) -> Pose {
        let mut pose = self.kin.poses[link];
        pose.translation.vector = self.kin.point(link, offset);
        pose
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DamperConfig {
    pub xi: f64,
    pub d_s: f64,
    pub d_i: f64,
    pub margin: f64,
}

impl DamperConfig {
    /// `λ = 4M²ξ / (d_i − d_s)`.
    pub fn lambda(&self) -> f64 {
        4.0 * self.margin * self.margin * self.xi / (self.d_i - self.d_s)
    }

    pub fn validate(&self) -> Result<(), ControllerError> {
        if self.d_i > self.d_s && self.margin >= 1.0 && self.xi > 0.0 && self.d_s.is_finite() && self.d_i.is_finite() {
            Ok(())
        } else {
            Err(ControllerError::Config(format!("need d_i > d_s, margin >= 1, xi > 0: {self:?}")))
        }
    }
}

/// Lower bound `ë_p = −λ²/(4M²)·(e − d_s) − λ·ė` on the second derivative of a
/// distance `e` that must stay above `d_s`.
pub fn velocity_damper_bound(e: f64, de: f64, cfg: &DamperConfig) -> f64 {
    let lambda = cfg.lambda();
    -lambda * lambda / (4.0 * cfg.margin * cfg.margin) * (e - cfg.d_s) - lambda * de
}

/// Upper bound `ë_v = −λ·(ė − ė_lim)` keeping a rate below its limit.
pub fn velocity_limit_bound(de: f64, de_lim: f64, lambda: f64) -> f64 {
    -lambda * (de - de_lim)
}

/// Elementwise min of the upper candidates and max of the lower ones.
pub fn assemble_acceleration_bounds(
    lower: &[Vec<f64>],
    upper: &[Vec<f64>],
) -> Result<(DVector<f64>, DVector<f64>), ControllerError> {
    let n = lower.len().max(upper.len());
    let lb = DVector::from_fn(n, |j, _| lower.get(j).into_iter().flatten().fold(f64::NEG_INFINITY, |a, b| a.max(*b)));
    let ub = DVector::from_fn(n, |j, _| upper.get(j).into_iter().flatten().fold(f64::INFINITY, |a, b| a.min(*b)));
    for j in 0..n {
        if lb[j] > ub[j] {
            return Err(ControllerError::ConflictingBounds { joint: j, lower: lb[j], upper: ub[j] });
        }
    }
    Ok((lb, ub))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintMargin {
    pub name: String,
    pub distance: f64,
    pub d_s: f64,
    pub d_i: f64,
}

/// Damper rows `a x ≤ b` over `q̈ʳ`, one per pair closer than `d_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct CollisionRows {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub labels: Vec<String>,
    /// Every checked pair, active or not.
    pub margins: Vec<ConstraintMargin>,
}

pub fn collision_constraints(
    model: &RobotModel,
    terms: &RobotTerms,
    pairs: &[(usize, usize)],
    cfg: &DamperConfig,
) -> Result<CollisionRows, ControllerError> {
    let n = model.dof();
    let mut rows: Vec<DVector<f64>> = Vec::new();
    let mut rhs = Vec::new();
    let mut labels = Vec::new();
    let mut margins = Vec::new();
    for &(a, b) in pairs {
        let Some(pd) = pair_distance(model, &terms.kin, a, b) else { continue };
        let name = format!("collision:{}/{}", model.links[a].name, model.links[b].name);
        margins.push(ConstraintMargin { name: name.clone(), distance: pd.geometry.distance, d_s: cfg.d_s, d_i: cfg.d_i });
        if pd.geometry.distance > cfg.d_i {
            continue;
        }
        let de = pd.gradient.dot(&terms.dq);
        let bias_a = bias_acceleration_world(model, &terms.q, &terms.dq, a, &pd.geometry.point_a)?.linear;
        let bias_b = bias_acceleration_world(model, &terms.q, &terms.dq, b, &pd.geometry.point_b)?.linear;
        let drift = pd.geometry.normal.dot(&(bias_a - bias_b));
        let e_p = velocity_damper_bound(pd.geometry.distance, de, cfg);
        // ë = ∇d·q̈ + drift ≥ ë_p
        rows.push(-&pd.gradient);
        rhs.push(drift - e_p);
        labels.push(name);
    }
    let mut amat = DMatrix::zeros(rows.len(), n);
    for (i, r) in rows.iter().enumerate() {
        amat.set_row(i, &r.transpose());
    }
    Ok(CollisionRows { a: amat, b: DVector::from_vec(rhs), labels, margins })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskGains {
    pub kp: f64,
    pub kd: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    pub ee: TaskGains,
    pub posture: TaskGains,
    /// End-effector gains while the dual-mode trigger is engaged.
    pub dual_engaged: TaskGains,
    pub joint_limits: DamperConfig,
    pub collision: DamperConfig,
    pub enable_joint_limits: bool,
    pub enable_velocity_limits: bool,
    pub enable_torque_limits: bool,
    pub enable_collisions: bool,
    /// Subtract `τ̂ᵉ` when mapping `q̈ʳ` to the desired torque.
    pub compensate_external: bool,
    pub max_qp_iterations: usize,
    /// After a mode or low-level switch, the gap between the old and the new
    /// commanded acceleration fades out over this time (s); zero disables.
    pub transfer_time: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            ee: TaskGains { kp: 900.0, kd: 60.0, weight: 1000.0 },
            posture: TaskGains { kp: 25.0, kd: 10.0, weight: 1.0 },
            dual_engaged: TaskGains { kp: 0.0, kd: 5.0, weight: 1000.0 },
            joint_limits: DamperConfig { xi: 0.75, d_s: 0.05, d_i: 0.2, margin: 1.0 },
            collision: DamperConfig { xi: 0.75, d_s: 0.01, d_i: 0.05, margin: 1.0 },
            enable_joint_limits: true,
            enable_velocity_limits: true,
            enable_torque_limits: true,
            enable_collisions: true,
            compensate_external: true,
            max_qp_iterations: 500,
            transfer_time: 0.5,
        }
    }
}

impl ControllerConfig {
    /// No constraints at all; handy for checking the objective alone.
    pub fn unconstrained() -> Self {
        Self {
            enable_joint_limits: false,
            enable_velocity_limits: false,
            enable_torque_limits: false,
            enable_collisions: false,
            ..Self::default()
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self, ControllerError> {
        let cfg: Self = toml::from_str(s).map_err(|e| ControllerError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ControllerError> {
        if !(self.transfer_time >= 0.0 && self.transfer_time.is_finite()) {
            return Err(ControllerError::Config("transfer_time must be >= 0".into()));
        }
        self.joint_limits.validate()?;
        self.collision.validate()?;
        for (name, g) in [("ee", &self.ee), ("posture", &self.posture), ("dual_engaged", &self.dual_engaged)] {
            if !(g.weight > 0.0) || !(g.kp >= 0.0) || !(g.kd >= 0.0) {
                return Err(ControllerError::Config(format!("bad gains for `{name}`")));
            }
        }
        Ok(())
    }
}

/// QP assembled for one tick, with labels for its constraint rows.
#[derive(Debug, Clone, PartialEq)]
pub struct CompliantQp {
    pub problem: QpProblem,
    /// One label per inequality row.
    pub row_labels: Vec<String>,
    pub margins: Vec<ConstraintMargin>,
}

impl CompliantQp {
    pub fn constraint_label(&self, index: usize) -> String {
        let m = self.row_labels.len();
        let n = self.problem.dim();
        if index < m {
            self.row_labels[index].clone()
        } else if index < m + n {
            format!("accel_lower:{}", index - m)
        } else {
            format!("accel_upper:{}", index - m - n)
        }
    }
}

/// Candidate acceleration bounds from joint-limit dampers and velocity limits.
pub fn joint_acceleration_bounds(
    model: &RobotModel,
    terms: &RobotTerms,
    cfg: &ControllerConfig,
    margins: &mut Vec<ConstraintMargin>,
) -> Result<(DVector<f64>, DVector<f64>), ControllerError> {
    let n = model.dof();
    let mut lower = vec![Vec::new(); n];
    let mut upper = vec![Vec::new(); n];
    let damper = &cfg.joint_limits;
    let lambda = damper.lambda();
    for (j, joint) in model.joints.iter().enumerate() {
        let (q, dq) = (terms.q[j], terms.dq[j]);
        if cfg.enable_joint_limits {
            if let Some([lo, hi]) = joint.position_limits {
                let e_up = hi - q;
                let e_lo = q - lo;
                margins.push(ConstraintMargin { name: format!("joint_upper:{}", joint.name), distance: e_up, d_s: damper.d_s, d_i: damper.d_i });
                margins.push(ConstraintMargin { name: format!("joint_lower:{}", joint.name), distance: e_lo, d_s: damper.d_s, d_i: damper.d_i });
                if e_up <= damper.d_i {
                    // e = hi − q, so ë = −q̈ ≥ ë_p
                    upper[j].push(-velocity_damper_bound(e_up, -dq, damper));
                }
                if e_lo <= damper.d_i {
                    lower[j].push(velocity_damper_bound(e_lo, dq, damper));
                }
            }
        }
        if cfg.enable_velocity_limits {
            upper[j].push(velocity_limit_bound(dq, joint.velocity_limit, lambda));
            lower[j].push(-velocity_limit_bound(-dq, joint.velocity_limit, lambda));
        }
    }
    assemble_acceleration_bounds(&lower, &upper)
}

/// Builds the weighted least-squares objective and every enabled constraint.
pub fn build_compliant_qp(
    model: &RobotModel,
    terms: &RobotTerms,
    tasks: &TaskSet,
    tau_ext: &DVector<f64>,
    cfg: &ControllerConfig,
) -> Result<CompliantQp, ControllerError> {
    let n = model.dof();
    if tau_ext.len() != n {
        return Err(DynamicsError::DimensionMismatch { expected: n, got: tau_ext.len() }.into());
    }
    tasks.posture.validate()?;
    let ddq_ext = terms.solve_full(tau_ext);

    let mut h = DMatrix::<f64>::identity(n, n) * tasks.posture.weight;
    let ddq_star = task_reference_acceleration(&tasks.posture, TaskFeedback::Posture { q: &terms.q, dq: &terms.dq });
    let mut g = (&ddq_star + &ddq_ext * tasks.posture.gamma) * -tasks.posture.weight;

    for task in &tasks.tasks {
        task.validate()?;
        let TaskReference::EePose { link, offset, .. } = &task.reference else {
            return Err(ControllerError::InvalidTask(format!("{}: only one posture task is allowed", task.name)));
        };
        let jac = terms.kin.jacobian(*link, offset);
        let pose = terms.point_pose(*link, offset);
        let twist_d = &jac * &terms.dq;
        let twist = Vector6::from_column_slice(twist_d.as_slice());
        let e_star = task_reference_acceleration(task, TaskFeedback::Ee { pose: &pose, twist: &twist });
        let bias = bias_acceleration(model, &terms.q, &terms.dq, *link, offset)?.to_vector6();
        let bias = DVector::from_column_slice(bias.as_slice());
        let target = e_star - bias + &jac * &ddq_ext * task.gamma;
        h += jac.transpose() * &jac * task.weight;
        g -= jac.transpose() * target * task.weight;
    }
    // exact symmetry for the solver's check
    let h = (&h + h.transpose()) * 0.5;

    let mut margins = Vec::new();
    let (lb, ub) = joint_acceleration_bounds(model, terms, cfg, &mut margins)?;

    let mut blocks: Vec<(DMatrix<f64>, DVector<f64>)> = Vec::new();
    let mut row_labels = Vec::new();
    if cfg.enable_collisions {
        let pairs = model.collision_pair_indices();
        let rows = collision_constraints(model, terms, &pairs, &cfg.collision)?;
        row_labels.extend(rows.labels.iter().cloned());
        margins.extend(rows.margins);
        blocks.push((rows.a, rows.b));
    }
    if cfg.enable_torque_limits {
        // τ = M_link q̈ʳ + h − τ̂ᵉ within ±τ_lim
        let lim = DVector::from_vec(model.torque_limits());
        let offset = if cfg.compensate_external { &terms.h - tau_ext } else { terms.h.clone() };
        blocks.push((terms.m_link.clone(), &lim - &offset));
        blocks.push((-&terms.m_link, &lim + &offset));
        row_labels.extend(model.joints.iter().map(|j| format!("torque_upper:{}", j.name)));
        row_labels.extend(model.joints.iter().map(|j| format!("torque_lower:{}", j.name)));
    }
    let m: usize = blocks.iter().map(|(a, _)| a.nrows()).sum();
    let mut a = DMatrix::zeros(m, n);
    let mut b = DVector::zeros(m);
    let mut r = 0;
    for (ab, bb) in &blocks {
        a.view_mut((r, 0), (ab.nrows(), n)).copy_from(ab);
        b.rows_mut(r, bb.len()).copy_from(bb);
        r += ab.nrows();
    }
    let problem = QpProblem::new(h, g).with_inequalities(a, b).with_bounds(lb, ub);
    Ok(CompliantQp { problem, row_labels, margins })
}

/// Torque clamped to the joint limits; the flag reports whether clamping happened.
pub fn output_torque(
    model: &RobotModel,
    terms: &RobotTerms,
    ddq: &DVector<f64>,
    tau_ext: &DVector<f64>,
    compensate_external: bool,
) -> (DVector<f64>, bool) {
    let mut tau = &terms.m_link * ddq + &terms.h;
    if compensate_external {
        tau -= tau_ext;
    }
    let mut clamped = false;
    for (j, joint) in model.joints.iter().enumerate() {
        let lim = joint.torque_limit;
        if tau[j].abs() > lim {
            tau[j] = tau[j].clamp(-lim, lim);
            clamped = true;
        }
    }
    (tau, clamped)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlStatus {
    Optimal,
    MaxIterations,
    Infeasible,
    ConflictingBounds,
}

impl ControlStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            ControlStatus::Optimal => "optimal",
            ControlStatus::MaxIterations => "max_iter",
            ControlStatus::Infeasible => "infeasible",
            ControlStatus::ConflictingBounds => "conflicting_bounds",
        }
    }

    /// Whether the loop must fall back to gravity compensation.
    pub fn is_emergency(self) -> bool {
        matches!(self, ControlStatus::Infeasible | ControlStatus::ConflictingBounds)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlOutput {
    pub ddq_desired: DVector<f64>,
    pub tau_desired: DVector<f64>,
    pub active_constraints: Vec<String>,
    pub status: ControlStatus,
    pub torque_clamped: bool,
    pub margins: Vec<ConstraintMargin>,
}

/// Bumpless transfer: an acceleration offset added to the QP's unconstrained
/// optimum, fading from its value at the switch to zero along a half cosine.
#[derive(Debug, Clone, PartialEq)]
struct Transfer {
    /// Acceleration to continue from; the offset is fixed on the first solve.
    previous: DVector<f64>,
    offset: Option<DVector<f64>>,
    elapsed: f64,
    dt: f64,
}

impl Transfer {
    fn weight(&self, duration: f64) -> f64 {
        if self.elapsed >= duration {
            0.0
        } else {
            0.5 * (1.0 + (std::f64::consts::PI * self.elapsed / duration).cos())
        }
    }
}

/// One controller per loop: owns the solver and the warm-start cache.
#[derive(Debug, Clone)]
pub struct Controller {
    pub config: ControllerConfig,
    solver: QpSolver,
    warm_start: Vec<usize>,
    transfer: Option<Transfer>,
}

impl Controller {
    pub fn new(config: ControllerConfig) -> Self {
        let solver = QpSolver { max_iterations: config.max_qp_iterations };
        Self { config, solver, warm_start: Vec::new(), transfer: None }
    }

    pub fn reset(&mut self) {
        self.warm_start.clear();
        self.transfer = None;
    }

    /// Makes the next solutions continue smoothly from `previous` (the last
    /// commanded acceleration) instead of jumping to the new tasks' optimum.
    /// `dt` is the period between `compute` calls.
    pub fn begin_transfer(&mut self, previous: DVector<f64>, dt: f64) {
        if self.config.transfer_time > 0.0 && previous.iter().all(|v| v.is_finite()) {
            self.transfer = Some(Transfer { previous, offset: None, elapsed: 0.0, dt });
        }
    }

    /// Whether a transfer offset is still being faded out.
    pub fn in_transfer(&self) -> bool {
        self.transfer.is_some()
    }

    fn solve(&mut self, problem: &QpProblem) -> Result<crate::qp::QpSolution, ControllerError> {
        Ok(self.solver.solve(problem, Some(&self.warm_start))?)
    }

    pub fn compute(
        &mut self,
        model: &RobotModel,
        terms: &RobotTerms,
        tasks: &TaskSet,
        tau_ext: &DVector<f64>,
    ) -> Result<ControlOutput, ControllerError> {
        let qp = match build_compliant_qp(model, terms, tasks, tau_ext, &self.config) {
            Ok(qp) => qp,
            Err(ControllerError::ConflictingBounds { .. }) => {
                return Ok(self.emergency(model, terms, ControlStatus::ConflictingBounds, Vec::new()));
            }
            Err(e) => return Err(e),
        };
        let mut sol = self.solve(&qp.problem)?;
        if let Some(tr) = &mut self.transfer {
            if sol.status == QpStatus::Infeasible {
                self.transfer = None;
            } else {
                // relative to the unconstrained optimum, so the shifted problem's
                // optimum is exactly the previous command
                let offset = match &tr.offset {
                    Some(o) => o.clone(),
                    None => {
                        let free = qp.problem.h.clone().cholesky().map(|c| -c.solve(&qp.problem.g)).unwrap_or_else(|| sol.x.clone());
                        tr.offset.insert(&tr.previous - free).clone()
                    }
                };
                let w = tr.weight(self.config.transfer_time);
                tr.elapsed += tr.dt;
                if tr.elapsed >= self.config.transfer_time {
                    self.transfer = None;
                }
                if w > 0.0 {
                    // shifts the unconstrained optimum by w·offset; constraints still hold
                    let mut shifted = qp.problem.clone();
                    shifted.g -= &shifted.h * offset * w;
                    sol = self.solve(&shifted)?;
                }
            }
        }
        let status = match sol.status {
            QpStatus::Optimal => ControlStatus::Optimal,
            QpStatus::MaxIterations => ControlStatus::MaxIterations,
            QpStatus::Infeasible => ControlStatus::Infeasible,
        };
        if status == ControlStatus::Infeasible {
            self.warm_start.clear();
            return Ok(self.emergency(model, terms, status, qp.margins));
        }
        self.warm_start = sol.active_set.clone();
        let active_constraints = sol.active_set.iter().map(|&i| qp.constraint_label(i)).collect();
        let (tau_desired, torque_clamped) = output_torque(model, terms, &sol.x, tau_ext, self.config.compensate_external);
        Ok(ControlOutput { ddq_desired: sol.x, tau_desired, active_constraints, status, torque_clamped, margins: qp.margins })
    }

    fn emergency(&self, model: &RobotModel, terms: &RobotTerms, status: ControlStatus, margins: Vec<ConstraintMargin>) -> ControlOutput {
        let tau = gravity_torques(model, &terms.q).expect("dimensions checked");
        ControlOutput {
            ddq_desired: DVector::zeros(model.dof()),
            tau_desired: tau,
            active_constraints: Vec::new(),
            status,
            torque_clamped: false,
            margins,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::ee_pose;
    use crate::model::default_gen3_model;
    use crate::qp::QpSolver;
    use nalgebra::{Translation3, UnitQuaternion};
    use proptest::prelude::*;

    fn home() -> DVector<f64> {
        DVector::from_vec(vec![0.0, 0.4, 0.0, 1.6, 0.0, 0.9, 0.0])
    }

    fn tasks_at(model: &RobotModel, q: &DVector<f64>, cfg: &ControllerConfig) -> TaskSet {
        let pose = ee_pose(model, q).unwrap();
        TaskSet { tasks: vec![Task::ee(model, pose, &cfg.ee)], posture: Task::posture(q.clone(), &cfg.posture) }
    }

    fn solve(problem: &QpProblem) -> DVector<f64> {
        let s = QpSolver::new().solve(problem, None).unwrap();
        assert_eq!(s.status, QpStatus::Optimal, "{s:?}");
        s.x
    }

    #[test]
    fn zero_error_gives_reference_acceleration() {
        let cfg = ControllerConfig::default();
        let mut t = Task::posture(DVector::from_element(3, 0.2), &cfg.posture);
        if let TaskReference::Posture { ddq, .. } = &mut t.reference {
            *ddq = DVector::from_vec(vec![1.0, -2.0, 3.0]);
        }
        let q = DVector::from_element(3, 0.2);
        let dq = DVector::zeros(3);
        let out = task_reference_acceleration(&t, TaskFeedback::Posture { q: &q, dq: &dq });
        assert_eq!(out, DVector::from_vec(vec![1.0, -2.0, 3.0]));
    }

    #[test]
    fn proportional_law_on_position_offset() {
        let model = default_gen3_model();
        let gains = TaskGains { kp: 1.0, kd: 0.0, weight: 1.0 };
        let reference = Pose::from_parts(Translation3::new(0.6, 0.0, 0.3), UnitQuaternion::identity());
        let task = Task::ee(&model, reference, &gains);
        let current = Pose::from_parts(Translation3::new(0.5, 0.0, 0.3), UnitQuaternion::identity());
        let out = task_reference_acceleration(&task, TaskFeedback::Ee { pose: &current, twist: &Vector6::zeros() });
        assert!((out[3] - 0.1).abs() < 1e-15);
        assert!(out.iter().enumerate().all(|(i, v)| i == 3 || v.abs() < 1e-15));
    }

    #[test]
    fn posture_law_is_critically_damped() {
        let gains = TaskGains { kp: 100.0, kd: 20.0, weight: 1.0 };
        let task = Task::posture(DVector::zeros(1), &gains);
        let (x0, dt) = (0.3, 1e-5);
        let (mut x, mut v) = (DVector::from_element(1, x0), DVector::zeros(1));
        let mut t = 0.0;
        while t < 1.0 {
            let a = task_reference_acceleration(&task, TaskFeedback::Posture { q: &x, dq: &v });
            v += a * dt;
            x += &v * dt;
            t += dt;
            // x(t) = x0 (1 + ωt) e^{−ωt}, ω = 10
            let exact = x0 * (1.0 + 10.0 * t) * (-10.0 * t).exp();
            assert!((x[0] - exact).abs() <= 0.01 * x0, "t={t}: {} vs {exact}", x[0]);
        }
    }

    #[test]
    fn damper_hand_values() {
        let cfg = DamperConfig { xi: 1.0, d_s: 0.1, d_i: 0.5, margin: 1.0 };
        assert!((cfg.lambda() - 10.0).abs() < 1e-12);
        assert!((velocity_damper_bound(0.3, 0.0, &cfg) + 5.0).abs() < 1e-12);
        assert_eq!(velocity_damper_bound(0.1, 0.0, &cfg), 0.0);
        // penetration demands positive separation acceleration
        assert!(velocity_damper_bound(-0.05, 0.0, &cfg) > 0.0);
    }

    #[test]
    fn velocity_limit_hand_values() {
        assert_eq!(velocity_limit_bound(1.0, 1.0, 10.0), 0.0);
        assert!((velocity_limit_bound(1.2, 1.0, 10.0) + 2.0).abs() < 1e-12);
        assert!(velocity_limit_bound(0.5, 1.0, 10.0) > 0.0);
    }

    #[test]
    fn bounds_assembly() {
        let (lb, ub) = assemble_acceleration_bounds(&[vec![]], &[vec![-5.0, -2.0]]).unwrap();
        assert_eq!(ub[0], -5.0);
        assert_eq!(lb[0], f64::NEG_INFINITY);
        let (lb, ub) = assemble_acceleration_bounds(&[vec![-3.0, -4.0]], &[vec![3.0, 4.0]]).unwrap();
        assert_eq!(lb[0], -ub[0]);
        let (lb, ub) = assemble_acceleration_bounds(&[vec![], vec![]], &[vec![], vec![]]).unwrap();
        assert!(lb.iter().all(|v| *v == f64::NEG_INFINITY) && ub.iter().all(|v| *v == f64::INFINITY));
        assert!(matches!(
            assemble_acceleration_bounds(&[vec![1.0]], &[vec![0.0]]),
            Err(ControllerError::ConflictingBounds { joint: 0, .. })
        ));
    }

    /// Scalar `ë = ë_p` from rest inside the influence zone never undershoots `d_s`.
    pub(crate) fn damper_min_distance(margin: f64, e0: f64, de0: f64) -> f64 {
        let cfg = DamperConfig { xi: 0.75, d_s: 0.05, d_i: 0.2, margin };
        let (mut e, mut de, dt) = (e0, de0, 1e-5);
        let mut min = e;
        for _ in 0..300_000 {
            // RK2 midpoint
            let a1 = velocity_damper_bound(e, de, &cfg);
            let (em, dem) = (e + 0.5 * dt * de, de + 0.5 * dt * a1);
            let a2 = velocity_damper_bound(em, dem, &cfg);
            e += dt * dem;
            de += dt * a2;
            min = min.min(e);
        }
        min - cfg.d_s
    }

    #[test]
    fn damper_is_overdamped() {
        for margin in [1.0, 1.5, 2.0] {
            for e0 in [0.06, 0.1, 0.2] {
                assert!(damper_min_distance(margin, e0, 0.0) >= -1e-6, "M={margin} e0={e0}");
            }
        }
    }

    #[test]
    fn zero_external_torque_ignores_gamma() {
        let model = default_gen3_model();
        let cfg = ControllerConfig::default();
        let q = home();
        let terms = RobotTerms::compute(&model, &q, &DVector::from_element(7, 0.1)).unwrap();
        let mut tasks = tasks_at(&model, &DVector::from_element(7, 0.3), &cfg);
        let zero = DVector::zeros(7);
        let a = build_compliant_qp(&model, &terms, &tasks, &zero, &cfg).unwrap();
        tasks.tasks[0].gamma = 1.0;
        tasks.posture.gamma = 0.0;
        let b = build_compliant_qp(&model, &terms, &tasks, &zero, &cfg).unwrap();
        assert_eq!(a.problem, b.problem);
    }

    #[test]
    fn output_torque_statics() {
        let model = default_gen3_model();
        let q = home();
        let terms = RobotTerms::compute(&model, &q, &DVector::zeros(7)).unwrap();
        let g = gravity_torques(&model, &q).unwrap();
        let zero = DVector::zeros(7);
        let (tau, clamped) = output_torque(&model, &terms, &zero, &zero, true);
        assert!((tau - &g).amax() < 1e-12 && !clamped);
        let (tau, _) = output_torque(&model, &terms, &zero, &g, true);
        assert!(tau.amax() < 1e-12);
        let big = DVector::from_element(7, 1e4);
        let (tau, clamped) = output_torque(&model, &terms, &big, &zero, true);
        assert!(clamped);
        assert!(tau.iter().zip(model.torque_limits()).all(|(t, l)| t.abs() <= l));
    }

    #[test]
    fn collision_rows_empty_when_far() {
        let model = default_gen3_model();
        let terms = RobotTerms::compute(&model, &home(), &DVector::zeros(7)).unwrap();
        let pairs = model.collision_pair_indices();
        let rows = collision_constraints(&model, &terms, &pairs, &ControllerConfig::default().collision).unwrap();
        assert!(rows.margins.iter().all(|m| m.distance > 0.05), "{:?}", rows.margins);
        assert_eq!(rows.a.nrows(), 0);
    }

    #[test]
    fn collision_row_bounds_separation_acceleration() {
        let model = default_gen3_model();
        let cfg = ControllerConfig { enable_joint_limits: false, enable_torque_limits: false, ..ControllerConfig::default() };
        let pairs = model.collision_pair_indices();
        // fold the elbow until a pair enters the influence zone
        let mut hit = None;
        for k in 0..400 {
            let q = DVector::from_vec(vec![0.0, 0.4, 0.0, 1.6 + 0.0025 * k as f64, 0.0, 2.0, 0.0]);
            let terms = RobotTerms::compute(&model, &q, &DVector::zeros(7)).unwrap();
            let rows = collision_constraints(&model, &terms, &pairs, &cfg.collision).unwrap();
            if rows.a.nrows() > 0 {
                hit = Some((q, terms, rows));
                break;
            }
        }
        let (q, terms, rows) = hit.expect("no pair reached the influence distance");
        // posture target folds further, straight into the obstacle
        let mut target = q.clone();
        target[3] += 1.0;
        target[5] += 1.0;
        let tasks = TaskSet { tasks: vec![], posture: Task::posture(target, &cfg.posture) };
        let qp = build_compliant_qp(&model, &terms, &tasks, &DVector::zeros(7), &cfg).unwrap();
        let x = solve(&qp.problem);
        let active = rows.margins.iter().filter(|m| m.distance <= cfg.collision.d_i);
        for (i, m) in active.enumerate() {
            let grad = -rows.a.row(i).transpose();
            // at rest: drift = 0 and ë_p = −λ²/4M²·(e − d_s)
            let lambda = cfg.collision.lambda();
            let e_p = -lambda * lambda / 4.0 * (m.distance - cfg.collision.d_s);
            assert!(grad.dot(&x) >= e_p - 1e-9, "{}: {} < {e_p}", m.name, grad.dot(&x));
        }
        let free = solve(&QpProblem::new(qp.problem.h.clone(), qp.problem.g.clone()));
        assert!((free - &x).norm() > 1e-6, "constraint should be binding");
    }

    #[test]
    fn config_round_trip() {
        let cfg = ControllerConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(ControllerConfig::from_toml_str(&text).unwrap(), cfg);
        assert!(ControllerConfig::from_toml_str("[joint_limits]\nxi = 1.0\nd_s = 0.3\nd_i = 0.1\nmargin = 1.0\n").is_err());
        assert!(ControllerConfig::from_toml_str("bogus = 1").is_err());
        let partial = ControllerConfig::from_toml_str("[ee]\nkp = 10.0\nkd = 2.0\nweight = 5.0\n").unwrap();
        assert_eq!(partial.ee.kp, 10.0);
        assert_eq!(partial.posture, cfg.posture);
    }

    #[test]
    fn controller_holds_pose_at_rest() {
        let model = default_gen3_model();
        let q = home();
        let cfg = ControllerConfig::default();
        let tasks = tasks_at(&model, &q, &cfg);
        let terms = RobotTerms::compute(&model, &q, &DVector::zeros(7)).unwrap();
        let mut ctl = Controller::new(cfg);
        let out = ctl.compute(&model, &terms, &tasks, &DVector::zeros(7)).unwrap();
        assert_eq!(out.status, ControlStatus::Optimal);
        assert!(out.ddq_desired.amax() < 1e-9);
        let g = gravity_torques(&model, &q).unwrap();
        assert!((out.tau_desired - g).amax() < 1e-8);
    }

    #[test]
    fn transfer_starts_at_previous_command_and_fades_out() {
        let model = default_gen3_model();
        let cfg = ControllerConfig { transfer_time: 0.01, ..ControllerConfig::unconstrained() };
        let q = home();
        let dq = DVector::from_element(7, 0.1);
        let terms = RobotTerms::compute(&model, &q, &dq).unwrap();
        let tasks = tasks_at(&model, &(&q + DVector::from_element(7, 0.05)), &cfg);
        let zero = DVector::zeros(7);
        let mut ctl = Controller::new(cfg);
        let target = ctl.compute(&model, &terms, &tasks, &zero).unwrap().ddq_desired;
        let previous = DVector::from_element(7, 1.0);
        ctl.begin_transfer(previous.clone(), 0.001);
        let first = ctl.compute(&model, &terms, &tasks, &zero).unwrap().ddq_desired;
        assert!((&first - &previous).amax() < 1e-9);
        let mut last = first;
        for _ in 0..10 {
            let x = ctl.compute(&model, &terms, &tasks, &zero).unwrap().ddq_desired;
            // moves monotonically towards the new optimum
            assert!((&x - &target).norm() <= (&last - &target).norm() + 1e-12);
            last = x;
        }
        assert!(!ctl.in_transfer());
        assert!((last - target).amax() < 1e-9);
    }

    fn random_state(seed: u64) -> (DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let q = home() + DVector::from_fn(7, |_, _| rng.random_range(-0.4..0.4));
        let dq = DVector::from_fn(7, |_, _| rng.random_range(-0.5..0.5));
        let qref = &q + DVector::from_fn(7, |_, _| rng.random_range(-0.2..0.2));
        let lim = default_gen3_model().torque_limits();
        let tau = DVector::from_fn(7, |i, _| rng.random_range(-0.2..0.2) * lim[i]);
        (q, dq, qref, tau)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn posture_pass_through(seed in any::<u64>()) {
            let model = default_gen3_model();
            let cfg = ControllerConfig::unconstrained();
            let (q, dq, qref, tau) = random_state(seed);
            let terms = RobotTerms::compute(&model, &q, &dq).unwrap();
            let tasks = TaskSet { tasks: vec![], posture: Task::posture(qref, &cfg.posture) };
            let x = solve(&build_compliant_qp(&model, &terms, &tasks, &tau, &cfg).unwrap().problem);
            let star = task_reference_acceleration(&tasks.posture, TaskFeedback::Posture { q: &q, dq: &dq });
            prop_assert!((x - star - terms.solve_full(&tau)).norm() < 1e-9);
        }

        #[test]
        fn stiff_task_rejects_disturbance(seed in any::<u64>()) {
            let model = default_gen3_model();
            let mut cfg = ControllerConfig::unconstrained();
            cfg.ee.weight = 1e10;
            let (q, dq, qref, tau) = random_state(seed);
            let terms = RobotTerms::compute(&model, &q, &dq).unwrap();
            let mut tasks = tasks_at(&model, &qref, &cfg);
            tasks.tasks[0].gamma = 0.0;
            let residual = |x: &DVector<f64>| {
                let link = model.ee_index();
                let jac = terms.kin.jacobian(link, &model.ee_offset);
                let pose = terms.point_pose(link, &model.ee_offset);
                let tw = &jac * &dq;
                let twist = Vector6::from_column_slice(tw.as_slice());
                let star = task_reference_acceleration(&tasks.tasks[0], TaskFeedback::Ee { pose: &pose, twist: &twist });
                let bias = bias_acceleration(&model, &q, &dq, link, &model.ee_offset).unwrap().to_vector6();
                &jac * x + DVector::from_column_slice(bias.as_slice()) - star
            };
            let x0 = solve(&build_compliant_qp(&model, &terms, &tasks, &DVector::zeros(7), &cfg).unwrap().problem);
            let x1 = solve(&build_compliant_qp(&model, &terms, &tasks, &tau, &cfg).unwrap().problem);
            prop_assert!((residual(&x1) - residual(&x0)).norm() < 1e-6);
        }

        #[test]
        fn null_space_torque_moves_posture_only(seed in any::<u64>()) {
            let model = default_gen3_model();
            let mut cfg = ControllerConfig::unconstrained();
            cfg.ee.weight = 1e10;
            let (q, dq, qref, tau) = random_state(seed);
            let terms = RobotTerms::compute(&model, &q, &dq).unwrap();
            let mut tasks = tasks_at(&model, &qref, &cfg);
            tasks.tasks[0].gamma = 0.0;
            tasks.posture.gamma = 1.0;
            // project so that M⁻¹τ̂ᵉ lies in the null space of J
            let jac = terms.kin.jacobian(model.ee_index(), &model.ee_offset);
            let eig = (jac.transpose() * &jac).symmetric_eigen();
            let null = eig.eigenvectors.column(eig.eigenvalues.imin()).into_owned();
            let tau_null = &terms.m_full * null * tau.norm();
            let x = solve(&build_compliant_qp(&model, &terms, &tasks, &tau_null, &cfg).unwrap().problem);
            let tw = &jac * &dq;
            let twist = Vector6::from_column_slice(tw.as_slice());
            let pose = terms.point_pose(model.ee_index(), &model.ee_offset);
            let star = task_reference_acceleration(&tasks.tasks[0], TaskFeedback::Ee { pose: &pose, twist: &twist });
            let bias = bias_acceleration(&model, &q, &dq, model.ee_index(), &model.ee_offset).unwrap().to_vector6();
            let res = &jac * &x - (star - DVector::from_column_slice(bias.as_slice()));
            prop_assert!(res.norm() < 1e-6, "{}", res.norm());
            let posture_star = task_reference_acceleration(&tasks.posture, TaskFeedback::Posture { q: &q, dq: &dq });
            prop_assert!((x - posture_star).norm() > 0.0);
        }

        #[test]
        fn weight_scaling_keeps_solution(seed in any::<u64>(), c in 0.01f64..100.0) {
            let model = default_gen3_model();
            let cfg = ControllerConfig::default();
            let (q, dq, qref, tau) = random_state(seed);
            let terms = RobotTerms::compute(&model, &q, &dq).unwrap();
            let mut tasks = tasks_at(&model, &qref, &cfg);
            let x0 = solve(&build_compliant_qp(&model, &terms, &tasks, &tau, &cfg).unwrap().problem);
            tasks.scale_weights(c);
            let x1 = solve(&build_compliant_qp(&model, &terms, &tasks, &tau, &cfg).unwrap().problem);
            prop_assert!((x1 - x0).amax() < 1e-9);
        }

        #[test]
        fn damper_never_overshoots(margin in 1.0f64..3.0, e0 in 0.05f64..0.2) {
            prop_assert!(damper_min_distance(margin, e0, 0.0) >= -1e-6);
        }
    }
}
