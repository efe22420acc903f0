//! Rigid-body kinematics and dynamics of a serial arm.
//!
//! Everything is expressed in the world frame. Spatial quantities are ordered
//! `(angular, linear)`; Jacobian rows follow the same order.
//!
//! Joint-side rotor inertias enter [`mass_matrix`] and [`inverse_dynamics`] as a
//! diagonal reflected term. The `link_*` variants leave them out and describe
//! only what the joint torque sensor (after the gearbox) sees.

use nalgebra::{DMatrix, DVector, Isometry3, Matrix3, Matrix6, UnitQuaternion, Vector3, Vector6};
use thiserror::Error;

use crate::model::{Capsule, RobotModel};

pub type Pose = Isometry3<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("unknown link `{0}`")]
    UnknownLink(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SpatialVector {
    pub angular: Vector3<f64>,
    pub linear: Vector3<f64>,
}

impl SpatialVector {
    pub fn new(angular: Vector3<f64>, linear: Vector3<f64>) -> Self {
        Self { angular, linear }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_vector6(v: &Vector6<f64>) -> Self {
        Self::new(v.fixed_rows::<3>(0).into(), v.fixed_rows::<3>(3).into())
    }

    pub fn to_vector6(&self) -> Vector6<f64> {
        Vector6::new(self.angular.x, self.angular.y, self.angular.z, self.linear.x, self.linear.y, self.linear.z)
    }

    /// Euclidean norm over all six components (mixed units).
    pub fn norm(&self) -> f64 {
        (self.angular.norm_squared() + self.linear.norm_squared()).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.angular.iter().chain(self.linear.iter()).all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointState {
    pub q: DVector<f64>,
    pub dq: DVector<f64>,
    pub ddq: DVector<f64>,
}

impl JointState {
    pub fn at_rest(q: DVector<f64>) -> Self {
        let n = q.len();
        Self { q, dq: DVector::zeros(n), ddq: DVector::zeros(n) }
    }
}

/// Wrench applied by the environment on `link` at `point` (link frame).
/// `wrench.angular` is a pure moment and `wrench.linear` the force, both world frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExternalWrench {
    pub link: usize,
    pub point: Vector3<f64>,
    pub wrench: SpatialVector,
}

fn check_dim(model: &RobotModel, v: &DVector<f64>) -> Result<(), DynamicsError> {
    if v.len() != model.dof() {
        return Err(DynamicsError::DimensionMismatch { expected: model.dof(), got: v.len() });
    }
    Ok(())
}

/// Link poses and joint axes for one configuration.
#[derive(Debug, Clone)]
pub struct Kinematics {
    /// One pose per link, base first.
    pub poses: Vec<Pose>,
    /// World-frame joint axes.
    pub axes: Vec<Vector3<f64>>,
}

impl Kinematics {
    pub fn new(model: &RobotModel, q: &DVector<f64>) -> Result<Self, DynamicsError> {
        check_dim(model, q)?;
        let n = model.dof();
        let mut poses = Vec::with_capacity(n + 1);
        let mut axes = Vec::with_capacity(n);
        poses.push(Pose::identity());
        for (i, joint) in model.joints.iter().enumerate() {
            let joint_frame = poses[i] * joint.origin();
            let rot = UnitQuaternion::from_scaled_axis(joint.axis * q[i]);
            axes.push(joint_frame.rotation * joint.axis);
            poses.push(joint_frame * Pose::from_parts(nalgebra::Translation3::identity(), rot));
        }
        Ok(Self { poses, axes })
    }

    /// World position of the origin of joint `j` (the frame of link `j + 1`).
    pub fn joint_origin(&self, j: usize) -> Vector3<f64> {
        self.poses[j + 1].translation.vector
    }

    /// World position of a point given in the frame of `link`.
    pub fn point(&self, link: usize, point: &Vector3<f64>) -> Vector3<f64> {
        self.poses[link].transform_point(&(*point).into()).coords
    }

    /// Geometric Jacobian (6×n) of a point rigidly attached to `link`.
    pub fn jacobian(&self, link: usize, point: &Vector3<f64>) -> DMatrix<f64> {
        let n = self.axes.len();
        let p = self.point(link, point);
        let mut jac = DMatrix::zeros(6, n);
        for j in 0..link.min(n) {
            let z = self.axes[j];
            let v = z.cross(&(p - self.joint_origin(j)));
            jac.fixed_view_mut::<3, 1>(0, j).copy_from(&z);
            jac.fixed_view_mut::<3, 1>(3, j).copy_from(&v);
        }
        jac
    }

    /// Linear rows only (3×n) of the Jacobian at a world point carried by `link`.
    pub fn linear_jacobian_world(&self, link: usize, world_point: &Vector3<f64>) -> DMatrix<f64> {
        let n = self.axes.len();
        let mut jac = DMatrix::zeros(3, n);
        for j in 0..link.min(n) {
            let v = self.axes[j].cross(&(world_point - self.joint_origin(j)));
            jac.fixed_view_mut::<3, 1>(0, j).copy_from(&v);
        }
        jac
    }
}

pub fn forward_kinematics(model: &RobotModel, q: &DVector<f64>) -> Result<Vec<Pose>, DynamicsError> {
    Ok(Kinematics::new(model, q)?.poses)
}

/// Pose of the tool point (`ee_offset` on the ee link).
pub fn ee_pose(model: &RobotModel, q: &DVector<f64>) -> Result<Pose, DynamicsError> {
    let kin = Kinematics::new(model, q)?;
    Ok(ee_pose_from(model, &kin))
}

pub fn ee_pose_from(model: &RobotModel, kin: &Kinematics) -> Pose {
    let link = kin.poses[model.ee_index()];
    Pose::from_parts(kin.point(model.ee_index(), &model.ee_offset).into(), link.rotation)
}

pub fn jacobian(model: &RobotModel, q: &DVector<f64>, link: usize, point: &Vector3<f64>) -> Result<DMatrix<f64>, DynamicsError> {
    if link >= model.links.len() {
        return Err(DynamicsError::UnknownLink(format!("#{link}")));
    }
    Ok(Kinematics::new(model, q)?.jacobian(link, point))
}

pub fn jacobian_by_name(model: &RobotModel, q: &DVector<f64>, link: &str, point: &Vector3<f64>) -> Result<DMatrix<f64>, DynamicsError> {
    let idx = model.link_index(link).ok_or_else(|| DynamicsError::UnknownLink(link.to_string()))?;
    jacobian(model, q, idx, point)
}

/// Per-link velocities and accelerations from the outward recursion.
struct Motion {
    kin: Kinematics,
    omega: Vec<Vector3<f64>>,
    alpha: Vec<Vector3<f64>>,
    /// Linear acceleration of each link-frame origin.
    acc: Vec<Vector3<f64>>,
}

fn forward_motion(
    model: &RobotModel,
    q: &DVector<f64>,
    dq: &DVector<f64>,
    ddq: &DVector<f64>,
    base_acc: Vector3<f64>,
) -> Result<Motion, DynamicsError> {
    check_dim(model, dq)?;
    check_dim(model, ddq)?;
    let kin = Kinematics::new(model, q)?;
    let n = model.dof();
    let mut omega = vec![Vector3::zeros(); n + 1];
    let mut alpha = vec![Vector3::zeros(); n + 1];
    let mut acc = vec![Vector3::zeros(); n + 1];
    acc[0] = base_acc;
    for j in 0..n {
        let z = kin.axes[j];
        let r = kin.poses[j + 1].translation.vector - kin.poses[j].translation.vector;
        omega[j + 1] = omega[j] + z * dq[j];
        alpha[j + 1] = alpha[j] + z * ddq[j] + omega[j].cross(&(z * dq[j]));
        acc[j + 1] = acc[j] + alpha[j].cross(&r) + omega[j].cross(&omega[j].cross(&r));
    }
    Ok(Motion { kin, omega, alpha, acc })
}

/// `J̇(q, dq)·dq` for a point on `link`: the spatial acceleration of that point
/// when `ddq = 0` and gravity is ignored.
pub fn bias_acceleration(
    model: &RobotModel,
    q: &DVector<f64>,
    dq: &DVector<f64>,
    link: usize,
    point: &Vector3<f64>,
) -> Result<SpatialVector, DynamicsError> {
    let zero = DVector::zeros(model.dof());
    let m = forward_motion(model, q, dq, &zero, Vector3::zeros())?;
    let r = m.kin.poses[link].rotation * point;
    Ok(SpatialVector::new(m.alpha[link], m.acc[link] + m.alpha[link].cross(&r) + m.omega[link].cross(&m.omega[link].cross(&r))))
}

/// Same as [`bias_acceleration`] for a world point carried by `link`.
pub fn bias_acceleration_world(
    model: &RobotModel,
    q: &DVector<f64>,
    dq: &DVector<f64>,
    link: usize,
    world_point: &Vector3<f64>,
) -> Result<SpatialVector, DynamicsError> {
    let kin = Kinematics::new(model, q)?;
    let local = kin.poses[link].inverse_transform_point(&(*world_point).into()).coords;
    bias_acceleration(model, q, dq, link, &local)
}

fn rnea(
    model: &RobotModel,
    q: &DVector<f64>,
    dq: &DVector<f64>,
    ddq: &DVector<f64>,
    external: &[ExternalWrench],
    with_rotor: bool,
) -> Result<DVector<f64>, DynamicsError> {
    let n = model.dof();
    let m = forward_motion(model, q, dq, ddq, -model.gravity)?;
    let mut force = vec![Vector3::zeros(); n + 2];
    let mut moment = vec![Vector3::zeros(); n + 2];
    for k in 1..=n {
        let link = &model.links[k];
        let rot = m.kin.poses[k].rotation.to_rotation_matrix();
        let rc = rot * link.com;
        let acc_c = m.acc[k] + m.alpha[k].cross(&rc) + m.omega[k].cross(&m.omega[k].cross(&rc));
        let inertia = rot.matrix() * link.inertia * rot.matrix().transpose();
        let f = acc_c * link.mass;
        force[k] = f;
        moment[k] = inertia * m.alpha[k] + m.omega[k].cross(&(inertia * m.omega[k])) + rc.cross(&f);
    }
    for w in external {
        let k = w.link;
        if k == 0 || k > n {
            continue;
        }
        let r = m.kin.poses[k].rotation * w.point;
        force[k] -= w.wrench.linear;
        moment[k] -= w.wrench.angular + r.cross(&w.wrench.linear);
    }
    let mut tau = DVector::zeros(n);
    for k in (1..=n).rev() {
        if k < n {
            let r = m.kin.poses[k + 1].translation.vector - m.kin.poses[k].translation.vector;
            let (f_child, n_child) = (force[k + 1], moment[k + 1]);
            force[k] += f_child;
            moment[k] += n_child + r.cross(&f_child);
        }
        tau[k - 1] = m.kin.axes[k - 1].dot(&moment[k]);
    }
    if with_rotor {
        for (j, joint) in model.joints.iter().enumerate() {
            tau[j] += joint.rotor_inertia * ddq[j];
        }
    }
    Ok(tau)
}

/// Recursive Newton–Euler: `M(q)·ddq + C(q,dq)·dq + g(q) − Jᵀ·f_ext`,
/// rotor inertias included.
pub fn inverse_dynamics(
    model: &RobotModel,
    q: &DVector<f64>,
    dq: &DVector<f64>,
    ddq: &DVector<f64>,
    external: &[ExternalWrench],
) -> Result<DVector<f64>, DynamicsError> {
    rnea(model, q, dq, ddq, external, true)
}

/// Inverse dynamics of the links alone (no rotor term).
pub fn link_inverse_dynamics(
    model: &RobotModel,
    q: &DVector<f64>,
    dq: &DVector<f64>,
    ddq: &DVector<f64>,
    external: &[ExternalWrench],
) -> Result<DVector<f64>, DynamicsError> {
    rnea(model, q, dq, ddq, external, false)
}

/// Coriolis, centrifugal and gravity torques.
pub fn nonlinear_terms(model: &RobotModel, q: &DVector<f64>, dq: &DVector<f64>) -> Result<DVector<f64>, DynamicsError> {
    rnea(model, q, dq, &DVector::zeros(model.dof()), &[], false)
}

pub fn gravity_torques(model: &RobotModel, q: &DVector<f64>) -> Result<DVector<f64>, DynamicsError> {
    let z = DVector::zeros(model.dof());
    rnea(model, q, &z, &z, &[], false)
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Composite-rigid-body mass matrix of the links only.
pub fn link_mass_matrix(model: &RobotModel, q: &DVector<f64>) -> Result<DMatrix<f64>, DynamicsError> {
    let kin = Kinematics::new(model, q)?;
    Ok(link_mass_matrix_from(model, &kin))
}

pub fn link_mass_matrix_from(model: &RobotModel, kin: &Kinematics) -> DMatrix<f64> {
    let n = model.dof();
    // spatial inertias about the world origin, accumulated tip to base
    let mut composite = vec![Matrix6::<f64>::zeros(); n + 2];
    for k in (1..=n).rev() {
        let link = &model.links[k];
        let rot = kin.poses[k].rotation.to_rotation_matrix();
        let c = kin.poses[k].translation.vector + rot * link.com;
        let cx = skew(&c);
        let ibar = rot.matrix() * link.inertia * rot.matrix().transpose();
        let mut spatial = Matrix6::zeros();
        spatial.fixed_view_mut::<3, 3>(0, 0).copy_from(&(ibar + cx * cx.transpose() * link.mass));
        spatial.fixed_view_mut::<3, 3>(0, 3).copy_from(&(cx * link.mass));
        spatial.fixed_view_mut::<3, 3>(3, 0).copy_from(&(cx.transpose() * link.mass));
        spatial.fixed_view_mut::<3, 3>(3, 3).copy_from(&(Matrix3::identity() * link.mass));
        composite[k] = spatial + composite[k + 1];
    }
    let motion: Vec<Vector6<f64>> = (0..n)
        .map(|j| {
            let z = kin.axes[j];
            let lin = kin.joint_origin(j).cross(&z);
            Vector6::new(z.x, z.y, z.z, lin.x, lin.y, lin.z)
        })
        .collect();
    let mut mass = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            // joint j moves link j + 1 and everything outboard of it
            let v = (motion[i].transpose() * composite[j + 1] * motion[j])[(0, 0)];
            mass[(i, j)] = v;
            mass[(j, i)] = v;
        }
    }
    mass
}

/// Joint-space inertia including reflected rotor inertias on the diagonal.
pub fn mass_matrix(model: &RobotModel, q: &DVector<f64>) -> Result<DMatrix<f64>, DynamicsError> {
    let mut m = link_mass_matrix(model, q)?;
    for (j, joint) in model.joints.iter().enumerate() {
        m[(j, j)] += joint.rotor_inertia;
    }
    Ok(m)
}

/// `½·dqᵀ·M(q)·dq`, rotors included.
pub fn kinetic_energy(model: &RobotModel, q: &DVector<f64>, dq: &DVector<f64>) -> Result<f64, DynamicsError> {
    check_dim(model, dq)?;
    let m = mass_matrix(model, q)?;
    Ok(0.5 * dq.dot(&(m * dq)))
}

/// Gravitational potential energy of the links.
pub fn potential_energy(model: &RobotModel, q: &DVector<f64>) -> Result<f64, DynamicsError> {
    let kin = Kinematics::new(model, q)?;
    Ok((1..model.links.len())
        .map(|k| {
            let link = &model.links[k];
            -link.mass * model.gravity.dot(&kin.point(k, &link.com))
        })
        .sum())
}

/// Rotation-vector error `log(R_ref · R_curᵀ)`.
pub fn rotation_error(reference: &UnitQuaternion<f64>, current: &UnitQuaternion<f64>) -> Vector3<f64> {
    (reference * current.inverse()).scaled_axis()
}

/// World-frame capsule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldCapsule {
    pub a: Vector3<f64>,
    pub b: Vector3<f64>,
    pub radius: f64,
}

impl WorldCapsule {
    pub fn from_link(capsule: &Capsule, pose: &Pose) -> Self {
        Self {
            a: pose.transform_point(&capsule.a.into()).coords,
            b: pose.transform_point(&capsule.b.into()).coords,
            radius: capsule.radius,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CapsuleDistance {
    /// Surface distance; negative when penetrating.
    pub distance: f64,
    /// Closest point on the axis segment of `a`.
    pub point_a: Vector3<f64>,
    pub point_b: Vector3<f64>,
    /// Unit vector from `point_b` towards `point_a`.
    pub normal: Vector3<f64>,
}

/// Closest points between two segments, returned as segment parameters `(s, t)`.
fn segment_closest_params(p1: &Vector3<f64>, q1: &Vector3<f64>, p2: &Vector3<f64>, q2: &Vector3<f64>) -> (f64, f64) {
    let d1 = q1 - p1;
    let d2 = q2 - p2;
    let r = p1 - p2;
    let a = d1.dot(&d1);
    let e = d2.dot(&d2);
    let f = d2.dot(&r);
    let eps = 1e-15;
    if a <= eps && e <= eps {
        return (0.0, 0.0);
    }
    if a <= eps {
        return (0.0, (f / e).clamp(0.0, 1.0));
    }
    let c = d1.dot(&r);
    if e <= eps {
        return ((-c / a).clamp(0.0, 1.0), 0.0);
    }
    let b = d1.dot(&d2);
    let denom = a * e - b * b;
    let mut s = if denom > eps * a * e { ((b * f - c * e) / denom).clamp(0.0, 1.0) } else { 0.0 };
    let mut t = (b * s + f) / e;
    if t < 0.0 {
        t = 0.0;
        s = (-c / a).clamp(0.0, 1.0);
    } else if t > 1.0 {
        t = 1.0;
        s = ((b - c) / a).clamp(0.0, 1.0);
    }
    (s, t)
}

pub fn capsule_distance(a: &WorldCapsule, b: &WorldCapsule) -> CapsuleDistance {
    let (s, t) = segment_closest_params(&a.a, &a.b, &b.a, &b.b);
    let point_a = a.a + (a.b - a.a) * s;
    let point_b = b.a + (b.b - b.a) * t;
    let delta = point_a - point_b;
    let axis_distance = delta.norm();
    let normal = if axis_distance > 1e-12 {
        delta / axis_distance
    } else {
        // intersecting axes: separate along the common perpendicular
        let c = (a.b - a.a).cross(&(b.b - b.a));
        if c.norm() > 1e-12 {
            c.normalize()
        } else {
            let d = a.b - a.a;
            let helper = if d.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
            let p = d.cross(&helper);
            if p.norm() > 1e-12 { p.normalize() } else { Vector3::z() }
        }
    };
    CapsuleDistance { distance: axis_distance - a.radius - b.radius, point_a, point_b, normal }
}

/// Distance between capsules on two links plus its gradient with respect to `q`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairDistance {
    pub link_a: usize,
    pub link_b: usize,
    pub geometry: CapsuleDistance,
    /// `∂distance/∂q = n̂ᵀ (J_a − J_b)` (linear Jacobians at the closest points).
    pub gradient: DVector<f64>,
}

/// Minimum distance between any capsule of `link_a` and any capsule of `link_b`.
pub fn pair_distance(model: &RobotModel, kin: &Kinematics, link_a: usize, link_b: usize) -> Option<PairDistance> {
    let mut best: Option<CapsuleDistance> = None;
    for ca in &model.links[link_a].collision_capsules {
        let wa = WorldCapsule::from_link(ca, &kin.poses[link_a]);
        for cb in &model.links[link_b].collision_capsules {
            let wb = WorldCapsule::from_link(cb, &kin.poses[link_b]);
            let d = capsule_distance(&wa, &wb);
            if best.is_none_or(|b| d.distance < b.distance) {
                best = Some(d);
            }
        }
    }
    let geometry = best?;
    let ja = kin.linear_jacobian_world(link_a, &geometry.point_a);
    let jb = kin.linear_jacobian_world(link_b, &geometry.point_b);
    let gradient = (ja - jb).transpose() * geometry.normal;
    Some(PairDistance { link_a, link_b, geometry, gradient })
}
