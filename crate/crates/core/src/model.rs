//! Serial-arm robot description.
//!
//! A [`RobotModel`] is a chain `links[0] -joint[0]- links[1] -joint[1]- ... links[n]`.
//! Link 0 is the fixed base. Joint `i` is located at `joints[i].origin` expressed
//! in the frame of `links[i]`, and the frame of `links[i + 1]` coincides with the
//! joint frame rotated by `q[i]` about `joints[i].axis`.
//!
//! Models are read from a small URDF subset, see [`parse_model`] and
//! `docs/urdf-subset.md`.

use std::collections::{HashMap, HashSet};

use nalgebra::{Isometry3, Matrix3, Translation3, UnitQuaternion, Vector3};
use thiserror::Error;

/// XML namespace of the actuator / capsule / settings extension elements.
pub const PHRI_NS: &str = "urn:phri:urdf-ext:1";

const DEFAULT_MODEL: &str = include_str!("../data/gen3.urdf");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("malformed model XML: {0}")]
    MalformedXml(String),
    #[error("kinematic tree is not a single serial chain: {0}")]
    BranchingChain(String),
    #[error("link `{0}` has no <inertial> element")]
    MissingInertial(String),
    #[error("joint `{0}` has a degenerate axis")]
    NonUnitAxis(String),
    #[error("unsupported joint type `{kind}` on joint `{joint}`")]
    UnsupportedJoint { joint: String, kind: String },
    #[error("invalid model: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum JointType {
    Revolute,
    Continuous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ActuatorClass {
    Large,
    Small,
}

impl ActuatorClass {
    pub fn as_str(self) -> &'static str {
        match self {
            ActuatorClass::Large => "large",
            ActuatorClass::Small => "small",
        }
    }
}

/// Line-swept sphere attached to a link; endpoints in the link frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Capsule {
    pub a: Vector3<f64>,
    pub b: Vector3<f64>,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointSpec {
    pub name: String,
    pub kind: JointType,
    /// Unit rotation axis in the joint frame.
    pub axis: Vector3<f64>,
    pub origin_translation: Vector3<f64>,
    pub origin_rotation: UnitQuaternion<f64>,
    /// `[min, max]` in rad; `None` for continuous joints.
    pub position_limits: Option<[f64; 2]>,
    pub velocity_limit: f64,
    pub torque_limit: f64,
    /// Rotor inertia reflected to the joint side (kg·m²).
    pub rotor_inertia: f64,
    pub actuator_class: ActuatorClass,
    /// Motor torque constant K_T (N·m/A).
    pub torque_constant: f64,
    /// Gear ratio G_r.
    pub gear_ratio: f64,
}

impl JointSpec {
    pub fn origin(&self) -> Isometry3<f64> {
        Isometry3::from_parts(Translation3::from(self.origin_translation), self.origin_rotation)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkSpec {
    pub name: String,
    pub mass: f64,
    /// Center of mass in the link frame.
    pub com: Vector3<f64>,
    /// Rotational inertia about the center of mass, link-frame axes.
    pub inertia: Matrix3<f64>,
    pub collision_capsules: Vec<Capsule>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobotModel {
    pub name: String,
    pub joints: Vec<JointSpec>,
    pub links: Vec<LinkSpec>,
    pub gravity: Vector3<f64>,
    /// Link-name pairs checked for self-collision.
    pub collision_pair_whitelist: Vec<(String, String)>,
    pub ee_link: String,
    /// Tool point in the end-effector link frame. Also the F/T sensor origin.
    pub ee_offset: Vector3<f64>,
}

impl RobotModel {
    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    pub fn link_index(&self, name: &str) -> Option<usize> {
        self.links.iter().position(|l| l.name == name)
    }

    /// Index of the end-effector link.
    pub fn ee_index(&self) -> usize {
        self.link_index(&self.ee_link).unwrap_or(self.links.len() - 1)
    }

    pub fn rotor_inertias(&self) -> Vec<f64> {
        self.joints.iter().map(|j| j.rotor_inertia).collect()
    }

    pub fn torque_limits(&self) -> Vec<f64> {
        self.joints.iter().map(|j| j.torque_limit).collect()
    }

    pub fn velocity_limits(&self) -> Vec<f64> {
        self.joints.iter().map(|j| j.velocity_limit).collect()
    }

    /// Whitelisted collision pairs resolved to link indices.
    pub fn collision_pair_indices(&self) -> Vec<(usize, usize)> {
        self.collision_pair_whitelist
            .iter()
            .filter_map(|(a, b)| Some((self.link_index(a)?, self.link_index(b)?)))
            .collect()
    }

    /// All link pairs separated by at least two joints where both links carry capsules.
    pub fn default_collision_pairs(&self) -> Vec<(String, String)> {
        let mut pairs = Vec::new();
        for i in 0..self.links.len() {
            for k in (i + 2)..self.links.len() {
                if !self.links[i].collision_capsules.is_empty()
                    && !self.links[k].collision_capsules.is_empty()
                {
                    pairs.push((self.links[i].name.clone(), self.links[k].name.clone()));
                }
            }
        }
        pairs
    }

    /// Checks every structural and physical invariant of the description.
    pub fn validate(&self) -> Result<(), ModelError> {
        let n = self.joints.len();
        if n == 0 {
            return Err(ModelError::Invalid("model has no joints".into()));
        }
        if self.links.len() != n + 1 {
            return Err(ModelError::Invalid(format!(
                "{} joints require {} links, found {}",
                n,
                n + 1,
                self.links.len()
            )));
        }
        let mut names = HashSet::new();
        for name in self.links.iter().map(|l| &l.name).chain(self.joints.iter().map(|j| &j.name)) {
            if !names.insert(name.as_str()) {
                return Err(ModelError::Invalid(format!("duplicate name `{name}`")));
            }
        }
        for j in &self.joints {
            if (j.axis.norm() - 1.0).abs() > 1e-9 {
                return Err(ModelError::NonUnitAxis(j.name.clone()));
            }
            let bad = |what: &str| Err(ModelError::Invalid(format!("joint `{}`: {what}", j.name)));
            if !(j.velocity_limit > 0.0) {
                return bad("velocity_limit must be > 0");
            }
            if !(j.torque_limit > 0.0) {
                return bad("torque_limit must be > 0");
            }
            if !(j.rotor_inertia >= 0.0) {
                return bad("rotor_inertia must be >= 0");
            }
            if !(j.gear_ratio >= 1.0) {
                return bad("gear_ratio must be >= 1");
            }
            if !(j.torque_constant > 0.0) {
                return bad("torque_constant must be > 0");
            }
            match (j.kind, j.position_limits) {
                (JointType::Continuous, Some(_)) => return bad("continuous joint with position limits"),
                (JointType::Revolute, None) => return bad("revolute joint without position limits"),
                (JointType::Revolute, Some([lo, hi])) if !(lo < hi) => return bad("lower limit >= upper limit"),
                _ => {}
            }
        }
        for l in &self.links {
            if !(l.mass >= 0.0) {
                return Err(ModelError::Invalid(format!("link `{}`: negative mass", l.name)));
            }
            if (l.inertia - l.inertia.transpose()).abs().max() > 1e-12 {
                return Err(ModelError::Invalid(format!("link `{}`: inertia not symmetric", l.name)));
            }
            let eig = l.inertia.symmetric_eigenvalues();
            if eig.iter().any(|&e| e < -1e-12) {
                return Err(ModelError::Invalid(format!("link `{}`: inertia not PSD", l.name)));
            }
            if l.collision_capsules.iter().any(|c| !(c.radius > 0.0)) {
                return Err(ModelError::Invalid(format!("link `{}`: capsule radius <= 0", l.name)));
            }
        }
        if self.link_index(&self.ee_link).is_none() {
            return Err(ModelError::Invalid(format!("unknown ee link `{}`", self.ee_link)));
        }
        for (a, b) in &self.collision_pair_whitelist {
            let (ia, ib) = match (self.link_index(a), self.link_index(b)) {
                (Some(ia), Some(ib)) => (ia, ib),
                _ => return Err(ModelError::Invalid(format!("collision pair ({a}, {b}) names unknown link"))),
            };
            if ia.abs_diff(ib) < 2 {
                return Err(ModelError::Invalid(format!("collision pair ({a}, {b}) is adjacent")));
            }
        }
        Ok(())
    }
}

/// The bundled 7-DoF Gen3-like arm.
///
/// Inertial parameters, rotor inertias, torque constants and gear ratios are
/// placeholders: the same model drives both controller and plant.
pub fn default_gen3_model() -> RobotModel {
    parse_model(DEFAULT_MODEL).expect("bundled model is valid")
}

/// Source text of the bundled model file.
pub fn default_gen3_urdf() -> &'static str {
    DEFAULT_MODEL
}

pub fn parse_model(source: &str) -> Result<RobotModel, ModelError> {
    parse_model_with_warnings(source).map(|(m, _)| m)
}

/// Parses a URDF-subset document, also returning non-fatal warnings
/// (e.g. normalized axes).
pub fn parse_model_with_warnings(source: &str) -> Result<(RobotModel, Vec<String>), ModelError> {
    let doc = roxmltree::Document::parse(source).map_err(|e| ModelError::MalformedXml(e.to_string()))?;
    let root = doc.root_element();
    if root.tag_name().name() != "robot" || root.tag_name().namespace().is_some() {
        return Err(ModelError::MalformedXml("root element must be <robot>".into()));
    }
    let mut warnings = Vec::new();
    let robot_name = root.attribute("name").unwrap_or("robot").to_string();

    let is_urdf = |n: &roxmltree::Node, tag: &str| n.is_element() && n.tag_name().name() == tag && n.tag_name().namespace().is_none();
    let is_ext = |n: &roxmltree::Node, tag: &str| n.is_element() && n.tag_name().name() == tag && n.tag_name().namespace() == Some(PHRI_NS);

    // links: (spec, has_inertial); the fixed root may omit <inertial>
    let mut raw_links: Vec<(LinkSpec, bool)> = Vec::new();
    for node in root.children().filter(|n| is_urdf(n, "link")) {
        let name = required_attr(&node, "name")?.to_string();
        let collision_capsules = node
            .children()
            .filter(|n| is_ext(n, "capsule"))
            .map(|c| {
                Ok(Capsule {
                    a: parse_vec3(required_attr(&c, "a")?)?,
                    b: parse_vec3(required_attr(&c, "b")?)?,
                    radius: parse_f64(required_attr(&c, "radius")?)?,
                })
            })
            .collect::<Result<Vec<_>, ModelError>>()?;
        let mut spec = LinkSpec { name, mass: 0.0, com: Vector3::zeros(), inertia: Matrix3::zeros(), collision_capsules };
        let Some(inertial) = node.children().find(|n| is_urdf(n, "inertial")) else {
            raw_links.push((spec, false));
            continue;
        };
        let rot;
        (spec.com, rot) = match inertial.children().find(|n| is_urdf(n, "origin")) {
            Some(o) => parse_origin(&o)?,
            None => (Vector3::zeros(), UnitQuaternion::identity()),
        };
        spec.mass = inertial
            .children()
            .find(|n| is_urdf(n, "mass"))
            .ok_or_else(|| ModelError::MissingInertial(spec.name.clone()))
            .and_then(|m| parse_f64(required_attr(&m, "value")?))?;
        if let Some(i) = inertial.children().find(|n| is_urdf(n, "inertia")) {
            let g = |k: &str| i.attribute(k).map(parse_f64).unwrap_or(Ok(0.0));
            let (ixx, ixy, ixz, iyy, iyz, izz) = (g("ixx")?, g("ixy")?, g("ixz")?, g("iyy")?, g("iyz")?, g("izz")?);
            let local = Matrix3::new(ixx, ixy, ixz, ixy, iyy, iyz, ixz, iyz, izz);
            let r = rot.to_rotation_matrix();
            let rotated = r.matrix() * local * r.matrix().transpose();
            spec.inertia = (rotated + rotated.transpose()) * 0.5;
        }
        raw_links.push((spec, true));
    }

    let mut link_by_name: HashMap<String, usize> = HashMap::new();
    for (i, (spec, _)) in raw_links.iter().enumerate() {
        let name = &spec.name;
        if link_by_name.insert(name.clone(), i).is_some() {
            return Err(ModelError::Invalid(format!("duplicate link `{name}`")));
        }
    }

    // joints
    struct RawJoint {
        parent: String,
        child: String,
        spec: JointSpec,
    }
    let mut raw_joints = Vec::new();
    for node in root.children().filter(|n| is_urdf(n, "joint")) {
        let name = required_attr(&node, "name")?.to_string();
        let kind = match required_attr(&node, "type")? {
            "revolute" => JointType::Revolute,
            "continuous" => JointType::Continuous,
            other => return Err(ModelError::UnsupportedJoint { joint: name, kind: other.to_string() }),
        };
        let link_attr = |tag: &str| -> Result<String, ModelError> {
            let n = node
                .children()
                .find(|n| is_urdf(n, tag))
                .ok_or_else(|| ModelError::MalformedXml(format!("joint `{name}` has no <{tag}>")))?;
            Ok(required_attr(&n, "link")?.to_string())
        };
        let parent = link_attr("parent")?;
        let child = link_attr("child")?;
        let (origin_translation, origin_rotation) = match node.children().find(|n| is_urdf(n, "origin")) {
            Some(o) => parse_origin(&o)?,
            None => (Vector3::zeros(), UnitQuaternion::identity()),
        };
        let raw_axis = match node.children().find(|n| is_urdf(n, "axis")) {
            Some(a) => parse_vec3(required_attr(&a, "xyz")?)?,
            None => Vector3::x(),
        };
        let norm = raw_axis.norm();
        if !norm.is_finite() || norm < 1e-6 {
            return Err(ModelError::NonUnitAxis(name));
        }
        if (norm - 1.0).abs() > 1e-9 {
            let msg = format!("joint `{name}`: axis normalized from norm {norm}");
            log::warn!("{msg}");
            warnings.push(msg);
        }
        let axis = raw_axis / norm;
        let limit = node.children().find(|n| is_urdf(n, "limit"));
        let limit_attr = |k: &str| -> Result<Option<f64>, ModelError> {
            limit.and_then(|l| l.attribute(k)).map(parse_f64).transpose()
        };
        let position_limits = match kind {
            JointType::Continuous => None,
            JointType::Revolute => match (limit_attr("lower")?, limit_attr("upper")?) {
                (Some(lo), Some(hi)) => Some([lo, hi]),
                _ => return Err(ModelError::MalformedXml(format!("revolute joint `{name}` needs lower/upper limits"))),
            },
        };
        let velocity_limit = limit_attr("velocity")?
            .ok_or_else(|| ModelError::MalformedXml(format!("joint `{name}` needs a velocity limit")))?;
        let torque_limit = limit_attr("effort")?
            .ok_or_else(|| ModelError::MalformedXml(format!("joint `{name}` needs an effort limit")))?;
        let act = node.children().find(|n| is_ext(n, "actuator"));
        let act_f = |k: &str, default: f64| -> Result<f64, ModelError> {
            act.and_then(|a| a.attribute(k)).map(parse_f64).unwrap_or(Ok(default))
        };
        let actuator_class = match act.and_then(|a| a.attribute("class")) {
            None | Some("large") => ActuatorClass::Large,
            Some("small") => ActuatorClass::Small,
            Some(other) => return Err(ModelError::MalformedXml(format!("unknown actuator class `{other}`"))),
        };
        let spec = JointSpec {
            name,
            kind,
            axis,
            origin_translation,
            origin_rotation,
            position_limits,
            velocity_limit,
            torque_limit,
            rotor_inertia: act_f("rotor_inertia", 0.0)?,
            actuator_class,
            torque_constant: act_f("torque_constant", 1.0)?,
            gear_ratio: act_f("gear_ratio", 1.0)?,
        };
        raw_joints.push(RawJoint { parent, child, spec });
    }
    if raw_joints.is_empty() {
        return Err(ModelError::Invalid("model has no joints".into()));
    }

    // chain ordering
    let mut by_parent: HashMap<&str, Vec<usize>> = HashMap::new();
    let mut children = HashSet::new();
    for (i, j) in raw_joints.iter().enumerate() {
        for l in [&j.parent, &j.child] {
            if !link_by_name.contains_key(l) {
                return Err(ModelError::MalformedXml(format!("joint `{}` references unknown link `{l}`", j.spec.name)));
            }
        }
        by_parent.entry(j.parent.as_str()).or_default().push(i);
        if !children.insert(j.child.as_str()) {
            return Err(ModelError::BranchingChain(format!("link `{}` has two parent joints", j.child)));
        }
    }
    if let Some((p, _)) = by_parent.iter().find(|(_, v)| v.len() > 1) {
        return Err(ModelError::BranchingChain(format!("link `{p}` has more than one child joint")));
    }
    let roots: Vec<&str> = raw_links
        .iter()
        .map(|(l, _)| l.name.as_str())
        .filter(|n| !children.contains(n))
        .collect();
    if roots.len() != 1 {
        return Err(ModelError::BranchingChain(format!("expected one root link, found {}", roots.len())));
    }
    let mut order_links = vec![roots[0].to_string()];
    let mut order_joints = Vec::new();
    let mut current = roots[0];
    while let Some(js) = by_parent.get(current) {
        let j = &raw_joints[js[0]];
        order_joints.push(js[0]);
        order_links.push(j.child.clone());
        current = j.child.as_str();
    }
    if order_links.len() != raw_links.len() {
        return Err(ModelError::BranchingChain("links not connected to the main chain".into()));
    }

    let mut links = Vec::with_capacity(order_links.len());
    for (k, name) in order_links.iter().enumerate() {
        let (spec, has_inertial) = &raw_links[link_by_name[name]];
        if k > 0 && !has_inertial {
            return Err(ModelError::MissingInertial(name.clone()));
        }
        links.push(spec.clone());
    }
    let joints: Vec<JointSpec> = order_joints.iter().map(|&i| raw_joints[i].spec.clone()).collect();

    let settings = root.children().find(|n| is_ext(n, "settings"));
    let gravity = match settings.and_then(|s| s.attribute("gravity")) {
        Some(g) => parse_vec3(g)?,
        None => Vector3::new(0.0, 0.0, -9.81),
    };
    let ee_link = settings
        .and_then(|s| s.attribute("ee_link"))
        .map(str::to_string)
        .unwrap_or_else(|| links.last().unwrap().name.clone());
    let ee_offset = match settings.and_then(|s| s.attribute("ee_offset")) {
        Some(o) => parse_vec3(o)?,
        None => Vector3::zeros(),
    };

    let mut model = RobotModel {
        name: robot_name,
        joints,
        links,
        gravity,
        collision_pair_whitelist: Vec::new(),
        ee_link,
        ee_offset,
    };
    let explicit_pairs: Vec<(String, String)> = root
        .children()
        .filter(|n| is_ext(n, "collision_pair"))
        .map(|n| Ok((required_attr(&n, "a")?.to_string(), required_attr(&n, "b")?.to_string())))
        .collect::<Result<_, ModelError>>()?;
    model.collision_pair_whitelist = if explicit_pairs.is_empty() {
        model.default_collision_pairs()
    } else {
        explicit_pairs
    };
    model.validate()?;
    Ok((model, warnings))
}

/// Writes a model back to the URDF subset accepted by [`parse_model`].
pub fn serialize_model(model: &RobotModel) -> String {
    use std::fmt::Write;
    let v = |x: &Vector3<f64>| format!("{:?} {:?} {:?}", x.x, x.y, x.z);
    let mut out = String::new();
    let _ = writeln!(out, "<?xml version=\"1.0\"?>");
    let _ = writeln!(out, "<robot name=\"{}\" xmlns:phri=\"{PHRI_NS}\">", xml_escape(&model.name));
    let _ = writeln!(
        out,
        "  <phri:settings gravity=\"{}\" ee_link=\"{}\" ee_offset=\"{}\"/>",
        v(&model.gravity),
        xml_escape(&model.ee_link),
        v(&model.ee_offset)
    );
    for (k, link) in model.links.iter().enumerate() {
        let _ = writeln!(out, "  <link name=\"{}\">", xml_escape(&link.name));
        if k > 0 || link.mass != 0.0 || link.inertia != Matrix3::zeros() {
            let i = &link.inertia;
            let _ = writeln!(out, "    <inertial>");
            let _ = writeln!(out, "      <origin xyz=\"{}\" rpy=\"0 0 0\"/>", v(&link.com));
            let _ = writeln!(out, "      <mass value=\"{:?}\"/>", link.mass);
            let _ = writeln!(
                out,
                "      <inertia ixx=\"{:?}\" ixy=\"{:?}\" ixz=\"{:?}\" iyy=\"{:?}\" iyz=\"{:?}\" izz=\"{:?}\"/>",
                i[(0, 0)],
                i[(0, 1)],
                i[(0, 2)],
                i[(1, 1)],
                i[(1, 2)],
                i[(2, 2)]
            );
            let _ = writeln!(out, "    </inertial>");
        }
        for c in &link.collision_capsules {
            let _ = writeln!(out, "    <phri:capsule a=\"{}\" b=\"{}\" radius=\"{:?}\"/>", v(&c.a), v(&c.b), c.radius);
        }
        let _ = writeln!(out, "  </link>");
    }
    for (i, j) in model.joints.iter().enumerate() {
        let kind = match j.kind {
            JointType::Revolute => "revolute",
            JointType::Continuous => "continuous",
        };
        let q = j.origin_rotation.quaternion();
        let _ = writeln!(out, "  <joint name=\"{}\" type=\"{kind}\">", xml_escape(&j.name));
        let _ = writeln!(out, "    <parent link=\"{}\"/>", xml_escape(&model.links[i].name));
        let _ = writeln!(out, "    <child link=\"{}\"/>", xml_escape(&model.links[i + 1].name));
        let _ = writeln!(
            out,
            "    <origin xyz=\"{}\" phri:quat=\"{:?} {:?} {:?} {:?}\"/>",
            v(&j.origin_translation),
            q.w,
            q.i,
            q.j,
            q.k
        );
        let _ = writeln!(out, "    <axis xyz=\"{}\"/>", v(&j.axis));
        match j.position_limits {
            Some([lo, hi]) => {
                let _ = writeln!(
                    out,
                    "    <limit lower=\"{lo:?}\" upper=\"{hi:?}\" effort=\"{:?}\" velocity=\"{:?}\"/>",
                    j.torque_limit, j.velocity_limit
                );
            }
            None => {
                let _ = writeln!(out, "    <limit effort=\"{:?}\" velocity=\"{:?}\"/>", j.torque_limit, j.velocity_limit);
            }
        }
        let _ = writeln!(
            out,
            "    <phri:actuator class=\"{}\" rotor_inertia=\"{:?}\" torque_constant=\"{:?}\" gear_ratio=\"{:?}\"/>",
            j.actuator_class.as_str(),
            j.rotor_inertia,
            j.torque_constant,
            j.gear_ratio
        );
        let _ = writeln!(out, "  </joint>");
    }
    for (a, b) in &model.collision_pair_whitelist {
        let _ = writeln!(out, "  <phri:collision_pair a=\"{}\" b=\"{}\"/>", xml_escape(a), xml_escape(b));
    }
    let _ = writeln!(out, "</robot>");
    out
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn required_attr<'a>(node: &roxmltree::Node<'a, '_>, key: &str) -> Result<&'a str, ModelError> {
    node.attribute(key).ok_or_else(|| {
        ModelError::MalformedXml(format!("<{}> is missing attribute `{key}`", node.tag_name().name()))
    })
}

fn parse_f64(s: &str) -> Result<f64, ModelError> {
    let v: f64 = s.trim().parse().map_err(|_| ModelError::MalformedXml(format!("not a number: `{s}`")))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(ModelError::MalformedXml(format!("non-finite number `{s}`")))
    }
}

fn parse_vec3(s: &str) -> Result<Vector3<f64>, ModelError> {
    let parts: Vec<f64> = s.split_whitespace().map(parse_f64).collect::<Result<_, _>>()?;
    match parts.as_slice() {
        [x, y, z] => Ok(Vector3::new(*x, *y, *z)),
        _ => Err(ModelError::MalformedXml(format!("expected three numbers, got `{s}`"))),
    }
}

/// `<origin xyz=".." rpy=".."/>`, with the `phri:quat="w x y z"` extension
/// taking precedence over `rpy` when present.
fn parse_origin(node: &roxmltree::Node) -> Result<(Vector3<f64>, UnitQuaternion<f64>), ModelError> {
    let xyz = node.attribute("xyz").map(parse_vec3).transpose()?.unwrap_or_else(Vector3::zeros);
    let rot = if let Some(q) = node.attribute((PHRI_NS, "quat")) {
        let p: Vec<f64> = q.split_whitespace().map(parse_f64).collect::<Result<_, _>>()?;
        if p.len() != 4 {
            return Err(ModelError::MalformedXml(format!("quaternion needs four numbers: `{q}`")));
        }
        let raw = nalgebra::Quaternion::new(p[0], p[1], p[2], p[3]);
        if raw.norm() < 1e-9 {
            return Err(ModelError::MalformedXml("zero quaternion".into()));
        }
        UnitQuaternion::from_quaternion(raw)
    } else if let Some(rpy) = node.attribute("rpy") {
        let r = parse_vec3(rpy)?;
        UnitQuaternion::from_euler_angles(r.x, r.y, r.z)
    } else {
        UnitQuaternion::identity()
    };
    Ok((xyz, rot))
}
