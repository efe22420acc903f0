//! Joint torque loop: converts a desired link-side torque into motor current.
//!
//! The `phri_torque` loop is feedforward (desired torque, reflected rotor
//! inertia times desired acceleration, friction precompensation) plus two
//! feedback terms on the torque-sensor error: Kinova's quasi-static transfer
//! function and a slow leaky integrator. The `kinova_highvel` baseline keeps
//! only the desired torque and the transfer function.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::model::{ActuatorClass, RobotModel};

pub const DEFAULT_PERIOD: f64 = 0.001;

/// Joint friction: Coulomb + viscous while sliding, static breakaway while
/// quasi-static.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrictionParams {
    pub tau_c: f64,
    pub tau_v: f64,
    pub tau_s: f64,
    pub dq_th: f64,
    pub ddq_th: f64,
}

impl FrictionParams {
    pub const fn new(tau_c: f64, tau_v: f64) -> Self {
        Self { tau_c, tau_v, tau_s: tau_c, dq_th: 0.05, ddq_th: 0.1 }
    }

    pub const fn large() -> Self {
        Self::new(2.15, 2.00)
    }

    pub const fn small() -> Self {
        Self::new(1.60, 1.36)
    }

    pub const fn zero() -> Self {
        Self::new(0.0, 0.0)
    }

    pub fn for_class(class: ActuatorClass) -> Self {
        match class {
            ActuatorClass::Large => Self::large(),
            ActuatorClass::Small => Self::small(),
        }
    }

    pub fn is_valid(&self) -> bool {
        self.tau_c >= 0.0 && self.tau_v >= 0.0 && self.tau_s >= 0.0 && self.dq_th > 0.0 && self.ddq_th > 0.0
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn friction_torque(p: &FrictionParams, dq: f64, ddq_desired: f64) -> f64 {
    if dq.abs() >= p.dq_th {
        p.tau_c * sign(dq) + p.tau_v * dq
    } else if ddq_desired.abs() >= p.ddq_th {
        p.tau_s * sign(ddq_desired)
    } else {
        0.0
    }
}

/// Second-order IIR section, direct form II transposed.
#[derive(Debug, Clone, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
    s1: f64,
    s2: f64,
}

impl Biquad {
    pub fn new(b: [f64; 3], a: [f64; 2]) -> Self {
        Self { b, a, s1: 0.0, s2: 0.0 }
    }

    /// Kinova's quasi-static torque transfer function, identified at 1 kHz.
    pub fn kinova() -> Self {
        Self::new([0.020175, -0.036975, 0.016917], [-1.975063, 0.97518])
    }

    pub fn step(&mut self, x: f64) -> f64 {
        let y = self.b[0] * x + self.s1;
        self.s1 = self.b[1] * x - self.a[0] * y + self.s2;
        self.s2 = self.b[2] * x - self.a[1] * y;
        y
    }

    pub fn reset(&mut self) {
        self.s1 = 0.0;
        self.s2 = 0.0;
    }

    pub fn dc_gain(&self) -> f64 {
        self.b.iter().sum::<f64>() / (1.0 + self.a[0] + self.a[1])
    }

    pub fn is_finite(&self) -> bool {
        self.s1.is_finite() && self.s2.is_finite()
    }
}

/// `K_I / (s + θ)` discretized with backward Euler.
#[derive(Debug, Clone, PartialEq)]
pub struct LeakyIntegrator {
    pub k_i: f64,
    pub theta: f64,
    /// Symmetric clamp on the accumulator (anti-windup).
    pub limit: f64,
    acc: f64,
}

impl LeakyIntegrator {
    pub fn new(k_i: f64, theta: f64) -> Self {
        Self { k_i, theta, limit: f64::INFINITY, acc: 0.0 }
    }

    pub fn with_limit(mut self, limit: f64) -> Self {
        self.limit = limit;
        self
    }

    pub fn step(&mut self, error: f64, dt: f64) -> f64 {
        let acc = (self.acc + self.k_i * error * dt) / (1.0 + self.theta * dt);
        self.acc = acc.clamp(-self.limit, self.limit);
        self.acc
    }

    pub fn value(&self) -> f64 {
        self.acc
    }

    pub fn reset(&mut self) {
        self.acc = 0.0;
    }
}

pub fn torque_to_current(tau: f64, k_t: f64, gear_ratio: f64) -> f64 {
    tau / (k_t * gear_ratio)
}

pub fn current_to_torque(current: f64, k_t: f64, gear_ratio: f64) -> f64 {
    current * k_t * gear_ratio
}

/// Which low-level controller drives the motors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LowLevelKind {
    Position,
    KinovaHighvel,
    PhriTorque,
}

impl LowLevelKind {
    pub const ALL: [LowLevelKind; 3] = [LowLevelKind::Position, LowLevelKind::KinovaHighvel, LowLevelKind::PhriTorque];

    pub fn as_str(self) -> &'static str {
        match self {
            LowLevelKind::Position => "position",
            LowLevelKind::KinovaHighvel => "kinova_highvel",
            LowLevelKind::PhriTorque => "phri_torque",
        }
    }

    pub fn is_torque(self) -> bool {
        self != LowLevelKind::Position
    }
}

impl fmt::Display for LowLevelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LowLevelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "position" => Ok(LowLevelKind::Position),
            "kinova_highvel" | "kinova-highvel" | "highvel" => Ok(LowLevelKind::KinovaHighvel),
            "phri_torque" | "phri-torque" | "phri" | "torque" => Ok(LowLevelKind::PhriTorque),
            other => Err(format!("unknown low-level controller `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LowLevelConfig {
    pub k_i: f64,
    pub theta: f64,
    /// Integrator clamp as a fraction of each joint's torque limit.
    pub anti_windup_fraction: f64,
    pub friction_large: FrictionParams,
    pub friction_small: FrictionParams,
    pub rotor_compensation: bool,
    pub dt: f64,
}

impl Default for LowLevelConfig {
    fn default() -> Self {
        Self {
            k_i: 5.0,
            theta: 2.0,
            anti_windup_fraction: 0.2,
            friction_large: FrictionParams::large(),
            friction_small: FrictionParams::small(),
            rotor_compensation: true,
            dt: DEFAULT_PERIOD,
        }
    }
}

impl LowLevelConfig {
    /// Config whose corrective terms are all zero; `phri_torque` then reduces
    /// to the `kinova_highvel` baseline.
    pub fn without_corrections() -> Self {
        Self {
            k_i: 0.0,
            friction_large: FrictionParams::zero(),
            friction_small: FrictionParams::zero(),
            rotor_compensation: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.dt > 0.0) {
            return Err("dt must be positive".into());
        }
        if !(self.k_i >= 0.0) || !(self.theta > 0.0) {
            return Err("need k_i >= 0 and theta > 0".into());
        }
        if !(self.anti_windup_fraction > 0.0) {
            return Err("anti_windup_fraction must be positive".into());
        }
        if !self.friction_large.is_valid() || !self.friction_small.is_valid() {
            return Err("invalid friction parameters".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointLoop {
    pub friction: FrictionParams,
    pub tf: Biquad,
    pub integrator: LeakyIntegrator,
    pub rotor_inertia: f64,
    pub torque_constant: f64,
    pub gear_ratio: f64,
}

/// Per-joint torque-loop state for the whole arm.
#[derive(Debug, Clone, PartialEq)]
pub struct LowLevelState {
    pub joints: Vec<JointLoop>,
    pub dt: f64,
}

impl LowLevelState {
    pub fn new(model: &RobotModel, cfg: &LowLevelConfig) -> Self {
        let joints = model
            .joints
            .iter()
            .map(|j| {
                let friction = match j.actuator_class {
                    ActuatorClass::Large => cfg.friction_large,
                    ActuatorClass::Small => cfg.friction_small,
                };
                // the accumulator is the integrator's torque contribution
                let limit = cfg.anti_windup_fraction * j.torque_limit;
                JointLoop {
                    friction,
                    tf: Biquad::kinova(),
                    integrator: LeakyIntegrator::new(cfg.k_i, cfg.theta).with_limit(limit),
                    rotor_inertia: if cfg.rotor_compensation { j.rotor_inertia } else { 0.0 },
                    torque_constant: j.torque_constant,
                    gear_ratio: j.gear_ratio,
                }
            })
            .collect();
        Self { joints, dt: cfg.dt }
    }

    pub fn reset(&mut self) {
        for j in &mut self.joints {
            j.tf.reset();
            j.integrator.reset();
        }
    }

    /// `phri_torque` loop; returns motor currents.
    pub fn step(
        &mut self,
        tau_desired: &DVector<f64>,
        ddq_desired: &DVector<f64>,
        dq_measured: &DVector<f64>,
        tau_measured: &DVector<f64>,
    ) -> DVector<f64> {
        let dt = self.dt;
        DVector::from_iterator(
            self.joints.len(),
            self.joints.iter_mut().enumerate().map(|(i, j)| {
                let err = tau_desired[i] - tau_measured[i];
                let tau = tau_desired[i]
                    + j.rotor_inertia * ddq_desired[i]
                    + friction_torque(&j.friction, dq_measured[i], ddq_desired[i])
                    + j.tf.step(err)
                    + j.integrator.step(err, dt);
                torque_to_current(tau, j.torque_constant, j.gear_ratio)
            }),
        )
    }

    /// `kinova_highvel` baseline: transfer function on the torque error only.
    pub fn highvel_step(&mut self, tau_desired: &DVector<f64>, tau_measured: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.joints.len(),
            self.joints.iter_mut().enumerate().map(|(i, j)| {
                let tau = tau_desired[i] + j.tf.step(tau_desired[i] - tau_measured[i]);
                torque_to_current(tau, j.torque_constant, j.gear_ratio)
            }),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.joints.iter().all(|j| j.tf.is_finite() && j.integrator.value().is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::default_gen3_model;
    use proptest::prelude::*;

    #[test]
    fn friction_values() {
        let large = FrictionParams::large();
        assert!((friction_torque(&large, 1.0, 0.0) - 4.15).abs() < 1e-12);
        assert_eq!(friction_torque(&large, 0.0, 0.0), 0.0);
        let small = FrictionParams::small();
        assert!((friction_torque(&small, -0.5, 0.0) + 2.28).abs() < 1e-12);
        // quasi-static breakaway follows the desired acceleration
        assert_eq!(friction_torque(&large, 0.01, -0.5), -2.15);
        assert_eq!(friction_torque(&large, 0.01, 0.05), 0.0);
    }

    /// Coefficients of the power series of b(z⁻¹)/a(z⁻¹) by long division.
    fn long_division(b: &[f64], a: &[f64], n: usize) -> Vec<f64> {
        let mut rem: Vec<f64> = b.to_vec();
        rem.resize(n + a.len(), 0.0);
        let mut out = Vec::with_capacity(n);
        for k in 0..n {
            let c = rem[k] / a[0];
            out.push(c);
            for (i, ai) in a.iter().enumerate() {
                rem[k + i] -= c * ai;
            }
        }
        out
    }

    #[test]
    fn transfer_function_impulse_matches_long_division() {
        let mut tf = Biquad::kinova();
        let oracle = long_division(&[0.020175, -0.036975, 0.016917], &[1.0, -1.975063, 0.97518], 50);
        for (k, expected) in oracle.iter().enumerate() {
            let y = tf.step(if k == 0 { 1.0 } else { 0.0 });
            assert!((y - expected).abs() <= 1e-12, "sample {k}: {y} vs {expected}");
        }
    }

    #[test]
    fn transfer_function_dc_gain() {
        let num: f64 = 0.020175 - 0.036975 + 0.016917;
        let den = 1.0 - 1.975063 + 0.97518;
        assert!((num / den - 1.0).abs() <= 0.01);
        assert!((Biquad::kinova().dc_gain() - num / den).abs() < 1e-12);
        let mut tf = Biquad::kinova();
        let mut y = 0.0;
        for _ in 0..20_000 {
            y = tf.step(1.0);
        }
        assert!((y - 1.0).abs() <= 0.01, "{y}");
        let mut tf = Biquad::kinova();
        assert!((0..100).all(|_| tf.step(0.0) == 0.0));
    }

    #[test]
    fn leaky_integrator_dc_and_time_constant() {
        let dt = 0.001;
        let mut li = LeakyIntegrator::new(5.0, 2.0);
        let mut hit = None;
        for k in 1..=20_000 {
            let v = li.step(1.0, dt);
            if hit.is_none() && v >= 0.632 * 2.5 {
                hit = Some(k);
            }
        }
        assert!((li.value() - 2.5).abs() <= 2.5e-3);
        // 1/θ = 0.5 s = 500 samples
        let k = hit.unwrap() as i64;
        assert!((k - 500).abs() <= 2, "{k}");
        let mut zero = LeakyIntegrator::new(5.0, 2.0);
        assert!((0..100).all(|_| zero.step(0.0, dt) == 0.0));
    }

    #[test]
    fn current_conversion() {
        assert_eq!(torque_to_current(0.0, 0.11, 100.0), 0.0);
        assert!((torque_to_current(11.0, 0.11, 100.0) - 1.0).abs() < 1e-12);
        let i = torque_to_current(3.7, 0.076, 100.0);
        assert!((current_to_torque(i, 0.076, 100.0) - 3.7).abs() < 1e-12);
    }

    #[test]
    fn perfect_tracking_is_pure_feedforward() {
        let model = default_gen3_model();
        let mut ll = LowLevelState::new(&model, &LowLevelConfig::default());
        let tau = DVector::from_fn(7, |i, _| i as f64 - 3.0);
        let zero = DVector::zeros(7);
        for _ in 0..10 {
            let i = ll.step(&tau, &zero, &zero, &tau);
            for (k, j) in model.joints.iter().enumerate() {
                assert!((i[k] - tau[k] / (j.torque_constant * j.gear_ratio)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn constant_error_dc_gain() {
        let model = default_gen3_model();
        let cfg = LowLevelConfig { anti_windup_fraction: 10.0, ..LowLevelConfig::default() };
        let mut ll = LowLevelState::new(&model, &cfg);
        let tau_d = DVector::from_element(7, 1.0);
        let tau_m = DVector::from_element(7, 0.8);
        let zero = DVector::zeros(7);
        let mut i = zero.clone();
        for _ in 0..20_000 {
            i = ll.step(&tau_d, &zero, &zero, &tau_m);
        }
        let err = 0.2;
        let dc = Biquad::kinova().dc_gain();
        for (k, j) in model.joints.iter().enumerate() {
            let expected = torque_to_current(1.0 + (dc + 5.0 / 2.0) * err, j.torque_constant, j.gear_ratio);
            assert!((i[k] - expected).abs() <= 0.01 * expected.abs(), "{} vs {expected}", i[k]);
        }
    }

    #[test]
    fn anti_windup_caps_integrator() {
        let model = default_gen3_model();
        let mut ll = LowLevelState::new(&model, &LowLevelConfig::default());
        let tau_d = DVector::from_element(7, 100.0);
        let zero = DVector::zeros(7);
        for _ in 0..20_000 {
            ll.step(&tau_d, &zero, &zero, &zero);
        }
        for (j, spec) in ll.joints.iter().zip(&model.joints) {
            assert!((j.integrator.value() - 0.2 * spec.torque_limit).abs() < 1e-12);
        }
    }

    #[test]
    fn reduces_to_highvel_without_corrections() {
        let model = default_gen3_model();
        let mut a = LowLevelState::new(&model, &LowLevelConfig::without_corrections());
        let mut b = a.clone();
        for k in 0..500 {
            let t = k as f64 * 1e-3;
            let tau_d = DVector::from_fn(7, |i, _| (t * (i + 1) as f64).sin());
            let tau_m = DVector::from_fn(7, |i, _| 0.7 * (t * (i + 2) as f64).cos());
            let ddq = DVector::from_element(7, 3.0);
            let dq = DVector::from_element(7, 0.4);
            assert_eq!(a.step(&tau_d, &ddq, &dq, &tau_m), b.highvel_step(&tau_d, &tau_m));
        }
    }

    #[test]
    fn kind_parsing() {
        for k in LowLevelKind::ALL {
            assert_eq!(k.as_str().parse::<LowLevelKind>().unwrap(), k);
        }
        assert!("velocity".parse::<LowLevelKind>().is_err());
    }

    proptest! {
        #[test]
        fn friction_is_odd_while_sliding(dq in 0.05f64..5.0, ddq in -5.0f64..5.0, c in 0.0f64..5.0, v in 0.0f64..5.0) {
            let p = FrictionParams::new(c, v);
            prop_assert_eq!(friction_torque(&p, -dq, ddq), -friction_torque(&p, dq, ddq));
        }

        #[test]
        fn transfer_function_is_linear(xs in prop::collection::vec(-10.0f64..10.0, 1..60), ys in prop::collection::vec(-10.0f64..10.0, 60)) {
            let (mut fa, mut fb, mut fab) = (Biquad::kinova(), Biquad::kinova(), Biquad::kinova());
            for (x, y) in xs.iter().zip(&ys) {
                let sum = fa.step(*x) + fb.step(*y);
                prop_assert!((fab.step(x + y) - sum).abs() <= 1e-12);
            }
        }

        #[test]
        fn leaky_integrator_is_bounded(es in prop::collection::vec(-20.0f64..20.0, 1..400), k_i in 0.0f64..20.0, theta in 0.1f64..10.0) {
            let bound = k_i * es.iter().fold(0.0f64, |m, e| m.max(e.abs())) / theta;
            let mut li = LeakyIntegrator::new(k_i, theta);
            for e in &es {
                prop_assert!(li.step(*e, 1e-3).abs() <= bound * (1.0 + 1e-12));
            }
        }
    }
}
