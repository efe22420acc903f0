//! The five evaluation experiments. Each returns a [`Report`] of CSV tables,
//! a JSON summary and named pass/fail checks.

use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use phri_core::lowlevel::LowLevelKind;
use phri_core::model::default_gen3_model;
use phri_core::sim::SimConfig;

use crate::output::Report;
use crate::HarnessError;

pub mod dual_compliance;
pub mod dynamic_tracking;
pub mod friction_id;
pub mod torque_tracking;
pub mod weight_drop;

pub use dual_compliance::DualComplianceParams;
pub use dynamic_tracking::DynamicTrackingParams;
pub use friction_id::FrictionIdParams;
pub use torque_tracking::TorqueTrackingParams;
pub use weight_drop::WeightDropParams;

/// Arm stretched forward with the tool roughly level with the shoulder.
pub fn extension_posture() -> Vec<f64> {
    vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.1, 0.0]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    FrictionId,
    TorqueTracking,
    WeightDrop,
    DynamicTracking,
    DualCompliance,
}

impl Experiment {
    pub const ALL: [Experiment; 5] =
        [Self::FrictionId, Self::TorqueTracking, Self::WeightDrop, Self::DynamicTracking, Self::DualCompliance];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::FrictionId => "friction-id",
            Self::TorqueTracking => "torque-tracking",
            Self::WeightDrop => "weight-drop",
            Self::DynamicTracking => "dynamic-tracking",
            Self::DualCompliance => "dual-compliance",
        }
    }
}

/// Everything an experiment can be configured with; loaded from `--config`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessConfig {
    /// Base simulation; experiments override pose, mode and low level.
    pub sim: SimConfig,
    pub friction_id: FrictionIdParams,
    pub torque_tracking: TorqueTrackingParams,
    pub weight_drop: WeightDropParams,
    pub dynamic_tracking: DynamicTrackingParams,
    pub dual_compliance: DualComplianceParams,
}

impl HarnessConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(s).map_err(|e| HarnessError::Config(e.to_string()))?;
        let model = default_gen3_model();
        cfg.sim.validate(&model).map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunOptions {
    pub seed: u64,
    /// Overrides the experiment's trial count where it has one.
    pub trials: Option<usize>,
    /// Restricts the controllers compared; `None` runs the experiment's default set.
    pub controllers: Option<Vec<LowLevelKind>>,
}

impl RunOptions {
    pub fn with_seed(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }

    fn select(&self, defaults: &[LowLevelKind]) -> Result<Vec<LowLevelKind>, HarnessError> {
        let chosen: Vec<LowLevelKind> = match &self.controllers {
            None => defaults.to_vec(),
            Some(c) => defaults.iter().copied().filter(|d| c.contains(d)).collect(),
        };
        if chosen.is_empty() {
            let names: Vec<_> = defaults.iter().map(|d| d.as_str()).collect();
            return Err(HarnessError::Config(format!("no applicable controller; choose from {}", names.join(", "))));
        }
        Ok(chosen)
    }
}

pub fn run(exp: Experiment, cfg: &HarnessConfig, opts: &RunOptions) -> Result<Report, HarnessError> {
    let model = default_gen3_model();
    match exp {
        Experiment::FrictionId => friction_id::run(&model, cfg, opts),
        Experiment::TorqueTracking => torque_tracking::run(&model, cfg, opts),
        Experiment::WeightDrop => weight_drop::run(&model, cfg, opts),
        Experiment::DynamicTracking => dynamic_tracking::run(&model, cfg, opts),
        Experiment::DualCompliance => dual_compliance::run(&model, cfg, opts),
    }
}

/// Independent, well-mixed seed for sub-run `stream` (SplitMix64 finalizer).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn sim_config(base: &SimConfig, q0: &[f64], lowlevel: LowLevelKind, seed: u64) -> SimConfig {
    SimConfig { q0: q0.to_vec(), lowlevel, seed, ..base.clone() }
}

fn ticks(model_dt: f64, seconds: f64) -> usize {
    (seconds / model_dt).round() as usize
}

fn rms(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().sum::<f64>() / x.len() as f64
}

/// Maximal runs of `true` as half-open index ranges.
pub fn intervals(flags: &[bool]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (k, &f) in flags.iter().enumerate() {
        match (f, start) {
            (true, None) => start = Some(k),
            (false, Some(s)) => {
                out.push((s, k));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, flags.len()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interval_runs() {
        assert_eq!(intervals(&[]), vec![]);
        assert_eq!(intervals(&[false, true, true, false, true]), vec![(1, 3), (4, 5)]);
    }

    #[test]
    fn derived_seeds_differ() {
        let s: std::collections::BTreeSet<u64> = (0..100).map(|i| derive_seed(7, i)).collect();
        assert_eq!(s.len(), 100);
        assert_eq!(derive_seed(7, 3), derive_seed(7, 3));
    }

    #[test]
    fn controller_filter() {
        let d = [LowLevelKind::Position, LowLevelKind::PhriTorque];
        let o = RunOptions { controllers: Some(vec![LowLevelKind::PhriTorque]), ..RunOptions::default() };
        assert_eq!(o.select(&d).unwrap(), vec![LowLevelKind::PhriTorque]);
        let o = RunOptions { controllers: Some(vec![LowLevelKind::KinovaHighvel]), ..RunOptions::default() };
        assert!(o.select(&d).is_err());
    }

    #[test]
    fn config_from_toml() {
        let c = HarnessConfig::from_toml_str("[weight_drop]\ntrials = 4\n[sim]\nseed = 2").unwrap();
        assert_eq!(c.weight_drop.trials, 4);
        assert!(HarnessConfig::from_toml_str("[sim]\nq0 = [0.0]").is_err());
        assert!(HarnessConfig::from_toml_str("bogus = 1").is_err());
    }
}
