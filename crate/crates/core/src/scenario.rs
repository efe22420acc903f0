//! Scripted scenario files: payloads, pushes, impulses and operator commands on a timeline.
//!
//! ```toml
//! duration = 6.0
//!
//! [config]            # any `SimConfig` field
//! mode = "dual"
//!
//! [payload]
//! mass = 1.25
//! attach_at = 0.5
//!
//! [[push]]
//! at = 1.0
//! frame = "ee"
//! wrench = [0.0, 12.0, 0.0, 0.0, 0.0, 0.0]
//! duration_ms = 800
//!
//! [[impulse]]
//! at = 3.0
//! momentum = [0.0, 0.0, -2.77]
//!
//! [[command]]
//! at = 4.0
//! kind = "set_mode"
//! mode = "full_body"
//! ```

use nalgebra::Vector3;
use serde::Deserialize;

use crate::model::RobotModel;
use crate::modes::ModeCommand;
use crate::plant::Payload;
use crate::sim::{SimCommand, SimConfig, SimError, Simulation, TickInfo, WrenchCommand};

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PayloadSpec {
    pub mass: f64,
    #[serde(default)]
    pub attach_at: f64,
    pub detach_at: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PushSpec {
    pub at: f64,
    #[serde(flatten)]
    pub wrench: WrenchCommand,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImpulseSpec {
    pub at: f64,
    /// Linear momentum delivered at the tool point, world frame (kg·m/s).
    pub momentum: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct TimedCommand {
    pub at: f64,
    #[serde(flatten)]
    pub command: ModeCommand,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub duration: f64,
    #[serde(default)]
    pub config: SimConfig,
    pub payload: Option<PayloadSpec>,
    #[serde(default, rename = "push")]
    pub pushes: Vec<PushSpec>,
    #[serde(default, rename = "impulse")]
    pub impulses: Vec<ImpulseSpec>,
    #[serde(default, rename = "command")]
    pub commands: Vec<TimedCommand>,
}

#[derive(Debug, Clone, PartialEq)]
enum Action {
    Attach(f64),
    Detach,
    Command(SimCommand),
    Impulse(Vector3<f64>),
}

/// Command rejected while the scenario ran.
#[derive(Debug, Clone, PartialEq)]
pub struct Rejection {
    pub t: f64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioOutcome {
    pub ticks: usize,
    pub rejections: Vec<Rejection>,
}

impl ScenarioFile {
    pub fn from_toml_str(s: &str) -> Result<Self, SimError> {
        let f: Self = toml::from_str(s).map_err(|e| SimError::Config(e.to_string()))?;
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Config(m.into()));
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return bad("duration must be positive");
        }
        let times = self.pushes.iter().map(|p| p.at).chain(self.impulses.iter().map(|i| i.at)).chain(self.commands.iter().map(|c| c.at));
        if times.into_iter().any(|t| !(t >= 0.0 && t.is_finite())) {
            return bad("event times must be finite and non-negative");
        }
        if let Some(p) = &self.payload {
            if !(p.mass > 0.0 && p.mass.is_finite() && p.attach_at >= 0.0) {
                return bad("payload needs a positive mass and attach time");
            }
        }
        Ok(())
    }

    fn timeline(&self, dt: f64) -> Vec<(usize, Action)> {
        let tick = |t: f64| (t / dt).round() as usize;
        let mut events = Vec::new();
        if let Some(p) = &self.payload {
            events.push((tick(p.attach_at), Action::Attach(p.mass)));
            if let Some(d) = p.detach_at {
                events.push((tick(d), Action::Detach));
            }
        }
        events.extend(self.pushes.iter().map(|p| (tick(p.at), Action::Command(SimCommand::ApplyWrench(p.wrench.clone())))));
        events.extend(self.impulses.iter().map(|i| (tick(i.at), Action::Impulse(Vector3::from(i.momentum)))));
        events.extend(self.commands.iter().map(|c| (tick(c.at), Action::Command(SimCommand::Mode(c.command)))));
        // stable: equal ticks keep file order
        events.sort_by_key(|(k, _)| *k);
        events
    }

    /// Runs the scenario, calling `f` after every tick.
    pub fn run(&self, model: RobotModel, mut f: impl FnMut(&TickInfo)) -> Result<ScenarioOutcome, SimError> {
        let mut sim = Simulation::new(model, self.config.clone())?;
        let dt = sim.plant.config.dt;
        let ticks = (self.duration / dt).round() as usize;
        let events = self.timeline(dt);
        let mut next = 0;
        let mut rejections = Vec::new();
        for k in 0..ticks {
            while next < events.len() && events[next].0 <= k {
                match events[next].1.clone() {
                    Action::Attach(mass) => sim.plant.attach_payload(Payload { mass }),
                    Action::Detach => sim.plant.detach_payload(),
                    Action::Impulse(p) => sim.plant.inject_ee_impulse(p),
                    Action::Command(c) => match sim.apply(c) {
                        Ok(()) => {}
                        Err(e @ (SimError::Mode(_) | SimError::InvalidCommand(_))) => {
                            rejections.push(Rejection { t: sim.time(), reason: e.to_string() });
                        }
                        Err(e) => return Err(e),
                    },
                }
                next += 1;
            }
            f(sim.step()?);
        }
        Ok(ScenarioOutcome { ticks, rejections })
    }
}
