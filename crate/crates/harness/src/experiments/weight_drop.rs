//! Weight drop: a payload falls into the gripper of the extended arm; the
//! tool error against its reference is reduced to peak / stabilization /
//! residual metrics and the two controllers are compared with Mann–Whitney.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use phri_core::lowlevel::LowLevelKind;
use phri_core::model::RobotModel;
use phri_core::modes::{ComplianceMode, Scenario};
use phri_core::plant::Payload;
use phri_core::sim::Simulation;

use super::{derive_seed, extension_posture, sim_config, ticks, HarnessConfig, RunOptions};
use crate::metrics::DropMetrics;
use crate::output::{fmt_f64, Check, Report, Table};
use crate::stats::{mann_whitney_u, summarize, MannWhitney};
use crate::HarnessError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightDropParams {
    pub q0: Vec<f64>,
    pub trials: usize,
    pub mass: f64,
    /// Fall height; the impact momentum is `m·√(2gh)` straight down (m).
    pub drop_height: f64,
    /// Per-trial drop height is drawn uniformly from `drop_height ± height_jitter` (m).
    pub height_jitter: f64,
    /// Duration over which the impact momentum is delivered (s).
    pub impact_window: f64,
    pub settle: f64,
    /// Logged time after the impact (s).
    pub record: f64,
    pub alpha: f64,
}

impl Default for WeightDropParams {
    fn default() -> Self {
        Self { q0: extension_posture(), trials: 30, mass: 1.25, drop_height: 0.25, height_jitter: 0.02, impact_window: 0.2, settle: 1.0, record: 3.0, alpha: 0.05 }
    }
}

pub const CONTROLLERS: [LowLevelKind; 2] = [LowLevelKind::Position, LowLevelKind::PhriTorque];

/// Tool position error (mm) from the impact on, one sample per tick.
pub fn drop_trace(model: &RobotModel, cfg: &HarnessConfig, controller: LowLevelKind, seed: u64) -> Result<(Vec<f64>, Vec<f64>), HarnessError> {
    let p = &cfg.weight_drop;
    let mut sc = sim_config(&cfg.sim, &p.q0, controller, seed);
    (sc.mode, sc.scenario) = (ComplianceMode::NullSpace, Scenario::Static);
    sc.plant.impact_window = p.impact_window;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::MAX));
    let height = p.drop_height + if p.height_jitter > 0.0 { rng.random_range(-p.height_jitter..=p.height_jitter) } else { 0.0 };
    let mut sim = Simulation::new(model.clone(), sc)?;
    let dt = sim.plant.config.dt;
    sim.run(ticks(dt, p.settle), |_| {})?;
    if p.mass > 0.0 {
        let g = model.gravity.norm();
        let speed = (2.0 * g * height.max(0.0)).sqrt();
        sim.plant.attach_payload(Payload { mass: p.mass });
        if speed > 0.0 {
            sim.plant.inject_ee_impulse(Vector3::new(0.0, 0.0, -p.mass * speed));
        }
    }
    let t0 = sim.time();
    let n = ticks(dt, p.record);
    let (mut t, mut e) = (Vec::with_capacity(n), Vec::with_capacity(n));
    sim.run(n, |i| {
        t.push(i.t - t0);
        e.push((i.ee_pose.translation.vector - i.ee_reference.translation.vector).norm() * 1e3);
    })?;
    Ok((t, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Comparison {
    pub metric: &'static str,
    pub test: MannWhitney,
}

pub fn run(model: &RobotModel, cfg: &HarnessConfig, opts: &RunOptions) -> Result<Report, HarnessError> {
    use rayon::prelude::*;
    let p = &cfg.weight_drop;
    let trials = opts.trials.unwrap_or(p.trials);
    if trials == 0 {
        return Err(HarnessError::Config("weight_drop needs at least one trial".into()));
    }
    let controllers = opts.select(&CONTROLLERS)?;
    let jobs: Vec<(LowLevelKind, usize)> = controllers.iter().flat_map(|c| (0..trials).map(move |i| (*c, i))).collect();
    let traces = jobs
        .par_iter()
        .map(|&(c, i)| drop_trace(model, cfg, c, derive_seed(opts.seed, i as u64)))
        .collect::<Result<Vec<_>, _>>()?;

    let mut per_trial = Table::new(&["trial", "controller", "peak_error_mm", "stabilization_time_s", "residual_error_mm"]);
    let mut groups: Vec<Vec<DropMetrics>> = vec![Vec::new(); controllers.len()];
    for (k, ((c, i), (t, e))) in jobs.iter().zip(&traces).enumerate() {
        let m = DropMetrics::from_trace(t, e);
        per_trial.push(vec![
            i.to_string(),
            c.as_str().into(),
            fmt_f64(m.peak_error_mm),
            fmt_f64(m.stabilization_time_s),
            fmt_f64(m.residual_error_mm),
        ]);
        groups[k / trials].push(m);
    }

    // first trial of each controller, side by side
    let mut headers = vec!["t_s".to_string()];
    headers.extend(controllers.iter().map(|c| format!("{}_err_mm", c.as_str())));
    let mut trace = Table { headers, rows: Vec::new() };
    let firsts: Vec<&(Vec<f64>, Vec<f64>)> = (0..controllers.len()).map(|ci| &traces[ci * trials]).collect();
    for k in 0..firsts[0].0.len() {
        let mut row = vec![firsts[0].0[k]];
        row.extend(firsts.iter().map(|(_, e)| e[k]));
        trace.push_numbers(&row);
    }

    type Metric = (&'static str, fn(&DropMetrics) -> f64);
    let metrics: [Metric; 3] = [
        ("peak_error_mm", |m| m.peak_error_mm),
        ("stabilization_time_s", |m| m.stabilization_time_s),
        ("residual_error_mm", |m| m.residual_error_mm),
    ];
    let mut stats = Table::new(&["metric", "group", "n", "mean", "std"]);
    let mut summary = serde_json::Map::new();
    for (name, f) in metrics {
        let mut per_metric = serde_json::Map::new();
        for (c, g) in controllers.iter().zip(&groups) {
            let s = summarize(&g.iter().map(f).collect::<Vec<_>>());
            stats.push(vec![name.into(), c.as_str().into(), s.n.to_string(), fmt_f64(s.mean), fmt_f64(s.std)]);
            per_metric.insert(c.as_str().into(), serde_json::to_value(s)?);
        }
        summary.insert(name.into(), serde_json::Value::Object(per_metric));
    }

    let mut tests = Table::new(&["metric", "u", "p_two_sided", "rank_biserial", "exact"]);
    let mut checks = Vec::new();
    if controllers.len() == 2 {
        // torque first, so a positive rank-biserial means torque errors are smaller
        let (torque, position) = (&groups[1], &groups[0]);
        let mut comparisons = Vec::new();
        for (name, f) in metrics {
            let a: Vec<f64> = torque.iter().map(f).collect();
            let b: Vec<f64> = position.iter().map(f).collect();
            let test = mann_whitney_u(&a, &b)?;
            tests.push(vec![name.into(), fmt_f64(test.u), fmt_f64(test.p_two_sided), fmt_f64(test.rank_biserial), test.exact.to_string()]);
            comparisons.push(Comparison { metric: name, test });
        }
        summary.insert("mann_whitney".into(), serde_json::to_value(&comparisons)?);
        let res = |g: &[DropMetrics]| summarize(&g.iter().map(|m| m.residual_error_mm).collect::<Vec<_>>()).mean;
        let (rt, rp) = (res(torque), res(position));
        checks.push(Check::new("torque_residual_below_position", rt < rp, format!("mean residual {rt:.4} vs {rp:.4} mm")));
        let p_res = comparisons[2].test.p_two_sided;
        checks.push(Check::new("residual_difference_significant", p_res < p.alpha, format!("p = {p_res:.3e}, alpha {}", p.alpha)));
    }
    checks.push(Check::new(
        "all_trials_complete",
        groups.iter().all(|g| g.len() == trials),
        format!("{trials} trials per controller"),
    ));

    let mut tables = vec![("weight_drop_trials.csv".into(), per_trial), ("weight_drop_trace.csv".into(), trace), ("weight_drop_groups.csv".into(), stats)];
    if !tests.rows.is_empty() {
        tables.push(("weight_drop_tests.csv".into(), tests));
    }
    Ok(Report { experiment: "weight-drop".into(), seed: opts.seed, tables, summary: serde_json::Value::Object(summary), checks })
}
