//! Weight-drop error metrics.

use serde::Serialize;

/// Band around the residual inside which the error counts as settled (mm).
pub const SETTLE_BAND_MM: f64 = 0.1;
/// How long the error must stay inside the band (s).
pub const SETTLE_HOLD_S: f64 = 0.2;
/// Trailing window averaged for the residual error (s).
pub const RESIDUAL_WINDOW_S: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DropMetrics {
    pub peak_error_mm: f64,
    pub stabilization_time_s: f64,
    pub residual_error_mm: f64,
}

impl DropMetrics {
    /// `t` and `err_mm` start at the impact; `err_mm` is non-negative.
    ///
    /// The residual is the mean error over the final 0.5 s. The stabilization
    /// time is the first instant after which the error stays within 0.1 mm of
    /// the residual for 0.2 s; a trace that never settles reports its full length.
    pub fn from_trace(t: &[f64], err_mm: &[f64]) -> Self {
        assert_eq!(t.len(), err_mm.len());
        if t.is_empty() {
            return Self { peak_error_mm: 0.0, stabilization_time_s: 0.0, residual_error_mm: 0.0 };
        }
        let (t0, t_end) = (t[0], t[t.len() - 1]);
        let eps = 1e-9;
        let tail: Vec<f64> = t.iter().zip(err_mm).filter(|(ti, _)| **ti >= t_end - RESIDUAL_WINDOW_S - eps).map(|(_, e)| *e).collect();
        let residual = tail.iter().sum::<f64>() / tail.len() as f64;
        let peak = err_mm.iter().copied().fold(0.0, f64::max);
        let inside: Vec<bool> = err_mm.iter().map(|e| (e - residual).abs() < SETTLE_BAND_MM).collect();
        let mut stabilization = t_end - t0;
        // scan backwards tracking the end of the current run of in-band samples
        let mut run_end: Option<usize> = None;
        for k in (0..t.len()).rev() {
            if !inside[k] {
                run_end = None;
                continue;
            }
            let end = *run_end.get_or_insert(k);
            if t[end] - t[k] >= SETTLE_HOLD_S - eps {
                stabilization = t[k] - t0;
            }
        }
        Self { peak_error_mm: peak, stabilization_time_s: stabilization, residual_error_mm: residual }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_trace() {
        let t: Vec<f64> = (0..3000).map(|k| k as f64 * 1e-3).collect();
        let m = DropMetrics::from_trace(&t, &vec![0.0; t.len()]);
        assert_eq!(m, DropMetrics { peak_error_mm: 0.0, stabilization_time_s: 0.0, residual_error_mm: 0.0 });
    }

    #[test]
    fn exponential_decay_by_hand() {
        // e(t) = 0.05 + 2·exp(−t/0.1), 1 ms samples over [0, 3] s
        let dt = 1e-3;
        let t: Vec<f64> = (0..=3000).map(|k| k as f64 * dt).collect();
        let e: Vec<f64> = t.iter().map(|t| 0.05 + 2.0 * (-t / 0.1).exp()).collect();
        let m = DropMetrics::from_trace(&t, &e);
        // residual: samples k = 2500..=3000, geometric series with ratio r = exp(−dt/0.1)
        let r: f64 = (-dt / 0.1).exp();
        let sum = 2.0 * (-25.0f64).exp() * (1.0 - r.powi(501)) / (1.0 - r);
        let residual = 0.05 + sum / 501.0;
        assert!((m.residual_error_mm - residual).abs() < 1e-9);
        assert!((m.peak_error_mm - 2.05).abs() < 1e-12);
        // settled once 2·exp(−t/0.1) + 0.05 − residual < 0.1, i.e. t > 0.1·ln(2/(0.1 + residual − 0.05))
        let t_star = 0.1 * (2.0 / (0.1 + residual - 0.05)).ln();
        let expected = (t_star / dt).ceil() * dt;
        assert!((m.stabilization_time_s - expected).abs() < 1e-9, "{} vs {expected}", m.stabilization_time_s);
    }

    #[test]
    fn first_quiet_window_counts() {
        // in band for 1 s, a 50 ms excursion, then in band again
        let t: Vec<f64> = (0..=2000).map(|k| k as f64 * 1e-3).collect();
        let e: Vec<f64> = t.iter().map(|t| if (1.0..1.05).contains(t) { 1.0 } else { 0.0 }).collect();
        let m = DropMetrics::from_trace(&t, &e);
        assert_eq!(m.residual_error_mm, 0.0);
        assert_eq!(m.peak_error_mm, 1.0);
        // the band already holds for 0.2 s from the start
        assert!((m.stabilization_time_s - 0.0).abs() < 1e-12, "{}", m.stabilization_time_s);
    }

    #[test]
    fn never_settles() {
        let t: Vec<f64> = (0..=1000).map(|k| k as f64 * 1e-3).collect();
        let e: Vec<f64> = (0..=1000).map(|k| if k % 2 == 0 { 0.0 } else { 1.0 }).collect();
        let m = DropMetrics::from_trace(&t, &e);
        assert!((m.stabilization_time_s - 1.0).abs() < 1e-12);
        assert!(m.peak_error_mm >= m.residual_error_mm);
    }
}
