//! Mann–Whitney U test and rank-biserial effect size.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

/// Largest pooled size for which the exact null distribution is used.
pub const EXACT_LIMIT: usize = 12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("empty sample")]
    EmptySample,
    #[error("non-finite value in sample")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MannWhitney {
    /// `U` of the first sample: pairs with `a > b`, ties counting one half.
    pub u: f64,
    pub p_two_sided: f64,
    /// `1 − 2U/(n_a·n_b)`; positive when the first sample tends to be smaller.
    pub rank_biserial: f64,
    pub exact: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GroupSummary {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

pub fn summarize(x: &[f64]) -> GroupSummary {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let var = if n > 1 { x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
    GroupSummary { n, mean, std: var.sqrt() }
}

/// Midranks (1-based) of the pooled sample.
pub fn midranks(pooled: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..pooled.len()).collect();
    idx.sort_by(|&i, &j| pooled[i].total_cmp(&pooled[j]));
    let mut ranks = vec![0.0; pooled.len()];
    let mut k = 0;
    while k < idx.len() {
        let mut e = k;
        while e + 1 < idx.len() && pooled[idx[e + 1]] == pooled[idx[k]] {
            e += 1;
        }
        let r = (k + e) as f64 / 2.0 + 1.0;
        for &i in &idx[k..=e] {
            ranks[i] = r;
        }
        k = e + 1;
    }
    ranks
}

/// Number of `n_a`-subsets of `ranks` by rank sum, with sums doubled so
/// midranks stay integral. Index `s` counts subsets with `2·Σr = s`.
fn rank_sum_counts(ranks: &[f64], n_a: usize) -> Vec<Vec<f64>> {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let max_sum: usize = doubled.iter().sum();
    // counts[k][s]: subsets of size k with doubled sum s
    let mut counts = vec![vec![0.0f64; max_sum + 1]; n_a + 1];
    counts[0][0] = 1.0;
    for &d in &doubled {
        for k in (1..=n_a).rev() {
            for s in (d..=max_sum).rev() {
                let c = counts[k - 1][s - d];
                if c > 0.0 {
                    counts[k][s] += c;
                }
            }
        }
    }
    counts
}

pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<MannWhitney, StatsError> {
    if a.is_empty() || b.is_empty() {
        return Err(StatsError::EmptySample);
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let (na, nb) = (a.len(), b.len());
    let n = na + nb;
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = midranks(&pooled);
    let rank_sum_a: f64 = ranks[..na].iter().sum();
    let offset = (na * (na + 1)) as f64 / 2.0;
    let u = rank_sum_a - offset;
    let mean = (na * nb) as f64 / 2.0;
    let rank_biserial = 1.0 - 2.0 * u / (na * nb) as f64;

    let (p, exact) = if n <= EXACT_LIMIT {
        let counts = rank_sum_counts(&ranks, na);
        let total: f64 = counts[na].iter().sum();
        let dev = (u - mean).abs();
        let extreme: f64 = counts[na]
            .iter()
            .enumerate()
            .filter(|(s, c)| **c > 0.0 && ((*s as f64 / 2.0 - offset) - mean).abs() >= dev - 1e-9)
            .map(|(_, c)| c)
            .sum();
        (extreme / total, true)
    } else {
        let mut sorted = pooled.clone();
        sorted.sort_by(f64::total_cmp);
        let mut tie_term = 0.0;
        let mut k = 0;
        while k < n {
            let mut e = k;
            while e + 1 < n && sorted[e + 1] == sorted[k] {
                e += 1;
            }
            let t = (e - k + 1) as f64;
            tie_term += t * t * t - t;
            k = e + 1;
        }
        let nf = n as f64;
        let var = (na * nb) as f64 / 12.0 * ((nf + 1.0) - tie_term / (nf * (nf - 1.0)));
        if var <= 0.0 {
            (1.0, false)
        } else {
            // continuity correction
            let z = ((u - mean).abs() - 0.5).max(0.0) / var.sqrt();
            let normal = Normal::new(0.0, 1.0).expect("unit normal");
            (2.0 * normal.sf(z), false)
        }
    };
    Ok(MannWhitney { u, p_two_sided: p.clamp(f64::MIN_POSITIVE, 1.0), rank_biserial, exact })
}
