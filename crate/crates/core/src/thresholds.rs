//! Classical univariate threshold rules.
//!
//! Each rule maps one score column to a threshold; the contamination estimate
//! is the fraction of scores strictly above it. Matrix estimates average the
//! per-column fractions.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
use statrs::function::erf::erfc_inv;

use crate::error::{Error, Result};
use crate::num::{mean, median, quantile_sorted, std_dev};
use crate::scorespace::ScoreMatrix;
use crate::seed;

pub const MIN_ROWS: usize = 4;
pub const Z_CUTOFF: f64 = 3.0;
pub const MTT_ALPHA: f64 = 0.05;
pub const GESD_ALPHA: f64 = 0.05;
pub const GESD_MAX_FRACTION: f64 = 0.25;
pub const BOOT_RESAMPLES: usize = 1000;
pub const BOOT_LEVEL: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Iqr,
    Zscore,
    Chauvenet,
    Mad,
    Karcher,
    Mtt,
    Gesd,
    Boot,
    Qmcd,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Iqr,
        Method::Zscore,
        Method::Chauvenet,
        Method::Mad,
        Method::Karcher,
        Method::Mtt,
        Method::Gesd,
        Method::Boot,
        Method::Qmcd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Iqr => "iqr",
            Method::Zscore => "zscore",
            Method::Chauvenet => "chauvenet",
            Method::Mad => "mad",
            Method::Karcher => "karcher",
            Method::Mtt => "mtt",
            Method::Gesd => "gesd",
            Method::Boot => "boot",
            Method::Qmcd => "qmcd",
        }
    }

    /// Threshold for one column. `seed` only matters for `boot`.
    pub fn threshold(self, scores: &[f64], seed: u64) -> Result<f64> {
        check(scores)?;
        Ok(match self {
            Method::Iqr => iqr_threshold(scores),
            Method::Zscore => zscore_threshold(scores),
            Method::Chauvenet => chauvenet_threshold(scores),
            Method::Mad => mad_threshold(scores),
            Method::Karcher => karcher_threshold(scores),
            Method::Mtt => mtt_threshold(scores),
            Method::Gesd => gesd_threshold(scores),
            Method::Boot => boot_threshold(scores, &mut seed::rng(seed, &[])),
            Method::Qmcd => qmcd_threshold(scores),
        })
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s || (s == "karch" && *m == Method::Karcher))
            .ok_or_else(|| Error::InvalidInput(format!("unknown threshold method '{s}'")))
    }
}

fn check(scores: &[f64]) -> Result<()> {
    if scores.len() < MIN_ROWS {
        return Err(Error::TooFewRows { needed: MIN_ROWS, got: scores.len() });
    }
    if let Some(row) = scores.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { column: 0, row });
    }
    Ok(())
}

/// Fraction of scores strictly above `threshold`.
pub fn exceedance(scores: &[f64], threshold: f64) -> f64 {
    scores.iter().filter(|&&s| s > threshold).count() as f64 / scores.len() as f64
}

fn sorted(scores: &[f64]) -> Vec<f64> {
    let mut v = scores.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// `Q3 + 1.5 (Q3 - Q1)` with linearly interpolated quartiles.
pub fn iqr_threshold(scores: &[f64]) -> f64 {
    let s = sorted(scores);
    let q1 = quantile_sorted(&s, 0.25);
    let q3 = quantile_sorted(&s, 0.75);
    q3 + 1.5 * (q3 - q1)
}

/// Mean plus three population standard deviations.
pub fn zscore_threshold(scores: &[f64]) -> f64 {
    mean(scores) + Z_CUTOFF * std_dev(scores, 0)
}

/// Drops the points Chauvenet's criterion rejects, `N P(|Z| > |z_i|) < 0.5`,
/// then applies the z-score rule to the rest.
pub fn chauvenet_threshold(scores: &[f64]) -> f64 {
    let n = scores.len() as f64;
    let (mu, sd) = (mean(scores), std_dev(scores, 0));
    if sd == 0.0 {
        return mu;
    }
    // P(|Z| > z) = erfc(z / sqrt 2)
    let z_crit = std::f64::consts::SQRT_2 * erfc_inv(0.5 / n);
    let kept: Vec<f64> = scores.iter().copied().filter(|x| ((x - mu) / sd).abs() <= z_crit).collect();
    zscore_threshold(&kept)
}

/// Mean plus the standard deviation scaled by `MAD / std`.
pub fn mad_threshold(scores: &[f64]) -> f64 {
    let mu = mean(scores);
    let sd = std_dev(scores, 0);
    if sd == 0.0 {
        return mu;
    }
    let med = median(scores);
    let dev: Vec<f64> = scores.iter().map(|x| (x - med).abs()).collect();
    mu + sd * (median(&dev) / sd)
}

/// Karcher mean plus one standard deviation. On the real line the Karcher
/// mean is the arithmetic mean.
pub fn karcher_threshold(scores: &[f64]) -> f64 {
    mean(scores) + std_dev(scores, 0)
}

fn t_quantile(p: f64, df: f64) -> f64 {
    StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom").inverse_cdf(p)
}

/// Modified Thompson tau: repeatedly drops the point farthest from the mean
/// while its deviation exceeds `tau * s`. The threshold is the largest
/// surviving score.
pub fn mtt_threshold(scores: &[f64]) -> f64 {
    let mut kept = scores.to_vec();
    while kept.len() >= 3 {
        let n = kept.len() as f64;
        let mu = mean(&kept);
        let s = std_dev(&kept, 1);
        let (idx, dev) = farthest(&kept, mu);
        let t = t_quantile(1.0 - MTT_ALPHA / 2.0, n - 2.0);
        let tau = t * (n - 1.0) / (n.sqrt() * (n - 2.0 + t * t).sqrt());
        if dev > tau * s {
            kept.swap_remove(idx);
        } else {
            break;
        }
    }
    max(&kept)
}

/// Generalized extreme studentized deviate test for up to `ceil(0.25 N)`
/// outliers at level 0.05. The threshold is the largest surviving score.
pub fn gesd_threshold(scores: &[f64]) -> f64 {
    let n = scores.len();
    let r = ((GESD_MAX_FRACTION * n as f64).ceil() as usize).min(n - 2);
    let mut kept = scores.to_vec();
    let mut removed = Vec::with_capacity(r);
    let mut n_out = 0;
    for i in 1..=r {
        let mu = mean(&kept);
        let s = std_dev(&kept, 1);
        if s == 0.0 {
            break;
        }
        let (idx, dev) = farthest(&kept, mu);
        let stat = dev / s;
        let m = (n - i + 1) as f64;
        let p = 1.0 - GESD_ALPHA / (2.0 * m);
        let t = t_quantile(p, m - 2.0);
        let crit = (m - 1.0) * t / ((m - 2.0 + t * t) * m).sqrt();
        removed.push(kept.swap_remove(idx));
        if stat > crit {
            n_out = i;
        }
    }
    let mut remaining = kept;
    remaining.extend_from_slice(&removed[n_out..]);
    max(&remaining)
}

/// Upper end of the BCa bootstrap interval for the mean.
pub fn boot_threshold<R: Rng + ?Sized>(scores: &[f64], rng: &mut R) -> f64 {
    let n = scores.len();
    let theta = mean(scores);
    if std_dev(scores, 0) == 0.0 {
        return theta;
    }
    let mut boots: Vec<f64> = (0..BOOT_RESAMPLES)
        .map(|_| (0..n).map(|_| scores[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    boots.sort_by(f64::total_cmp);
    let b = BOOT_RESAMPLES as f64;
    let below = boots.iter().filter(|&&v| v < theta).count() as f64;
    let ties = boots.iter().filter(|&&v| v == theta).count() as f64;
    let prop = ((below + 0.5 * ties) / b).clamp(0.5 / b, 1.0 - 0.5 / b);
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let z0 = normal.inverse_cdf(prop);
    // jackknife acceleration
    let total: f64 = scores.iter().sum();
    let jack: Vec<f64> = scores.iter().map(|x| (total - x) / (n as f64 - 1.0)).collect();
    let jbar = mean(&jack);
    let num: f64 = jack.iter().map(|j| (jbar - j).powi(3)).sum();
    let den: f64 = jack.iter().map(|j| (jbar - j).powi(2)).sum();
    let a = if den > 0.0 { num / (6.0 * den.powf(1.5)) } else { 0.0 };
    let z = normal.inverse_cdf(1.0 - (1.0 - BOOT_LEVEL) / 2.0);
    let level = normal.cdf(z0 + (z0 + z) / (1.0 - a * (z0 + z)));
    quantile_sorted(&boots, level)
}

/// Quantile at one minus the star discrepancy of the min-max normalised scores.
pub fn qmcd_threshold(scores: &[f64]) -> f64 {
    let s = sorted(scores);
    let (lo, hi) = (s[0], s[s.len() - 1]);
    if hi == lo {
        return lo;
    }
    let n = s.len() as f64;
    let worst = s
        .iter()
        .enumerate()
        .map(|(i, v)| ((v - lo) / (hi - lo) - (2.0 * i as f64 + 1.0) / (2.0 * n)).abs())
        .fold(0.0, f64::max);
    let d_star = 1.0 / (2.0 * n) + worst;
    quantile_sorted(&s, (1.0 - d_star).clamp(0.0, 1.0))
}

fn farthest(xs: &[f64], mu: f64) -> (usize, f64) {
    xs.iter()
        .map(|x| (x - mu).abs())
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, d)| if d > acc.1 { (i, d) } else { acc })
}

fn max(xs: &[f64]) -> f64 {
    xs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Per-column thresholds and their averaged contamination estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdEstimate {
    pub method: Method,
    pub thresholds: Vec<f64>,
    pub per_detector: Vec<f64>,
    pub gamma_hat: f64,
}

/// Applies one method to every column.
pub fn estimate(scores: &ScoreMatrix, method: Method, seed: u64) -> Result<ThresholdEstimate> {
    let thresholds = scores
        .columns()
        .iter()
        .enumerate()
        .map(|(j, col)| {
            method.threshold(col, seed::derive(seed, &[j as u64])).map_err(|e| match e {
                Error::NonFinite { row, .. } => Error::NonFinite { column: j, row },
                e => e,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let per_detector: Vec<f64> = scores.columns().iter().zip(&thresholds).map(|(c, &t)| exceedance(c, t)).collect();
    let gamma_hat = mean(&per_detector);
    Ok(ThresholdEstimate { method, thresholds, per_detector, gamma_hat })
}

/// Runs every method; failures are collected instead of aborting the rest.
pub fn estimate_all(
    scores: &ScoreMatrix,
    methods: &[Method],
    seed: u64,
) -> (Vec<ThresholdEstimate>, Vec<(Method, Error)>) {
    let results: Vec<(Method, Result<ThresholdEstimate>)> =
        methods.par_iter().map(|&m| (m, estimate(scores, m, seed::derive(seed, &[m as u64])))).collect();
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for (m, r) in results {
        match r {
            Ok(e) => ok.push(e),
            Err(e) => {
                log::warn!("threshold method {m} failed: {e}");
                failed.push((m, e));
            }
        }
    }
    (ok, failed)
}
