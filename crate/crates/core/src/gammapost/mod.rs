//! Posterior of the contamination factor.
//!
//! The active mixture components are ranked by their expected
//! representative value, a sigmoid link turns the ranking into chained
//! anomaly probabilities, and the posterior is sampled as the cumulative
//! weight of the components judged anomalous.

pub mod calibrate;
pub mod chain;
pub mod order;
pub mod sample;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use calibrate::{calibrate, CalibrationProblem, CalibrationTargets, SigmoidParams};
pub use chain::{joint_probabilities, representative_value, sigmoid_link, truncate_conditionals, truncation_index};
pub use order::{order_components, ComponentOrdering};
pub use sample::{sample_gamma, SamplerOptions};

use crate::dpgmm::{self, DpgmmConfig};
use crate::error::{Error, Result};
use crate::num;
use crate::scorespace::ScoreMatrix;
use crate::seed;

pub const DEFAULT_RESTARTS: usize = 10;
pub const DEFAULT_MAX_ATTEMPTS: usize = 100;

const FIT_STREAM: u64 = 1;
const ORDER_STREAM: u64 = 2;
const SAMPLE_STREAM: u64 = 3;

/// Quantile levels reported in summaries, in percent.
pub const SUMMARY_LEVELS: [u32; 7] = [1, 5, 25, 50, 75, 95, 99];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub dpgmm: DpgmmConfig,
    pub targets: CalibrationTargets,
    pub restarts: usize,
    pub draws_per_restart: usize,
    /// VI fits tried per restart before it falls back to all-zero samples.
    pub max_attempts: usize,
    pub mc_draws: usize,
    pub seed: u64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            dpgmm: DpgmmConfig::default(),
            targets: CalibrationTargets::default(),
            restarts: DEFAULT_RESTARTS,
            draws_per_restart: sample::DEFAULT_DRAWS,
            max_attempts: DEFAULT_MAX_ATTEMPTS,
            mc_draws: order::DEFAULT_MC_DRAWS,
            seed: 0,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        self.targets.validate()?;
        for (name, v) in [
            ("restarts", self.restarts),
            ("draws_per_restart", self.draws_per_restart),
            ("max_attempts", self.max_attempts),
            ("mc_draws", self.mc_draws),
        ] {
            if v == 0 {
                return Err(Error::InvalidParameter { name, msg: "must be at least 1".into() });
            }
        }
        Ok(())
    }
}

/// What happened in one restart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartInfo {
    pub restart: usize,
    /// VI fits run, including the successful one.
    pub attempts: usize,
    /// `None` when every attempt was infeasible.
    pub sigmoid: Option<SigmoidParams>,
    pub k_active: usize,
    pub vi_iterations: usize,
    pub vi_converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaPosterior {
    /// Concatenated in restart order.
    pub samples: Vec<f64>,
    pub zero_mass: f64,
    pub cap: f64,
    pub restarts: Vec<RestartInfo>,
}

impl GammaPosterior {
    pub fn from_samples(samples: Vec<f64>, cap: f64, restarts: Vec<RestartInfo>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidInput("no posterior samples".into()));
        }
        if let Some(bad) = samples.iter().find(|g| !(**g >= 0.0 && **g <= cap)) {
            return Err(Error::InvalidInput(format!("sample {bad} outside [0, {cap}]")));
        }
        let zero_mass = samples.iter().filter(|&&g| g == 0.0).count() as f64 / samples.len() as f64;
        Ok(Self { samples, zero_mass, cap, restarts })
    }

    pub fn mean(&self) -> f64 {
        num::mean(&self.samples)
    }

    pub fn std(&self) -> f64 {
        num::std_dev(&self.samples, 0)
    }

    /// Type-7 sample quantile, `q` in [0, 1].
    pub fn quantile(&self, q: f64) -> f64 {
        num::quantile(&self.samples, q)
    }

    /// Fraction of samples at or above `t`.
    pub fn prob_at_least(&self, t: f64) -> f64 {
        self.samples.iter().filter(|&&g| g >= t).count() as f64 / self.samples.len() as f64
    }

    pub fn summary(&self, config: &EstimatorConfig) -> GammaSummary {
        let mut sorted = self.samples.clone();
        sorted.sort_by(f64::total_cmp);
        let q: Vec<f64> = SUMMARY_LEVELS.iter().map(|&l| num::quantile_sorted(&sorted, f64::from(l) / 100.0)).collect();
        GammaSummary {
            mean: self.mean(),
            std: self.std(),
            zero_mass: self.zero_mass,
            quantiles: Quantiles { q1: q[0], q5: q[1], q25: q[2], q50: q[3], q75: q[4], q95: q[5], q99: q[6] },
            cap: self.cap,
            samples_path: None,
            seed: config.seed,
            p0: config.targets.p0,
            p_high: config.targets.p_high,
            t: config.targets.t,
            n_samples: self.samples.len(),
            restarts: self.restarts.clone(),
        }
    }
}

/// Posterior mean, counting the zero atom.
pub fn point_estimate(gp: &GammaPosterior) -> f64 {
    gp.mean()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    #[serde(rename = "1")]
    pub q1: f64,
    #[serde(rename = "5")]
    pub q5: f64,
    #[serde(rename = "25")]
    pub q25: f64,
    #[serde(rename = "50")]
    pub q50: f64,
    #[serde(rename = "75")]
    pub q75: f64,
    #[serde(rename = "95")]
    pub q95: f64,
    #[serde(rename = "99")]
    pub q99: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaSummary {
    pub mean: f64,
    pub std: f64,
    pub zero_mass: f64,
    pub quantiles: Quantiles,
    pub cap: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples_path: Option<String>,
    pub seed: u64,
    pub p0: f64,
    pub p_high: f64,
    pub t: f64,
    pub n_samples: usize,
    pub restarts: Vec<RestartInfo>,
}

/// Runs the full posterior estimation on transformed scores.
///
/// Every restart fits the mixture with its own seed and retries with fresh
/// seeds while calibration is infeasible. A restart that never becomes
/// feasible contributes all-zero samples.
pub fn estimate(scores: &ScoreMatrix, config: &EstimatorConfig) -> Result<GammaPosterior> {
    config.validate()?;
    let per_restart: Vec<(Vec<f64>, RestartInfo)> =
        (0..config.restarts).into_par_iter().map(|r| run_restart(scores, config, r)).collect::<Result<_>>()?;
    let mut samples = Vec::with_capacity(config.restarts * config.draws_per_restart);
    let mut infos = Vec::with_capacity(config.restarts);
    for (s, info) in per_restart {
        samples.extend(s);
        infos.push(info);
    }
    GammaPosterior::from_samples(samples, config.targets.cap, infos)
}

fn run_restart(scores: &ScoreMatrix, config: &EstimatorConfig, restart: usize) -> Result<(Vec<f64>, RestartInfo)> {
    let r = restart as u64;
    let mut last = (0, 0, false);
    for attempt in 0..config.max_attempts {
        let a = attempt as u64;
        let dcfg = config.dpgmm.clone().with_seed(seed::derive(config.seed, &[FIT_STREAM, r, a]));
        let (post, diag) = dpgmm::fit(scores, &dcfg)?;
        last = (post.k_active(), diag.iterations, diag.converged);
        let ordering = order_components(&post, config.mc_draws, seed::derive(config.seed, &[ORDER_STREAM, r, a]));
        let mut params = match calibrate(&post, &ordering, &config.targets) {
            Ok(p) => p,
            Err(Error::Infeasible(msg)) => {
                log::debug!("restart {restart} attempt {attempt}: {msg}");
                continue;
            }
            Err(e) => return Err(e),
        };
        params.retries_used = attempt;
        let opts = SamplerOptions { draws: config.draws_per_restart, cap: config.targets.cap, use_expected_r: false };
        let mut rng = seed::rng(config.seed, &[SAMPLE_STREAM, r]);
        let samples = sample_gamma(&post, &ordering, &params, &opts, &mut rng)?;
        let info = RestartInfo {
            restart,
            attempts: attempt + 1,
            sigmoid: Some(params),
            k_active: post.k_active(),
            vi_iterations: diag.iterations,
            vi_converged: diag.converged,
        };
        return Ok((samples, info));
    }
    log::warn!("restart {restart}: calibration infeasible after {} attempts, using gamma = 0", config.max_attempts);
    let info = RestartInfo {
        restart,
        attempts: config.max_attempts,
        sigmoid: None,
        k_active: last.0,
        vi_iterations: last.1,
        vi_converged: last.2,
    };
    Ok((vec![0.0; config.draws_per_restart], info))
}
