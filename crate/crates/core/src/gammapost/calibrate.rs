//! Calibration of the sigmoid link from two elicited probabilities.
//!
//! `p0` is the probability that the data holds no anomaly and `p_high` the
//! probability that the contamination exceeds `t`. With the components ranked
//! and conditionals evaluated at the expected representative values, the
//! residuals
//!
//! ```text
//! f1(tau, delta) = 1 - P(c_1) - p0
//! f2(tau, delta) = sum_k P(C* = k) P(pi_1 + .. + pi_k >= t) - p_high
//! ```
//!
//! are driven to zero by Levenberg-Marquardt. When the sigmoid saturates and
//! the step stalls on a plateau, the root is bracketed along the curve
//! `f1 = 0` instead, where `f2` depends on `delta` alone. The tail
//! probabilities come from the Beta marginal of the Dirichlet partial sums.

use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ContinuousCDF};

use super::chain::{joint_probabilities, sigmoid_link, truncation_index};
use super::order::ComponentOrdering;
use crate::dpgmm::MixturePosterior;
use crate::error::{Error, Result};

pub const DEFAULT_P0: f64 = 0.01;
pub const DEFAULT_P_HIGH: f64 = 0.01;
pub const DEFAULT_T: f64 = 0.15;
pub const DEFAULT_CAP: f64 = 0.25;

/// Residual norm below which a calibration counts as solved.
pub const SOLVED_TOL: f64 = 1e-6;
const LM_TOL: f64 = 1e-10;
const LM_MAX_ITER: usize = 200;
const INITIAL_DELTA: f64 = -1.0;

/// The elicited calibration targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTargets {
    pub p0: f64,
    pub p_high: f64,
    pub t: f64,
    pub cap: f64,
}

impl Default for CalibrationTargets {
    fn default() -> Self {
        Self { p0: DEFAULT_P0, p_high: DEFAULT_P_HIGH, t: DEFAULT_T, cap: DEFAULT_CAP }
    }
}

impl CalibrationTargets {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("p0", self.p0), ("p_high", self.p_high)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::InvalidParameter { name, msg: format!("must lie in (0, 1), got {v}") });
            }
        }
        if !(self.cap > 0.0 && self.cap <= 1.0) {
            return Err(Error::InvalidParameter { name: "cap", msg: format!("must lie in (0, 1], got {}", self.cap) });
        }
        if !(self.t > 0.0 && self.t < self.cap) {
            return Err(Error::InvalidParameter { name: "t", msg: format!("must lie in (0, cap), got {}", self.t) });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmoidParams {
    pub tau: f64,
    pub delta: f64,
    pub t: f64,
    pub p0: f64,
    pub p_high: f64,
    /// Residual norm reached the solved tolerance.
    pub solved: bool,
    /// Extra VI fits needed before the calibration became feasible.
    pub retries_used: usize,
    pub residual_norm: f64,
    /// Number of ranked components allowed to be anomalous.
    pub k_prime: usize,
    /// Conditionals at the expected `r` are non-increasing along the ranking.
    pub monotone: bool,
}

impl SigmoidParams {
    /// Conditional anomaly probability for a representative value.
    pub fn conditional(&self, r: f64) -> f64 {
        sigmoid_link(r, self.tau, self.delta)
    }
}

/// Everything the residuals need, in ranked order.
#[derive(Debug, Clone)]
pub struct CalibrationProblem {
    /// Expected representative values of all ranked components.
    pub r: Vec<f64>,
    /// `T_k = P(sum_{j<=k} pi_j >= t)` for `k = 1..=K`.
    pub tails: Vec<f64>,
    /// Components left eligible by the cap; the sampler truncates there.
    pub k_prime: usize,
    pub p0: f64,
    pub p_high: f64,
}

/// `P(pi_1 + .. + pi_k >= t)` for every prefix of the ranked Dirichlet.
pub fn tail_probabilities(sorted_alphas: &[f64], t: f64) -> Vec<f64> {
    let total: f64 = sorted_alphas.iter().sum();
    let mut acc = 0.0;
    sorted_alphas
        .iter()
        .map(|&a| {
            acc += a;
            let rest = total - acc;
            if rest <= total * 1e-14 {
                return if t <= 1.0 { 1.0 } else { 0.0 };
            }
            let beta = Beta::new(acc, rest).expect("positive Beta parameters");
            1.0 - beta.cdf(t)
        })
        .collect()
}

impl CalibrationProblem {
    pub fn new(post: &MixturePosterior, ordering: &ComponentOrdering, targets: &CalibrationTargets) -> Result<Self> {
        targets.validate()?;
        let weights = ordering.sorted_weights(post);
        let k_prime = truncation_index(&weights, targets.cap)?;
        let tails = tail_probabilities(&ordering.sorted_alphas(post), targets.t);
        if tails[0] > targets.p_high {
            return Err(Error::Infeasible(format!(
                "P(pi_1 >= t) = {:.3e} exceeds p_high = {}",
                tails[0], targets.p_high
            )));
        }
        Ok(Self {
            r: ordering.expected_r.clone(),
            tails,
            k_prime,
            p0: targets.p0,
            p_high: targets.p_high,
        })
    }

    pub fn conditionals(&self, tau: f64, delta: f64) -> Vec<f64> {
        self.r.iter().map(|&r| sigmoid_link(r, tau, delta)).collect()
    }

    /// `1 - P(c_1)`.
    pub fn no_anomaly_probability(&self, tau: f64, delta: f64) -> f64 {
        1.0 - sigmoid_link(self.r[0], tau, delta)
    }

    /// `sum_{k>=1} P(C* = k) T_k`.
    pub fn high_contamination_probability(&self, tau: f64, delta: f64) -> f64 {
        let joint = joint_probabilities(&self.conditionals(tau, delta));
        joint[1..].iter().zip(&self.tails).map(|(p, t)| p * t).sum()
    }

    pub fn residuals(&self, tau: f64, delta: f64) -> [f64; 2] {
        [
            self.no_anomaly_probability(tau, delta) - self.p0,
            self.high_contamination_probability(tau, delta) - self.p_high,
        ]
    }

    /// Analytic Jacobian of the residuals with respect to `(tau, delta)`.
    ///
    /// Uses `f2 + p_high = sum_k q_k (T_k - T_{k-1})`, where `q_k` is the
    /// product of the first `k` conditionals.
    pub fn jacobian(&self, tau: f64, delta: f64) -> [[f64; 2]; 2] {
        let p = self.conditionals(tau, delta);
        let d1 = p[0] * (1.0 - p[0]);
        let mut q = 1.0;
        let (mut s_tau, mut s_delta) = (0.0, 0.0);
        let (mut g_tau, mut g_delta) = (0.0, 0.0);
        let mut prev_tail = 0.0;
        for (k, &pk) in p.iter().enumerate() {
            q *= pk;
            s_tau += 1.0 - pk;
            s_delta += (1.0 - pk) * self.r[k];
            let dt = self.tails[k] - prev_tail;
            prev_tail = self.tails[k];
            g_tau -= q * s_tau * dt;
            g_delta -= q * s_delta * dt;
        }
        [[d1, d1 * self.r[0]], [g_tau, g_delta]]
    }

    /// Levenberg-Marquardt from `delta = -1`, `tau` chosen so the first
    /// residual starts at zero, with a bracketing fallback.
    pub fn solve(&self) -> (f64, f64, f64) {
        let lm = self.solve_lm();
        if lm.2 < SOLVED_TOL {
            return lm;
        }
        match self.solve_on_constraint() {
            Some(b) if b.2 < lm.2 => b,
            _ => lm,
        }
    }

    /// `tau` that makes the first residual vanish for a given `delta`.
    fn tau_on_constraint(&self, delta: f64) -> f64 {
        (self.p0 / (1.0 - self.p0)).ln() - delta * self.r[0]
    }

    /// Bisection on `delta` with `tau` tied to `f1 = 0`. Negative `delta`
    /// (more anomalous for larger `r`) is searched first, outward from 0.
    fn solve_on_constraint(&self) -> Option<(f64, f64, f64)> {
        let g = |d: f64| self.residuals(self.tau_on_constraint(d), d)[1];
        let steps: Vec<f64> = (0..100).map(|k| 0.01 * 1.25f64.powi(k)).collect();
        let mut bracket = None;
        'outer: for sign in [-1.0, 1.0] {
            let (mut a, mut ga) = (0.0, g(0.0));
            for &s in &steps {
                let b = sign * s;
                let gb = g(b);
                if ga == 0.0 || ga.signum() != gb.signum() {
                    bracket = Some((a, ga, b));
                    break 'outer;
                }
                (a, ga) = (b, gb);
            }
        }
        let (mut a, mut ga, mut b) = bracket?;
        for _ in 0..200 {
            let m = 0.5 * (a + b);
            let gm = g(m);
            if gm == 0.0 || (b - a).abs() < 1e-15 * (1.0 + m.abs()) {
                a = m;
                break;
            }
            if gm.signum() == ga.signum() {
                (a, ga) = (m, gm);
            } else {
                b = m;
            }
        }
        let f = self.residuals(self.tau_on_constraint(a), a);
        Some((self.tau_on_constraint(a), a, (f[0] * f[0] + f[1] * f[1]).sqrt()))
    }

    fn solve_lm(&self) -> (f64, f64, f64) {
        let logit_p0 = (self.p0 / (1.0 - self.p0)).ln();
        let mut theta = [logit_p0 - INITIAL_DELTA * self.r[0], INITIAL_DELTA];
        let norm = |f: [f64; 2]| (f[0] * f[0] + f[1] * f[1]).sqrt();
        let mut f = self.residuals(theta[0], theta[1]);
        let mut cost = norm(f);
        let mut mu = 1e-3;
        for _ in 0..LM_MAX_ITER {
            if cost < LM_TOL {
                break;
            }
            let j = self.jacobian(theta[0], theta[1]);
            // normal equations (J^T J + mu diag(J^T J)) step = -J^T f
            let a = [
                [j[0][0] * j[0][0] + j[1][0] * j[1][0], j[0][0] * j[0][1] + j[1][0] * j[1][1]],
                [0.0, j[0][1] * j[0][1] + j[1][1] * j[1][1]],
            ];
            let g = [j[0][0] * f[0] + j[1][0] * f[1], j[0][1] * f[0] + j[1][1] * f[1]];
            if g[0].abs().max(g[1].abs()) < 1e-16 {
                break;
            }
            let mut accepted = false;
            for _ in 0..30 {
                let a00 = a[0][0] * (1.0 + mu) + 1e-300;
                let a11 = a[1][1] * (1.0 + mu) + 1e-300;
                let a01 = a[0][1];
                let det = a00 * a11 - a01 * a01;
                if det == 0.0 || !det.is_finite() {
                    mu *= 10.0;
                    continue;
                }
                let step = [(-g[0] * a11 + g[1] * a01) / det, (-g[1] * a00 + g[0] * a01) / det];
                let cand = [theta[0] + step[0], theta[1] + step[1]];
                let fc = self.residuals(cand[0], cand[1]);
                let cc = norm(fc);
                if cc.is_finite() && cc < cost {
                    theta = cand;
                    f = fc;
                    cost = cc;
                    mu = (mu / 3.0).max(1e-12);
                    accepted = true;
                    break;
                }
                mu *= 4.0;
            }
            if !accepted {
                break;
            }
        }
        (theta[0], theta[1], cost)
    }
}

/// Solves for `(tau, delta)`. Fails with [`Error::Infeasible`] when
/// `P(pi_1 >= t) > p_high` or the top-ranked component alone reaches the cap.
pub fn calibrate(post: &MixturePosterior, ordering: &ComponentOrdering, targets: &CalibrationTargets) -> Result<SigmoidParams> {
    let problem = CalibrationProblem::new(post, ordering, targets)?;
    let (tau, delta, residual_norm) = problem.solve();
    let solved = residual_norm < SOLVED_TOL;
    if !solved {
        log::warn!(
            "calibration residual {residual_norm:.2e} above tolerance (p_high = {}, {} components)",
            targets.p_high,
            problem.r.len()
        );
    }
    let cond = problem.conditionals(tau, delta);
    let monotone = cond.windows(2).all(|w| w[1] <= w[0] + 1e-12);
    if !monotone {
        log::warn!("calibrated conditionals increase along the anomaly ranking (delta = {delta:.3})");
    }
    Ok(SigmoidParams {
        tau,
        delta,
        t: targets.t,
        p0: targets.p0,
        p_high: targets.p_high,
        solved,
        retries_used: 0,
        residual_norm,
        k_prime: problem.k_prime,
        monotone,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dpgmm::NiwParams;

    fn niw() -> NiwParams {
        NiwParams { mean: vec![0.0], strength: 10.0, scale: vec![vec![1.0]], dof: 10.0 }
    }

    fn fixture(alphas: &[f64], r: &[f64]) -> (MixturePosterior, ComponentOrdering) {
        let n = alphas.iter().sum::<f64>() as usize;
        let post = MixturePosterior::from_parts(n, alphas.iter().map(|&a| (a, a, niw())).collect()).unwrap();
        let ord = ComponentOrdering::from_expected_r(&post, r);
        (post, ord)
    }

    #[test]
    fn no_anomaly_target_fixes_the_logit() {
        // P(c_1) = 1/(1+e^x) and p0 = 1 - P(c_1) give x = ln(p0/(1-p0))
        let x = (0.01f64 / 0.99).ln();
        assert!((x.abs() - 99f64.ln()).abs() < 1e-12);
        assert!((x + 4.59512).abs() < 1e-5);
        assert!((1.0 - sigmoid_link(0.0, x, 0.0) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn tails_follow_beta_law() {
        let t = tail_probabilities(&[10.0, 20.0, 70.0], 0.15);
        assert!(t[0] < 0.2 && t[1] > 0.9);
        assert_eq!(t[2], 1.0);
        assert!(t.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn solves_two_component_heavy_tail_fixture() {
        // 3 ranked components, the first two reaching above t with high probability
        let (post, ord) = fixture(&[30.0, 150.0, 820.0], &[2.0, 0.5, -0.3]);
        let targets = CalibrationTargets::default();
        let sp = calibrate(&post, &ord, &targets).unwrap();
        assert!(sp.solved, "{sp:?}");
        let prob = CalibrationProblem::new(&post, &ord, &targets).unwrap();
        assert!((prob.no_anomaly_probability(sp.tau, sp.delta) - 0.01).abs() < 1e-6);
        assert!((prob.high_contamination_probability(sp.tau, sp.delta) - 0.01).abs() < 1e-6);
        assert!(sp.delta < 0.0 && sp.monotone);
        assert_eq!(sp.k_prime, 2);
    }

    #[test]
    fn saturated_fit_is_recovered_by_bracketing() {
        // LM alone overshoots into the flat region of this one
        let (post, ord) = fixture(
            &[178.0, 239.0, 1.2, 1.2, 694.0, 659.0, 22.0, 189.0, 16.0],
            &[1.299, 0.644, 0.361, 0.268, 0.123, -0.394, -0.836, -0.848, -0.958],
        );
        let prob = CalibrationProblem::new(&post, &ord, &CalibrationTargets::default()).unwrap();
        let (tau, delta, cost) = prob.solve();
        assert!(cost < SOLVED_TOL, "cost {cost}");
        let f = prob.residuals(tau, delta);
        assert!(f[0].abs() < 1e-6 && f[1].abs() < 1e-6);
        assert!(delta < 0.0);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let (post, ord) = fixture(&[30.0, 40.0, 60.0, 870.0], &[2.0, 1.0, 0.5, -0.3]);
        let prob = CalibrationProblem::new(&post, &ord, &CalibrationTargets { cap: 0.5, t: 0.1, ..Default::default() }).unwrap();
        for &(tau, delta) in &[(-1.0, -0.7), (0.3, 1.2), (-3.0, -2.0)] {
            let j = prob.jacobian(tau, delta);
            let h = 1e-6;
            for (col, (dt, dd)) in [(h, 0.0), (0.0, h)].into_iter().enumerate() {
                let fp = prob.residuals(tau + dt, delta + dd);
                let fm = prob.residuals(tau - dt, delta - dd);
                for row in 0..2 {
                    let fd = (fp[row] - fm[row]) / (2.0 * h);
                    assert!((fd - j[row][col]).abs() < 1e-7, "J[{row}][{col}] {fd} vs {}", j[row][col]);
                }
            }
        }
    }

    #[test]
    fn infeasible_when_first_component_is_heavy() {
        // E[pi_1] = 0.2 < cap but P(pi_1 >= 0.15) is close to one
        let (post, ord) = fixture(&[200.0, 800.0], &[1.0, 0.0]);
        assert!(matches!(calibrate(&post, &ord, &CalibrationTargets::default()), Err(Error::Infeasible(_))));
        let (post, ord) = fixture(&[300.0, 700.0], &[1.0, 0.0]);
        assert!(matches!(calibrate(&post, &ord, &CalibrationTargets::default()), Err(Error::Infeasible(_))));
    }

    #[test]
    fn target_validation() {
        assert!(CalibrationTargets { p0: 0.0, ..Default::default() }.validate().is_err());
        assert!(CalibrationTargets { p_high: 1.0, ..Default::default() }.validate().is_err());
        assert!(CalibrationTargets { t: 0.3, ..Default::default() }.validate().is_err());
        assert!(CalibrationTargets::default().validate().is_ok());
    }
}
