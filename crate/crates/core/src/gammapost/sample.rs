use rand::Rng;
use rand::distr::{weighted::WeightedIndex, Distribution};

use super::calibrate::SigmoidParams;
use super::chain::{joint_probabilities, representative_value_cov, sigmoid_link, truncation_index};
use super::order::ComponentOrdering;
use crate::dpgmm::{sample_dirichlet, MixturePosterior};
use crate::error::Result;

/// Posterior draws per restart.
pub const DEFAULT_DRAWS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerOptions {
    pub draws: usize,
    pub cap: f64,
    /// Evaluate the conditionals at the expected representative values
    /// instead of at sampled component parameters.
    pub use_expected_r: bool,
}

impl Default for SamplerOptions {
    fn default() -> Self {
        Self { draws: DEFAULT_DRAWS, cap: super::calibrate::DEFAULT_CAP, use_expected_r: false }
    }
}

/// Draws contamination samples.
///
/// Each draw samples the ranked weights from the collapsed Dirichlet and
/// `(mu_k, Sigma_k)` for the candidate components, chains the conditionals,
/// picks `k*` from the joint probabilities and emits the sum of the first
/// `k*` weights, or 0 for `k* = 0`. Components whose drawn cumulative weight
/// reaches the cap are never anomalous, so no sample exceeds it.
pub fn sample_gamma<R: Rng + ?Sized>(
    post: &MixturePosterior,
    ordering: &ComponentOrdering,
    params: &SigmoidParams,
    opts: &SamplerOptions,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let alphas = ordering.sorted_alphas(post);
    let k_prime = truncation_index(&ordering.sorted_weights(post), opts.cap)?;
    let mut out = Vec::with_capacity(opts.draws);
    let mut cond = vec![0.0; k_prime];
    for _ in 0..opts.draws {
        let pi = sample_dirichlet(&alphas, rng);
        let mut cum = Vec::with_capacity(k_prime);
        let mut acc = 0.0;
        for &w in &pi[..k_prime] {
            acc += w;
            if opts.cap < 1.0 && acc >= opts.cap {
                break;
            }
            cum.push(acc);
        }
        for (k, c) in cond.iter_mut().enumerate() {
            let r = if opts.use_expected_r {
                ordering.expected_r[k]
            } else {
                let (mu, sigma) = post.components[ordering.order[k]].niw.sample(rng);
                representative_value_cov(&mu, &sigma)
            };
            *c = sigmoid_link(r, params.tau, params.delta);
        }
        let joint = joint_probabilities(&cond[..cum.len()]);
        let k_star = pick(&joint, rng);
        out.push(if k_star == 0 { 0.0 } else { cum[k_star - 1] });
    }
    Ok(out)
}

fn pick<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    match WeightedIndex::new(weights) {
        Ok(d) => d.sample(rng),
        // all mass underflowed to zero
        Err(_) => 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dpgmm::NiwParams;
    use crate::gammapost::calibrate::tail_probabilities;
    use crate::seed;

    fn point_niw(r: f64) -> NiwParams {
        // near point mass at mean r with negligible covariance
        NiwParams { mean: vec![r], strength: 1e12, scale: vec![vec![1e-12 * 1e9]], dof: 1e9 }
    }

    fn fixture() -> (MixturePosterior, ComponentOrdering) {
        let post =
            MixturePosterior::from_parts(1000, vec![(60.0, 60.0, point_niw(2.0)), (940.0, 940.0, point_niw(-0.5))]).unwrap();
        let ord = ComponentOrdering::from_expected_r(&post, &[2.0, -0.5]);
        (post, ord)
    }

    fn params(tau: f64, delta: f64) -> SigmoidParams {
        SigmoidParams {
            tau,
            delta,
            t: 0.15,
            p0: 0.01,
            p_high: 0.01,
            solved: true,
            retries_used: 0,
            residual_norm: 0.0,
            k_prime: 1,
            monotone: true,
        }
    }

    #[test]
    fn forced_zero_first_conditional_gives_all_zero() {
        let (post, ord) = fixture();
        let mut rng = seed::rng(1, &[]);
        let s = sample_gamma(&post, &ord, &params(800.0, 0.0), &SamplerOptions::default(), &mut rng).unwrap();
        assert!(s.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn mean_matches_semi_analytic_value() {
        let (post, ord) = fixture();
        let sp = params(-1.0, -1.0);
        let opts = SamplerOptions { draws: 20_000, cap: 1.0, use_expected_r: false };
        let s = sample_gamma(&post, &ord, &sp, &opts, &mut seed::rng(5, &[])).unwrap();
        let p: Vec<f64> = [2.0, -0.5].iter().map(|&r| sigmoid_link(r, -1.0, -1.0)).collect();
        let joint = joint_probabilities(&p);
        // E[gamma] = sum_k P(C* = k) E[pi_1 + .. + pi_k]
        let analytic = joint[1] * 0.06 + joint[2] * 1.0;
        let n = s.len() as f64;
        let mean = s.iter().sum::<f64>() / n;
        let var = s.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let se = (var / n).sqrt();
        assert!((mean - analytic).abs() < 3.0 * se, "{mean} vs {analytic} (se {se})");
    }

    #[test]
    fn samples_respect_cap() {
        let post = MixturePosterior::from_parts(
            100,
            vec![(8.0, 8.0, point_niw(2.0)), (9.0, 9.0, point_niw(1.5)), (10.0, 10.0, point_niw(1.0)), (73.0, 73.0, point_niw(-1.0))],
        )
        .unwrap();
        let ord = ComponentOrdering::from_expected_r(&post, &[2.0, 1.5, 1.0, -1.0]);
        let s = sample_gamma(&post, &ord, &params(-20.0, 0.0), &SamplerOptions::default(), &mut seed::rng(2, &[])).unwrap();
        assert!(s.iter().all(|&g| (0.0..0.25).contains(&g)));
        assert!(s.iter().any(|&g| g > 0.0));
    }

    #[test]
    fn tail_mass_matches_target_at_expected_r() {
        let (post, ord) = fixture();
        let tails = tail_probabilities(&ord.sorted_alphas(&post), 0.05);
        let sp = params(-1.0, -1.0);
        let p1 = sigmoid_link(2.0, -1.0, -1.0);
        let expected = p1 * tails[0];
        let opts = SamplerOptions { draws: 40_000, cap: 0.25, use_expected_r: true };
        let s = sample_gamma(&post, &ord, &sp, &opts, &mut seed::rng(3, &[])).unwrap();
        let frac = s.iter().filter(|&&g| g >= 0.05).count() as f64 / s.len() as f64;
        let se = (expected * (1.0 - expected) / s.len() as f64).sqrt();
        assert!((frac - expected).abs() < 3.0 * se, "{frac} vs {expected}");
    }
}
