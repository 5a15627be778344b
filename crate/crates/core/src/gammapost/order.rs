use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::chain::representative_value_cov;
use crate::dpgmm::MixturePosterior;
use crate::seed;

/// NIW draws per component when estimating `E[r]`.
pub const DEFAULT_MC_DRAWS: usize = 1000;

const ORDER_STREAM: u64 = 0x006f_7264_6572;

/// Active components ranked from most to least anomalous.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentOrdering {
    /// Component indices into [`MixturePosterior::components`], most anomalous first.
    pub order: Vec<usize>,
    /// `E[r]` of `order[i]`; non-increasing.
    pub expected_r: Vec<f64>,
}

impl ComponentOrdering {
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Sorts by `E[r]` descending, then `E[pi]` descending, then index.
    pub fn from_expected_r(post: &MixturePosterior, expected_r: &[f64]) -> Self {
        assert_eq!(expected_r.len(), post.k_active());
        let mut order: Vec<usize> = (0..expected_r.len()).collect();
        order.sort_by(|&a, &b| {
            expected_r[b]
                .partial_cmp(&expected_r[a])
                .unwrap_or(Ordering::Equal)
                .then_with(|| {
                    post.components[b]
                        .expected_weight
                        .partial_cmp(&post.components[a].expected_weight)
                        .unwrap_or(Ordering::Equal)
                })
                .then(a.cmp(&b))
        });
        let expected_r = order.iter().map(|&k| expected_r[k]).collect();
        Self { order, expected_r }
    }

    /// Dirichlet parameters in ranked order.
    pub fn sorted_alphas(&self, post: &MixturePosterior) -> Vec<f64> {
        self.order.iter().map(|&k| post.components[k].dirichlet_alpha).collect()
    }

    /// Expected weights in ranked order.
    pub fn sorted_weights(&self, post: &MixturePosterior) -> Vec<f64> {
        self.order.iter().map(|&k| post.components[k].expected_weight).collect()
    }
}

/// Monte Carlo estimate of `E[r(mu_k, Sigma_k)]` for every component.
pub fn expected_representative_values(post: &MixturePosterior, mc_draws: usize, seed: u64) -> Vec<f64> {
    let draws = mc_draws.max(1);
    post.components
        .par_iter()
        .enumerate()
        .map(|(k, c)| {
            let mut rng = seed::rng(seed, &[ORDER_STREAM, k as u64]);
            (0..draws)
                .map(|_| {
                    let (mu, sigma) = c.niw.sample(&mut rng);
                    representative_value_cov(&mu, &sigma)
                })
                .sum::<f64>()
                / draws as f64
        })
        .collect()
}

pub fn order_components(post: &MixturePosterior, mc_draws: usize, seed: u64) -> ComponentOrdering {
    let er = expected_representative_values(post, mc_draws, seed);
    ComponentOrdering::from_expected_r(post, &er)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dpgmm::NiwParams;
    use crate::gammapost::chain::representative_value;

    fn niw(mean: f64, strength: f64, var: f64, dof: f64) -> NiwParams {
        let m = 2;
        let s = var * (dof - m as f64 - 1.0);
        NiwParams { mean: vec![mean; m], strength, scale: vec![vec![s, 0.0], vec![0.0, s]], dof }
    }

    #[test]
    fn sorts_by_expected_r() {
        let post = MixturePosterior::from_parts(10, vec![(5.0, 5.0, niw(0.0, 1.0, 1.0, 5.0)), (5.0, 5.0, niw(0.0, 1.0, 1.0, 5.0))]).unwrap();
        let o = ComponentOrdering::from_expected_r(&post, &[3.0, -1.0]);
        assert_eq!(o.order, vec![0, 1]);
        let o = ComponentOrdering::from_expected_r(&post, &[-1.0, 3.0]);
        assert_eq!(o.order, vec![1, 0]);
        assert_eq!(o.expected_r, vec![3.0, -1.0]);
    }

    #[test]
    fn ties_prefer_heavier_component() {
        let post = MixturePosterior::from_parts(10, vec![(1.0, 1.0, niw(0.0, 1.0, 1.0, 5.0)), (2.0, 2.0, niw(0.0, 1.0, 1.0, 5.0)), (7.0, 7.0, niw(0.0, 1.0, 1.0, 5.0))]).unwrap();
        let o = ComponentOrdering::from_expected_r(&post, &[0.5, 0.5, 0.1]);
        assert_eq!(o.order, vec![1, 0, 2]);
    }

    #[test]
    fn point_mass_limit_matches_plugin_value() {
        let c = niw(1.3, 1e10, 0.25, 1e8);
        let post = MixturePosterior::from_parts(10, vec![(1.0, 1.0, c.clone())]).unwrap();
        let er = expected_representative_values(&post, 1000, 4)[0];
        let cov = c.expected_covariance().unwrap();
        let plugin = representative_value(&c.mean, &[cov[(0, 0)], cov[(1, 1)]]);
        assert!((er - plugin).abs() < 1e-3, "{er} vs {plugin}");
    }

    #[test]
    fn deterministic_given_seed() {
        let post = MixturePosterior::from_parts(
            10,
            vec![(3.0, 3.0, niw(0.5, 4.0, 0.3, 8.0)), (7.0, 7.0, niw(-0.2, 9.0, 0.6, 12.0))],
        )
        .unwrap();
        assert_eq!(order_components(&post, 200, 9), order_components(&post, 200, 9));
        let o = order_components(&post, 200, 9);
        assert_eq!(o.order, vec![0, 1]);
        assert!(o.expected_r.windows(2).all(|w| w[0] >= w[1]));
    }
}
