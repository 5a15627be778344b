//! Per-component anomalousness and the chained joint probabilities.

use std::ops::{Mul, Sub};

use num_traits::{One, Zero};

use crate::error::{Error, Result};
use crate::num::Real;

/// Representative anomalousness of a component:
/// `r = (1/M) sum_j mu_j / (1 + sqrt(Sigma_jj))`.
///
/// Only the diagonal of the covariance is used.
pub fn representative_value<T: Real>(mean: &[T], variances: &[T]) -> T {
    assert_eq!(mean.len(), variances.len(), "mean and variance lengths differ");
    let m = T::of_usize(mean.len());
    mean.iter()
        .zip(variances)
        .map(|(&mu, &v)| mu / (T::one() + v.max(T::zero()).sqrt()))
        .sum::<T>()
        / m
}

/// [`representative_value`] taking a full covariance matrix.
pub fn representative_value_cov(mean: &nalgebra::DVector<f64>, cov: &nalgebra::DMatrix<f64>) -> f64 {
    let diag: Vec<f64> = cov.diagonal().iter().copied().collect();
    representative_value(mean.as_slice(), &diag)
}

/// `P(c_k | c_{k-1}) = 1 / (1 + exp(tau + delta * r))`, evaluated without overflow.
pub fn sigmoid_link<T: Real>(r: T, tau: T, delta: T) -> T {
    let x = tau + delta * r;
    if x > T::zero() {
        let e = (-x).exp();
        e / (T::one() + e)
    } else {
        T::one() / (T::one() + x.exp())
    }
}

/// Probability that exactly the first `k` ranked components are anomalous,
/// for `k = 0..=K`, given the conditionals `p_1..p_K`:
///
/// `P(C* = 0) = 1 - p_1`,
/// `P(C* = k) = p_1 ... p_k (1 - p_{k+1})` with `p_{K+1} = 0`.
///
/// Generic over any type with `0`, `1`, subtraction and multiplication, so it
/// runs on floats and exact rationals alike.
pub fn joint_probabilities<T>(conditionals: &[T]) -> Vec<T>
where
    T: Clone + Zero + One + Sub<Output = T> + Mul<Output = T>,
{
    let k = conditionals.len();
    let mut out = Vec::with_capacity(k + 1);
    let mut prefix = T::one();
    for i in 0..=k {
        let next = conditionals.get(i).cloned().unwrap_or_else(T::zero);
        out.push(prefix.clone() * (T::one() - next.clone()));
        prefix = prefix * next;
    }
    out
}

/// Largest `k` with `sum_{j<=k} E[pi_j] < cap` (1-based), given expected
/// weights in ranked order. `cap >= 1` keeps every component.
pub fn truncation_index(sorted_weights: &[f64], cap: f64) -> Result<usize> {
    let first = *sorted_weights
        .first()
        .ok_or_else(|| Error::InvalidInput("no components".into()))?;
    if cap >= 1.0 {
        return Ok(sorted_weights.len());
    }
    if first >= cap {
        return Err(Error::Infeasible(format!(
            "expected weight of the most anomalous component ({first:.4}) is not below the cap {cap}"
        )));
    }
    let mut acc = 0.0;
    let mut k_prime = 0;
    for (i, &w) in sorted_weights.iter().enumerate() {
        acc += w;
        if acc < cap {
            k_prime = i + 1;
        } else {
            break;
        }
    }
    Ok(k_prime)
}

/// Zeroes every conditional past the truncation index.
pub fn truncate_conditionals<T: Real>(sorted_weights: &[f64], conditionals: &[T], cap: f64) -> Result<Vec<T>> {
    let k_prime = truncation_index(sorted_weights, cap)?;
    Ok(conditionals
        .iter()
        .enumerate()
        .map(|(i, &p)| if i < k_prime { p } else { T::zero() })
        .collect())
}
