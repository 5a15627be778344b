//! Truncated stick-breaking Dirichlet-process Gaussian mixture fitted by
//! mean-field coordinate-ascent variational inference.
//!
//! Variational family: `q(v_k) = Beta(a_k, b_k)` for the first `K - 1` sticks
//! (the last stick is fixed to 1), `q(mu_k, Sigma_k) = NIW(m_k, lambda_k,
//! Psi_k, nu_k)` and categorical responsibilities per row. With the
//! component factors at their conjugate optimum the bound has the closed form
//!
//! ```text
//! L = sum_k [ln B(a_k, b_k) - ln B(1, alpha)]
//!   + sum_k [ln Z(post_k) - ln Z(prior)] - N M / 2 ln(2 pi) + H(R)
//! ```
//!
//! which is evaluated after every M-step.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::beta::ln_beta;
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};
use crate::scorespace::ScoreMatrix;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const MIN_ITER: usize = 10;

/// How responsibilities are seeded before the first M-step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// Uniform random responsibilities, normalised per row.
    Random,
    /// k-means++ style seeding: centres drawn from the data, each row
    /// hard-assigned to its nearest centre.
    #[default]
    RandomCentres,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpgmmConfig {
    /// Truncation level K.
    pub max_components: usize,
    /// DP concentration.
    pub concentration: f64,
    /// Prior mean; `None` means the zero vector.
    pub prior_mean: Option<Vec<f64>>,
    /// Prior scale matrix (row-major); `None` means the identity.
    pub prior_scale: Option<Vec<Vec<f64>>>,
    /// Prior degrees of freedom; `None` means `M + 2`.
    pub prior_dof: Option<f64>,
    pub prior_mean_strength: f64,
    pub max_iter: usize,
    pub elbo_tol: f64,
    pub reg_covar: f64,
    pub init: Init,
    pub seed: u64,
}

impl Default for DpgmmConfig {
    fn default() -> Self {
        Self {
            max_components: 100,
            concentration: 1.0,
            prior_mean: None,
            prior_scale: None,
            prior_dof: None,
            prior_mean_strength: 1.0,
            max_iter: 500,
            elbo_tol: 1e-3,
            reg_covar: 1e-6,
            init: Init::default(),
            seed: 0,
        }
    }
}

impl DpgmmConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Prior NIW for `dim`-dimensional data after validating the settings.
    pub fn prior(&self, dim: usize) -> Result<NiwParams> {
        if self.max_components < 1 {
            return Err(Error::InvalidParameter { name: "max_components", msg: "must be at least 1".into() });
        }
        for (name, v) in [
            ("concentration", self.concentration),
            ("prior_mean_strength", self.prior_mean_strength),
            ("elbo_tol", self.elbo_tol),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter { name, msg: format!("must be positive, got {v}") });
            }
        }
        if !(self.reg_covar >= 0.0) {
            return Err(Error::InvalidParameter { name: "reg_covar", msg: "must be non-negative".into() });
        }
        let mean = match &self.prior_mean {
            Some(m) if m.len() != dim => {
                return Err(Error::InvalidParameter { name: "prior_mean", msg: format!("expected length {dim}") })
            }
            Some(m) => m.clone(),
            None => vec![0.0; dim],
        };
        let scale = match &self.prior_scale {
            Some(s) => {
                if s.len() != dim || s.iter().any(|r| r.len() != dim) {
                    return Err(Error::InvalidParameter { name: "prior_scale", msg: format!("expected {dim}x{dim}") });
                }
                let m = DMatrix::from_fn(dim, dim, |i, j| s[i][j]);
                if (&m - m.transpose()).amax() > 1e-12 || m.clone().cholesky().is_none() {
                    return Err(Error::InvalidParameter { name: "prior_scale", msg: "must be symmetric positive definite".into() });
                }
                s.clone()
            }
            None => identity_rows(dim),
        };
        let dof = self.prior_dof.unwrap_or(dim as f64 + 2.0);
        if !(dof > dim as f64 - 1.0) {
            return Err(Error::InvalidParameter { name: "prior_dof", msg: format!("must exceed {}", dim as f64 - 1.0) });
        }
        Ok(NiwParams { mean, strength: self.prior_mean_strength, scale, dof })
    }
}

fn identity_rows(dim: usize) -> Vec<Vec<f64>> {
    (0..dim).map(|i| (0..dim).map(|j| f64::from(u8::from(i == j))).collect()).collect()
}

/// Normal-Inverse-Wishart parameters: `Sigma ~ IW(scale, dof)`,
/// `mu | Sigma ~ N(mean, Sigma / strength)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NiwParams {
    pub mean: Vec<f64>,
    pub strength: f64,
    /// Row-major scale matrix.
    pub scale: Vec<Vec<f64>>,
    pub dof: f64,
}

impl NiwParams {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.mean)
    }

    pub fn scale_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_fn(d, d, |i, j| self.scale[i][j])
    }

    /// `E[Sigma] = Psi / (nu - M - 1)`, defined for `nu > M + 1`.
    pub fn expected_covariance(&self) -> Option<DMatrix<f64>> {
        let denom = self.dof - self.dim() as f64 - 1.0;
        (denom > 0.0).then(|| self.scale_matrix() / denom)
    }

    /// Log normaliser of the NIW density.
    pub fn log_normalizer(&self) -> f64 {
        let d = self.dim() as f64;
        let chol = self.scale_matrix().cholesky().expect("NIW scale must be SPD");
        let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        0.5 * d * LN_2PI - 0.5 * d * self.strength.ln() + 0.5 * self.dof * d * std::f64::consts::LN_2
            + ln_multigamma(0.5 * self.dof, self.dim())
            - 0.5 * self.dof * logdet
    }

    /// Draws `(mu, Sigma)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (DVector<f64>, DMatrix<f64>) {
        let sigma = sample_inverse_wishart(&self.scale_matrix(), self.dof, rng);
        let l = sigma.clone().cholesky().expect("inverse-Wishart draw is SPD").l();
        let z = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        let mu = self.mean_vector() + l * z / self.strength.sqrt();
        (mu, sigma)
    }
}

/// `ln Gamma_d(x)`.
pub fn ln_multigamma(x: f64, d: usize) -> f64 {
    let df = d as f64;
    0.25 * df * (df - 1.0) * std::f64::consts::PI.ln()
        + (1..=d).map(|j| ln_gamma(x + 0.5 * (1.0 - j as f64))).sum::<f64>()
}

/// Inverse-Wishart draw via the Bartlett decomposition of the Wishart
/// precision `W(scale^-1, dof)`.
pub fn sample_inverse_wishart<R: Rng + ?Sized>(scale: &DMatrix<f64>, dof: f64, rng: &mut R) -> DMatrix<f64> {
    let d = scale.nrows();
    let prec_scale = scale.clone().try_inverse().expect("scale matrix must be invertible");
    let l = prec_scale
        .cholesky()
        .expect("scale inverse must be SPD")
        .l();
    let mut a = DMatrix::<f64>::zeros(d, d);
    for i in 0..d {
        let chi = ChiSquared::new(dof - i as f64).expect("dof must exceed dim - 1");
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = rng.sample(StandardNormal);
        }
    }
    let la = l * a;
    let precision = &la * la.transpose();
    let sigma = precision
        .cholesky()
        .map(|c| c.inverse())
        .expect("Wishart draw is SPD");
    (&sigma + sigma.transpose()) * 0.5
}

/// Dirichlet draw through normalised Gamma variates.
pub fn sample_dirichlet<R: Rng + ?Sized>(alpha: &[f64], rng: &mut R) -> Vec<f64> {
    let mut g: Vec<f64> = alpha
        .iter()
        .map(|&a| Gamma::new(a, 1.0).expect("Dirichlet parameter must be positive").sample(rng))
        .collect();
    let s: f64 = g.iter().sum();
    if s > 0.0 {
        g.iter_mut().for_each(|v| *v /= s);
    } else {
        // every Gamma draw underflowed: fall back to the mean
        let total: f64 = alpha.iter().sum();
        g.iter_mut().zip(alpha).for_each(|(v, a)| *v = a / total);
    }
    g
}

/// Result of the variational fit before collapsing to the active components.
#[derive(Debug, Clone, PartialEq)]
pub struct RawFit {
    pub n: usize,
    pub dim: usize,
    pub concentration: f64,
    /// Soft counts `N_k` for all K truncated components.
    pub counts: Vec<f64>,
    /// Number of rows whose most responsible component is `k`.
    pub hard_counts: Vec<usize>,
    pub components: Vec<NiwParams>,
    pub stick_a: Vec<f64>,
    pub stick_b: Vec<f64>,
    /// N x K responsibilities.
    pub responsibilities: DMatrix<f64>,
}

impl RawFit {
    /// `E[pi_k]` under the stick-breaking factors.
    pub fn expected_stick_weights(&self) -> Vec<f64> {
        let k = self.counts.len();
        let mut out = Vec::with_capacity(k);
        let mut rest = 1.0;
        for j in 0..k {
            if j + 1 == k {
                out.push(rest);
            } else {
                let ev = self.stick_a[j] / (self.stick_a[j] + self.stick_b[j]);
                out.push(rest * ev);
                rest *= 1.0 - ev;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub elbo_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub seed_used: u64,
}

/// One active component of the collapsed finite mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    /// Index in the truncated fit.
    pub source_index: usize,
    pub dirichlet_alpha: f64,
    pub expected_weight: f64,
    /// Soft count `N_k`.
    pub count: f64,
    pub niw: NiwParams,
}

/// Finite Dirichlet mixture over the active components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixturePosterior {
    pub n: usize,
    pub dim: usize,
    pub components: Vec<MixtureComponent>,
}

impl MixturePosterior {
    /// Builds a posterior from explicit parts; `E[pi]` is derived from alpha.
    pub fn from_parts(n: usize, parts: Vec<(f64, f64, NiwParams)>) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::InvalidInput("posterior needs at least one component".into()));
        }
        let dim = parts[0].2.dim();
        let total: f64 = parts.iter().map(|p| p.0).sum();
        let mut components = Vec::with_capacity(parts.len());
        for (i, (alpha, count, niw)) in parts.into_iter().enumerate() {
            if !(alpha > 0.0) || niw.dim() != dim || !(niw.dof > dim as f64 - 1.0) || !(niw.strength > 0.0) {
                return Err(Error::InvalidInput(format!("component {i} has invalid parameters")));
            }
            if niw.scale_matrix().cholesky().is_none() {
                return Err(Error::NotPositiveDefinite { component: i });
            }
            components.push(MixtureComponent {
                source_index: i,
                dirichlet_alpha: alpha,
                expected_weight: alpha / total,
                count,
                niw,
            });
        }
        Ok(Self { n, dim, components })
    }

    pub fn k_active(&self) -> usize {
        self.components.len()
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.dirichlet_alpha).collect()
    }

    pub fn expected_weights(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.expected_weight).collect()
    }
}

/// Fits the mixture and collapses it onto its active components.
pub fn fit(scores: &ScoreMatrix, config: &DpgmmConfig) -> Result<(MixturePosterior, FitDiagnostics)> {
    let (raw, diag) = fit_raw(scores, config)?;
    Ok((collapse_active(&raw, config), diag))
}

/// Runs coordinate-ascent VI on the rows of `scores`.
pub fn fit_raw(scores: &ScoreMatrix, config: &DpgmmConfig) -> Result<(RawFit, FitDiagnostics)> {
    let x = scores.to_dmatrix();
    let (n, dim) = x.shape();
    if n == 0 || dim == 0 {
        return Err(Error::InvalidInput("empty score matrix".into()));
    }
    if !scores.is_transformed() {
        log::warn!("fitting untransformed scores");
    }
    if n <= dim {
        log::warn!("only {n} rows for {dim} score dimensions");
    }
    let prior = config.prior(dim)?;
    let k = config.max_components;
    let rows: Vec<Vec<f64>> = (0..n).map(|i| x.row(i).iter().copied().collect()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let feat = Features::new(&rows);
    let mut resp = initial_responsibilities(&rows, k, config.init, &mut rng);
    let mut state = m_step(&feat, &resp, &prior, config)?;
    let mut trace = vec![elbo(&state, &resp, &prior, config.concentration)];
    let mut converged = false;
    let mut iterations = 0;

    for it in 1..=config.max_iter {
        iterations = it;
        resp = e_step(&feat, &state);
        state = m_step(&feat, &resp, &prior, config)?;
        let cur = elbo(&state, &resp, &prior, config.concentration);
        let prev = *trace.last().expect("trace is non-empty");
        trace.push(cur);
        if it >= MIN_ITER && (cur - prev).abs() < config.elbo_tol {
            converged = true;
            break;
        }
    }

    let hard_counts = hard_assignment_counts(&resp);
    let raw = RawFit {
        n,
        dim,
        concentration: config.concentration,
        counts: state.counts,
        hard_counts,
        components: state.components,
        stick_a: state.stick_a,
        stick_b: state.stick_b,
        responsibilities: resp.to_dmatrix(),
    };
    let diag = FitDiagnostics { elbo_trace: trace, iterations, converged, seed_used: config.seed };
    Ok((raw, diag))
}

/// Keeps the components owning at least one row by argmax responsibility and
/// spreads the remaining mass (the DP concentration plus the soft counts of
/// inactive components) uniformly over them:
/// `alpha_k = N_k + (alpha + sum_inactive N_j) / K_active`.
pub fn collapse_active(raw: &RawFit, _config: &DpgmmConfig) -> MixturePosterior {
    let active: Vec<usize> = (0..raw.counts.len()).filter(|&k| raw.hard_counts[k] > 0).collect();
    let inactive_mass: f64 = (0..raw.counts.len())
        .filter(|k| raw.hard_counts[*k] == 0)
        .map(|k| raw.counts[k])
        .sum();
    let share = (raw.concentration + inactive_mass) / active.len() as f64;
    let total = raw.n as f64 + raw.concentration;
    let components = active
        .iter()
        .map(|&k| {
            let alpha = raw.counts[k] + share;
            MixtureComponent {
                source_index: k,
                dirichlet_alpha: alpha,
                expected_weight: alpha / total,
                count: raw.counts[k],
                niw: raw.components[k].clone(),
            }
        })
        .collect();
    MixturePosterior { n: raw.n, dim: raw.dim, components }
}

/// Component weights and one component's `(mu, Sigma)` drawn from the
/// collapsed posterior.
pub fn sample_component_params<R: Rng + ?Sized>(
    post: &MixturePosterior,
    k: usize,
    rng: &mut R,
) -> (Vec<f64>, DVector<f64>, DMatrix<f64>) {
    let pi = sample_dirichlet(&post.alphas(), rng);
    let (mu, sigma) = post.components[k].niw.sample(rng);
    (pi, mu, sigma)
}

struct VariationalState {
    counts: Vec<f64>,
    components: Vec<NiwParams>,
    /// Inverse scale matrices.
    prec: Vec<DMatrix<f64>>,
    logdet: Vec<f64>,
    stick_a: Vec<f64>,
    stick_b: Vec<f64>,
}

/// Row-major `N x K` responsibilities.
struct Resp {
    k: usize,
    data: Vec<f64>,
    /// `-sum r ln r`, kept alongside so the bound needs no extra logs.
    entropy: f64,
}

impl Resp {
    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.k..(i + 1) * self.k]
    }

    fn n(&self) -> usize {
        self.data.len() / self.k
    }

    fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n(), self.k, |i, j| self.data[i * self.k + j])
    }
}

fn initial_responsibilities(rows: &[Vec<f64>], k: usize, init: Init, rng: &mut ChaCha8Rng) -> Resp {
    let n = rows.len();
    let mut data = vec![0.0f64; n * k];
    match init {
        Init::Random => {
            for row in data.chunks_mut(k) {
                let mut s = 0.0;
                for v in row.iter_mut() {
                    *v = rng.random();
                    s += *v;
                }
                row.iter_mut().for_each(|v| *v /= s);
            }
        }
        Init::RandomCentres => {
            let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
            let n_centres = k.min(n);
            let mut centres = vec![rng.random_range(0..n)];
            let mut d2: Vec<f64> = rows.iter().map(|r| sq(r, &rows[centres[0]])).collect();
            while centres.len() < n_centres {
                let total: f64 = d2.iter().sum();
                let next = if total > 0.0 {
                    let mut u = rng.random::<f64>() * total;
                    let mut pick = n - 1;
                    for (i, &d) in d2.iter().enumerate() {
                        if u < d {
                            pick = i;
                            break;
                        }
                        u -= d;
                    }
                    pick
                } else {
                    rng.random_range(0..n)
                };
                centres.push(next);
                for (i, r) in rows.iter().enumerate() {
                    d2[i] = d2[i].min(sq(r, &rows[next]));
                }
            }
            for (i, r) in rows.iter().enumerate() {
                let best = centres
                    .iter()
                    .enumerate()
                    .map(|(j, &c)| (j, sq(r, &rows[c])))
                    .fold((0, f64::INFINITY), |acc, (j, d)| if d < acc.1 { (j, d) } else { acc })
                    .0;
                data[i * k + best] = 1.0;
            }
        }
    }
    let entropy = -data.iter().filter(|&&r| r > 0.0).map(|&r| r * r.ln()).sum::<f64>();
    Resp { k, data, entropy }
}

/// Per-row features `[1, x_a, x_a x_b (b <= a)]`, both as `N x P` and `P x N`.
struct Features {
    dim: usize,
    f: DMatrix<f64>,
    ft: DMatrix<f64>,
}

impl Features {
    fn new(rows: &[Vec<f64>]) -> Self {
        let dim = rows[0].len();
        let p = 1 + dim + dim * (dim + 1) / 2;
        let mut ft = DMatrix::<f64>::zeros(p, rows.len());
        for (i, x) in rows.iter().enumerate() {
            let mut col = ft.column_mut(i);
            col[0] = 1.0;
            let mut t = 1;
            for &v in x {
                col[t] = v;
                t += 1;
            }
            for a in 0..dim {
                for b in 0..=a {
                    col[t] = x[a] * x[b];
                    t += 1;
                }
            }
        }
        Self { dim, f: ft.transpose(), ft }
    }

    fn n(&self) -> usize {
        self.ft.ncols()
    }
}

fn m_step(feat: &Features, resp: &Resp, prior: &NiwParams, config: &DpgmmConfig) -> Result<VariationalState> {
    let k = resp.k;
    let dim = feat.dim;
    let m0 = prior.mean_vector();
    let psi0 = prior.scale_matrix();

    // row-major N x K responsibilities read as a column-major K x N matrix
    let rt = nalgebra::DMatrixView::from_slice(&resp.data, k, feat.n());
    let moments = rt * &feat.f;

    let mut counts = vec![0.0; k];
    let mut components = Vec::with_capacity(k);
    let mut prec = Vec::with_capacity(k);
    let mut logdet = Vec::with_capacity(k);
    for j in 0..k {
        let nk = moments[(j, 0)].max(0.0);
        counts[j] = nk;
        let mut xbar = DVector::<f64>::zeros(dim);
        let mut scatter = DMatrix::<f64>::zeros(dim, dim);
        if nk > 0.0 {
            for a in 0..dim {
                xbar[a] = moments[(j, 1 + a)] / nk;
            }
            let mut t = 1 + dim;
            for a in 0..dim {
                for b in 0..=a {
                    let v = moments[(j, t)] - nk * xbar[a] * xbar[b];
                    scatter[(a, b)] = v;
                    scatter[(b, a)] = v;
                    t += 1;
                }
            }
        }
        let lambda = prior.strength + nk;
        let mean = (&m0 * prior.strength + &xbar * nk) / lambda;
        let diff = &xbar - &m0;
        let mut psi = &psi0 + scatter + (&diff * diff.transpose()) * (prior.strength * nk / lambda);
        psi = (&psi + psi.transpose()) * 0.5;
        let factor = match psi.clone().cholesky() {
            Some(c) => c,
            None => {
                for a in 0..dim {
                    psi[(a, a)] += config.reg_covar;
                }
                psi.clone().cholesky().ok_or(Error::NotPositiveDefinite { component: j })?
            }
        };
        logdet.push(2.0 * factor.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>());
        prec.push(factor.inverse());
        components.push(NiwParams {
            mean: mean.iter().copied().collect(),
            strength: lambda,
            scale: (0..dim).map(|a| (0..dim).map(|b| psi[(a, b)]).collect()).collect(),
            dof: prior.dof + nk,
        });
    }

    let mut stick_a = Vec::with_capacity(k.saturating_sub(1));
    let mut stick_b = Vec::with_capacity(k.saturating_sub(1));
    let mut tail: f64 = counts.iter().sum();
    for &nk in counts.iter().take(k.saturating_sub(1)) {
        tail -= nk;
        stick_a.push(1.0 + nk);
        stick_b.push(config.concentration + tail.max(0.0));
    }
    Ok(VariationalState { counts, components, prec, logdet, stick_a, stick_b })
}

fn expected_log_weights(state: &VariationalState) -> Vec<f64> {
    let k = state.counts.len();
    let mut out = Vec::with_capacity(k);
    let mut acc = 0.0;
    for j in 0..k {
        if j + 1 == k {
            out.push(acc);
        } else {
            let (a, b) = (state.stick_a[j], state.stick_b[j]);
            let dab = digamma(a + b);
            out.push(acc + digamma(a) - dab);
            acc += digamma(b) - dab;
        }
    }
    out
}

const ROWS_PER_TASK: usize = 64;

fn e_step(feat: &Features, state: &VariationalState) -> Resp {
    let k = state.counts.len();
    let dim = feat.dim;
    let log_w = expected_log_weights(state);
    let d = dim as f64;

    // log rho_ik = c_k - nu_k / 2 (x - m_k)' W_k (x - m_k), linear in the features
    let mut coef = DMatrix::<f64>::zeros(feat.ft.nrows(), k);
    for j in 0..k {
        let c = &state.components[j];
        let w = &state.prec[j];
        let m = DVector::from_column_slice(&c.mean);
        let wm = w * &m;
        let e_logdet_prec = (1..=dim).map(|a| digamma(0.5 * (c.dof + 1.0 - a as f64))).sum::<f64>()
            + d * std::f64::consts::LN_2
            - state.logdet[j];
        let base = log_w[j] + 0.5 * e_logdet_prec - 0.5 * d * LN_2PI - 0.5 * d / c.strength;
        let h = 0.5 * c.dof;
        let mut col = coef.column_mut(j);
        col[0] = base - h * m.dot(&wm);
        for a in 0..dim {
            col[1 + a] = c.dof * wm[a];
        }
        let mut t = 1 + dim;
        for a in 0..dim {
            for b in 0..=a {
                col[t] = if a == b { -h * w[(a, a)] } else { -c.dof * w[(a, b)] };
                t += 1;
            }
        }
    }
    // K x N column-major, i.e. row-major N x K
    let logits = coef.tr_mul(&feat.ft);
    let mut data: Vec<f64> = logits.as_slice().to_vec();

    let entropies: Vec<f64> = data
        .par_chunks_mut(k * ROWS_PER_TASK)
        .map(|block| {
            let mut h = 0.0;
            for out in block.chunks_mut(k) {
                let mx = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                let mut sd = 0.0;
                for v in out.iter_mut() {
                    let dv = *v - mx;
                    let e = if dv < -745.0 { 0.0 } else { dv.exp() };
                    *v = e;
                    s += e;
                    sd += e * dv;
                }
                let inv = 1.0 / s;
                out.iter_mut().for_each(|v| *v *= inv);
                // -sum r ln r with ln r = dv - ln s
                h += s.ln() - sd * inv;
            }
            h
        })
        .collect();
    Resp { k, data, entropy: entropies.iter().sum() }
}

fn elbo(state: &VariationalState, resp: &Resp, prior: &NiwParams, alpha: f64) -> f64 {
    let n = resp.n();
    let dim = prior.dim() as f64;
    let prior_beta = ln_beta(1.0, alpha);
    let sticks: f64 = state
        .stick_a
        .iter()
        .zip(&state.stick_b)
        .map(|(&a, &b)| ln_beta(a, b) - prior_beta)
        .sum();
    let z0 = prior.log_normalizer();
    let niw: f64 = state
        .components
        .iter()
        .zip(&state.logdet)
        .map(|(c, &ld)| {
            let lz = 0.5 * dim * LN_2PI - 0.5 * dim * c.strength.ln()
                + 0.5 * c.dof * dim * std::f64::consts::LN_2
                + ln_multigamma(0.5 * c.dof, c.dim())
                - 0.5 * c.dof * ld;
            lz - z0
        })
        .sum();
    sticks + niw - 0.5 * n as f64 * dim * LN_2PI + resp.entropy
}

fn hard_assignment_counts(resp: &Resp) -> Vec<usize> {
    let mut counts = vec![0usize; resp.k];
    for i in 0..resp.n() {
        let row = resp.row(i);
        let mut best = 0;
        for j in 1..resp.k {
            if row[j] > row[best] {
                best = j;
            }
        }
        counts[best] += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::Normal;

    fn matrix(cols: Vec<Vec<f64>>) -> ScoreMatrix {
        let names = (0..cols.len()).map(|j| format!("c{j}")).collect();
        ScoreMatrix::from_columns(cols, names).unwrap()
    }

    fn blobs(spec: &[(usize, f64, f64)], seed: u64) -> ScoreMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c0 = Vec::new();
        let mut c1 = Vec::new();
        for &(n, cx, sd) in spec {
            let nd = Normal::new(0.0, sd).unwrap();
            for _ in 0..n {
                c0.push(cx + nd.sample(&mut rng));
                c1.push(cx + nd.sample(&mut rng));
            }
        }
        matrix(vec![c0, c1])
    }

    #[test]
    fn single_blob_has_one_dominant_component() {
        let s = blobs(&[(500, 0.0, 0.3)], 1);
        let (post, diag) = fit(&s, &DpgmmConfig::default().with_seed(3)).unwrap();
        let top = post.expected_weights().into_iter().fold(0.0, f64::max);
        assert!(top >= 0.98, "top weight {top}, K_active {}", post.k_active());
        assert_eq!(post.k_active(), 1);
        assert!(diag.iterations >= MIN_ITER);
    }

    #[test]
    fn two_blobs_recover_proportions() {
        let s = blobs(&[(950, 0.0, 0.3), (50, 4.0, 0.3)], 2);
        let (post, _) = fit(&s, &DpgmmConfig::default().with_seed(5)).unwrap();
        let mut w = post.expected_weights();
        w.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert_eq!(w.len(), 2, "weights {w:?}");
        assert!((w[0] - 0.95).abs() <= 0.02 && (w[1] - 0.05).abs() <= 0.02, "{w:?}");
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let s = blobs(&[(200, 0.0, 0.5), (20, 3.0, 0.2)], 4);
        let cfg = DpgmmConfig { max_components: 20, ..DpgmmConfig::default() }.with_seed(11);
        let a = fit(&s, &cfg).unwrap();
        let b = fit(&s, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn elbo_is_monotone_and_responsibilities_normalised() {
        let s = blobs(&[(300, 0.0, 1.0), (40, 3.0, 0.4), (10, -3.0, 0.2)], 6);
        for init in [Init::Random, Init::RandomCentres] {
            let cfg = DpgmmConfig { max_components: 30, init, elbo_tol: 1e-9, ..DpgmmConfig::default() };
            let (raw, diag) = fit_raw(&s, &cfg).unwrap();
            for w in diag.elbo_trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-8, "{init:?}: ELBO fell from {} to {}", w[0], w[1]);
            }
            for i in 0..raw.n {
                let r: f64 = raw.responsibilities.row(i).iter().sum();
                assert!((r - 1.0).abs() < 1e-12);
            }
            assert!((raw.counts.iter().sum::<f64>() - raw.n as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn one_dimensional_means_match_cluster_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a: Vec<f64> = (0..300).map(|_| -3.0 + 0.3 * rng.sample::<f64, _>(StandardNormal)).collect();
        let b: Vec<f64> = (0..300).map(|_| 3.0 + 0.3 * rng.sample::<f64, _>(StandardNormal)).collect();
        let ma = a.iter().sum::<f64>() / 300.0;
        let mb = b.iter().sum::<f64>() / 300.0;
        let s = matrix(vec![a.into_iter().chain(b).collect()]);
        let (post, _) = fit(&s, &DpgmmConfig { max_components: 10, ..DpgmmConfig::default() }).unwrap();
        assert_eq!(post.k_active(), 2);
        let mut means: Vec<f64> = post.components.iter().map(|c| c.niw.mean[0]).collect();
        means.sort_by(|x, y| x.partial_cmp(y).unwrap());
        assert!((means[0] - ma).abs() < 0.05 && (means[1] - mb).abs() < 0.05, "{means:?} vs {ma} {mb}");
    }

    #[test]
    fn posterior_invariants() {
        let s = blobs(&[(300, 0.0, 1.0), (30, 4.0, 0.3)], 12);
        let (post, _) = fit(&s, &DpgmmConfig::default()).unwrap();
        let sum_w: f64 = post.expected_weights().iter().sum();
        assert!((sum_w - 1.0).abs() < 1e-9);
        let sum_alpha: f64 = post.alphas().iter().sum();
        assert!((sum_alpha - (330.0 + 1.0)).abs() < 1e-6);
        assert!(post.k_active() <= 100);
        for c in &post.components {
            assert!(c.niw.scale_matrix().cholesky().is_some());
            assert!(c.count >= 0.0);
        }
    }

    fn raw_with_counts(counts: Vec<f64>, hard: Vec<usize>) -> RawFit {
        let k = counts.len();
        let n = hard.iter().sum();
        let prior = DpgmmConfig::default().prior(1).unwrap();
        RawFit {
            n,
            dim: 1,
            concentration: 1.0,
            counts,
            hard_counts: hard,
            components: vec![prior; k],
            stick_a: vec![1.0; k - 1],
            stick_b: vec![1.0; k - 1],
            responsibilities: DMatrix::zeros(0, k),
        }
    }

    #[test]
    fn collapse_spreads_inactive_mass_evenly() {
        // three active components plus soft mass on an inactive one
        let raw = raw_with_counts(vec![89.6, 8.0, 2.0, 0.4], vec![90, 8, 2, 0]);
        let post = collapse_active(&raw, &DpgmmConfig::default());
        let m = 1.0 + 0.4;
        let want = [89.6 + m / 3.0, 8.0 + m / 3.0, 2.0 + m / 3.0];
        for (c, w) in post.components.iter().zip(want) {
            assert!((c.dirichlet_alpha - w).abs() < 1e-12);
        }
        let total: f64 = post.alphas().iter().sum();
        assert!((total - (100.0 + 1.0)).abs() < 1e-12);
        assert!((post.expected_weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn collapse_single_component() {
        let raw = raw_with_counts(vec![10.0, 0.0, 0.0], vec![10, 0, 0]);
        let post = collapse_active(&raw, &DpgmmConfig::default());
        assert_eq!(post.k_active(), 1);
        assert_eq!(post.components[0].expected_weight, 1.0);
    }

    #[test]
    fn dirichlet_symmetric_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m: f64 = (0..100_000).map(|_| sample_dirichlet(&[1.0, 1.0], &mut rng)[0]).sum::<f64>() / 1e5;
        assert!((m - 0.5).abs() < 0.01);
    }

    #[test]
    fn inverse_wishart_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let psi = DMatrix::<f64>::identity(2, 2);
        let nu = 100.0;
        let draws = 20_000;
        let mut acc = DMatrix::<f64>::zeros(2, 2);
        for _ in 0..draws {
            acc += sample_inverse_wishart(&psi, nu, &mut rng);
        }
        acc /= draws as f64;
        let expect = 1.0 / (nu - 2.0 - 1.0);
        assert!((acc[(0, 0)] - expect).abs() / expect < 0.05);
        assert!((acc[(1, 1)] - expect).abs() / expect < 0.05);
        assert!(acc[(0, 1)].abs() < 0.05 * expect);
    }

    #[test]
    fn mean_draws_collapse_for_large_strength() {
        let niw = NiwParams { mean: vec![1.5, -2.0], strength: 1e12, scale: identity_rows(2), dof: 10.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let (mu, sigma) = niw.sample(&mut rng);
            assert!((mu[0] - 1.5).abs() < 1e-4 && (mu[1] + 2.0).abs() < 1e-4);
            assert!(sigma.clone().cholesky().is_some());
        }
    }

    #[test]
    fn log_normalizer_matches_one_dimensional_closed_form() {
        // M = 1: IW(psi, nu) is inverse-gamma(nu/2, psi/2)
        let niw = NiwParams { mean: vec![0.0], strength: 2.0, scale: vec![vec![3.0]], dof: 5.0 };
        let want = 0.5 * (2.0 * std::f64::consts::PI / 2.0).ln() + ln_gamma(2.5) - 2.5 * (3.0f64 / 2.0).ln();
        assert!((niw.log_normalizer() - want).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let bad = DpgmmConfig { max_components: 0, ..DpgmmConfig::default() };
        assert!(bad.prior(2).is_err());
        let bad = DpgmmConfig { prior_dof: Some(0.5), ..DpgmmConfig::default() };
        assert!(bad.prior(2).is_err());
        let bad = DpgmmConfig { prior_scale: Some(vec![vec![1.0, 2.0], vec![2.0, 1.0]]), ..DpgmmConfig::default() };
        assert!(bad.prior(2).is_err());
        let p = DpgmmConfig::default().prior(3).unwrap();
        assert_eq!(p.dof, 5.0);
        assert_eq!(p.mean, vec![0.0; 3]);
    }
}
