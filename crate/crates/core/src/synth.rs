//! Labeled synthetic datasets: Gaussian clusters plus uniformly scattered
//! anomalies.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dpgmm::sample_dirichlet;
use crate::error::{Error, Result};
use crate::scorespace::RawDataset;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub dim: usize,
    pub clusters: usize,
    /// Fraction of rows that are anomalies.
    pub contamination: f64,
    /// Cluster centres are drawn from `[-spread, spread]^dim`.
    pub spread: f64,
    /// Anomalies are drawn from `[-box, box]^dim`.
    pub anomaly_box: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { n: 2000, dim: 4, clusters: 3, contamination: 0.05, spread: 4.0, anomaly_box: 10.0, seed: 0 }
    }
}

/// Suite of configurations with 2 to 4 clusters and contamination in
/// `[0.01, 0.10]`, all derived from `master`.
pub fn suite(count: usize, n: usize, master: u64) -> Vec<SynthConfig> {
    (0..count)
        .map(|i| {
            let mut rng = seed::rng(master, &[0x5359_4e54, i as u64]);
            SynthConfig {
                n,
                clusters: rng.random_range(2..=4),
                contamination: rng.random_range(0.01..=0.10),
                seed: rng.random(),
                ..SynthConfig::default()
            }
        })
        .collect()
}

pub fn generate(cfg: &SynthConfig) -> Result<RawDataset> {
    if !(0.0..1.0).contains(&cfg.contamination) {
        return Err(Error::InvalidParameter { name: "contamination", msg: "must lie in [0, 1)".into() });
    }
    if cfg.clusters == 0 || cfg.dim == 0 {
        return Err(Error::InvalidParameter { name: "clusters", msg: "clusters and dim must be positive".into() });
    }
    let mut rng = seed::rng(cfg.seed, &[]);
    let n_anom = (cfg.contamination * cfg.n as f64).round() as usize;
    let n_in = cfg.n - n_anom;

    let centres: Vec<Vec<f64>> =
        (0..cfg.clusters).map(|_| (0..cfg.dim).map(|_| rng.random_range(-cfg.spread..=cfg.spread)).collect()).collect();
    let scales: Vec<f64> = (0..cfg.clusters).map(|_| rng.random_range(0.5..=1.5)).collect();
    let props = sample_dirichlet(&vec![5.0; cfg.clusters], &mut rng);
    let mut sizes: Vec<usize> = props.iter().map(|p| (p * n_in as f64).floor() as usize).collect();
    let short = n_in - sizes.iter().sum::<usize>();
    sizes[0] += short;

    let std_normal = Normal::new(0.0, 1.0).expect("valid normal");
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(cfg.n);
    let mut labels = Vec::with_capacity(cfg.n);
    for (c, &size) in sizes.iter().enumerate() {
        for _ in 0..size {
            rows.push(centres[c].iter().map(|&m| m + scales[c] * std_normal.sample(&mut rng)).collect());
            labels.push(0);
        }
    }
    for _ in 0..n_anom {
        rows.push((0..cfg.dim).map(|_| rng.random_range(-cfg.anomaly_box..=cfg.anomaly_box)).collect());
        labels.push(1);
    }
    // interleave so row order carries no information
    let mut idx: Vec<usize> = (0..cfg.n).collect();
    rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng);
    let rows = idx.iter().map(|&i| rows[i].clone()).collect();
    let labels = idx.iter().map(|&i| labels[i]).collect();
    RawDataset::new(format!("synth-{}", cfg.seed), rows, Some(labels))
}
