//! Built-in unsupervised anomaly detectors.
//!
//! All detectors return one score per row, higher meaning more anomalous.
//! Neighbour search is brute force, O(N^2 d).

use std::cmp::Ordering;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::Real;
use crate::scorespace::{read_records, RawDataset};

pub const DEFAULT_K: usize = 10;
pub const DEFAULT_TREES: usize = 100;
pub const DEFAULT_SUBSAMPLE: usize = 256;

/// Added to the mean reachability distance so duplicate-only neighbourhoods
/// keep a finite local reachability density.
const LRD_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum DetectorKind {
    Knn { k: Option<usize> },
    Lof { k: Option<usize> },
    IForest { trees: Option<usize>, subsample: Option<usize> },
    Hbos { bins: Option<usize> },
    External { path: PathBuf },
}

/// A detector plus its settings. Unset parameters resolve to the defaults
/// once the dataset size is known.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectorSpec {
    pub kind: DetectorKind,
    pub seed: u64,
}

impl DetectorSpec {
    pub fn knn() -> Self {
        Self { kind: DetectorKind::Knn { k: None }, seed: 0 }
    }

    pub fn lof() -> Self {
        Self { kind: DetectorKind::Lof { k: None }, seed: 0 }
    }

    pub fn iforest() -> Self {
        Self { kind: DetectorKind::IForest { trees: None, subsample: None }, seed: 0 }
    }

    pub fn hbos() -> Self {
        Self { kind: DetectorKind::Hbos { bins: None }, seed: 0 }
    }

    pub fn external(path: impl Into<PathBuf>) -> Self {
        Self { kind: DetectorKind::External { path: path.into() }, seed: 0 }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn builtin_names() -> &'static [&'static str] {
        &["knn", "lof", "iforest", "hbos"]
    }

    pub fn name(&self) -> String {
        match &self.kind {
            DetectorKind::Knn { .. } => "knn".into(),
            DetectorKind::Lof { .. } => "lof".into(),
            DetectorKind::IForest { .. } => "iforest".into(),
            DetectorKind::Hbos { .. } => "hbos".into(),
            DetectorKind::External { path } => path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "external".into()),
        }
    }

    /// Scores every row of `data`. Errors carry the detector name.
    pub fn score<T: Real>(&self, data: &RawDataset<T>) -> Result<Vec<T>> {
        let n = data.len();
        let out = match &self.kind {
            DetectorKind::Knn { k } => knn_scores(data, k.unwrap_or(DEFAULT_K.min(n - 1))),
            DetectorKind::Lof { k } => lof_scores(data, k.unwrap_or(DEFAULT_K.min(n - 1))),
            DetectorKind::IForest { trees, subsample } => iforest_scores(
                data,
                trees.unwrap_or(DEFAULT_TREES),
                subsample.unwrap_or(DEFAULT_SUBSAMPLE.min(n)),
                self.seed,
            ),
            DetectorKind::Hbos { bins } => {
                hbos_scores(data, bins.unwrap_or_else(|| default_bins(n)))
            }
            DetectorKind::External { path } => read_external(path, n),
        };
        out.map_err(|e| match e {
            Error::Detector { .. } => e,
            other => Error::Detector { detector: self.name(), msg: other.to_string() },
        })
    }
}

impl fmt::Display for DetectorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            DetectorKind::Knn { k: Some(k) } => write!(f, "knn:k={k}"),
            DetectorKind::Lof { k: Some(k) } => write!(f, "lof:k={k}"),
            DetectorKind::IForest { trees, subsample } if trees.is_some() || subsample.is_some() => {
                write!(f, "iforest:")?;
                let mut parts = Vec::new();
                if let Some(t) = trees {
                    parts.push(format!("trees={t}"));
                }
                if let Some(s) = subsample {
                    parts.push(format!("subsample={s}"));
                }
                write!(f, "{}", parts.join(";"))
            }
            DetectorKind::Hbos { bins: Some(b) } => write!(f, "hbos:bins={b}"),
            DetectorKind::External { path } => write!(f, "external:{}", path.display()),
            _ => write!(f, "{}", self.name()),
        }
    }
}

/// Parses `knn`, `knn:k=5`, `iforest:trees=50;subsample=128`, `hbos:bins=20`
/// or `external:<path>`.
impl FromStr for DetectorSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (head, params) = match s.split_once(':') {
            Some((h, p)) => (h.trim(), p.trim()),
            None => (s.trim(), ""),
        };
        if head.eq_ignore_ascii_case("external") {
            if params.is_empty() {
                return Err(Error::InvalidInput("external detector needs a path".into()));
            }
            return Ok(Self::external(params));
        }
        let mut kv = Vec::new();
        for p in params.split(';').filter(|p| !p.trim().is_empty()) {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| Error::InvalidInput(format!("bad detector parameter `{p}`")))?;
            let v: usize = v
                .trim()
                .parse()
                .map_err(|_| Error::InvalidInput(format!("bad value in `{p}`")))?;
            kv.push((k.trim().to_ascii_lowercase(), v));
        }
        let get = |name: &str| kv.iter().find(|(k, _)| k == name).map(|&(_, v)| v);
        let check = |allowed: &[&str]| -> Result<()> {
            match kv.iter().find(|(k, _)| !allowed.contains(&k.as_str())) {
                Some((k, _)) => Err(Error::InvalidInput(format!("unknown parameter `{k}` for {head}"))),
                None => Ok(()),
            }
        };
        let kind = match head.to_ascii_lowercase().as_str() {
            "knn" => {
                check(&["k"])?;
                DetectorKind::Knn { k: get("k") }
            }
            "lof" => {
                check(&["k"])?;
                DetectorKind::Lof { k: get("k") }
            }
            "iforest" => {
                check(&["trees", "subsample"])?;
                DetectorKind::IForest { trees: get("trees"), subsample: get("subsample") }
            }
            "hbos" => {
                check(&["bins"])?;
                DetectorKind::Hbos { bins: get("bins") }
            }
            other => return Err(Error::InvalidInput(format!("unknown detector `{other}`"))),
        };
        Ok(Self { kind, seed: 0 })
    }
}

pub fn default_bins(n: usize) -> usize {
    ((n as f64).sqrt().ceil() as usize).max(2)
}

fn euclidean<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<T>()
        .sqrt()
}

fn cmp_t<T: Real>(a: &T, b: &T) -> Ordering {
    a.partial_cmp(b).unwrap_or(Ordering::Equal)
}

/// Distances from row `i` to all other rows, self excluded.
fn distances_from<T: Real>(data: &RawDataset<T>, i: usize) -> Vec<(usize, T)> {
    let xi = data.row(i);
    (0..data.len())
        .filter(|&j| j != i)
        .map(|j| (j, euclidean(xi, data.row(j))))
        .collect()
}

fn kth_distance<T: Real>(dists: &mut [(usize, T)], k: usize) -> T {
    let (_, kth, _) = dists.select_nth_unstable_by(k - 1, |a, b| cmp_t(&a.1, &b.1));
    kth.1
}

/// Distance to the k-th nearest other row.
pub fn knn_scores<T: Real>(data: &RawDataset<T>, k: usize) -> Result<Vec<T>> {
    let n = data.len();
    if k < 1 || k > n - 1 {
        return Err(Error::InvalidParameter { name: "k", msg: format!("need 1 <= k <= {}, got {k}", n - 1) });
    }
    Ok((0..n)
        .into_par_iter()
        .map(|i| kth_distance(&mut distances_from(data, i), k))
        .collect())
}

/// Local outlier factor with tie-inclusive k-neighbourhoods.
pub fn lof_scores<T: Real>(data: &RawDataset<T>, k: usize) -> Result<Vec<T>> {
    let n = data.len();
    if k < 2 || k > n - 1 {
        return Err(Error::InvalidParameter { name: "k", msg: format!("need 2 <= k <= {}, got {k}", n - 1) });
    }
    let neigh: Vec<(T, Vec<(usize, T)>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut d = distances_from(data, i);
            let kd = kth_distance(&mut d, k);
            let mut nb: Vec<(usize, T)> = d.into_iter().filter(|&(_, dist)| dist <= kd).collect();
            nb.sort_unstable_by_key(|&(j, _)| j);
            (kd, nb)
        })
        .collect();
    let floor = T::lit(LRD_FLOOR);
    let lrd: Vec<T> = neigh
        .par_iter()
        .map(|(_, nb)| {
            let reach: T = nb.iter().map(|&(j, d)| d.max(neigh[j].0)).sum();
            T::one() / (reach / T::of_usize(nb.len()) + floor)
        })
        .collect();
    Ok(neigh
        .par_iter()
        .enumerate()
        .map(|(i, (_, nb))| {
            let s: T = nb.iter().map(|&(j, _)| lrd[j]).sum();
            s / T::of_usize(nb.len()) / lrd[i]
        })
        .collect())
}

/// Average path length of an unsuccessful BST search among `n` points.
pub fn average_path_length(n: usize) -> f64 {
    const EULER: f64 = 0.577_215_664_901_532_9;
    match n {
        0 | 1 => 0.0,
        2 => 1.0,
        _ => {
            let n = n as f64;
            2.0 * ((n - 1.0).ln() + EULER) - 2.0 * (n - 1.0) / n
        }
    }
}

enum Node<T> {
    Leaf { size: usize },
    Split { feature: usize, value: T, left: Box<Node<T>>, right: Box<Node<T>> },
}

impl<T: Real> Node<T> {
    fn build(data: &[&[T]], idx: Vec<usize>, depth: usize, limit: usize, rng: &mut ChaCha8Rng) -> Self {
        if depth >= limit || idx.len() <= 1 {
            return Node::Leaf { size: idx.len() };
        }
        let dim = data[0].len();
        let ranges: Vec<(usize, T, T)> = (0..dim)
            .filter_map(|f| {
                let (lo, hi) = idx.iter().fold((T::infinity(), T::neg_infinity()), |(lo, hi), &i| {
                    (lo.min(data[i][f]), hi.max(data[i][f]))
                });
                (hi > lo).then_some((f, lo, hi))
            })
            .collect();
        if ranges.is_empty() {
            return Node::Leaf { size: idx.len() };
        }
        let (feature, lo, hi) = ranges[rng.random_range(0..ranges.len())];
        let value = lo + T::lit(rng.random::<f64>()) * (hi - lo);
        let (l, r): (Vec<usize>, Vec<usize>) = idx.into_iter().partition(|&i| data[i][feature] < value);
        Node::Split {
            feature,
            value,
            left: Box::new(Self::build(data, l, depth + 1, limit, rng)),
            right: Box::new(Self::build(data, r, depth + 1, limit, rng)),
        }
    }

    fn path_length(&self, x: &[T]) -> f64 {
        let mut node = self;
        let mut depth = 0.0;
        loop {
            match node {
                Node::Leaf { size } => return depth + average_path_length(*size),
                Node::Split { feature, value, left, right } => {
                    node = if x[*feature] < *value { left } else { right };
                    depth += 1.0;
                }
            }
        }
    }
}

/// Isolation forest score `2^(-E[h(x)] / c(subsample))`.
///
/// Rows are put in a canonical (lexicographic) order before subsampling, so
/// the forest depends only on the multiset of rows and the seed.
pub fn iforest_scores<T: Real>(data: &RawDataset<T>, trees: usize, subsample: usize, seed: u64) -> Result<Vec<T>> {
    let n = data.len();
    if trees < 1 {
        return Err(Error::InvalidParameter { name: "trees", msg: "need at least one tree".into() });
    }
    if subsample < 2 || subsample > n {
        return Err(Error::InvalidParameter { name: "subsample", msg: format!("need 2 <= subsample <= {n}, got {subsample}") });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        data.row(a)
            .iter()
            .zip(data.row(b))
            .map(|(x, y)| cmp_t(x, y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    });
    let canonical: Vec<&[T]> = order.iter().map(|&i| data.row(i)).collect();
    let limit = (subsample as f64).log2().ceil() as usize;
    let forest: Vec<Node<T>> = (0..trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t as u64);
            let idx = index::sample(&mut rng, n, subsample).into_vec();
            Node::build(&canonical, idx, 0, limit, &mut rng)
        })
        .collect();
    let c = average_path_length(subsample);
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let x = data.row(i);
            let mean_h = forest.iter().map(|t| t.path_length(x)).sum::<f64>() / trees as f64;
            T::lit(2f64.powf(-mean_h / c))
        })
        .collect())
}

/// Histogram-based outlier score: sum over features of `-ln p_bin`, where
/// `p_bin = (count + 1) / (N + bins)` on equal-width bins.
pub fn hbos_scores<T: Real>(data: &RawDataset<T>, bins: usize) -> Result<Vec<T>> {
    if bins < 2 {
        return Err(Error::InvalidParameter { name: "bins", msg: format!("need at least 2 bins, got {bins}") });
    }
    let n = data.len();
    let mut scores = vec![T::zero(); n];
    let nb = T::of_usize(bins);
    for f in 0..data.dim() {
        let col: Vec<T> = data.rows().iter().map(|r| r[f]).collect();
        let lo = col.iter().copied().fold(T::infinity(), T::min);
        let hi = col.iter().copied().fold(T::neg_infinity(), T::max);
        let width = hi - lo;
        let bin_of = |x: T| -> usize {
            if width <= T::zero() {
                return 0;
            }
            ((x - lo) / width * nb).floor().to_usize().unwrap_or(0).min(bins - 1)
        };
        let mut counts = vec![0usize; bins];
        for &x in &col {
            counts[bin_of(x)] += 1;
        }
        let denom = T::of_usize(n + bins);
        for (s, &x) in scores.iter_mut().zip(&col) {
            let p = T::of_usize(counts[bin_of(x)] + 1) / denom;
            *s = *s - p.ln();
        }
    }
    Ok(scores)
}

fn read_external<T: Real>(path: &std::path::Path, n: usize) -> Result<Vec<T>> {
    let records = read_records(path)?;
    let mut out = Vec::with_capacity(records.len());
    for (i, (line, rec)) in records.iter().enumerate() {
        if rec.len() != 1 {
            return Err(Error::Parse { line: *line, msg: format!("expected one column, found {}", rec.len()) });
        }
        match rec[0].trim().parse::<f64>() {
            Ok(v) if v.is_finite() => out.push(T::lit(v)),
            Ok(_) => return Err(Error::Parse { line: *line, msg: "non-finite score".into() }),
            // tolerate a single header line
            Err(_) if i == 0 => continue,
            Err(_) => return Err(Error::Parse { line: *line, msg: format!("`{}` is not a number", rec[0]) }),
        }
    }
    if out.len() != n {
        return Err(Error::InvalidInput(format!("external file has {} scores, dataset has {n} rows", out.len())));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds(rows: Vec<Vec<f64>>) -> RawDataset {
        RawDataset::new("t", rows, None).unwrap()
    }

    fn line(xs: &[f64]) -> RawDataset {
        ds(xs.iter().map(|&x| vec![x]).collect())
    }

    /// Textbook LOF computed with explicit loops, for cross-checking.
    fn brute_lof(xs: &[f64], k: usize) -> Vec<f64> {
        let n = xs.len();
        let d = |a: usize, b: usize| (xs[a] - xs[b]).abs();
        let kdist: Vec<f64> = (0..n)
            .map(|i| {
                let mut v: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| d(i, j)).collect();
                v.sort_by(|a, b| a.partial_cmp(b).unwrap());
                v[k - 1]
            })
            .collect();
        let nbrs: Vec<Vec<usize>> = (0..n)
            .map(|i| (0..n).filter(|&j| j != i && d(i, j) <= kdist[i]).collect())
            .collect();
        let lrd: Vec<f64> = (0..n)
            .map(|i| {
                let s: f64 = nbrs[i].iter().map(|&j| d(i, j).max(kdist[j])).sum();
                nbrs[i].len() as f64 / s
            })
            .collect();
        (0..n)
            .map(|i| nbrs[i].iter().map(|&j| lrd[j]).sum::<f64>() / nbrs[i].len() as f64 / lrd[i])
            .collect()
    }

    #[test]
    fn knn_collinear_points() {
        assert_eq!(knn_scores(&line(&[0.0, 1.0, 10.0]), 1).unwrap(), vec![1.0, 1.0, 9.0]);
    }

    #[test]
    fn knn_identical_points() {
        assert_eq!(knn_scores(&line(&[3.0; 5]), 2).unwrap(), vec![0.0; 5]);
    }

    #[test]
    fn knn_k_range() {
        let d = line(&[0.0, 1.0, 2.0]);
        assert!(knn_scores(&d, 0).is_err());
        assert!(knn_scores(&d, 3).is_err());
    }

    #[test]
    fn knn_max_k_is_farthest_point() {
        let xs = [0.0, 1.5, 4.0, -2.0, 7.0];
        let s = knn_scores(&line(&xs), xs.len() - 1).unwrap();
        for (i, v) in s.iter().enumerate() {
            let far = xs.iter().map(|x| (x - xs[i]).abs()).fold(0.0, f64::max);
            assert_eq!(*v, far);
        }
    }

    #[test]
    fn lof_grid_interior_near_one() {
        let xs: Vec<f64> = (0..10).map(f64::from).collect();
        let got = lof_scores(&line(&xs), 2).unwrap();
        let want = brute_lof(&xs, 2);
        for i in 0..10 {
            assert!((got[i] - want[i]).abs() < 1e-6, "point {i}: {} vs {}", got[i], want[i]);
        }
        for i in 3..=6 {
            assert!((0.9..=1.1).contains(&got[i]), "interior LOF {}", got[i]);
        }
    }

    #[test]
    fn lof_isolated_point_is_largest() {
        let mut rows: Vec<Vec<f64>> = (0..20).map(|i| vec![(i % 5) as f64 * 0.1, (i / 5) as f64 * 0.1]).collect();
        rows.push(vec![5.0, 5.0]);
        let s = lof_scores(&ds(rows), 5).unwrap();
        let out = s[20];
        assert!(s[..20].iter().all(|&v| v < out));
        assert!(out > 1.5);
    }

    #[test]
    fn lof_all_duplicates_is_one() {
        let s = lof_scores(&line(&[2.0; 6]), 3).unwrap();
        assert!(s.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn lof_k_range() {
        assert!(lof_scores(&line(&[0.0, 1.0, 2.0]), 1).is_err());
        assert!(lof_scores(&line(&[0.0, 1.0, 2.0]), 3).is_err());
    }

    fn blob_with_outlier(seed: u64) -> RawDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows: Vec<Vec<f64>> = (0..100)
            .map(|_| vec![rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5])
            .collect();
        rows.push(vec![6.0, 6.0]);
        ds(rows)
    }

    #[test]
    fn iforest_finds_extreme_point() {
        let mut hits = 0;
        for seed in 0..20 {
            let d = blob_with_outlier(seed);
            let s = iforest_scores(&d, 100, 64, seed).unwrap();
            let best = s.iter().cloned().enumerate().max_by(|a, b| a.1.partial_cmp(&b.1).unwrap()).unwrap().0;
            hits += usize::from(best == 100);
        }
        assert!(hits >= 19, "extreme point was top-scored {hits}/20 times");
    }

    #[test]
    fn iforest_bounded_and_deterministic() {
        let d = blob_with_outlier(3);
        let a = iforest_scores(&d, 50, 32, 42).unwrap();
        let b = iforest_scores(&d, 50, 32, 42).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|&v| v > 0.0 && v < 1.0));
        let c = iforest_scores(&d, 50, 32, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn iforest_parameter_checks() {
        let d = line(&[0.0, 1.0, 2.0]);
        assert!(iforest_scores(&d, 0, 2, 0).is_err());
        assert!(iforest_scores(&d, 10, 1, 0).is_err());
        assert!(iforest_scores(&d, 10, 4, 0).is_err());
        let s = iforest_scores(&line(&[1.0; 4]), 10, 4, 0).unwrap();
        assert!(s.iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn hbos_lone_point_scores_higher() {
        let mut xs = vec![0.0; 99];
        xs.push(10.0);
        let s = hbos_scores(&line(&xs), 10).unwrap();
        // 99 points in the first bin, one in the last: -ln(100/110) vs -ln(2/110)
        assert!((s[0] - (110.0f64 / 100.0).ln()).abs() < 1e-12);
        assert!((s[99] - (110.0f64 / 2.0).ln()).abs() < 1e-12);
        assert!(s[99] > s[0]);
    }

    #[test]
    fn hbos_constant_feature_is_uniform() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 4.0]).collect();
        let with = hbos_scores(&ds(rows.clone()), 3).unwrap();
        let without = hbos_scores(&ds(rows.iter().map(|r| vec![r[0]]).collect()), 3).unwrap();
        let shift = with[0] - without[0];
        assert!(with.iter().zip(&without).all(|(a, b)| (a - b - shift).abs() < 1e-12));
    }

    #[test]
    fn hbos_affine_invariant() {
        let rows: Vec<Vec<f64>> = (0..30).map(|i| vec![(i * i % 17) as f64, (i % 7) as f64 * 0.5]).collect();
        let scaled: Vec<Vec<f64>> = rows.iter().map(|r| vec![r[0] * 4.0 + 8.0, r[1] * 2.0 - 1.0]).collect();
        assert_eq!(hbos_scores(&ds(rows), 5).unwrap(), hbos_scores(&ds(scaled), 5).unwrap());
        assert!(hbos_scores(&line(&[0.0, 1.0]), 1).is_err());
    }

    #[test]
    fn permutation_equivariance() {
        let d = blob_with_outlier(9);
        let n = d.len();
        let perm: Vec<usize> = (0..n).map(|i| (i * 37 + 11) % n).collect();
        let pd = ds(perm.iter().map(|&i| d.row(i).to_vec()).collect());
        let specs = ["knn:k=5", "lof:k=5", "iforest:trees=20;subsample=64", "hbos"];
        for spec in specs {
            let spec: DetectorSpec = spec.parse().unwrap();
            let a = spec.score(&d).unwrap();
            let b = spec.score(&pd).unwrap();
            for (pi, &i) in perm.iter().enumerate() {
                assert!((b[pi] - a[i]).abs() < 1e-12, "{spec}");
            }
            assert_eq!(a.len(), n);
            assert!(a.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn duplicated_rows_get_equal_scores() {
        let d = line(&[0.0, 1.0, 1.0, 3.0, 7.0]);
        let s = knn_scores(&d, 2).unwrap();
        assert_eq!(s[1], s[2]);
    }

    #[test]
    fn spec_parsing_round_trip() {
        for s in ["knn", "knn:k=5", "lof:k=3", "iforest:trees=50;subsample=128", "hbos:bins=7", "external:/tmp/x.csv"] {
            let spec: DetectorSpec = s.parse().unwrap();
            assert_eq!(spec.to_string(), s);
        }
        assert!("nope".parse::<DetectorSpec>().is_err());
        assert!("knn:bins=3".parse::<DetectorSpec>().is_err());
        assert!("external".parse::<DetectorSpec>().is_err());
    }

    #[test]
    fn errors_name_the_detector() {
        let spec: DetectorSpec = "knn:k=50".parse().unwrap();
        match spec.score(&line(&[0.0, 1.0, 2.0])) {
            Err(Error::Detector { detector, .. }) => assert_eq!(detector, "knn"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
