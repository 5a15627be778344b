//! Metrics against ground-truth labels.

use serde::{Deserialize, Serialize};

use crate::gammapost::GammaPosterior;

pub fn mae(gamma_hat: f64, gamma_true: f64) -> f64 {
    (gamma_hat - gamma_true).abs()
}

/// Number of rows flagged for a contamination estimate, rounded half away
/// from zero.
pub fn flagged_count(n: usize, gamma_hat: f64) -> usize {
    ((gamma_hat.clamp(0.0, 1.0) * n as f64).round() as usize).min(n)
}

/// Flags the `round(gamma_hat N)` highest scores. Ties go to the lower index.
pub fn threshold_predictions(scores: &[f64], gamma_hat: f64) -> Vec<u8> {
    let budget = flagged_count(scores.len(), gamma_hat);
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut out = vec![0u8; scores.len()];
    for &i in &idx[..budget] {
        out[i] = 1;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn new(predictions: &[u8], labels: &[u8]) -> Self {
        assert_eq!(predictions.len(), labels.len(), "predictions and labels differ in length");
        let mut c = Confusion::default();
        for (&p, &l) in predictions.iter().zip(labels) {
            match (p != 0, l != 0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }
}

/// F1 of the anomaly class. `defined` is false when nothing was predicted or
/// nothing is anomalous; the value is then 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1 {
    pub value: f64,
    pub defined: bool,
}

pub fn f1_score(predictions: &[u8], labels: &[u8]) -> F1 {
    let c = Confusion::new(predictions, labels);
    if c.tp + c.fp == 0 || c.tp + c.fn_ == 0 {
        return F1 { value: 0.0, defined: false };
    }
    F1 { value: 2.0 * c.tp as f64 / (2 * c.tp + c.fp + c.fn_) as f64, defined: true }
}

/// `(F1(gamma*) - F1(gamma_hat)) / F1(gamma_hat)`; `None` when the denominator
/// vanishes. Identical predictions give exactly 0.
pub fn f1_deterioration(scores: &[f64], labels: &[u8], gamma_true: f64, gamma_hat: f64) -> Option<f64> {
    let at_true = threshold_predictions(scores, gamma_true);
    let at_hat = threshold_predictions(scores, gamma_hat);
    if at_true == at_hat {
        return Some(0.0);
    }
    let f_true = f1_score(&at_true, labels).value;
    let f_hat = f1_score(&at_hat, labels).value;
    if f_hat == 0.0 {
        log::debug!("F1 deterioration undefined: F1 at the estimate is 0");
        return None;
    }
    Some((f_true - f_hat) / f_hat)
}

/// Columns reaching the best F1 at the true contamination; ties are kept.
pub fn select_best_detectors(columns: &[Vec<f64>], labels: &[u8], gamma_true: f64) -> Vec<usize> {
    let f1s: Vec<f64> =
        columns.iter().map(|c| f1_score(&threshold_predictions(c, gamma_true), labels).value).collect();
    let best = f1s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (0..columns.len()).filter(|&j| f1s[j] == best).collect()
}

/// False positive and false negative rates; `None` unless both classes occur.
pub fn fpr_fnr(predictions: &[u8], labels: &[u8]) -> Option<(f64, f64)> {
    let c = Confusion::new(predictions, labels);
    let neg = c.fp + c.tn;
    let pos = c.tp + c.fn_;
    if neg == 0 || pos == 0 {
        return None;
    }
    Some((c.fp as f64 / neg as f64, c.fn_ as f64 / pos as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPoint {
    pub expected: f64,
    pub empirical: f64,
}

/// `n` evenly spaced interval half-widths in `[0, 0.5]`.
pub fn v_grid(n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![0.5],
        _ => (0..n).map(|i| 0.5 * i as f64 / (n - 1) as f64).collect(),
    }
}

pub fn default_v_grid() -> Vec<f64> {
    v_grid(51)
}

/// For each half-width `v`, the share of datasets whose true contamination
/// lies in the central posterior interval `[q(0.5 - v), q(0.5 + v)]`.
pub fn calibration_curve(posteriors: &[GammaPosterior], gamma_trues: &[f64], v_grid: &[f64]) -> Vec<CalibrationPoint> {
    assert_eq!(posteriors.len(), gamma_trues.len(), "one truth per posterior");
    let sorted: Vec<Vec<f64>> = posteriors
        .iter()
        .map(|p| {
            let mut s = p.samples.clone();
            s.sort_by(f64::total_cmp);
            s
        })
        .collect();
    v_grid
        .iter()
        .map(|&v| {
            let hits = sorted
                .iter()
                .zip(gamma_trues)
                .filter(|(s, &g)| {
                    let lo = crate::num::quantile_sorted(s, 0.5 - v);
                    let hi = crate::num::quantile_sorted(s, 0.5 + v);
                    lo <= g && g <= hi
                })
                .count();
            CalibrationPoint { expected: 2.0 * v, empirical: hits as f64 / posteriors.len().max(1) as f64 }
        })
        .collect()
}

/// Largest gap between expected and empirical coverage.
pub fn max_calibration_deviation(curve: &[CalibrationPoint]) -> f64 {
    curve.iter().map(|p| (p.expected - p.empirical).abs()).fold(0.0, f64::max)
}

/// Mean rank of each method; `mae[d][m]` is method `m` on dataset `d`.
/// Lower MAE ranks better and ties share the mean of their ranks.
pub fn rank_methods(mae: &[Vec<f64>]) -> Vec<f64> {
    let Some(first) = mae.first() else { return vec![] };
    let m = first.len();
    let mut totals = vec![0.0; m];
    for row in mae {
        assert_eq!(row.len(), m, "ragged MAE table");
        for (j, r) in average_ranks(row).into_iter().enumerate() {
            totals[j] += r;
        }
    }
    totals.iter().map(|t| t / mae.len() as f64).collect()
}

fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// One method on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub dataset: String,
    pub method: String,
    pub gamma_hat: f64,
    pub gamma_true: f64,
    pub mae: f64,
    pub f1_true: f64,
    pub f1_hat: f64,
    pub f1_deterioration: Option<f64>,
    pub fpr: Option<f64>,
    pub fnr: Option<f64>,
}

/// Scores `gamma_hat` on the given detector columns, averaging the
/// classification metrics over them (undefined values are skipped).
pub fn evaluate(
    dataset: &str,
    method: &str,
    columns: &[&[f64]],
    labels: &[u8],
    gamma_true: f64,
    gamma_hat: f64,
) -> EvalRow {
    let avg = |v: Vec<f64>| if v.is_empty() { None } else { Some(v.iter().sum::<f64>() / v.len() as f64) };
    let mut f1_true = Vec::new();
    let mut f1_hat = Vec::new();
    let mut det = Vec::new();
    let mut fpr = Vec::new();
    let mut fnr = Vec::new();
    for col in columns {
        let p_true = threshold_predictions(col, gamma_true);
        let p_hat = threshold_predictions(col, gamma_hat);
        f1_true.push(f1_score(&p_true, labels).value);
        f1_hat.push(f1_score(&p_hat, labels).value);
        if let Some(d) = f1_deterioration(col, labels, gamma_true, gamma_hat) {
            det.push(d);
        }
        if let Some((a, b)) = fpr_fnr(&p_hat, labels) {
            fpr.push(a);
            fnr.push(b);
        }
    }
    EvalRow {
        dataset: dataset.to_string(),
        method: method.to_string(),
        gamma_hat,
        gamma_true,
        mae: mae(gamma_hat, gamma_true),
        f1_true: avg(f1_true).unwrap_or(0.0),
        f1_hat: avg(f1_hat).unwrap_or(0.0),
        f1_deterioration: avg(det),
        fpr: avg(fpr),
        fnr: avg(fnr),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub calibration: Vec<CalibrationPoint>,
    /// `(method, mean rank)` in method order.
    pub ranks: Vec<(String, f64)>,
}

impl EvalReport {
    /// Ranks the rows by MAE per dataset. Every dataset must carry the same
    /// methods.
    pub fn from_rows(rows: Vec<EvalRow>, calibration: Vec<CalibrationPoint>) -> Self {
        let mut methods: Vec<String> = Vec::new();
        let mut datasets: Vec<String> = Vec::new();
        for r in &rows {
            if !methods.contains(&r.method) {
                methods.push(r.method.clone());
            }
            if !datasets.contains(&r.dataset) {
                datasets.push(r.dataset.clone());
            }
        }
        let table: Vec<Vec<f64>> = datasets
            .iter()
            .filter_map(|d| {
                methods
                    .iter()
                    .map(|m| rows.iter().find(|r| &r.dataset == d && &r.method == m).map(|r| r.mae))
                    .collect::<Option<Vec<f64>>>()
            })
            .collect();
        let ranks = methods.into_iter().zip(rank_methods(&table)).collect();
        Self { rows, calibration, ranks }
    }

    pub fn mean_mae(&self, method: &str) -> Option<f64> {
        let v: Vec<f64> = self.rows.iter().filter(|r| r.method == method).map(|r| r.mae).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mae_table_rows() {
        assert!((mae(0.0260, 0.0200) - 0.0060).abs() < 1e-12);
        assert!((mae(0.0385, 0.0996) - 0.0611).abs() < 1e-12);
        assert_eq!(mae(0.3, 0.3), 0.0);
    }

    #[test]
    fn prediction_examples() {
        let s: Vec<f64> = (0..10).map(f64::from).collect();
        assert!(threshold_predictions(&s, 0.0).iter().all(|&p| p == 0));
        assert_eq!(threshold_predictions(&s, 0.2), vec![0, 0, 0, 0, 0, 0, 0, 0, 1, 1]);
        assert_eq!(threshold_predictions(&[1.0, 5.0, 5.0, 2.0], 0.25), vec![0, 1, 0, 0]);
        // 2.5 rounds away from zero
        assert_eq!(flagged_count(10, 0.25), 3);
    }

    #[test]
    fn deterioration_examples() {
        // perfect ranking: the 4 highest scores are the anomalies
        let scores: Vec<f64> = (0..20).map(f64::from).collect();
        let labels: Vec<u8> = (0..20).map(|i| u8::from(i >= 16)).collect();
        assert_eq!(f1_deterioration(&scores, &labels, 0.2, 0.2), Some(0.0));
        // one extra flag: tp 4, fp 1, fn 0 -> F1 8/9
        let d = f1_deterioration(&scores, &labels, 0.2, 0.25).unwrap();
        assert!((d - (1.0 - 8.0 / 9.0) / (8.0 / 9.0)).abs() < 1e-12);
        // F1 0.8 vs 0.5 -> 0.6
        assert!(((0.8f64 - 0.5) / 0.5 - 0.6).abs() < 1e-12);
        // no predictions at the estimate
        assert_eq!(f1_deterioration(&scores, &labels, 0.2, 0.0), None);
    }

    #[test]
    fn best_detector_selection() {
        let labels = [0, 0, 0, 1, 1];
        let good = vec![0.1, 0.2, 0.3, 0.9, 0.8];
        let bad = vec![0.9, 0.2, 0.3, 0.1, 0.8];
        assert_eq!(select_best_detectors(&[good.clone(), bad.clone()], &labels, 0.4), vec![0]);
        assert_eq!(select_best_detectors(&[good.clone(), good.clone()], &labels, 0.4), vec![0, 1]);
        // AUC 10/15 for weak and 11/15 for strong, but weak is better in its top 3
        let labels = [0, 0, 0, 0, 0, 1, 1, 1];
        let weak = vec![0.8, 0.5, 0.4, 0.3, 0.2, 1.0, 0.9, 0.0];
        let strong = vec![0.95, 0.9, 0.1, 0.2, 0.3, 1.0, 0.85, 0.8];
        assert_eq!(select_best_detectors(&[strong, weak], &labels, 3.0 / 8.0), vec![1]);
    }

    #[test]
    fn rate_examples() {
        let labels = [0, 0, 1, 1];
        assert_eq!(fpr_fnr(&labels, &labels), Some((0.0, 0.0)));
        assert_eq!(fpr_fnr(&[1, 1, 1, 1], &labels), Some((1.0, 0.0)));
        let mut labels = vec![0u8; 10];
        labels.extend([1; 5]);
        let mut pred = vec![0u8; 15];
        pred[0] = 1;
        pred[1] = 1;
        pred[10..14].fill(1);
        assert_eq!(fpr_fnr(&pred, &labels), Some((0.2, 0.2)));
        assert_eq!(fpr_fnr(&[0, 1], &[0, 0]), None);
    }

    #[test]
    fn rank_fixture() {
        // 3 methods x 2 datasets
        let table = vec![vec![0.01, 0.02, 0.03], vec![0.05, 0.02, 0.02]];
        // dataset 1 ranks (1,2,3), dataset 2 ranks (3,1.5,1.5)
        assert_eq!(rank_methods(&table), vec![2.0, 1.75, 2.25]);
        assert_eq!(rank_methods(&[vec![0.0, 1.0], vec![0.0, 2.0]]), vec![1.0, 2.0]);
    }

    #[test]
    fn calibration_curve_edges() {
        let gp = |s: Vec<f64>| GammaPosterior::from_samples(s, 0.25, vec![]).unwrap();
        let posts = vec![gp(vec![0.01, 0.02, 0.03]), gp(vec![0.04, 0.05, 0.06])];
        let curve = calibration_curve(&posts, &[0.02, 0.2], &[0.0, 0.5]);
        assert_eq!(curve[0], CalibrationPoint { expected: 0.0, empirical: 0.5 });
        assert_eq!(curve[1], CalibrationPoint { expected: 1.0, empirical: 0.5 });
        let grid = default_v_grid();
        assert_eq!(grid.len(), 51);
        assert_eq!(grid[50], 0.5);
    }

    #[test]
    fn report_ranks() {
        let row = |d: &str, m: &str, g: f64| evaluate(d, m, &[&[0.0, 1.0, 2.0, 3.0]], &[0, 0, 0, 1], 0.25, g);
        let rep = EvalReport::from_rows(vec![row("a", "x", 0.25), row("a", "y", 0.5)], vec![]);
        assert_eq!(rep.ranks, vec![("x".to_string(), 1.0), ("y".to_string(), 2.0)]);
        assert_eq!(rep.rows[0].f1_deterioration, Some(0.0));
        assert_eq!(rep.mean_mae("y"), Some(0.25));
    }

    proptest! {
        #[test]
        fn predictions_flag_exact_budget(scores in prop::collection::vec(-5.0f64..5.0, 1..200), g in 0.0f64..=1.0) {
            let p = threshold_predictions(&scores, g);
            let want = (g * scores.len() as f64).round() as usize;
            prop_assert_eq!(p.iter().filter(|&&v| v == 1).count(), want);
        }

        #[test]
        fn deterioration_zero_at_truth(
            scores in prop::collection::vec(-5.0f64..5.0, 2..100),
            g in 0.0f64..0.5,
            seed in any::<u64>(),
        ) {
            let labels: Vec<u8> = (0..scores.len()).map(|i| u8::from((seed >> (i % 64)) & 1 == 1)).collect();
            prop_assert_eq!(f1_deterioration(&scores, &labels, g, g), Some(0.0));
        }

        #[test]
        fn calibration_curve_is_monotone(
            samples in prop::collection::vec(prop::collection::vec(0.0f64..0.25, 5..40), 1..8),
            truths in prop::collection::vec(0.0f64..0.25, 8),
        ) {
            let posts: Vec<GammaPosterior> =
                samples.into_iter().map(|s| GammaPosterior::from_samples(s, 0.25, vec![]).unwrap()).collect();
            let curve = calibration_curve(&posts, &truths[..posts.len()], &default_v_grid());
            for w in curve.windows(2) {
                prop_assert!(w[1].empirical >= w[0].empirical);
            }
        }
    }
}
