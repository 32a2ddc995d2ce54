//! Classification metrics, threshold tuning, and the cost-normalized score.
//!
//! Label handling: AUROC skips labels without both classes, AUPRC and F1 skip
//! labels without positives, accuracy never skips. Macro values are plain
//! means over the kept labels; a macro value with nothing kept is NaN.

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor2;
use crate::embedstore::TaskKind;
use crate::error::{MedmixError, Result};

/// Default decision threshold for sigmoid outputs.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Indices of `scores` sorted by descending score (stable on ties).
fn descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Mann-Whitney AUROC with midranks; `None` without both classes.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos = labels.iter().filter(|&&y| y).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && scores[idx[end]] == scores[idx[start]] {
            end += 1;
        }
        // ranks start+1 ..= end share their mean
        let midrank = (start + 1 + end) as f64 / 2.0;
        rank_sum += midrank * idx[start..end].iter().filter(|&&i| labels[i]).count() as f64;
        start = end;
    }
    let (p, n) = (pos as f64, neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Average precision: `Σ (R_k − R_{k−1}) P_k` over descending score groups,
/// tied scores entering together. `None` without positives.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos = labels.iter().filter(|&&y| y).count();
    if pos == 0 {
        return None;
    }
    let idx = descending(scores);
    let (mut tp, mut seen, mut ap) = (0usize, 0usize, 0.0);
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && scores[idx[end]] == scores[idx[start]] {
            end += 1;
        }
        let group_tp = idx[start..end].iter().filter(|&&i| labels[i]).count();
        tp += group_tp;
        seen += end - start;
        if group_tp > 0 {
            ap += (group_tp as f64 / pos as f64) * (tp as f64 / seen as f64);
        }
        start = end;
    }
    Some(ap)
}

/// `2TP / (2TP + FP + FN)`, 0 when the denominator is 0.
pub fn f1_score(predicted: &[bool], labels: &[bool]) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &y) in predicted.iter().zip(labels) {
        match (p, y) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    let den = 2 * tp + fp + fn_;
    if den == 0 {
        0.0
    } else {
        2.0 * tp as f64 / den as f64
    }
}

pub fn accuracy(predicted: &[bool], labels: &[bool]) -> f64 {
    if labels.is_empty() {
        return f64::NAN;
    }
    predicted.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64
}

fn threshold_predictions(scores: &[f64], threshold: f64) -> Vec<bool> {
    scores.iter().map(|&s| s >= threshold).collect()
}

/// Per-label threshold maximizing F1 on validation data. Candidates are the
/// midpoints between consecutive distinct scores plus 0.5; ties go to the
/// candidate nearest 0.5 (then the lower one). Labels without both classes
/// keep 0.5.
pub fn tune_threshold(scores: &[f64], labels: &[bool]) -> f64 {
    let pos = labels.iter().filter(|&&y| y).count();
    if pos == 0 || pos == labels.len() {
        return DEFAULT_THRESHOLD;
    }
    let mut uniq: Vec<f64> = scores.to_vec();
    uniq.sort_by(f64::total_cmp);
    uniq.dedup();
    let mut candidates: Vec<f64> = uniq.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    candidates.push(DEFAULT_THRESHOLD);
    let mut best = (f64::NEG_INFINITY, DEFAULT_THRESHOLD);
    for &t in &candidates {
        let f1 = f1_score(&threshold_predictions(scores, t), labels);
        let closer = |a: f64, b: f64| {
            let (da, db) = ((a - DEFAULT_THRESHOLD).abs(), (b - DEFAULT_THRESHOLD).abs());
            da < db || (da == db && a < b)
        };
        if f1 > best.0 || (f1 == best.0 && closer(t, best.1)) {
            best = (f1, t);
        }
    }
    best.1
}

/// Column `j` of a score matrix and the matching label bits.
fn label_column(scores: &Tensor2<f64>, labels: &Tensor2<f64>, j: usize) -> (Vec<f64>, Vec<bool>) {
    (
        (0..scores.rows()).map(|i| scores.get(i, j)).collect(),
        (0..labels.rows()).map(|i| labels.get(i, j) == 1.0).collect(),
    )
}

pub fn tune_thresholds(scores: &Tensor2<f64>, labels: &Tensor2<f64>) -> Vec<f64> {
    (0..scores.cols())
        .map(|j| {
            let (s, y) = label_column(scores, labels, j);
            tune_threshold(&s, &y)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelMetrics {
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
    pub f1: Option<f64>,
    pub acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auroc: f64,
    pub auprc: f64,
    pub mf1: f64,
    pub acc: f64,
    pub per_label: Vec<LabelMetrics>,
    pub thresholds: Vec<f64>,
    pub n_evaluated: usize,
    /// Labels left out of the AUROC average.
    pub skipped_labels: Vec<usize>,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> f64 {
    let kept: Vec<f64> = values.flatten().collect();
    if kept.is_empty() {
        f64::NAN
    } else {
        kept.iter().sum::<f64>() / kept.len() as f64
    }
}

/// Metrics for `N × C` probabilities. Multi-label uses `thresholds` (0.5 by
/// default) per label; multi-class scores AUROC/AUPRC one-vs-rest and F1 and
/// accuracy on the argmax.
pub fn evaluate_scores(
    probs: &Tensor2<f64>,
    labels: &Tensor2<f64>,
    kind: TaskKind,
    thresholds: Option<&[f64]>,
) -> Result<MetricsReport> {
    let (n, c) = probs.shape();
    if labels.shape() != (n, c) || thresholds.is_some_and(|t| t.len() != c) {
        return Err(MedmixError::Shape {
            op: "evaluate_scores",
            detail: format!("probs {:?}, labels {:?}", probs.shape(), labels.shape()),
        });
    }
    let thresholds: Vec<f64> = thresholds.map_or_else(|| vec![DEFAULT_THRESHOLD; c], <[f64]>::to_vec);
    let argmax: Vec<usize> = (0..n)
        .map(|i| {
            let row = probs.row(i);
            (0..c).fold(0, |best, j| if row[j] > row[best] { j } else { best })
        })
        .collect();
    let mut per_label = Vec::with_capacity(c);
    for j in 0..c {
        let (s, y) = label_column(probs, labels, j);
        let pred = match kind {
            TaskKind::MultiLabel => threshold_predictions(&s, thresholds[j]),
            TaskKind::MultiClass => argmax.iter().map(|&a| a == j).collect(),
        };
        let has_pos = y.iter().any(|&v| v);
        per_label.push(LabelMetrics {
            auroc: auroc(&s, &y),
            auprc: average_precision(&s, &y),
            f1: has_pos.then(|| f1_score(&pred, &y)),
            acc: accuracy(&pred, &y),
        });
    }
    let acc = match kind {
        TaskKind::MultiLabel => mean_of(per_label.iter().map(|l| Some(l.acc))),
        TaskKind::MultiClass => {
            if n == 0 {
                f64::NAN
            } else {
                (0..n).filter(|&i| labels.get(i, argmax[i]) == 1.0).count() as f64 / n as f64
            }
        }
    };
    Ok(MetricsReport {
        auroc: mean_of(per_label.iter().map(|l| l.auroc)),
        auprc: mean_of(per_label.iter().map(|l| l.auprc)),
        mf1: mean_of(per_label.iter().map(|l| l.f1)),
        acc,
        skipped_labels: (0..c).filter(|&j| per_label[j].auroc.is_none()).collect(),
        per_label,
        thresholds: match kind {
            TaskKind::MultiLabel => thresholds,
            TaskKind::MultiClass => Vec::new(),
        },
        n_evaluated: n,
    })
}

/// Deployment cost of a model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostProfile {
    pub params: f64,
    pub flops: f64,
    pub peak_memory: f64,
}

/// Mean of the four headline metrics.
pub fn perf(report: &MetricsReport) -> f64 {
    (report.auroc + report.auprc + report.mf1 + report.acc) / 4.0
}

/// `(perf, effscore)` where effscore is the relative performance divided by
/// the geometric mean of the three cost ratios against the reference.
pub fn perf_and_effscore(
    report: &MetricsReport,
    cost: &CostProfile,
    reference: &MetricsReport,
    reference_cost: &CostProfile,
) -> Result<(f64, f64)> {
    let parts = [
        (cost.params, reference_cost.params, "params"),
        (cost.flops, reference_cost.flops, "flops"),
        (cost.peak_memory, reference_cost.peak_memory, "peak_memory"),
    ];
    for (v, r, name) in parts {
        if !(r > 0.0) || !(v > 0.0) {
            return Err(MedmixError::validation(name, format!("costs must be positive, got {v} vs reference {r}")));
        }
    }
    let ref_perf = perf(reference);
    if !(ref_perf > 0.0) {
        return Err(MedmixError::validation("reference", "reference performance must be positive"));
    }
    let ratio: f64 = parts.iter().map(|(v, r, _)| v / r).product();
    let p = perf(report);
    Ok((p, (p / ref_perf) / ratio.cbrt()))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Fraction of (positive, negative) pairs ranked correctly, ties half.
    pub(crate) fn brute_auroc(s: &[f64], y: &[bool]) -> Option<f64> {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..s.len() {
            for j in 0..s.len() {
                if y[i] && !y[j] {
                    den += 1.0;
                    num += if s[i] > s[j] {
                        1.0
                    } else if s[i] == s[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        (den > 0.0).then(|| num / den)
    }

    /// Precision-recall step integration over every distinct threshold.
    pub(crate) fn brute_ap(s: &[f64], y: &[bool]) -> Option<f64> {
        let pos = y.iter().filter(|&&v| v).count() as f64;
        if pos == 0.0 {
            return None;
        }
        let mut ts: Vec<f64> = s.to_vec();
        ts.sort_by(|a, b| b.total_cmp(a));
        ts.dedup();
        let (mut prev_recall, mut ap) = (0.0, 0.0);
        for t in ts {
            let tp = (0..s.len()).filter(|&i| s[i] >= t && y[i]).count() as f64;
            let predicted = (0..s.len()).filter(|&i| s[i] >= t).count() as f64;
            let recall = tp / pos;
            ap += (recall - prev_recall) * (tp / predicted);
            prev_recall = recall;
        }
        Some(ap)
    }

    pub(crate) fn brute_f1(p: &[bool], y: &[bool]) -> f64 {
        let mut cm = [[0usize; 2]; 2];
        for (&a, &b) in p.iter().zip(y) {
            cm[a as usize][b as usize] += 1;
        }
        let (tp, fp, fn_) = (cm[1][1] as f64, cm[1][0] as f64, cm[0][1] as f64);
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        }
    }

    fn instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<bool>) {
        let n = rng.random_range(1..=30);
        // coarse grid so ties are common
        let s = (0..n).map(|_| rng.random_range(0..8) as f64 / 8.0).collect();
        let y = (0..n).map(|_| rng.random_bool(0.4)).collect();
        (s, y)
    }

    #[test]
    fn auroc_examples() {
        let y = [false, false, true, true];
        assert_eq!(auroc(&[0.1, 0.4, 0.35, 0.8], &y), Some(0.75));
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &y), Some(1.0));
        assert_eq!(auroc(&[0.3; 4], &y), Some(0.5));
        assert_eq!(auroc(&[0.3, 0.2], &[true, true]), None);
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[0.9, 0.1], &[true, false]), Some(1.0));
        assert_eq!(average_precision(&[0.9, 0.1], &[false, true]), Some(0.5));
        assert_eq!(average_precision(&[0.9, 0.1], &[false, false]), None);
    }

    #[test]
    fn f1_and_acc_examples() {
        let y = [true, false, true];
        assert_eq!(f1_score(&y, &y), 1.0);
        assert_eq!(accuracy(&y, &y), 1.0);
        assert_eq!(f1_score(&[false; 3], &y), 0.0);
        assert_eq!(f1_score(&[false; 3], &[false; 3]), 0.0);
    }

    #[test]
    fn oracles_agree_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..1000 {
            let (s, y) = instance(&mut rng);
            match (auroc(&s, &y), brute_auroc(&s, &y)) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-9),
                (a, b) => assert_eq!(a, b),
            }
            match (average_precision(&s, &y), brute_ap(&s, &y)) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-9, "{s:?} {y:?}: {a} vs {b}"),
                (a, b) => assert_eq!(a, b),
            }
            let p: Vec<bool> = s.iter().map(|&v| v >= 0.5).collect();
            assert!((f1_score(&p, &y) - brute_f1(&p, &y)).abs() < 1e-12);
        }
    }

    #[test]
    fn threshold_rules() {
        let y = [false, false, true, true];
        assert_eq!(tune_threshold(&[0.1, 0.2, 0.3, 0.4], &y), 0.25);
        // 0.35 and 0.5 both separate; 0.5 is nearer
        assert_eq!(tune_threshold(&[0.1, 0.3, 0.6, 0.9], &[false, false, true, true]), 0.5);
        assert_eq!(tune_threshold(&[0.1, 0.3, 0.4, 0.9], &y), 0.35);
        assert_eq!(tune_threshold(&[0.3], &[true]), 0.5);
        assert_eq!(tune_threshold(&[0.3, 0.6], &[true, true]), 0.5);
    }

    #[test]
    fn tuning_never_hurts_validation_f1() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..300 {
            let (s, y) = instance(&mut rng);
            let t = tune_threshold(&s, &y);
            let tuned = f1_score(&threshold_predictions(&s, t), &y);
            let fixed = f1_score(&threshold_predictions(&s, 0.5), &y);
            assert!(tuned >= fixed);
        }
    }

    #[test]
    fn macro_is_mean_of_kept_labels() {
        let probs =
            Tensor2::from_rows(&[vec![0.9, 0.2, 0.4], vec![0.3, 0.6, 0.1], vec![0.7, 0.1, 0.8], vec![0.2, 0.4, 0.3]])
                .unwrap();
        let labels =
            Tensor2::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]])
                .unwrap();
        let r = evaluate_scores(&probs, &labels, TaskKind::MultiLabel, None).unwrap();
        assert_eq!(r.skipped_labels, vec![1]);
        let kept = [r.per_label[0].auroc.unwrap(), r.per_label[2].auroc.unwrap()];
        assert!((r.auroc - (kept[0] + kept[1]) / 2.0).abs() < 1e-9);
        let accs: f64 = r.per_label.iter().map(|l| l.acc).sum::<f64>() / 3.0;
        assert!((r.acc - accs).abs() < 1e-12);
        assert!(r.per_label[1].f1.is_none());
    }

    #[test]
    fn multiclass_uses_argmax() {
        let probs = Tensor2::from_rows(&[vec![0.7, 0.3], vec![0.4, 0.6], vec![0.8, 0.2]]).unwrap();
        let labels = Tensor2::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]]).unwrap();
        let r = evaluate_scores(&probs, &labels, TaskKind::MultiClass, None).unwrap();
        assert!((r.acc - 2.0 / 3.0).abs() < 1e-12);
        // class 0: tp 1 fp 1 fn 0 -> 2/3; class 1: tp 1 fp 0 fn 1 -> 2/3
        assert!((r.mf1 - 2.0 / 3.0).abs() < 1e-12);
        let perfect = evaluate_scores(&labels, &labels, TaskKind::MultiClass, None).unwrap();
        assert_eq!((perfect.mf1, perfect.acc), (1.0, 1.0));
    }

    fn report(a: f64, b: f64, c: f64, d: f64) -> MetricsReport {
        MetricsReport {
            auroc: a,
            auprc: b,
            mf1: c,
            acc: d,
            per_label: Vec::new(),
            thresholds: Vec::new(),
            n_evaluated: 0,
            skipped_labels: Vec::new(),
        }
    }

    #[test]
    fn effscore_arithmetic() {
        let r = report(0.7168, 0.4586, 0.6375, 0.7352);
        assert!((perf(&r) - 0.637).abs() < 1e-3);
        let cost = CostProfile { params: 1e6, flops: 2e9, peak_memory: 3e8 };
        assert_eq!(perf_and_effscore(&r, &cost, &r, &cost).unwrap().1, 1.0);
        let double = CostProfile { params: 2e6, flops: 4e9, peak_memory: 6e8 };
        assert!((perf_and_effscore(&r, &double, &r, &cost).unwrap().1 - 0.5).abs() < 1e-12);
        let zero = CostProfile { params: 0.0, ..cost };
        assert!(perf_and_effscore(&r, &cost, &r, &zero).is_err());
    }

    proptest! {
        #[test]
        fn auroc_is_rank_invariant(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(2..40);
            let s: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let y: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
            if let Some(a) = auroc(&s, &y) {
                let e: Vec<f64> = s.iter().map(|v| v.exp()).collect();
                let aff: Vec<f64> = s.iter().map(|v| 2.5 * v - 7.0).collect();
                let neg: Vec<f64> = s.iter().map(|v| -v).collect();
                prop_assert!((auroc(&e, &y).unwrap() - a).abs() < 1e-12);
                prop_assert!((auroc(&aff, &y).unwrap() - a).abs() < 1e-12);
                prop_assert!((auroc(&neg, &y).unwrap() + a - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn metrics_stay_in_unit_interval(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (s, y) = instance(&mut rng);
            for v in [auroc(&s, &y), average_precision(&s, &y)].into_iter().flatten() {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            let p = threshold_predictions(&s, 0.5);
            prop_assert!((0.0..=1.0).contains(&f1_score(&p, &y)));
            prop_assert!((0.0..=1.0).contains(&accuracy(&p, &y)));
        }
    }
}
