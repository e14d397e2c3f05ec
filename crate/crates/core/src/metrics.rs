//! Evaluation metrics. Uncertain and missing labels are excluded everywhere.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{LabelCode, LabelMatrix};
use crate::error::{Error, Result};
use crate::losses::sigmoid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetric {
    pub macro_value: f64,
    /// `None` for classes without both a positive and a negative label.
    pub per_class: Vec<Option<f64>>,
    pub skipped_classes: usize,
    pub excluded_uncertain: usize,
}

fn check_shapes(scores: &Array2<f64>, labels: &LabelMatrix) -> Result<()> {
    if scores.dim() != labels.dim() {
        return Err(Error::LengthMismatch(format!(
            "scores {:?} vs labels {:?}",
            scores.dim(),
            labels.dim()
        )));
    }
    Ok(())
}

fn count_uncertain(labels: &LabelMatrix) -> usize {
    labels.iter().filter(|&&l| l == LabelCode::Uncertain).count()
}

/// Mann-Whitney estimate of `P(s⁺ > s⁻) + ½·P(s⁺ = s⁻)`.
pub fn binary_auroc(pairs: &mut [(f64, bool)]) -> Option<f64> {
    let n_pos = pairs.iter().filter(|p| p.1).count();
    let n_neg = pairs.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Sum of midranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < pairs.len() {
        let mut j = i;
        while j < pairs.len() && pairs[j].0 == pairs[i].0 {
            j += 1;
        }
        let midrank = (i + j + 1) as f64 / 2.0;
        rank_sum += midrank * pairs[i..j].iter().filter(|p| p.1).count() as f64;
        i = j;
    }
    let (np, nn) = (n_pos as f64, n_neg as f64);
    Some((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

fn per_class<F>(scores: &Array2<f64>, labels: &LabelMatrix, mut metric: F) -> Result<ClassMetric>
where
    F: FnMut(&mut Vec<(f64, bool)>) -> Option<f64>,
{
    check_shapes(scores, labels)?;
    let mut values = Vec::with_capacity(labels.ncols());
    for c in 0..labels.ncols() {
        let mut pairs: Vec<(f64, bool)> = scores
            .column(c)
            .iter()
            .zip(labels.column(c))
            .filter_map(|(&s, l)| l.definite().map(|t| (s, t == 1.0)))
            .collect();
        let has_both = pairs.iter().any(|p| p.1) && pairs.iter().any(|p| !p.1);
        values.push(if has_both { metric(&mut pairs) } else { None });
    }
    let scored: Vec<f64> = values.iter().flatten().copied().collect();
    if scored.is_empty() {
        return Err(Error::NoScorableClass);
    }
    Ok(ClassMetric {
        macro_value: scored.iter().sum::<f64>() / scored.len() as f64,
        skipped_classes: values.len() - scored.len(),
        per_class: values,
        excluded_uncertain: count_uncertain(labels),
    })
}

/// Macro AUROC over classes that have both label values.
pub fn auroc_masked(scores: &Array2<f64>, labels: &LabelMatrix) -> Result<ClassMetric> {
    per_class(scores, labels, |pairs| binary_auroc(pairs))
}

/// F1 of `prob ≥ threshold`; 1 when neither predictions nor truths are positive.
pub fn binary_f1(pairs: &[(f64, bool)], threshold: f64) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for &(p, truth) in pairs {
        match (p >= threshold, truth) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    if tp + fp + fn_ == 0 {
        1.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    }
}

/// Macro F1 of sigmoid(logits) thresholded at `threshold`.
pub fn macro_f1(logits: &Array2<f64>, labels: &LabelMatrix, threshold: f64) -> Result<ClassMetric> {
    let probs = logits.mapv(sigmoid);
    per_class(&probs, labels, |pairs| Some(binary_f1(pairs, threshold)))
}

/// Positive values mean the earlier score was higher.
pub fn forgetting(auc_after_own: f64, auc_after_later: f64) -> f64 {
    auc_after_own - auc_after_later
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingAccuracy {
    /// `confusion[i][j]`: samples of task `i` routed to task `j`.
    pub confusion: Vec<Vec<usize>>,
    pub per_task: Vec<f64>,
    pub overall: f64,
}

impl RoutingAccuracy {
    pub fn from_confusion(confusion: Vec<Vec<usize>>) -> Result<Self> {
        let k = confusion.len();
        if confusion.iter().any(|row| row.len() != k) {
            return Err(Error::LengthMismatch("confusion matrix is not square".into()));
        }
        let total: usize = confusion.iter().flatten().sum();
        let trace: usize = (0..k).map(|i| confusion[i][i]).sum();
        let per_task = confusion
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let n: usize = row.iter().sum();
                if n == 0 {
                    f64::NAN
                } else {
                    row[i] as f64 / n as f64
                }
            })
            .collect();
        Ok(RoutingAccuracy {
            overall: if total == 0 {
                f64::NAN
            } else {
                trace as f64 / total as f64
            },
            per_task,
            confusion,
        })
    }

    pub fn task_sizes(&self) -> Vec<usize> {
        self.confusion.iter().map(|r| r.iter().sum()).collect()
    }
}

pub fn routing_accuracy(decisions: &[usize], truth: &[usize], num_tasks: usize) -> Result<RoutingAccuracy> {
    if decisions.len() != truth.len() {
        return Err(Error::LengthMismatch(format!(
            "{} decisions for {} samples",
            decisions.len(),
            truth.len()
        )));
    }
    let mut confusion = vec![vec![0usize; num_tasks]; num_tasks];
    for (&d, &t) in decisions.iter().zip(truth) {
        for v in [d, t] {
            if v >= num_tasks {
                return Err(Error::TaskOutOfRange { label: v, num_tasks });
            }
        }
        confusion[t][d] += 1;
    }
    RoutingAccuracy::from_confusion(confusion)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::Rng;
    use proptest::prelude::*;
    use rand::{Rng as _, SeedableRng};

    fn col(codes: &[i8]) -> LabelMatrix {
        Array2::from_shape_fn((codes.len(), 1), |(i, _)| LabelCode::from_code(codes[i]).unwrap())
    }

    fn scores(v: &[f64]) -> Array2<f64> {
        Array2::from_shape_vec((v.len(), 1), v.to_vec()).unwrap()
    }

    /// All-pairs oracle over definite labels.
    fn brute_auroc(s: &Array2<f64>, l: &LabelMatrix) -> Option<f64> {
        let mut per = Vec::new();
        for c in 0..l.ncols() {
            let (mut wins, mut pairs) = (0.0, 0usize);
            for i in 0..l.nrows() {
                for j in 0..l.nrows() {
                    if l[[i, c]] == LabelCode::Positive && l[[j, c]] == LabelCode::Negative {
                        pairs += 1;
                        if s[[i, c]] > s[[j, c]] {
                            wins += 1.0;
                        } else if s[[i, c]] == s[[j, c]] {
                            wins += 0.5;
                        }
                    }
                }
            }
            if pairs > 0 {
                per.push(wins / pairs as f64);
            }
        }
        (!per.is_empty()).then(|| per.iter().sum::<f64>() / per.len() as f64)
    }

    /// Contingency-table recount per class.
    fn brute_f1(logits: &Array2<f64>, l: &LabelMatrix, thr: f64) -> Option<f64> {
        let mut per = Vec::new();
        for c in 0..l.ncols() {
            let valid: Vec<usize> = (0..l.nrows()).filter(|&i| l[[i, c]].definite().is_some()).collect();
            let pos = valid.iter().any(|&i| l[[i, c]] == LabelCode::Positive);
            let neg = valid.iter().any(|&i| l[[i, c]] == LabelCode::Negative);
            if !(pos && neg) {
                continue;
            }
            let mut table = [[0usize; 2]; 2];
            for &i in &valid {
                let pred = 1.0 / (1.0 + (-logits[[i, c]]).exp()) >= thr;
                let truth = l[[i, c]] == LabelCode::Positive;
                table[pred as usize][truth as usize] += 1;
            }
            let (tp, fp, fn_) = (table[1][1], table[1][0], table[0][1]);
            per.push(if tp + fp + fn_ == 0 {
                1.0
            } else {
                2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
            });
        }
        (!per.is_empty()).then(|| per.iter().sum::<f64>() / per.len() as f64)
    }

    fn random_instance(rng: &mut Rng) -> (Array2<f64>, LabelMatrix) {
        let n = rng.random_range(2..=50);
        let c = rng.random_range(1..=4);
        // Coarse grid forces ties.
        let s = Array2::from_shape_fn((n, c), |_| (rng.random_range(0..8) as f64) / 4.0 - 1.0);
        let l = Array2::from_shape_fn((n, c), |_| LabelCode::from_code(rng.random_range(-2..=1)).unwrap());
        (s, l)
    }

    #[test]
    fn auroc_small_cases() {
        assert_eq!(
            auroc_masked(&scores(&[0.9, 0.8, 0.1]), &col(&[1, 0, 0]))
                .unwrap()
                .macro_value,
            1.0
        );
        assert_eq!(
            auroc_masked(&scores(&[0.8, 0.9, 0.1]), &col(&[1, 0, 0]))
                .unwrap()
                .macro_value,
            0.5
        );
        assert!(matches!(
            auroc_masked(&scores(&[0.3, 0.2]), &col(&[1, 1])),
            Err(Error::NoScorableClass)
        ));
    }

    #[test]
    fn auroc_excludes_uncertain_and_skips_degenerate_classes() {
        let s = Array2::from_shape_vec((3, 2), vec![0.9, 0.1, 0.2, 0.5, 0.95, 0.4]).unwrap();
        let l = Array2::from_shape_vec(
            (3, 2),
            vec![
                LabelCode::Positive,
                LabelCode::Positive,
                LabelCode::Negative,
                LabelCode::Positive,
                LabelCode::Uncertain,
                LabelCode::Missing,
            ],
        )
        .unwrap();
        let r = auroc_masked(&s, &l).unwrap();
        assert_eq!(r.macro_value, 1.0);
        assert_eq!(r.skipped_classes, 1);
        assert_eq!(r.per_class, vec![Some(1.0), None]);
        assert_eq!(r.excluded_uncertain, 1);
    }

    #[test]
    fn auroc_matches_brute_force_oracle() {
        let mut rng = Rng::seed_from_u64(2024);
        let mut checked = 0;
        while checked < 200 {
            let (s, l) = random_instance(&mut rng);
            match (auroc_masked(&s, &l), brute_auroc(&s, &l)) {
                (Ok(got), Some(want)) => {
                    assert!((got.macro_value - want).abs() < 1e-12);
                    checked += 1;
                }
                (Err(Error::NoScorableClass), None) => {}
                (got, want) => panic!("disagreement: {got:?} vs {want:?}"),
            }
        }
    }

    #[test]
    fn f1_matches_contingency_oracle() {
        let mut rng = Rng::seed_from_u64(7);
        let mut checked = 0;
        while checked < 200 {
            let (s, l) = random_instance(&mut rng);
            let logits = s * 3.0;
            if let Some(want) = brute_f1(&logits, &l, 0.5) {
                let got = macro_f1(&logits, &l, 0.5).unwrap().macro_value;
                assert!((got - want).abs() < 1e-12);
                checked += 1;
            }
        }
    }

    #[test]
    fn f1_extremes() {
        let l = col(&[1, 0, 1, 0]);
        assert_eq!(
            macro_f1(&scores(&[5.0, -5.0, 5.0, -5.0]), &l, 0.5).unwrap().macro_value,
            1.0
        );
        assert_eq!(
            macro_f1(&scores(&[-5.0, 5.0, -5.0, 5.0]), &l, 0.5).unwrap().macro_value,
            0.0
        );
        assert_eq!(binary_f1(&[(0.1, false), (0.2, false)], 0.5), 1.0);
        assert_eq!(binary_f1(&[(0.9, false)], 0.5), 0.0);
    }

    #[test]
    fn forgetting_reproduces_reported_drop() {
        assert!((forgetting(0.752, 0.740) - 0.012).abs() < 1e-12);
        assert_eq!(forgetting(0.6, 0.6), 0.0);
        assert!((forgetting(0.70, 0.75) + 0.05).abs() < 1e-12);
    }

    #[test]
    fn routing_from_reported_confusion() {
        let r = RoutingAccuracy::from_confusion(vec![vec![3383, 1776], vec![236, 432]]).unwrap();
        assert_eq!(format!("{:.1}", 100.0 * r.per_task[0]), "65.6");
        assert_eq!(format!("{:.1}", 100.0 * r.per_task[1]), "64.7");
        assert_eq!(r.overall, 3815.0 / 5827.0);
        assert_eq!(format!("{:.1}", 100.0 * r.overall), "65.5");
        assert_eq!(r.task_sizes(), vec![5159, 668]);
    }

    #[test]
    fn routing_is_size_weighted() {
        let mut decisions = vec![0usize; 9000];
        decisions.extend(vec![0usize; 1000]);
        let mut truth = vec![0usize; 9000];
        truth.extend(vec![1usize; 1000]);
        let r = routing_accuracy(&decisions, &truth, 2).unwrap();
        assert_eq!(r.per_task, vec![1.0, 0.0]);
        assert!((r.overall - 0.9).abs() < 1e-15);
        let perfect = routing_accuracy(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        assert_eq!(perfect.overall, 1.0);
        assert!(routing_accuracy(&[0], &[0, 1], 2).is_err());
    }

    proptest! {
        #[test]
        fn auroc_is_rank_invariant(
            vals in proptest::collection::vec(-3.0f64..3.0, 6..30),
            codes in proptest::collection::vec(0i8..=1, 6..30),
        ) {
            let n = vals.len().min(codes.len());
            let s = scores(&vals[..n]);
            let l = col(&codes[..n]);
            if let Ok(base) = auroc_masked(&s, &l) {
                let transformed = s.mapv(|x| (2.0 * x).exp() + 3.0);
                prop_assert!((auroc_masked(&transformed, &l).unwrap().macro_value - base.macro_value).abs() < 1e-12);
                prop_assert_eq!(auroc_masked(&Array2::from_elem((n, 1), 0.3), &l).unwrap().macro_value, 0.5);
            }
        }

        #[test]
        fn overall_lies_between_task_rates(
            pairs in proptest::collection::vec((0usize..3, 0usize..3), 1..200),
        ) {
            let (d, t): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let r = routing_accuracy(&d, &t, 3).unwrap();
            let rates: Vec<f64> = r.per_task.iter().copied().filter(|v| !v.is_nan()).collect();
            let lo = rates.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = rates.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(r.overall >= lo - 1e-12 && r.overall <= hi + 1e-12);
            for (k, size) in r.task_sizes().into_iter().enumerate() {
                prop_assert_eq!(size, t.iter().filter(|&&x| x == k).count());
            }
        }
    }
}
