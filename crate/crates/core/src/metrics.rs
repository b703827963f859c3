//! ROC-AUC for binary tasks and macro-F1 for multiclass tasks.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{ImageBatch, Task};
use crate::models::{Classifier, ModelError};

/// Images per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 64;

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("AUC needs both classes; got {positives} positives and {negatives} negatives")]
    SingleClass { positives: usize, negatives: usize },
    #[error("{0} scores for {1} labels")]
    Length(usize, usize),
    #[error("label {label} outside [0, {classes})")]
    Label { label: usize, classes: usize },
    #[error("cannot evaluate an empty split")]
    Empty,
    #[error("non-finite score for image {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricName {
    Auc,
    MacroF1,
    /// Accuracy of `p(class 1) ≥ 0.5`; only used when selected for binary tasks.
    Accuracy,
}

impl MetricName {
    pub fn key(self) -> &'static str {
        match self {
            MetricName::Auc => "auc",
            MetricName::MacroF1 => "macro_f1",
            MetricName::Accuracy => "accuracy",
        }
    }
}

impl fmt::Display for MetricName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for MetricName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [MetricName::Auc, MetricName::MacroF1, MetricName::Accuracy]
            .into_iter()
            .find(|m| m.key() == s)
            .ok_or_else(|| format!("unknown metric `{s}`"))
    }
}

/// Metric used for binary tasks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinaryMetric {
    #[default]
    Auc,
    ThresholdAccuracy,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub metric: MetricName,
    pub value: f64,
    pub n: usize,
}

/// Average ranks (1-based) with ties sharing the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Mann–Whitney ROC-AUC: `P(s⁺ > s⁻) + ½·P(s⁺ = s⁻)`.
pub fn auc(scores: &[f64], labels: &[usize]) -> Result<f64, MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::Length(scores.len(), labels.len()));
    }
    if let Some(&label) = labels.iter().find(|&&l| l > 1) {
        return Err(MetricError::Label { label, classes: 2 });
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricError::SingleClass { positives, negatives });
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l == 1).map(|(r, _)| r).sum();
    let (p, n) = (positives as f64, negatives as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Unweighted mean of per-class F1; a class with no true or predicted
/// members scores 0.
pub fn macro_f1(pred: &[usize], labels: &[usize], num_classes: usize) -> Result<f64, MetricError> {
    if pred.len() != labels.len() {
        return Err(MetricError::Length(pred.len(), labels.len()));
    }
    if pred.is_empty() {
        return Err(MetricError::Empty);
    }
    if let Some(&label) = pred.iter().chain(labels).find(|&&l| l >= num_classes) {
        return Err(MetricError::Label { label, classes: num_classes });
    }
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fnc = vec![0usize; num_classes];
    for (&p, &l) in pred.iter().zip(labels) {
        if p == l {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fnc[l] += 1;
        }
    }
    let total: f64 = (0..num_classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fnc[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .sum();
    Ok(total / num_classes as f64)
}

pub fn threshold_accuracy(scores: &[f64], labels: &[usize]) -> Result<f64, MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::Length(scores.len(), labels.len()));
    }
    if scores.is_empty() {
        return Err(MetricError::Empty);
    }
    let hits = scores.iter().zip(labels).filter(|(&s, &l)| usize::from(s >= 0.5) == l).count();
    Ok(hits as f64 / scores.len() as f64)
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Softmax probability of class 1 for each row of `[n, 2]` logits.
pub fn positive_probability(logits: &[f32]) -> Vec<f64> {
    logits
        .chunks_exact(2)
        .map(|r| {
            let (a, b) = (f64::from(r[0]), f64::from(r[1]));
            1.0 / (1.0 + (a - b).exp())
        })
        .collect()
}

/// Logits for every image, computed in fixed chunks (in parallel) and
/// concatenated in batch order.
pub fn predict<C: Classifier>(model: &C, batch: &ImageBatch) -> Result<Vec<f32>, MetricError> {
    if batch.is_empty() {
        return Err(MetricError::Empty);
    }
    let chunks: Vec<ImageBatch> = batch.chunks(EVAL_CHUNK).collect();
    let parts = chunks
        .par_iter()
        .map(|c| {
            let mut tape = Tape::<f32>::new();
            let x = tape.constant(c.images().clone());
            let out = model.forward(&mut tape, x)?;
            Ok(tape.value(out).data().to_vec())
        })
        .collect::<Result<Vec<_>, ModelError>>()?;
    Ok(parts.concat())
}

/// Scores a model on a labeled split with the task's metric.
pub fn evaluate<C: Classifier>(
    model: &C,
    batch: &ImageBatch,
    task: Task,
    num_classes: usize,
    binary: BinaryMetric,
) -> Result<EvalResult, MetricError> {
    let logits = predict(model, batch)?;
    if let Some(pos) = logits.iter().position(|v| !v.is_finite()) {
        return Err(MetricError::NonFinite(pos / num_classes));
    }
    let n = batch.len();
    let (metric, value) = match (task, binary) {
        (Task::Binary, BinaryMetric::Auc) => (MetricName::Auc, auc(&positive_probability(&logits), batch.labels())?),
        (Task::Binary, BinaryMetric::ThresholdAccuracy) => {
            (MetricName::Accuracy, threshold_accuracy(&positive_probability(&logits), batch.labels())?)
        }
        (Task::Multiclass, _) => {
            let pred: Vec<usize> = logits.chunks_exact(num_classes).map(argmax).collect();
            (MetricName::MacroF1, macro_f1(&pred, batch.labels(), num_classes)?)
        }
    };
    Ok(EvalResult { metric, value, n })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 6], &[1, 0, 1, 0, 0, 1]).unwrap(), 0.5);
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(MetricError::SingleClass { .. })));
    }

    #[test]
    fn macro_f1_examples() {
        assert_eq!(macro_f1(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap(), 1.0);
        assert!((macro_f1(&[0, 1, 1], &[0, 1, 2], 3).unwrap() - 5.0 / 9.0).abs() < 1e-15);
        assert_eq!(macro_f1(&[0, 0, 0], &[0, 0, 0], 2).unwrap(), 0.5);
        assert_eq!(macro_f1(&[3], &[3], 4).unwrap(), 0.25);
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[0.2, 0.7, 0.7]), 1);
        assert_eq!(argmax(&[1.0, 1.0]), 0);
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn threshold_accuracy_counts_half_as_positive() {
        assert_eq!(threshold_accuracy(&[0.5, 0.49, 0.9], &[1, 0, 0]).unwrap(), 2.0 / 3.0);
    }

    fn scored_labels() -> impl Strategy<Value = (Vec<f64>, Vec<usize>)> {
        (2usize..40).prop_flat_map(|n| {
            (prop::collection::vec(-5.0f64..5.0, n), prop::collection::vec(0usize..2, n)).prop_filter(
                "both classes",
                |(_, l)| l.contains(&0) && l.contains(&1),
            )
        })
    }

    proptest! {
        #[test]
        fn auc_is_invariant_to_monotone_maps((s, l) in scored_labels(), a in 0.1f64..3.0, b in -2.0f64..2.0) {
            let mapped: Vec<f64> = s.iter().map(|v| (a * v + b).exp()).collect();
            prop_assert_eq!(auc(&s, &l).unwrap(), auc(&mapped, &l).unwrap());
        }

        #[test]
        fn auc_of_flipped_labels_is_complementary((s, l) in scored_labels()) {
            let flipped: Vec<usize> = l.iter().map(|&v| 1 - v).collect();
            let total = auc(&s, &l).unwrap() + auc(&s, &flipped).unwrap();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }

        #[test]
        fn auc_agrees_with_pair_counting((s, l) in scored_labels()) {
            let (mut wins, mut pairs) = (0.0, 0.0);
            for i in 0..s.len() {
                for j in 0..s.len() {
                    if l[i] == 1 && l[j] == 0 {
                        pairs += 1.0;
                        if s[i] > s[j] { wins += 1.0 } else if s[i] == s[j] { wins += 0.5 }
                    }
                }
            }
            prop_assert!((auc(&s, &l).unwrap() - wins / pairs).abs() < 1e-12);
        }

        #[test]
        fn macro_f1_is_invariant_to_class_relabeling(
            pairs in prop::collection::vec((0usize..5, 0usize..5), 1..50),
            perm in Just((0..5).collect::<Vec<usize>>()).prop_shuffle(),
        ) {
            let (p, l): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let pp: Vec<usize> = p.iter().map(|&c| perm[c]).collect();
            let ll: Vec<usize> = l.iter().map(|&c| perm[c]).collect();
            let a = macro_f1(&p, &l, 5).unwrap();
            prop_assert!((a - macro_f1(&pp, &ll, 5).unwrap()).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }
}
