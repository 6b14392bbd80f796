//! Weighted F1, micro-F1 with an ignored label, and confusion matrices.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::LabelMap;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("metric contract violated: {0}")]
    Contract(String),
    #[error("invalid metric configuration: {0}")]
    Config(String),
    #[error("metric undefined: {0}")]
    Undefined(String),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

fn check(y_true: &[usize], y_pred: &[usize], num_classes: usize) -> Result<()> {
    if y_true.is_empty() {
        return Err(MetricsError::Contract("empty label vectors".into()));
    }
    if y_true.len() != y_pred.len() {
        return Err(MetricsError::Contract(format!(
            "{} gold labels but {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    if let Some(&bad) = y_true.iter().chain(y_pred).find(|&&c| c >= num_classes) {
        return Err(MetricsError::Contract(format!(
            "label id {bad} out of range for {num_classes} classes"
        )));
    }
    Ok(())
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// `[i][j]` counts gold `i` predicted as `j`.
pub fn confusion(
    y_true: &[usize],
    y_pred: &[usize],
    num_classes: usize,
) -> Result<Vec<Vec<usize>>> {
    check(y_true, y_pred, num_classes)?;
    let mut m = vec![vec![0; num_classes]; num_classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        m[t][p] += 1;
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

fn class_scores(m: &[Vec<usize>]) -> Vec<(f64, f64, f64, usize)> {
    let c = m.len();
    (0..c)
        .map(|k| {
            let tp = m[k][k];
            let support: usize = m[k].iter().sum();
            let predicted: usize = (0..c).map(|i| m[i][k]).sum();
            let p = ratio(tp, predicted);
            let r = ratio(tp, support);
            (p, r, f1(p, r), support)
        })
        .collect()
}

fn weighted_from_confusion(m: &[Vec<usize>]) -> f64 {
    let scores = class_scores(m);
    let total: usize = scores.iter().map(|s| s.3).sum();
    scores
        .iter()
        .map(|&(_, _, f, s)| s as f64 / total as f64 * f)
        .sum()
}

/// Support-weighted mean of per-class F1.
pub fn weighted_f1(y_true: &[usize], y_pred: &[usize], num_classes: usize) -> Result<f64> {
    let m = confusion(y_true, y_pred, num_classes)?;
    Ok(weighted_from_confusion(&m))
}

/// Micro-F1 pooled over every class except `excluded`. Gold `excluded`
/// predicted as something else is a false positive; a non-excluded gold
/// predicted as `excluded` is a false negative.
pub fn micro_f1_excluding(
    y_true: &[usize],
    y_pred: &[usize],
    num_classes: usize,
    excluded: usize,
) -> Result<f64> {
    if excluded >= num_classes {
        return Err(MetricsError::Config(format!(
            "excluded label {excluded} out of range for {num_classes} classes"
        )));
    }
    let m = confusion(y_true, y_pred, num_classes)?;
    micro_excluding_from_confusion(&m, excluded)
}

fn micro_excluding_from_confusion(m: &[Vec<usize>], excluded: usize) -> Result<f64> {
    let c = m.len();
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for k in (0..c).filter(|&k| k != excluded) {
        tp += m[k][k];
        fp += (0..c).filter(|&i| i != k).map(|i| m[i][k]).sum::<usize>();
        fn_ += (0..c).filter(|&j| j != k).map(|j| m[k][j]).sum::<usize>();
    }
    if tp + fn_ == 0 {
        log::warn!("micro-F1: every gold label is the excluded class");
        return Err(MetricsError::Undefined(
            "no gold labels outside the excluded class".into(),
        ));
    }
    Ok(f1(ratio(tp, tp + fp), ratio(tp, tp + fn_)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExcludedMicroF1 {
    pub label: String,
    /// `None` when every gold label is the excluded one.
    pub value: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_samples: usize,
    pub per_class: Vec<ClassScores>,
    pub weighted_avg_f1: f64,
    pub micro_f1: f64,
    pub micro_f1_excluding: Option<ExcludedMicroF1>,
    pub confusion: Vec<Vec<usize>>,
}

impl EvalReport {
    pub fn compute(y_true: &[usize], y_pred: &[usize], labels: &LabelMap) -> Result<Self> {
        let m = confusion(y_true, y_pred, labels.len())?;
        let per_class = class_scores(&m)
            .into_iter()
            .enumerate()
            .map(|(k, (precision, recall, f1, support))| ClassScores {
                label: labels.name(k).to_string(),
                precision,
                recall,
                f1,
                support,
            })
            .collect();
        let correct: usize = (0..m.len()).map(|k| m[k][k]).sum();
        let micro_f1_excluding = labels.excluded_id().map(|k| ExcludedMicroF1 {
            label: labels.name(k).to_string(),
            value: micro_excluding_from_confusion(&m, k).ok(),
        });
        Ok(Self {
            num_samples: y_true.len(),
            per_class,
            weighted_avg_f1: weighted_from_confusion(&m),
            // single-label micro-F1 equals accuracy
            micro_f1: ratio(correct, y_true.len()),
            micro_f1_excluding,
            confusion: m,
        })
    }

    /// Micro-F1 without the excluded label when the label set defines one,
    /// weighted F1 otherwise.
    pub fn primary(&self) -> f64 {
        match &self.micro_f1_excluding {
            Some(ExcludedMicroF1 { value: Some(v), .. }) => *v,
            Some(ExcludedMicroF1 { value: None, .. }) => 0.0,
            None => self.weighted_avg_f1,
        }
    }

    pub fn primary_name(&self) -> &'static str {
        if self.micro_f1_excluding.is_some() {
            "micro_f1_excluding"
        } else {
            "weighted_avg_f1"
        }
    }
}
