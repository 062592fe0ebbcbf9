//! Evaluation metrics and run-level aggregation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("no positive labels; average precision is undefined")]
    NoPositives,
    #[error("every class lacks an observed positive")]
    AllClassesDegenerate,
    #[error("empty input")]
    Empty,
    #[error("shape mismatch: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricName {
    Map,
    Accuracy,
}

impl std::fmt::Display for MetricName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MetricName::Map => "map",
            MetricName::Accuracy => "accuracy",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub metric_name: MetricName,
    pub value: f64,
    /// Per-class AP; `None` for classes excluded from the macro mean.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_class: Option<Vec<Option<f64>>>,
    pub n_instances: usize,
}

/// Non-interpolated average precision: mean of precision@k over the ranks of the positives.
/// Ties in score keep the original order.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64, MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::Shape(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    if scores.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] == 1 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    if hits == 0 {
        return Err(MetricError::NoPositives);
    }
    Ok(sum / hits as f64)
}

/// Macro mAP over classes; class `l` is ranked only over instances with `mask[i][l] = 1`,
/// and classes without an observed positive are left out of the mean.
pub fn macro_map(scores: &[Vec<f64>], labels: &[Vec<u8>], mask: &[Vec<u8>]) -> Result<EvalResult, MetricError> {
    if scores.len() != labels.len() || scores.len() != mask.len() {
        return Err(MetricError::Shape("scores, labels and mask differ in length".into()));
    }
    let n_classes = scores.first().map_or(0, Vec::len);
    if scores.iter().any(|r| r.len() != n_classes)
        || labels.iter().any(|r| r.len() != n_classes)
        || mask.iter().any(|r| r.len() != n_classes)
    {
        return Err(MetricError::Shape("ragged rows".into()));
    }
    let mut per_class = Vec::with_capacity(n_classes);
    for class in 0..n_classes {
        let (s, y): (Vec<f64>, Vec<u8>) =
            (0..scores.len()).filter(|&i| mask[i][class] == 1).map(|i| (scores[i][class], labels[i][class])).unzip();
        let ap = if s.is_empty() { None } else { average_precision(&s, &y).ok() };
        if ap.is_none() {
            log::warn!("class {class} has no observed positive; excluded from mAP");
        }
        per_class.push(ap);
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(MetricError::AllClassesDegenerate);
    }
    Ok(EvalResult {
        metric_name: MetricName::Map,
        value: present.iter().sum::<f64>() / present.len() as f64,
        per_class: Some(per_class),
        n_instances: scores.len(),
    })
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose argmax (lowest index on ties) is the labelled class.
pub fn accuracy(y_hat: &[Vec<f64>], labels: &[Vec<u8>]) -> Result<EvalResult, MetricError> {
    if y_hat.is_empty() {
        return Err(MetricError::Empty);
    }
    if y_hat.len() != labels.len() {
        return Err(MetricError::Shape(format!("{} predictions vs {} labels", y_hat.len(), labels.len())));
    }
    let correct = y_hat.iter().zip(labels).filter(|(p, y)| y.iter().position(|&v| v == 1) == Some(argmax(p))).count();
    Ok(EvalResult {
        metric_name: MetricName::Accuracy,
        value: correct as f64 / y_hat.len() as f64,
        per_class: None,
        n_instances: y_hat.len(),
    })
}

/// Arithmetic mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> Result<(f64, f64), MetricError> {
    if values.is_empty() {
        return Err(MetricError::Empty);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}
