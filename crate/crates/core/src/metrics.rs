//! Evaluation metrics: accuracy, RMSE, average precision, and confusion
//! matrices, plus a small predictor abstraction so cascades and flat
//! baselines evaluate through the same code path.

use std::collections::BTreeMap;

use nalgebra::DVector;

use crate::cascade::CascadeModel;
use crate::error::{Error, Result};
use crate::tasks::{Label, LabelSpace, Metric, MultiTaskDataset, Sample, TaskSpec};

/// Anything that maps a sample to per-task (scores, label) predictions.
pub trait Predictor {
    fn predict_sample(&self, sample: &Sample) -> Result<BTreeMap<usize, (DVector<f64>, Label)>>;
}

impl Predictor for CascadeModel {
    fn predict_sample(&self, sample: &Sample) -> Result<BTreeMap<usize, (DVector<f64>, Label)>> {
        self.predict(sample)
    }
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(Error::EmptyEval(
            "accuracy needs aligned nonempty inputs".into(),
        ));
    }
    let correct = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(correct as f64 / pred.len() as f64)
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(Error::EmptyEval(
            "rmse needs aligned nonempty inputs".into(),
        ));
    }
    let mse: f64 = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / pred.len() as f64;
    Ok(mse.sqrt())
}

/// Average precision by the every-positive-rank method: rank all entries by
/// descending score (ties broken by ascending sample id), then average the
/// precision at each positive entry's rank.
pub fn average_precision(entries: &[(usize, f64, bool)]) -> Result<f64> {
    if entries.is_empty() {
        return Err(Error::EmptyEval("average precision needs entries".into()));
    }
    let n_pos = entries.iter().filter(|e| e.2).count();
    if n_pos == 0 {
        return Err(Error::EmptyEval(
            "average precision needs at least one positive".into(),
        ));
    }
    let mut ranked: Vec<&(usize, f64, bool)> = entries.iter().collect();
    ranked.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    let mut seen_pos = 0usize;
    let mut total = 0.0;
    for (rank0, e) in ranked.iter().enumerate() {
        if e.2 {
            seen_pos += 1;
            total += seen_pos as f64 / (rank0 + 1) as f64;
        }
    }
    Ok(total / n_pos as f64)
}

/// Confusion matrix, rows indexed by ground truth, columns by prediction.
pub fn confusion_matrix(k: usize, pred: &[usize], truth: &[usize]) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0usize; k]; k];
    for (&p, &t) in pred.iter().zip(truth) {
        if t < k && p < k {
            m[t][p] += 1;
        }
    }
    m
}

/// Score used for ranking in average precision: the positive class is class
/// 1, scored by its advantage over class 0 (or the raw scalar log-odds for
/// one-dimensional outputs).
pub fn positive_score(scores: &DVector<f64>) -> f64 {
    if scores.len() >= 2 {
        scores[1] - scores[0]
    } else {
        scores[0]
    }
}

/// The task's metric for a predictor over the labeled samples of a dataset.
pub fn metric_score<P: Predictor>(
    model: &P,
    data: &MultiTaskDataset,
    spec: &TaskSpec,
) -> Result<f64> {
    let tid = spec.task_id;
    let mut class_pred = Vec::new();
    let mut class_truth = Vec::new();
    let mut value_pred = Vec::new();
    let mut value_truth = Vec::new();
    let mut ap_entries = Vec::new();
    for sample in &data.samples {
        let Some(label) = sample.labels.get(&tid) else {
            continue;
        };
        let preds = model.predict_sample(sample)?;
        let (scores, predicted) = preds
            .get(&tid)
            .ok_or_else(|| Error::EmptyEval(format!("no prediction for task {tid}")))?;
        match (label, predicted) {
            (Label::Class(t), Label::Class(p)) => {
                class_pred.push(*p);
                class_truth.push(*t);
                ap_entries.push((sample.sample_id, positive_score(scores), *t == 1));
            }
            (Label::Value(t), Label::Value(p)) => {
                value_pred.push(*p);
                value_truth.push(*t);
            }
            _ => {
                return Err(Error::Contract(format!(
                    "prediction kind mismatch for task {tid}"
                )))
            }
        }
    }
    match spec.metric {
        Metric::Accuracy => accuracy(&class_pred, &class_truth),
        Metric::Rmse => rmse(&value_pred, &value_truth),
        Metric::AveragePrecision => {
            if let LabelSpace::Categorical(_) = spec.label_space {
                average_precision(&ap_entries)
            } else {
                Err(Error::Contract(
                    "average precision needs a categorical task".into(),
                ))
            }
        }
    }
}

/// Metric value mapped so that larger is always better.
pub fn signed_metric(metric: Metric, value: f64) -> f64 {
    match metric {
        Metric::Accuracy | Metric::AveragePrecision => value,
        Metric::Rmse => -value,
    }
}
