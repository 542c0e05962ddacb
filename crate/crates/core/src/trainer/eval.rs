use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{one_hot, Label, ModelBundle, TaskKind};
use crate::numeric::{Real, Tensor};
use crate::tokenizers::TokenSequence;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub metric: String,
    pub value: f64,
    pub n: usize,
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(preds: &[Tensor<f64>], labels: &[usize]) -> Result<f64> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(Error::Invalid(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    let hits = preds.iter().zip(labels).filter(|(p, &y)| p.argmax() == y).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Mean IoU over classes that occur in the prediction or the target.
pub fn mean_iou(pred: &[usize], target: &[usize], classes: usize) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::Invalid(format!("{} predicted tokens for {} targets", pred.len(), target.len())));
    }
    let mut inter = vec![0usize; classes];
    let mut union = vec![0usize; classes];
    for (&p, &t) in pred.iter().zip(target) {
        if p >= classes || t >= classes {
            return Err(Error::Label { label: p.max(t), classes });
        }
        if p == t {
            inter[p] += 1;
            union[p] += 1;
        } else {
            union[p] += 1;
            union[t] += 1;
        }
    }
    let present: Vec<f64> = (0..classes).filter(|&c| union[c] > 0).map(|c| inter[c] as f64 / union[c] as f64).collect();
    if present.is_empty() {
        return Ok(1.0);
    }
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

/// Runs single-stream inference for task `t` over `indices` and reports
/// top-1 accuracy (classification) or per-token l2 and mIoU (dense).
pub fn evaluate<T: Real>(
    bundle: &ModelBundle<T>,
    t: usize,
    seqs: &[TokenSequence<T>],
    labels: &[Label],
    indices: impl IntoIterator<Item = usize>,
) -> Result<Vec<EvalReport>> {
    let spec = bundle.task(t)?.clone();
    let indices: Vec<usize> = indices.into_iter().collect();
    if indices.is_empty() {
        return Err(Error::Invalid(format!("no samples to evaluate `{}` on", spec.key())));
    }
    let n = indices.len();
    let report = |metric: &str, value: f64| EvalReport { task: spec.key(), metric: metric.into(), value, n };
    match spec.kind {
        TaskKind::Classification => {
            let mut preds = Vec::with_capacity(n);
            let mut ys = Vec::with_capacity(n);
            for &i in &indices {
                let Label::Class(y) = labels[i] else {
                    return Err(Error::Invalid(format!("task `{}` expects class labels", spec.key())));
                };
                preds.push(bundle.predict(&seqs[i], t)?.cast::<f64>());
                ys.push(y);
            }
            Ok(vec![report("accuracy", accuracy(&preds, &ys)?)])
        }
        TaskKind::Dense => {
            let (mut l2, mut iou) = (0.0, 0.0);
            for &i in &indices {
                let Label::Dense(map) = &labels[i] else {
                    return Err(Error::Invalid(format!("task `{}` expects per-token labels", spec.key())));
                };
                let pred = bundle.predict(&seqs[i], t)?.cast::<f64>();
                let target = one_hot::<f64>(map, spec.outputs)?;
                let sq: f64 = pred.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum();
                l2 += sq / pred.numel() as f64;
                let argmax: Vec<usize> = (0..pred.rows()).map(|r| pred.gather_rows(&[r]).argmax()).collect();
                iou += mean_iou(&argmax, map, spec.outputs)?;
            }
            Ok(vec![report("l2", l2 / n as f64), report("miou", iou / n as f64)])
        }
    }
}
