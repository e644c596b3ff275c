//! Confusion-matrix metrics for evaluating the global model.
//!
//! Rates are macro-averaged one-vs-rest over the classes that appear in the
//! matrix (nonzero row or column). Any rate whose denominator is zero counts
//! as 0, and MCC is 0 when its denominator vanishes.

use serde::{Deserialize, Serialize};

use crate::model::{self, DataShard, ModelError, ModelParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Rows are true classes, columns predicted classes.
    pub confusion_matrix: Vec<Vec<u64>>,
    pub sensitivity: f64,
    pub specificity: f64,
    pub precision: f64,
    pub accuracy: f64,
    pub f1: f64,
    pub mcc: f64,
    /// Recall of every class, 0 for classes absent from the test set.
    pub per_class_recall: Vec<f64>,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

pub fn confusion_matrix(params: &ModelParams, test: &DataShard) -> Result<Vec<Vec<u64>>, ModelError> {
    let k = params.num_classes();
    let mut cm = vec![vec![0u64; k]; k];
    for (x, y) in test.iter() {
        if y >= k {
            return Err(ModelError::LabelOutOfRange { label: y, num_classes: k });
        }
        cm[y][params.predict_class(x)?] += 1;
    }
    Ok(cm)
}

/// Computes every metric from a square confusion matrix.
pub fn metrics_from_confusion(cm: &[Vec<u64>]) -> EvalReport {
    let k = cm.len();
    let rows: Vec<f64> = cm.iter().map(|r| r.iter().sum::<u64>() as f64).collect();
    let cols: Vec<f64> = (0..k).map(|j| cm.iter().map(|r| r[j]).sum::<u64>() as f64).collect();
    let total: f64 = rows.iter().sum();
    let trace: f64 = (0..k).map(|i| cm[i][i] as f64).sum();

    let (mut sens, mut spec, mut prec, mut f1) = (0.0, 0.0, 0.0, 0.0);
    let mut present = 0usize;
    let mut per_class_recall = Vec::with_capacity(k);
    for c in 0..k {
        let tp = cm[c][c] as f64;
        let fn_ = rows[c] - tp;
        let fp = cols[c] - tp;
        let tn = total - tp - fn_ - fp;
        let recall = ratio(tp, tp + fn_);
        per_class_recall.push(recall);
        if rows[c] + cols[c] == 0.0 {
            continue;
        }
        present += 1;
        let p = ratio(tp, tp + fp);
        sens += recall;
        spec += ratio(tn, tn + fp);
        prec += p;
        f1 += ratio(2.0 * p * recall, p + recall);
    }
    let n = present as f64;

    let s = total;
    let cross: f64 = rows.iter().zip(&cols).map(|(t, p)| t * p).sum();
    let p2: f64 = cols.iter().map(|p| p * p).sum();
    let t2: f64 = rows.iter().map(|t| t * t).sum();
    let den = ((s * s - p2) * (s * s - t2)).sqrt();
    let mcc = ratio(trace * s - cross, den).clamp(-1.0, 1.0);

    EvalReport {
        confusion_matrix: cm.to_vec(),
        sensitivity: ratio(sens, n),
        specificity: ratio(spec, n),
        precision: ratio(prec, n),
        accuracy: ratio(trace, total),
        f1: ratio(f1, n),
        mcc,
        per_class_recall,
    }
}

/// Predicts every test sample with `params` and scores the result.
pub fn evaluate_global(params: &ModelParams, test: &DataShard) -> Result<EvalReport, ModelError> {
    if test.is_empty() {
        return Err(ModelError::EmptyShard);
    }
    Ok(metrics_from_confusion(&confusion_matrix(params, test)?))
}

/// Mean cross-entropy of `params` on `test`, without the weight penalty.
pub fn test_loss(params: &ModelParams, test: &DataShard) -> Result<f64, ModelError> {
    model::loss(params, test, 0.0)
}
