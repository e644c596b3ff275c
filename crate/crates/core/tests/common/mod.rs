//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use fedsim::model::{loss, ClientId};
use fedsim::{DataShard, ModelParams};

/// `Σ nᵢ wᵢ / Σ nᵢ`, elementwise, summed in the order given.
pub fn flat_weighted_mean(models: &[(ModelParams, u64)]) -> Vec<f64> {
    let len = models[0].0.scalar_count();
    let total: f64 = models.iter().map(|(_, n)| *n as f64).sum();
    (0..len)
        .map(|j| models.iter().map(|(m, n)| *n as f64 * m.to_flat()[j]).sum::<f64>() / total)
        .collect()
}

/// Central-difference gradient of the regularized loss.
pub fn finite_difference_gradient(params: &ModelParams, shard: &DataShard, l2: f64, h: f64) -> Vec<f64> {
    let (d, k) = (params.num_features(), params.num_classes());
    let base = params.to_flat();
    (0..base.len())
        .map(|j| {
            let mut plus = base.clone();
            let mut minus = base.clone();
            plus[j] += h;
            minus[j] -= h;
            let lp = loss(&ModelParams::from_flat(d, k, &plus).unwrap(), shard, l2).unwrap();
            let lm = loss(&ModelParams::from_flat(d, k, &minus).unwrap(), shard, l2).unwrap();
            (lp - lm) / (2.0 * h)
        })
        .collect()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-12)
}

pub struct OracleMetrics {
    pub sensitivity: f64,
    pub specificity: f64,
    pub precision: f64,
    pub accuracy: f64,
    pub f1: f64,
    pub mcc: f64,
}

fn safe_div(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else {
        a / b
    }
}

/// Scores a confusion matrix by expanding it into individual
/// `(truth, prediction)` pairs and counting. MCC uses the covariance of the
/// one-hot truth and prediction vectors. Zero denominators score 0, and
/// classes with no samples and no predictions are left out of the averages.
pub fn oracle_metrics(cm: &[Vec<u64>]) -> OracleMetrics {
    let k = cm.len();
    let mut pairs = Vec::new();
    for (t, row) in cm.iter().enumerate() {
        for (p, &count) in row.iter().enumerate() {
            for _ in 0..count {
                pairs.push((t, p));
            }
        }
    }
    let n = pairs.len() as f64;
    let correct = pairs.iter().filter(|(t, p)| t == p).count() as f64;

    let (mut sens, mut spec, mut prec, mut f1, mut classes) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for c in 0..k {
        let (mut tp, mut fp, mut fn_, mut tn) = (0.0, 0.0, 0.0, 0.0);
        for &(t, p) in &pairs {
            match (t == c, p == c) {
                (true, true) => tp += 1.0,
                (false, true) => fp += 1.0,
                (true, false) => fn_ += 1.0,
                (false, false) => tn += 1.0,
            }
        }
        if tp + fp + fn_ == 0.0 {
            continue;
        }
        classes += 1.0;
        let r = safe_div(tp, tp + fn_);
        let p = safe_div(tp, tp + fp);
        sens += r;
        spec += safe_div(tn, tn + fp);
        prec += p;
        f1 += safe_div(2.0 * p * r, p + r);
    }

    let mean = |pick: &dyn Fn(&(usize, usize)) -> usize, c: usize| {
        safe_div(pairs.iter().filter(|s| pick(s) == c).count() as f64, n)
    };
    let truth = |s: &(usize, usize)| s.0;
    let pred = |s: &(usize, usize)| s.1;
    let cov = |a: &dyn Fn(&(usize, usize)) -> usize, b: &dyn Fn(&(usize, usize)) -> usize| {
        let mut acc = 0.0;
        for c in 0..k {
            let (ma, mb) = (mean(a, c), mean(b, c));
            for s in &pairs {
                let xa = f64::from(u8::from(a(s) == c)) - ma;
                let xb = f64::from(u8::from(b(s) == c)) - mb;
                acc += xa * xb;
            }
        }
        acc
    };
    let den = (cov(&truth, &truth) * cov(&pred, &pred)).sqrt();
    let mcc = safe_div(cov(&truth, &pred), den);

    OracleMetrics {
        sensitivity: safe_div(sens, classes),
        specificity: safe_div(spec, classes),
        precision: safe_div(prec, classes),
        accuracy: safe_div(correct, n),
        f1: safe_div(f1, classes),
        mcc,
    }
}

/// Plain synchronous FedAvg: every client starts from the same model, trains,
/// and the server takes the sample-weighted mean of the results.
pub fn textbook_fedavg_round(
    global: &ModelParams,
    shards: &[DataShard],
    train: impl Fn(&ModelParams, &DataShard) -> ModelParams,
) -> ModelParams {
    let trained: Vec<(ModelParams, u64)> = shards
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| (train(global, s), s.len() as u64))
        .collect();
    let flat = flat_weighted_mean(&trained);
    ModelParams::from_flat(global.num_features(), global.num_classes(), &flat).unwrap()
}

pub fn shard(d: usize, rows: Vec<Vec<f64>>, labels: Vec<usize>) -> DataShard {
    DataShard::new(ClientId(0), d, rows.into_iter().flatten().collect(), labels).unwrap()
}
