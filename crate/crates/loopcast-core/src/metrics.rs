//! Forecast metrics: MSE, MAE and SMAPE (200-factor convention, 0/0 -> 0),
//! plus mean/std aggregation over seeds.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricBundle {
    pub mse: f64,
    pub mae: f64,
    /// Percent, in [0, 200].
    pub smape: f64,
    pub count: usize,
}

/// Pointwise metrics over equal-length prediction and truth vectors.
pub fn compute_metrics(pred: &[f64], truth: &[f64]) -> Result<MetricBundle> {
    if pred.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if pred.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            op: "compute_metrics",
            expected: truth.len().to_string(),
            got: pred.len().to_string(),
        });
    }
    let n = pred.len() as f64;
    let mut mse = 0.0;
    let mut mae = 0.0;
    let mut smape = 0.0;
    for (&p, &t) in pred.iter().zip(truth) {
        let d = p - t;
        mse += d * d;
        mae += d.abs();
        let denom = p.abs() + t.abs();
        if denom > 0.0 {
            smape += d.abs() / denom;
        }
    }
    Ok(MetricBundle {
        mse: mse / n,
        mae: mae / n,
        smape: 200.0 * smape / n,
        count: pred.len(),
    })
}

/// Pool metrics over several (pred, truth) pairs as if concatenated.
pub fn pooled_metrics(pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<MetricBundle> {
    if pairs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut total = MetricBundle {
        mse: 0.0,
        mae: 0.0,
        smape: 0.0,
        count: 0,
    };
    for (pred, truth) in pairs {
        let m = compute_metrics(pred, truth)?;
        let w = m.count as f64;
        total.mse += m.mse * w;
        total.mae += m.mae * w;
        total.smape += m.smape * w;
        total.count += m.count;
    }
    let n = total.count as f64;
    total.mse /= n;
    total.mae /= n;
    total.smape /= n;
    Ok(total)
}

/// Seed-wise mean and (population) std of each metric; std is `None` for a
/// single seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricAggregate {
    pub mean: MetricBundle,
    pub std: Option<MetricBundle>,
    pub seeds: usize,
}

pub fn aggregate_metrics(bundles: &[MetricBundle]) -> Result<MetricAggregate> {
    if bundles.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = bundles.len() as f64;
    let mean_of = |f: &dyn Fn(&MetricBundle) -> f64| bundles.iter().map(|b| f(b)).sum::<f64>() / n;
    let mean = MetricBundle {
        mse: mean_of(&|b| b.mse),
        mae: mean_of(&|b| b.mae),
        smape: mean_of(&|b| b.smape),
        count: bundles.iter().map(|b| b.count).sum(),
    };
    let std = if bundles.len() > 1 {
        let var_of = |f: &dyn Fn(&MetricBundle) -> f64, m: f64| {
            (bundles.iter().map(|b| (f(b) - m).powi(2)).sum::<f64>() / n).sqrt()
        };
        Some(MetricBundle {
            mse: var_of(&|b| b.mse, mean.mse),
            mae: var_of(&|b| b.mae, mean.mae),
            smape: var_of(&|b| b.smape, mean.smape),
            count: mean.count,
        })
    } else {
        None
    };
    Ok(MetricAggregate {
        mean,
        std,
        seeds: bundles.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn perfect_prediction_is_zero() {
        let m = compute_metrics(&[1.0, -2.0, 3.0], &[1.0, -2.0, 3.0]).unwrap();
        assert_eq!((m.mse, m.mae, m.smape), (0.0, 0.0, 0.0));
        assert_eq!(m.count, 3);
    }

    #[test]
    fn hand_case_pred_two_truth_one() {
        let m = compute_metrics(&[2.0], &[1.0]).unwrap();
        assert_abs_diff_eq!(m.mse, 1.0);
        assert_abs_diff_eq!(m.mae, 1.0);
        assert_abs_diff_eq!(m.smape, 200.0 / 3.0, epsilon = 1e-3);
    }

    #[test]
    fn zero_over_zero_term_is_zero() {
        let m = compute_metrics(&[0.0], &[0.0]).unwrap();
        assert_eq!(m.smape, 0.0);
    }

    #[test]
    fn smape_is_symmetric_and_capped() {
        let a = [2.0, -1.0, 0.3, 7.0];
        let b = [1.5, 2.0, -0.3, 0.0];
        let ab = compute_metrics(&a, &b).unwrap().smape;
        let ba = compute_metrics(&b, &a).unwrap().smape;
        assert_abs_diff_eq!(ab, ba, epsilon = 1e-12);
        assert!(ab <= 200.0);
        // Opposite signs with matching magnitudes hit the cap exactly.
        let cap = compute_metrics(&[1.0, -3.0], &[-1.0, 3.0]).unwrap().smape;
        assert_abs_diff_eq!(cap, 200.0, epsilon = 1e-12);
    }

    #[test]
    fn length_mismatch_is_typed_error() {
        assert!(matches!(
            compute_metrics(&[1.0], &[1.0, 2.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(compute_metrics(&[], &[]), Err(Error::EmptyBatch)));
    }

    #[test]
    fn pooled_equals_concatenated() {
        let pairs = vec![
            (vec![1.0, 2.0], vec![1.5, 1.0]),
            (vec![0.0, -1.0, 4.0], vec![0.2, -1.4, 3.0]),
        ];
        let pooled = pooled_metrics(&pairs).unwrap();
        let cat_pred: Vec<f64> = pairs.iter().flat_map(|p| p.0.clone()).collect();
        let cat_truth: Vec<f64> = pairs.iter().flat_map(|p| p.1.clone()).collect();
        let cat = compute_metrics(&cat_pred, &cat_truth).unwrap();
        assert_abs_diff_eq!(pooled.mse, cat.mse, epsilon = 1e-12);
        assert_abs_diff_eq!(pooled.mae, cat.mae, epsilon = 1e-12);
        assert_abs_diff_eq!(pooled.smape, cat.smape, epsilon = 1e-12);
    }

    #[test]
    fn aggregate_mean_matches_arithmetic_mean() {
        let bundles = vec![
            MetricBundle { mse: 1.0, mae: 0.5, smape: 10.0, count: 4 },
            MetricBundle { mse: 3.0, mae: 1.5, smape: 30.0, count: 4 },
        ];
        let agg = aggregate_metrics(&bundles).unwrap();
        assert_abs_diff_eq!(agg.mean.mse, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(agg.mean.mae, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(agg.mean.smape, 20.0, epsilon = 1e-12);
        let std = agg.std.unwrap();
        assert_abs_diff_eq!(std.mse, 1.0, epsilon = 1e-12);
        let single = aggregate_metrics(&bundles[..1]).unwrap();
        assert!(single.std.is_none());
    }
}
