use serde::{Deserialize, Serialize};

use super::EvalError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApInterpolation {
    /// Mean of the interpolated precision at recall 0.00, 0.01, ..., 1.00.
    #[default]
    Point101,
    /// Area under the interpolated curve at every recall change.
    AllPoint,
}

/// Cumulative precision/recall after each detection, given TP flags in
/// descending-score order.
pub fn pr_curve(tp_flags: &[bool], n_gt: usize) -> Vec<PrPoint> {
    let mut tp = 0u64;
    tp_flags
        .iter()
        .enumerate()
        .map(|(k, &is_tp)| {
            tp += is_tp as u64;
            PrPoint {
                recall: if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 },
                precision: tp as f64 / (k + 1) as f64,
            }
        })
        .collect()
}

/// Precision envelope: each point's precision replaced by the maximum
/// precision at equal or higher recall.
pub fn envelope(curve: &[PrPoint]) -> Vec<f64> {
    let mut env: Vec<f64> = curve.iter().map(|p| p.precision).collect();
    for i in (0..env.len().saturating_sub(1)).rev() {
        env[i] = env[i].max(env[i + 1]);
    }
    env
}

/// Interpolated average precision of a ranked TP/FP sequence.
pub fn ap_from_ranked(tp_flags: &[bool], n_gt: usize, interp: ApInterpolation) -> Result<f64, EvalError> {
    if n_gt == 0 {
        return Err(EvalError::NoGroundTruth);
    }
    let curve = pr_curve(tp_flags, n_gt);
    Ok(ap_from_curve(&curve, interp))
}

pub fn ap_from_curve(curve: &[PrPoint], interp: ApInterpolation) -> f64 {
    if curve.is_empty() {
        return 0.0;
    }
    let env = envelope(curve);
    match interp {
        ApInterpolation::Point101 => {
            // Recall is non-decreasing along the curve, so the first index
            // reaching r carries the envelope value for r.
            let mut idx = 0;
            let mut sum = 0.0;
            for i in 0..=100 {
                let r = i as f64 / 100.0;
                while idx < curve.len() && curve[idx].recall < r {
                    idx += 1;
                }
                if idx < curve.len() {
                    sum += env[idx];
                }
            }
            sum / 101.0
        }
        ApInterpolation::AllPoint => {
            let mut prev_recall = 0.0;
            let mut area = 0.0;
            for (p, e) in curve.iter().zip(&env) {
                if p.recall > prev_recall {
                    area += (p.recall - prev_recall) * e;
                    prev_recall = p.recall;
                }
            }
            area
        }
    }
}
