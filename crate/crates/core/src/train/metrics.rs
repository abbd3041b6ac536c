use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{GaiaError, Result};
use crate::synth::NEW_SHOP_MONTHS;

/// Truths below this are left out of MAPE.
pub const MAPE_FLOOR: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    /// Fraction, not percent. `NaN` (serialized as `null`) when every truth is excluded.
    pub mape: f64,
    pub mape_excluded: usize,
    pub count: usize,
}

pub fn metrics(pred: &[f64], truth: &[f64]) -> Result<Metrics> {
    if pred.is_empty() {
        return Err(GaiaError::EmptyNodeSet);
    }
    if pred.len() != truth.len() {
        return Err(GaiaError::Config(format!("{} predictions for {} truths", pred.len(), truth.len())));
    }
    let n = pred.len() as f64;
    let (mut abs, mut sq, mut pct, mut kept) = (0.0, 0.0, 0.0, 0usize);
    for (&p, &y) in pred.iter().zip(truth) {
        let e = p - y;
        abs += e.abs();
        sq += e * e;
        if y >= MAPE_FLOOR {
            pct += (e / y).abs();
            kept += 1;
        }
    }
    Ok(Metrics {
        mae: abs / n,
        rmse: (sq / n).sqrt(),
        mape: if kept > 0 { pct / kept as f64 } else { f64::NAN },
        mape_excluded: pred.len() - kept,
        count: pred.len(),
    })
}

/// Metrics on the summed horizon plus each month, overall and by shop age.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub total: Metrics,
    pub monthly: Vec<Metrics>,
    /// Nodes with fewer than 10 observed months.
    pub new_shops: Option<Metrics>,
    pub old_shops: Option<Metrics>,
}

impl Evaluation {
    /// `preds[i]` is the per-month forecast, in original units, of `nodes[i]`.
    pub fn from_predictions(data: &Dataset, nodes: &[usize], preds: &[Vec<f64>]) -> Result<Self> {
        if nodes.is_empty() {
            return Err(GaiaError::EmptyNodeSet);
        }
        let truths: Vec<&[f64]> = nodes.iter().map(|&i| data.target(i)).collect::<Result<_>>()?;
        let sum = |v: &[f64]| v.iter().sum::<f64>();
        let pred_sum: Vec<f64> = preds.iter().map(|p| sum(p)).collect();
        let truth_sum: Vec<f64> = truths.iter().map(|t| sum(t)).collect();
        let total = metrics(&pred_sum, &truth_sum)?;
        let monthly = (0..data.horizon)
            .map(|m| {
                let p: Vec<f64> = preds.iter().map(|p| p[m]).collect();
                let t: Vec<f64> = truths.iter().map(|t| t[m]).collect();
                metrics(&p, &t)
            })
            .collect::<Result<_>>()?;
        let group = |new: bool| -> Option<Metrics> {
            let (p, t): (Vec<f64>, Vec<f64>) = nodes
                .iter()
                .enumerate()
                .filter(|(_, &i)| (data.graph.node(i).observed_len() < NEW_SHOP_MONTHS) == new)
                .map(|(k, _)| (pred_sum[k], truth_sum[k]))
                .unzip();
            metrics(&p, &t).ok()
        };
        Ok(Evaluation { total, monthly, new_shops: group(true), old_shops: group(false) })
    }
}
