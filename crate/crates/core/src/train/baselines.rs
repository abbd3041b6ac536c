//! Per-node forecasts that ignore the graph: last value, seasonal naive and
//! least-squares autoregression.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    LastValue,
    SeasonalNaive { period: usize },
    ArLs { order: usize },
}

impl Baseline {
    pub fn name(&self) -> String {
        match self {
            Baseline::LastValue => "last_value".into(),
            Baseline::SeasonalNaive { period } => format!("seasonal_naive({period})"),
            Baseline::ArLs { order } => format!("ar_ls({order})"),
        }
    }

    pub fn forecast(&self, series: &[f64], horizon: usize) -> Forecast {
        match *self {
            Baseline::LastValue => last_value(series, horizon),
            Baseline::SeasonalNaive { period } => seasonal_naive(series, period, horizon),
            Baseline::ArLs { order } => ar_ls(series, order, horizon),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Forecast {
    /// Per-month values, clamped at zero.
    pub values: Vec<f64>,
    /// The history was too short and `last_value` was used instead.
    pub fell_back: bool,
}

fn clamp(values: Vec<f64>, fell_back: bool) -> Forecast {
    Forecast { values: values.into_iter().map(|v| v.max(0.0)).collect(), fell_back }
}

pub fn last_value(series: &[f64], horizon: usize) -> Forecast {
    let last = series.last().copied().unwrap_or(0.0);
    clamp(vec![last; horizon], false)
}

/// Month `T + i` repeats month `T + i - period`.
pub fn seasonal_naive(series: &[f64], period: usize, horizon: usize) -> Forecast {
    let n = series.len();
    if period == 0 || n < period {
        return Forecast { fell_back: true, ..last_value(series, horizon) };
    }
    let values = (0..horizon).map(|i| series[n - period + i % period]).collect();
    clamp(values, false)
}

/// Least-squares fit of `x_t = c + Σ_k a_k x_{t-k}`.
#[derive(Clone, Debug, PartialEq)]
pub struct ArFit {
    pub intercept: f64,
    /// `coefs[k - 1]` multiplies `x_{t-k}`.
    pub coefs: Vec<f64>,
}

pub fn fit_ar(series: &[f64], order: usize) -> Option<ArFit> {
    let n = series.len();
    if order == 0 || n <= order {
        return None;
    }
    let rows = n - order;
    let x = DMatrix::from_fn(rows, order + 1, |r, c| if c == 0 { 1.0 } else { series[r + order - c] });
    let y = DVector::from_iterator(rows, series[order..].iter().copied());
    let sol = x.svd(true, true).solve(&y, 1e-12).ok()?;
    Some(ArFit { intercept: sol[0], coefs: sol.iter().skip(1).copied().collect() })
}

pub fn ar_ls(series: &[f64], order: usize, horizon: usize) -> Forecast {
    let Some(fit) = fit_ar(series, order) else {
        return Forecast { fell_back: true, ..last_value(series, horizon) };
    };
    let mut hist = series.to_vec();
    for _ in 0..horizon {
        let n = hist.len();
        let next = fit.intercept + (1..=order).map(|k| fit.coefs[k - 1] * hist[n - k]).sum::<f64>();
        hist.push(next);
    }
    clamp(hist[series.len()..].to_vec(), false)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_series_everywhere() {
        let s = vec![7.0; 14];
        for b in [Baseline::LastValue, Baseline::SeasonalNaive { period: 12 }, Baseline::ArLs { order: 2 }] {
            let f = b.forecast(&s, 3);
            assert!(!f.fell_back);
            assert_eq!(f.values.len(), 3);
            for v in f.values {
                assert!((v - 7.0).abs() < 1e-9, "{} -> {v}", b.name());
            }
        }
    }

    #[test]
    fn seasonal_naive_exact_on_period_twelve() {
        let wave = |t: usize| 100.0 + 30.0 * (2.0 * std::f64::consts::PI * t as f64 / 12.0).sin();
        let s: Vec<f64> = (0..24).map(wave).collect();
        let f = seasonal_naive(&s, 12, 3);
        for (i, v) in f.values.iter().enumerate() {
            assert!((v - wave(24 + i)).abs() < 1e-9);
        }
    }

    #[test]
    fn ar2_coefficients_recovered() {
        let (c, a1, a2) = (1.0, 1.6, -0.95);
        let mut s = vec![3.0, -1.0];
        for t in 2..30 {
            s.push(c + a1 * s[t - 1] + a2 * s[t - 2]);
        }
        let fit = fit_ar(&s, 2).unwrap();
        assert!((fit.intercept - c).abs() < 1e-6);
        assert!((fit.coefs[0] - a1).abs() < 1e-6);
        assert!((fit.coefs[1] - a2).abs() < 1e-6);
    }

    #[test]
    fn short_series_fall_back() {
        let f = ar_ls(&[5.0, 6.0], 2, 3);
        assert!(f.fell_back);
        assert_eq!(f.values, vec![6.0; 3]);
        assert!(seasonal_naive(&[5.0; 4], 12, 3).fell_back);
        let f = last_value(&[-3.0], 2);
        assert_eq!(f.values, vec![0.0, 0.0]);
    }
}
