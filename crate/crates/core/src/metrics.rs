//! Cross-seed aggregation and sample-efficiency comparisons over traces.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::ExperimentTrace;

/// Default centred moving-average window for threshold crossings.
pub const SMOOTHING_WINDOW: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateSeries {
    pub metric: String,
    pub steps: Vec<u64>,
    pub mean: Vec<f64>,
    /// Sample standard deviation; zero when only one trace is given.
    pub std: Vec<f64>,
    pub count: usize,
}

/// Pointwise mean and sample std of `metric` across traces with identical steps.
pub fn aggregate(traces: &[ExperimentTrace], metric: &str) -> Result<AggregateSeries> {
    let first = traces
        .first()
        .ok_or_else(|| Error::InvalidArgument("no traces to aggregate".into()))?;
    let steps = first.steps();
    let columns = traces
        .iter()
        .map(|t| {
            if t.steps() != steps {
                return Err(Error::InvalidArgument(
                    "traces are not aligned on the same steps".into(),
                ));
            }
            t.column(metric)
        })
        .collect::<Result<Vec<_>>>()?;
    let series: Vec<&[f64]> = columns.iter().map(Vec::as_slice).collect();
    let (mean, std) = mean_std(&series);
    Ok(AggregateSeries {
        metric: metric.to_string(),
        steps,
        mean,
        std,
        count: traces.len(),
    })
}

/// Pointwise mean and sample std of equally long series.
pub fn mean_std(series: &[&[f64]]) -> (Vec<f64>, Vec<f64>) {
    let len = series.first().map_or(0, |s| s.len());
    let k = series.len() as f64;
    let mut mean = vec![0.0; len];
    let mut std = vec![0.0; len];
    for i in 0..len {
        // Sorting makes the reduction independent of trace order.
        let mut values: Vec<f64> = series.iter().map(|s| s[i]).collect();
        values.sort_by(f64::total_cmp);
        let mu = values.iter().sum::<f64>() / k;
        mean[i] = mu;
        if series.len() > 1 {
            let ss: f64 = values.iter().map(|v| (v - mu).powi(2)).sum();
            std[i] = (ss / (k - 1.0)).sqrt();
        }
    }
    (mean, std)
}

/// Centred moving average; windows are truncated at the ends.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let before = (window - 1) / 2;
    let after = window - 1 - before;
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(before);
            let hi = (i + after + 1).min(values.len());
            values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// First index at which the smoothed series is at or below `threshold`.
pub fn first_crossing(values: &[f64], threshold: f64, window: usize) -> Option<usize> {
    moving_average(values, window)
        .iter()
        .position(|&v| v <= threshold)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub threshold: f64,
    pub steps_a: Option<usize>,
    pub steps_b: Option<usize>,
    /// `steps_a / steps_b`; `None` when either series never crosses.
    pub ratio: Option<f64>,
}

pub fn sample_efficiency(
    series_a: &[f64],
    series_b: &[f64],
    threshold: f64,
    window: usize,
) -> EfficiencyReport {
    let steps_a = first_crossing(series_a, threshold, window);
    let steps_b = first_crossing(series_b, threshold, window);
    let ratio = match (steps_a, steps_b) {
        (Some(a), Some(b)) if a == b => Some(1.0),
        (Some(a), Some(b)) => Some(a as f64 / b as f64),
        _ => None,
    };
    EfficiencyReport {
        threshold,
        steps_a,
        steps_b,
        ratio,
    }
}
