use crate::error::{Error, Result};
use crate::tensor::{SeqTensor, Shape};

/// One forward call of a rolling forecast.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RollStep {
    /// First series row of the input window.
    pub input_start: usize,
    /// First series row the call predicts.
    pub target_start: usize,
    /// Rows of this call's output kept in the final forecast.
    pub keep: usize,
}

/// Windows of a rolling forecast of `horizon` rows starting right after
/// `series[start..start + input_len]`. The window advances by `pred_len`
/// per call; when `horizon` is not a multiple of `pred_len` the last call's
/// output is truncated.
pub fn rolling_plan(
    series_len: usize,
    input_len: usize,
    pred_len: usize,
    start: usize,
    horizon: usize,
) -> Result<Vec<RollStep>> {
    if pred_len == 0 || horizon < pred_len {
        return Err(Error::Config(format!(
            "horizon {horizon} must be at least pred_len {pred_len}"
        )));
    }
    let calls = horizon.div_ceil(pred_len);
    let need = start + input_len + calls * pred_len;
    if need > series_len {
        return Err(Error::Config(format!(
            "rolling forecast needs {need} rows, series has {series_len}"
        )));
    }
    Ok((0..calls)
        .map(|i| RollStep {
            input_start: start + i * pred_len,
            target_start: start + input_len + i * pred_len,
            keep: pred_len.min(horizon - i * pred_len),
        })
        .collect())
}

/// Runs `forecast` once per planned step and concatenates the kept rows.
/// Every input window is cut from the observed series, never from earlier
/// predictions. `forecast` receives the step and returns `[1 × pred_len × N]`.
pub fn rolling_predict<F>(plan: &[RollStep], n_series: usize, mut forecast: F) -> Result<SeqTensor>
where
    F: FnMut(&RollStep) -> Result<SeqTensor>,
{
    let mut data = Vec::new();
    for step in plan {
        let y = forecast(step)?;
        if y.shape().batch != 1 || y.shape().dim != n_series || y.shape().len < step.keep {
            return Err(Error::Config(format!("forecast returned {}", y.shape())));
        }
        data.extend_from_slice(&y.data()[..step.keep * n_series]);
    }
    let rows = data.len() / n_series.max(1);
    Ok(SeqTensor::new(Shape::new(1, rows, n_series), data)?)
}
