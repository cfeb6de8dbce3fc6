//! Evaluation arithmetic: speedup, greenup, energy-delay product, oracle
//! normalization and geometric means.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("{what} must be positive and finite, got {value}")]
    NonPositive { what: &'static str, value: f64 },
    #[error("geometric mean of an empty set")]
    Empty,
    #[error("threshold must lie in (0, 1], got {0}")]
    Threshold(f64),
}

fn positive(what: &'static str, value: f64) -> Result<f64, MetricsError> {
    if value > 0.0 && value.is_finite() {
        Ok(value)
    } else {
        Err(MetricsError::NonPositive { what, value })
    }
}

/// `t_default / t_new`.
pub fn speedup(t_default: f64, t_new: f64) -> Result<f64, MetricsError> {
    Ok(positive("default time", t_default)? / positive("new time", t_new)?)
}

/// `e_default / e_new`.
pub fn greenup(e_default: f64, e_new: f64) -> Result<f64, MetricsError> {
    Ok(positive("default energy", e_default)? / positive("new energy", e_new)?)
}

/// Energy-delay product `e * t`.
pub fn edp(energy: f64, time: f64) -> Result<f64, MetricsError> {
    Ok(positive("energy", energy)? * positive("time", time)?)
}

/// Ratio of EDPs, `edp(default) / edp(new)`, for `(energy, time)` pairs.
///
/// Evaluated as `speedup * greenup` so that the identity between the three
/// ratios holds bit-for-bit.
pub fn edp_improvement(default: (f64, f64), new: (f64, f64)) -> Result<f64, MetricsError> {
    let (e_d, t_d) = default;
    let (e_n, t_n) = new;
    Ok(speedup(t_d, t_n)? * greenup(e_d, e_n)?)
}

/// `exp(mean(ln v))`.
pub fn geomean(values: &[f64]) -> Result<f64, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut logs = Vec::with_capacity(values.len());
    for &v in values {
        logs.push(positive("geomean input", v)?.ln());
    }
    // Sorting makes the sum independent of input order.
    logs.sort_by(f64::total_cmp);
    Ok((logs.iter().sum::<f64>() / logs.len() as f64).exp())
}

/// `value / oracle_value`.
pub fn normalized(value: f64, oracle_value: f64) -> Result<f64, MetricsError> {
    Ok(value / positive("oracle value", oracle_value)?)
}

/// Share of `normalized_values` that reach `threshold`.
pub fn frac_within(normalized_values: &[f64], threshold: f64) -> Result<f64, MetricsError> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(MetricsError::Threshold(threshold));
    }
    if normalized_values.is_empty() {
        return Ok(0.0);
    }
    let hits = normalized_values.iter().filter(|&&v| v >= threshold).count();
    Ok(hits as f64 / normalized_values.len() as f64)
}
