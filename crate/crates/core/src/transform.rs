//! Logit-normal transform and capacity-weighted aggregation.

use ndarray::Array2;

use crate::error::{Error, Result};

pub const DEFAULT_EPSILON: f64 = 1e-3;

pub fn clip_bounds(x: f64, epsilon: f64) -> f64 {
    x.max(epsilon).min(1.0 - epsilon)
}

pub fn logit(x: f64) -> Result<f64> {
    if !(x > 0.0 && x < 1.0) {
        return Err(Error::Domain(format!("logit of {x} outside (0, 1)")));
    }
    Ok((x / (1.0 - x)).ln())
}

pub fn inv_logit(y: f64) -> f64 {
    // branch keeps exp from overflowing for large |y|
    if y >= 0.0 {
        1.0 / (1.0 + (-y).exp())
    } else {
        let e = y.exp();
        e / (1.0 + e)
    }
}

/// Σ c_j x_j / Σ c_j.
pub fn aggregate(values: &[f64], capacities: &[f64]) -> Result<f64> {
    if values.len() != capacities.len() {
        return Err(Error::Dimension {
            expected: capacities.len(),
            found: values.len(),
        });
    }
    if values.is_empty() {
        return Err(Error::Argument("aggregate of zero farms".into()));
    }
    let total: f64 = capacities.iter().sum();
    Ok(values
        .iter()
        .zip(capacities)
        .map(|(x, c)| x * c)
        .sum::<f64>()
        / total)
}

/// Power matrix mapped to the real line after clipping to [ε, 1−ε].
#[derive(Debug, Clone, PartialEq)]
pub struct TransformedSeries {
    pub values: Array2<f64>,
    pub epsilon: f64,
}

impl TransformedSeries {
    pub fn from_power(power: &Array2<f64>, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon < 0.5) {
            return Err(Error::Argument(format!(
                "epsilon {epsilon} outside (0, 0.5)"
            )));
        }
        let mut values = Array2::zeros(power.raw_dim());
        for (v, &x) in values.iter_mut().zip(power.iter()) {
            *v = logit(clip_bounds(x, epsilon))?;
        }
        Ok(Self { values, epsilon })
    }

    pub fn to_power(&self) -> Array2<f64> {
        self.values.mapv(inv_logit)
    }
}
