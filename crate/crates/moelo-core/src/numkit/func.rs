//! Stable softmax and L2 normalization.

use crate::error::{Error, Result};
use crate::numkit::matrix::dot;

/// Numerically stable softmax: subtracts the max score before
/// exponentiating so scores up to ~1e3 in magnitude cannot overflow.
pub fn softmax(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::Shape("softmax of empty score vector".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("non-finite softmax input".into()));
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    Ok(out)
}

/// Softmax applied in place to each row of a flat row-major buffer.
pub fn softmax_rows(data: &mut [f64], cols: usize) -> Result<()> {
    if cols == 0 || data.len() % cols != 0 {
        return Err(Error::Shape(format!(
            "softmax_rows on {} values with {} columns",
            data.len(),
            cols
        )));
    }
    for row in data.chunks_mut(cols) {
        let sm = softmax(row)?;
        row.copy_from_slice(&sm);
    }
    Ok(())
}

/// Scale `v` to unit L2 norm. A zero vector is a degenerate input.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let norm = dot(v, v).sqrt();
    if norm == 0.0 {
        return Err(Error::DegenerateInput(
            "cannot L2-normalize a zero vector".into(),
        ));
    }
    if !norm.is_finite() {
        return Err(Error::Numeric("non-finite norm in l2_normalize".into()));
    }
    Ok(v.iter().map(|&x| x / norm).collect())
}
