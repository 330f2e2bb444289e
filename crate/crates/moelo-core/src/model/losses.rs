//! The three training objectives: dot-regression alignment, fused
//! cross-entropy, and their sum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::etf::AnchorFrame;
use crate::numkit::{dot, Matrix};

/// Floor applied to probabilities before the log in cross-entropy.
pub const CE_PROB_FLOOR: f64 = 1e-12;

/// Alignment target for the dot-regression loss. `InverseSqrt` pulls each
/// sample's cosine toward 1/sqrt(r_max - 1), a target that loosens as the
/// frame grows; `Unity` pulls toward perfect alignment. Both conventions are
/// in circulation, so the choice is explicit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DrTarget {
    #[default]
    InverseSqrt,
    Unity,
}

impl DrTarget {
    pub fn value(self, r_max: usize) -> f64 {
        match self {
            DrTarget::InverseSqrt => 1.0 / ((r_max as f64) - 1.0).sqrt(),
            DrTarget::Unity => 1.0,
        }
    }
}

/// Dot-regression loss: (1/2N) * sum_i (cos(z_hat_i, v_{a_i}) - target)^2
/// where a_i is the sample's own anchor index.
pub fn loss_dr(
    z_hat: &Matrix,
    anchor_labels: &[usize],
    frame: &AnchorFrame,
    target: f64,
) -> Result<f64> {
    if z_hat.rows() != anchor_labels.len() {
        return Err(Error::Shape(format!(
            "{} projection rows but {} anchor labels",
            z_hat.rows(),
            anchor_labels.len()
        )));
    }
    if z_hat.rows() == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    let mut acc = 0.0;
    for (i, &label) in anchor_labels.iter().enumerate() {
        if label >= frame.r_max {
            return Err(Error::Registry(format!(
                "anchor label {label} outside frame of {} anchors",
                frame.r_max
            )));
        }
        let cos = dot(z_hat.row(i), frame.anchor(label)?);
        let gap = cos - target;
        acc += gap * gap;
    }
    Ok(acc / (2.0 * z_hat.rows() as f64))
}

/// Cross-entropy over fused probabilities against global class labels, with
/// probabilities floored at 1e-12 before the log.
pub fn loss_ce(probabilities: &Matrix, global_labels: &[usize]) -> Result<f64> {
    if probabilities.rows() != global_labels.len() {
        return Err(Error::Shape(format!(
            "{} probability rows but {} labels",
            probabilities.rows(),
            global_labels.len()
        )));
    }
    if probabilities.rows() == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    let mut acc = 0.0;
    for (i, &label) in global_labels.iter().enumerate() {
        if label >= probabilities.cols() {
            return Err(Error::Registry(format!(
                "global label {label} outside {} classes",
                probabilities.cols()
            )));
        }
        acc -= probabilities.get(i, label).max(CE_PROB_FLOOR).ln();
    }
    Ok(acc / probabilities.rows() as f64)
}

/// Total objective with unit weights.
pub fn loss_total(ce: f64, dr: f64) -> Result<f64> {
    if !ce.is_finite() || !dr.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss terms: ce {ce}, dr {dr}"
        )));
    }
    Ok(ce + dr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::etf::generate_etf;

    #[test]
    fn inverse_sqrt_target_follows_anchor_count() {
        assert!((DrTarget::InverseSqrt.value(5) - 0.5).abs() < 1e-15);
        assert!((DrTarget::Unity.value(5) - 1.0).abs() < 1e-15);
        assert!((DrTarget::InverseSqrt.value(2) - 1.0).abs() < 1e-15);
    }

    // One sample sitting exactly on its anchor with r_max = 5: cos = 1,
    // target = 0.5, loss = 0.5 * (1 - 0.5)^2 = 0.125.
    #[test]
    fn dr_hand_case_on_anchor() {
        let frame = generate_etf(5, 64, 3).unwrap();
        let z_hat = Matrix::from_rows(&[frame.anchor(2).unwrap().to_vec()]).unwrap();
        let loss = loss_dr(&z_hat, &[2], &frame, DrTarget::InverseSqrt.value(5)).unwrap();
        assert!((loss - 0.125).abs() < 1e-9, "loss {loss}");
    }

    #[test]
    fn dr_is_zero_when_cosine_hits_target() {
        // Build z_hat = t*v0 + sqrt(1-t^2)*w with w unit and orthogonal to
        // v0, so cos(z_hat, v0) = t exactly (up to rounding).
        let frame = generate_etf(5, 64, 7).unwrap();
        let t = DrTarget::InverseSqrt.value(5);
        let v0 = frame.anchor(0).unwrap();
        let v1 = frame.anchor(1).unwrap();
        let c01 = dot(v0, v1);
        let mut w: Vec<f64> = v1.iter().zip(v0).map(|(b, a)| b - c01 * a).collect();
        let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in &mut w {
            *v /= norm;
        }
        let z: Vec<f64> = v0
            .iter()
            .zip(&w)
            .map(|(a, b)| t * a + (1.0 - t * t).sqrt() * b)
            .collect();
        let z_hat = Matrix::from_rows(&[z]).unwrap();
        let loss = loss_dr(&z_hat, &[0], &frame, t).unwrap();
        assert!(loss < 1e-20, "loss {loss}");
    }

    #[test]
    fn dr_rejects_labels_beyond_frame() {
        let frame = generate_etf(3, 64, 0).unwrap();
        let z_hat = Matrix::from_rows(&[frame.anchor(0).unwrap().to_vec()]).unwrap();
        assert!(matches!(
            loss_dr(&z_hat, &[3], &frame, 1.0),
            Err(Error::Registry(_))
        ));
    }

    #[test]
    fn ce_perfect_prediction_is_zero() {
        let probs = Matrix::from_vec(1, 3, vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(loss_ce(&probs, &[1]).unwrap(), 0.0);
    }

    #[test]
    fn ce_uniform_four_classes_is_ln_four() {
        let probs = Matrix::from_vec(2, 4, vec![0.25; 8]).unwrap();
        let loss = loss_ce(&probs, &[0, 3]).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-4, "loss {loss}");
        assert!((loss - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn ce_grows_as_true_probability_shrinks() {
        let mut last = f64::NEG_INFINITY;
        for p in [0.9, 0.5, 0.1, 1e-3] {
            let probs = Matrix::from_vec(1, 2, vec![p, 1.0 - p]).unwrap();
            let loss = loss_ce(&probs, &[0]).unwrap();
            assert!(loss > last);
            last = loss;
        }
    }

    #[test]
    fn ce_floors_zero_probability() {
        let probs = Matrix::from_vec(1, 2, vec![0.0, 1.0]).unwrap();
        let loss = loss_ce(&probs, &[0]).unwrap();
        assert!((loss - (-CE_PROB_FLOOR.ln())).abs() < 1e-9);
    }

    #[test]
    fn ce_rejects_out_of_range_label() {
        let probs = Matrix::from_vec(1, 2, vec![0.5, 0.5]).unwrap();
        assert!(matches!(loss_ce(&probs, &[2]), Err(Error::Registry(_))));
    }

    #[test]
    fn total_is_plain_sum() {
        assert_eq!(loss_total(0.0, 0.0).unwrap(), 0.0);
        assert!((loss_total(1.2, 0.3).unwrap() - 1.5).abs() < 1e-15);
        assert!(matches!(
            loss_total(f64::NAN, 0.0),
            Err(Error::Numeric(_))
        ));
        assert!(matches!(
            loss_total(0.0, f64::INFINITY),
            Err(Error::Numeric(_))
        ));
    }
}
