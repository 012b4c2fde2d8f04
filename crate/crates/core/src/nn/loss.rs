use super::{NnError, Result, Tensor};

/// Predictions are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` before the log.
pub const BCE_CLAMP: f64 = 1e-7;

/// Mean binary cross-entropy and its gradient w.r.t. `pred`.
///
/// The gradient is zero where the prediction was clamped.
pub fn bce_loss(pred: &Tensor, target: &[f64]) -> Result<(f64, Tensor)> {
    if pred.len() != target.len() {
        return Err(NnError::DimMismatch(format!(
            "{} predictions for {} targets",
            pred.len(),
            target.len()
        )));
    }
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &t) in pred.data().iter().zip(target) {
        let q = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        loss -= t * q.ln() + (1.0 - t) * (1.0 - q).ln();
        grad.push(if q == p {
            (q - t) / (q * (1.0 - q)) / n
        } else {
            0.0
        });
    }
    Ok((loss / n, Tensor::new(pred.shape().to_vec(), grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_closed_form() {
        let pred = Tensor::new(vec![2, 1], vec![0.8, 0.3]).unwrap();
        let (l, g) = bce_loss(&pred, &[1.0, 0.0]).unwrap();
        let expected = -(0.8f64.ln() + 0.7f64.ln()) / 2.0;
        assert!((l - expected).abs() < 1e-12);
        assert!((g.data()[0] - (-1.0 / 0.8) / 2.0).abs() < 1e-12);
        assert!((g.data()[1] - (1.0 / 0.7) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn saturated_predictions_stay_finite() {
        let pred = Tensor::new(vec![2, 1], vec![0.0, 1.0]).unwrap();
        let (l, g) = bce_loss(&pred, &[1.0, 0.0]).unwrap();
        assert!(l.is_finite() && l > 10.0);
        assert_eq!(g.data(), &[0.0, 0.0]);
    }

    #[test]
    fn length_mismatch() {
        let pred = Tensor::new(vec![2, 1], vec![0.5, 0.5]).unwrap();
        assert!(bce_loss(&pred, &[1.0]).is_err());
    }
}
