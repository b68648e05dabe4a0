use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Predictions are clamped to `[eps, 1 - eps]` before taking logs, with
/// `eps = 1e-12` (or machine epsilon where that is coarser).
pub fn clamp_eps<S: Scalar>() -> S {
    S::of(1e-12).max(S::epsilon())
}

/// Mean binary cross-entropy of `predictions` against `labels`.
pub fn bce_loss<S: Scalar>(predictions: &[S], labels: &[bool]) -> Result<S> {
    if predictions.len() != labels.len() || predictions.is_empty() {
        return Err(Error::Contract(format!(
            "bce_loss needs equal nonempty inputs, got {} predictions and {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let eps = clamp_eps::<S>();
    let hi = S::one() - eps;
    let total: S = predictions
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.max(eps).min(hi);
            if y {
                -p.ln()
            } else {
                -(S::one() - p).ln()
            }
        })
        .sum();
    Ok(total / S::of(predictions.len() as f64))
}
