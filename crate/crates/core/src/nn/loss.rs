use crate::{Error, Result};

/// Probabilities are clipped into `[ε, 1 − ε]` before taking logs.
pub const BCE_EPSILON: f64 = 1e-7;

/// Binary cross-entropy of a probability against a `{0, 1}` label.
///
/// Returns `(loss, d loss / d pred)`, both evaluated at the clipped prediction.
pub fn bce_loss(pred: f64, label: f64) -> Result<(f64, f64)> {
    if label != 0.0 && label != 1.0 {
        return Err(Error::input(format!("label must be 0 or 1, got {label}")));
    }
    if !pred.is_finite() {
        return Err(Error::input(format!("prediction must be finite, got {pred}")));
    }
    let p = pred.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
    if label == 1.0 {
        Ok((-p.ln(), -1.0 / p))
    } else {
        Ok((-(1.0 - p).ln(), 1.0 / (1.0 - p)))
    }
}
