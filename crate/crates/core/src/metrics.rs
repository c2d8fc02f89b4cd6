use crate::error::{Error, Result};

/// Bin count used for reported calibration error.
pub const ECE_BINS: usize = 20;

/// Expected calibration error over equal-width confidence bins on [0, 1].
///
/// Bin `b` covers `[b/B, (b+1)/B)`; a confidence of exactly 1 falls in the
/// last bin. `ECE = Σ_b (n_b / n) |acc_b - conf_b|`.
pub fn expected_calibration_error(confidences: &[f64], correct: &[bool], bins: usize) -> Result<f64> {
    if confidences.len() != correct.len() {
        return Err(Error::DimensionMismatch {
            expected: confidences.len(),
            actual: correct.len(),
        });
    }
    if confidences.is_empty() {
        return Err(Error::NoLabels);
    }
    if bins == 0 {
        return Err(Error::config("bins", "must be positive"));
    }
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    let mut hits = vec![0usize; bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        if !c.is_finite() {
            return Err(Error::NonFiniteInput("confidence"));
        }
        let c = c.clamp(0.0, 1.0);
        let b = ((c * bins as f64) as usize).min(bins - 1);
        count[b] += 1;
        conf_sum[b] += c;
        hits[b] += usize::from(ok);
    }
    let n = confidences.len() as f64;
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let nb = count[b] as f64;
            (nb / n) * (hits[b] as f64 / nb - conf_sum[b] / nb).abs()
        })
        .sum())
}

/// Fraction of `predicted[i] == labels[i]`.
pub fn accuracy(predicted: &[usize], labels: &[usize]) -> Option<f64> {
    if predicted.is_empty() || predicted.len() != labels.len() {
        return None;
    }
    let hits = predicted.iter().zip(labels).filter(|(a, b)| a == b).count();
    Some(hits as f64 / predicted.len() as f64)
}
