//! Numeric primitives shared by every stage of the engine: unit-norm
//! embeddings, cosine similarity, tempered softmax and entropies.
//!
//! All logarithms are natural. Entropy thresholds elsewhere in the crate are
//! expressed in normalized form (`H / ln C`).

use crate::error::{Error, Result};

/// Norms below this are treated as zero.
pub const ZERO_NORM: f64 = 1e-12;

/// A unit-norm real vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Normalizes `values` to unit length.
    pub fn normalized(values: Vec<f64>) -> Result<Self> {
        let norm = norm(&values);
        if !norm.is_finite() {
            return Err(Error::NonFiniteInput("embedding"));
        }
        if norm < ZERO_NORM {
            return Err(Error::ZeroVector { norm });
        }
        let mut values = values;
        values.iter_mut().for_each(|x| *x /= norm);
        Ok(Embedding(values))
    }

    /// Wraps a vector already known to be unit-norm.
    pub(crate) fn from_unit(values: Vec<f64>) -> Self {
        debug_assert!((norm(&values) - 1.0).abs() < 1e-6);
        Embedding(values)
    }

    /// Standard basis vector `e_axis` in `dim` dimensions.
    pub fn basis(dim: usize, axis: usize) -> Self {
        let mut v = vec![0.0; dim];
        v[axis] = 1.0;
        Embedding(v)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        dot(&self.0, other)
    }
}

impl AsRef<[f64]> for Embedding {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// A probability vector: nonnegative entries summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct Probabilities(Vec<f64>);

impl Probabilities {
    /// Validates `probs` (nonnegative, finite, sums to one within 1e-6).
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::DimensionMismatch {
                expected: 1,
                actual: 0,
            });
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::NonFiniteInput("probability vector"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::NonFiniteInput("probability vector (does not sum to 1)"));
        }
        Ok(Probabilities(probs))
    }

    pub(crate) fn from_unchecked(probs: Vec<f64>) -> Self {
        Probabilities(probs)
    }

    pub fn uniform(classes: usize) -> Self {
        Probabilities(vec![1.0 / classes as f64; classes])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Index of the largest probability, lowest index on ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Returns `v / ‖v‖`.
pub fn l2_normalize(v: &[f64]) -> Result<Embedding> {
    Embedding::normalized(v.to_vec())
}

/// Cosine similarity between two unit-norm embeddings, clamped to [-1, 1].
pub fn cosine(u: &Embedding, v: &Embedding) -> Result<f64> {
    if u.dim() != v.dim() {
        return Err(Error::DimensionMismatch {
            expected: u.dim(),
            actual: v.dim(),
        });
    }
    Ok(dot(u.as_slice(), v.as_slice()).clamp(-1.0, 1.0))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// `log Σ exp(x)` with max subtraction.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Plain softmax of already-scaled logits.
pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    out
}

/// `softmax(logits / tau)`, computed with max subtraction.
pub fn softmax_with_temperature(logits: &[f64], tau: f64) -> Result<Probabilities> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidTemperature(tau));
    }
    if logits.is_empty() {
        return Err(Error::DimensionMismatch {
            expected: 1,
            actual: 0,
        });
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFiniteInput("logits"));
    }
    let scaled: Vec<f64> = logits.iter().map(|l| l / tau).collect();
    Ok(Probabilities(softmax(&scaled)))
}

/// Shannon entropy in nats; `0 ln 0 = 0`.
pub fn shannon_entropy(p: &Probabilities) -> f64 {
    entropy_of(p.as_slice())
}

pub(crate) fn entropy_of(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>()
}

/// Shannon entropy divided by `ln C`, in [0, 1].
pub fn normalized_entropy(p: &Probabilities) -> Result<f64> {
    let classes = p.len();
    if classes < 2 {
        return Err(Error::SingleClass(classes));
    }
    Ok((shannon_entropy(p) / (classes as f64).ln()).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalize_three_four() {
        let e = l2_normalize(&[3.0, 4.0]).unwrap();
        assert_eq!(e.as_slice(), &[0.6, 0.8]);
    }

    #[test]
    fn normalize_unit_is_identity() {
        let e = l2_normalize(&[0.0, 1.0, 0.0]).unwrap();
        assert_eq!(e.as_slice(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn normalize_zero_fails() {
        assert!(matches!(l2_normalize(&[0.0, 0.0]), Err(Error::ZeroVector { .. })));
    }

    #[test]
    fn cosine_basic_cases() {
        let e1 = Embedding::basis(3, 0);
        let e2 = Embedding::basis(3, 1);
        let neg = Embedding::normalized(vec![-1.0, 0.0, 0.0]).unwrap();
        assert_eq!(cosine(&e1, &e1).unwrap(), 1.0);
        assert_eq!(cosine(&e1, &e2).unwrap(), 0.0);
        assert_eq!(cosine(&e1, &neg).unwrap(), -1.0);
        assert!(matches!(
            cosine(&e1, &Embedding::basis(2, 0)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn softmax_cases() {
        let p = softmax_with_temperature(&[0.0, 0.0], 1.0).unwrap();
        assert_eq!(p.as_slice(), &[0.5, 0.5]);

        let p = softmax_with_temperature(&[1.0, 0.0], 1e6).unwrap();
        assert!((p.as_slice()[0] - 0.5).abs() < 1e-6);

        // Direct evaluation: exp(100) / (exp(100) + 2), computed without
        // max subtraction (exp(100) is representable).
        let p = softmax_with_temperature(&[1.0, 0.0, 0.0], 0.01).unwrap();
        let big = 100f64.exp();
        let denom = big + 2.0;
        assert!((p.as_slice()[0] - big / denom).abs() < 1e-9);
        assert!((p.as_slice()[1] - 1.0 / denom).abs() < 1e-9);
        assert!((p.as_slice()[2] - 1.0 / denom).abs() < 1e-9);
    }

    #[test]
    fn softmax_errors() {
        assert!(matches!(
            softmax_with_temperature(&[1.0], 0.0),
            Err(Error::InvalidTemperature(_))
        ));
        assert!(matches!(
            softmax_with_temperature(&[1.0], -1.0),
            Err(Error::InvalidTemperature(_))
        ));
        assert!(matches!(
            softmax_with_temperature(&[f64::NAN, 1.0], 1.0),
            Err(Error::NonFiniteInput(_))
        ));
    }

    #[test]
    fn entropy_cases() {
        let uniform = Probabilities::uniform(4);
        assert!((shannon_entropy(&uniform) - 4f64.ln()).abs() < 1e-12);
        assert!((normalized_entropy(&uniform).unwrap() - 1.0).abs() < 1e-12);

        let one_hot = Probabilities::new(vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(shannon_entropy(&one_hot), 0.0);
        assert_eq!(normalized_entropy(&one_hot).unwrap(), 0.0);

        let half = Probabilities::new(vec![0.5, 0.5, 0.0]).unwrap();
        assert!((shannon_entropy(&half) - 2f64.ln()).abs() < 1e-12);

        let p = Probabilities::new(vec![0.7, 0.1, 0.1, 0.1]).unwrap();
        let direct = -(0.7 * 0.7f64.ln() + 3.0 * 0.1 * 0.1f64.ln()) / 4f64.ln();
        assert!((normalized_entropy(&p).unwrap() - direct).abs() < 1e-12);

        let single = Probabilities::new(vec![1.0]).unwrap();
        assert!(matches!(normalized_entropy(&single), Err(Error::SingleClass(1))));
    }

    fn logits_strategy() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-5.0f64..5.0, 2..8)
    }

    proptest! {
        #[test]
        fn softmax_shift_invariant(logits in logits_strategy(), shift in -50.0f64..50.0, tau in 0.05f64..5.0) {
            let a = softmax_with_temperature(&logits, tau).unwrap();
            let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();
            let b = softmax_with_temperature(&shifted, tau).unwrap();
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
        }

        #[test]
        fn softmax_preserves_argmax(logits in logits_strategy(), tau in 0.01f64..5.0) {
            let p = softmax_with_temperature(&logits, tau).unwrap();
            let sum: f64 = p.as_slice().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            // Only meaningful when the maximum is strict after scaling.
            let top = argmax(&logits);
            let strict = logits.iter().enumerate().all(|(i, &l)| i == top || logits[top] - l > 1e-9);
            if strict {
                prop_assert_eq!(p.argmax(), top);
            }
        }

        #[test]
        fn entropy_bounds(logits in logits_strategy(), tau in 0.05f64..5.0) {
            let p = softmax_with_temperature(&logits, tau).unwrap();
            let h = shannon_entropy(&p);
            prop_assert!(h >= 0.0);
            prop_assert!(h <= (p.len() as f64).ln() + 1e-12);
        }

        #[test]
        fn cosine_of_unit_vectors_is_dot(a in prop::collection::vec(-1.0f64..1.0, 6), b in prop::collection::vec(-1.0f64..1.0, 6)) {
            prop_assume!(norm(&a) > 1e-3 && norm(&b) > 1e-3);
            let u = l2_normalize(&a).unwrap();
            let v = l2_normalize(&b).unwrap();
            let c = cosine(&u, &v).unwrap();
            prop_assert!((c - dot(u.as_slice(), v.as_slice())).abs() <= 1e-9);
            prop_assert!((-1.0..=1.0).contains(&c));
            prop_assert!((norm(u.as_slice()) - 1.0).abs() < 1e-6);
        }
    }
}
