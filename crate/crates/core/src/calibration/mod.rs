//! Distribution calibration of the adjacent text embeddings: residual
//! evolution, the calibration objective, a single optimizer step, the
//! progressive global merge, and Gaussian-mean inference.

mod loss;
mod optimizer;

pub use loss::{
    alignment_loss, classifier_argmax, classifier_probabilities, compute_view_averaged_probability, confident_views,
    entropy_loss, evaluate_loss, loss_and_gradients, surrogate_loss, total_loss, CalibrationSample, LossBreakdown,
    LossEvaluation, LossSettings,
};
pub use optimizer::AdamW;

use crate::error::{Error, Result};
use crate::numeric::{dot, softmax_with_temperature, Embedding, Probabilities};
use crate::textspace::AdjacentEmbeddings;

/// Learnable residuals (one `d`-vector per class/member, class-major) and the
/// optimizer moments that go with them.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualState {
    pub classes: usize,
    pub members: usize,
    pub dim: usize,
    pub residuals: Vec<f64>,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
}

impl ResidualState {
    pub fn zeros(classes: usize, members: usize, dim: usize) -> Self {
        let len = classes * members * dim;
        ResidualState {
            classes,
            members,
            dim,
            residuals: vec![0.0; len],
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step: 0,
        }
    }

    pub fn residual(&self, class: usize, member: usize) -> &[f64] {
        let start = (class * self.members + member) * self.dim;
        &self.residuals[start..start + self.dim]
    }

    /// Zeroes residuals and moments.
    pub fn reset(&mut self) {
        self.residuals.iter_mut().for_each(|x| *x = 0.0);
        self.first_moment.iter_mut().for_each(|x| *x = 0.0);
        self.second_moment.iter_mut().for_each(|x| *x = 0.0);
        self.step = 0;
    }

    pub fn is_zero(&self) -> bool {
        self.residuals.iter().all(|&x| x == 0.0)
    }
}

/// `t̂'_m^c = normalize(t̂_m^c + r_m^c)`.
pub fn apply_residuals(base: &AdjacentEmbeddings, residuals: &ResidualState) -> Result<AdjacentEmbeddings> {
    if residuals.classes != base.classes() || residuals.members != base.members() || residuals.dim != base.dim() {
        return Err(Error::DimensionMismatch {
            expected: base.classes() * base.members() * base.dim(),
            actual: residuals.residuals.len(),
        });
    }
    if residuals.is_zero() {
        return Ok(base.clone());
    }
    let dim = base.dim();
    let rows = base
        .rows()
        .iter()
        .zip(residuals.residuals.chunks(dim))
        .map(|(t, r)| Embedding::normalized(t.as_slice().iter().zip(r).map(|(a, b)| a + b).collect()))
        .collect::<Result<Vec<_>>>()?;
    AdjacentEmbeddings::from_rows(base.classes(), base.members(), rows)
}

/// Global text state evolved by progressive merging, with its
/// confident-sample counter(s).
#[derive(Debug, Clone, PartialEq)]
pub struct EvolvedTextState {
    embeddings: AdjacentEmbeddings,
    counter: u64,
    per_class: Option<Vec<u64>>,
}

impl EvolvedTextState {
    /// Starts at `l = 1` with one global counter.
    pub fn new(initial: AdjacentEmbeddings) -> Self {
        EvolvedTextState {
            embeddings: initial,
            counter: 1,
            per_class: None,
        }
    }

    /// Variant with one counter per class; only the pseudo-label's counter
    /// advances on a merge.
    pub fn with_per_class_counters(initial: AdjacentEmbeddings) -> Self {
        let classes = initial.classes();
        EvolvedTextState {
            embeddings: initial,
            counter: 1,
            per_class: Some(vec![1; classes]),
        }
    }

    pub fn embeddings(&self) -> &AdjacentEmbeddings {
        &self.embeddings
    }

    /// Global counter `l` (number of accepted merges plus one).
    pub fn counter(&self) -> u64 {
        self.counter
    }

    pub fn class_counter(&self, class: usize) -> u64 {
        self.per_class.as_ref().map_or(self.counter, |c| c[class])
    }

    /// `t̂ ← normalize((l - 1) t̂ + t̂*)` for every class and member, then
    /// `l ← l + 1`. On a degenerate (zero) combination nothing changes.
    pub fn progressive_merge(&mut self, optimized: &AdjacentEmbeddings, pseudo_label: usize) -> Result<()> {
        let current = &self.embeddings;
        if optimized.classes() != current.classes()
            || optimized.members() != current.members()
            || optimized.dim() != current.dim()
        {
            return Err(Error::DimensionMismatch {
                expected: current.rows().len(),
                actual: optimized.rows().len(),
            });
        }
        let members = current.members();
        let rows = current
            .rows()
            .iter()
            .zip(optimized.rows())
            .enumerate()
            .map(|(i, (old, new))| {
                let weight = (self.class_counter(i / members) - 1) as f64;
                Embedding::normalized(
                    old.as_slice()
                        .iter()
                        .zip(new.as_slice())
                        .map(|(o, n)| weight * o + n)
                        .collect(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        self.embeddings = AdjacentEmbeddings::from_rows(current.classes(), members, rows)?;
        self.counter += 1;
        if let Some(counters) = self.per_class.as_mut() {
            counters[pseudo_label] += 1;
        }
        Ok(())
    }
}

/// `softmax(⟨z, μ^c⟩ / τ)` with `μ^c` the raw (unnormalized) mean of the
/// class's evolved members.
pub fn gaussian_inference(z: &[f64], evolved: &AdjacentEmbeddings, tau: f64) -> Result<Probabilities> {
    if z.len() != evolved.dim() {
        return Err(Error::DimensionMismatch {
            expected: evolved.dim(),
            actual: z.len(),
        });
    }
    let logits: Vec<f64> = (0..evolved.classes())
        .map(|c| dot(z, &evolved.class_mean(c)))
        .collect();
    softmax_with_temperature(&logits, tau)
}

/// `p_final = p_cls + η p_gauss` and its argmax.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedPrediction {
    pub scores: Vec<f64>,
    pub label: usize,
    pub eta: f64,
}

impl FusedPrediction {
    /// Scores renormalized by `1 + η` into a probability vector.
    pub fn probabilities(&self) -> Probabilities {
        let scale = 1.0 / (1.0 + self.eta);
        Probabilities::from_unchecked(self.scores.iter().map(|s| s * scale).collect())
    }

    pub fn confidence(&self) -> f64 {
        self.probabilities().max()
    }
}

pub fn fuse_predictions(p_cls: &Probabilities, p_gauss: &Probabilities, eta: f64) -> Result<FusedPrediction> {
    if p_cls.len() != p_gauss.len() {
        return Err(Error::DimensionMismatch {
            expected: p_cls.len(),
            actual: p_gauss.len(),
        });
    }
    let scores: Vec<f64> = p_cls
        .as_slice()
        .iter()
        .zip(p_gauss.as_slice())
        .map(|(a, b)| a + eta * b)
        .collect();
    let label = crate::numeric::argmax(&scores);
    Ok(FusedPrediction { scores, label, eta })
}
