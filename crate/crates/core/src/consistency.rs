//! Committee voting over the adjacent text embeddings and the resulting
//! stability-consistency score used to reweight cache entropies.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{argmax, dot};
use crate::textspace::AdjacentEmbeddings;

/// Outcome of one committee assessment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommitteeVerdict {
    pub pseudo_labels: Vec<usize>,
    pub majority_label: usize,
    pub majority_count: usize,
    pub original_label: usize,
    /// `R`: 1 when the majority agrees with the original prediction, else γ.
    pub consistency: f64,
    /// `S = M / n*`.
    pub stability: f64,
    /// `w = 1 + ln(R S)`.
    pub score: f64,
}

impl CommitteeVerdict {
    /// Unanimous committee that agrees with the original prediction, i.e. `w = 1`.
    pub fn is_reliable(&self) -> bool {
        self.majority_count == self.pseudo_labels.len() && self.majority_label == self.original_label
    }

    /// A verdict that always reports `w = 1` (used when reweighting is disabled).
    pub fn neutral(original_label: usize) -> Self {
        CommitteeVerdict {
            pseudo_labels: vec![original_label],
            majority_label: original_label,
            majority_count: 1,
            original_label,
            consistency: 1.0,
            stability: 1.0,
            score: 1.0,
        }
    }
}

/// `ŷ_m = argmax_c ⟨z_proj, t̂_m^c⟩`, ties to the lowest class id.
pub fn committee_pseudo_labels(z_proj: &[f64], adjacent: &AdjacentEmbeddings) -> Result<Vec<usize>> {
    if z_proj.len() != adjacent.dim() {
        return Err(Error::DimensionMismatch {
            expected: adjacent.dim(),
            actual: z_proj.len(),
        });
    }
    Ok((0..adjacent.members())
        .map(|m| {
            let scores: Vec<f64> = (0..adjacent.classes())
                .map(|c| dot(z_proj, adjacent.get(c, m).as_slice()))
                .collect();
            argmax(&scores)
        })
        .collect())
}

/// Original prediction `y = argmax_c ⟨z, t̂_M^c⟩` from the unprojected feature.
pub fn original_prediction(z: &[f64], adjacent: &AdjacentEmbeddings) -> usize {
    argmax(&adjacent.prototype_scores(z))
}

/// Most frequent label and its count. Frequency ties prefer `original`, then
/// the lowest class id.
pub fn majority_vote(labels: &[usize], original: usize) -> Result<(usize, usize)> {
    if labels.is_empty() {
        return Err(Error::EmptyCommittee);
    }
    let mut counts: Vec<(usize, usize)> = Vec::new();
    for &label in labels {
        match counts.iter_mut().find(|(l, _)| *l == label) {
            Some((_, n)) => *n += 1,
            None => counts.push((label, 1)),
        }
    }
    let top = counts.iter().map(|&(_, n)| n).max().unwrap_or(0);
    let winner = if counts.iter().any(|&(l, n)| l == original && n == top) {
        original
    } else {
        counts
            .iter()
            .filter(|&&(_, n)| n == top)
            .map(|&(l, _)| l)
            .min()
            .unwrap_or(original)
    };
    Ok((winner, top))
}

/// Scores a committee: `R` from agreement with `original`, `S = M / n*`,
/// `w = 1 + ln(R S)`.
pub fn stability_consistency_score(labels: &[usize], original: usize, gamma: f64) -> Result<CommitteeVerdict> {
    if !(gamma >= 1.0) || !gamma.is_finite() {
        return Err(Error::InvalidGamma(gamma));
    }
    let (majority_label, majority_count) = majority_vote(labels, original)?;
    let consistency = if majority_label == original { 1.0 } else { gamma };
    let stability = labels.len() as f64 / majority_count as f64;
    Ok(CommitteeVerdict {
        pseudo_labels: labels.to_vec(),
        majority_label,
        majority_count,
        original_label: original,
        consistency,
        stability,
        score: 1.0 + (consistency * stability).ln(),
    })
}

/// `H' = w H`.
pub fn reweight_entropy(entropy: f64, score: f64) -> f64 {
    score * entropy
}

/// Full committee assessment for one feature: original prediction from `z`,
/// committee votes from the projected `z_proj`.
pub fn assess(z: &[f64], z_proj: &[f64], adjacent: &AdjacentEmbeddings, gamma: f64) -> Result<CommitteeVerdict> {
    let labels = committee_pseudo_labels(z_proj, adjacent)?;
    let original = original_prediction(z, adjacent);
    stability_consistency_score(&labels, original, gamma)
}
