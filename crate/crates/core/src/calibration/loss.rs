//! The three-term calibration objective and its exact gradient with respect
//! to the text residuals.
//!
//! Gradients are first accumulated with respect to the evolved (normalized)
//! embeddings and then pulled back through `v ↦ v / ‖v‖`.

use serde::{Deserialize, Serialize};

use super::{apply_residuals, ResidualState};
use crate::cache::cache_logits;
use crate::error::{Error, Result};
use crate::numeric::{
    argmax, dot, entropy_of, log_sum_exp, normalized_entropy, shannon_entropy, softmax, Embedding, Probabilities,
};
use crate::textspace::AdjacentEmbeddings;

/// Per-term loss values and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub entropy: f64,
    pub surrogate: f64,
    pub alignment: f64,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

/// `L = L_ent + λ1 L_surr + λ2 L_align`.
pub fn total_loss(entropy: f64, surrogate: f64, alignment: f64, lambda1: f64, lambda2: f64) -> Result<LossBreakdown> {
    let total = entropy + lambda1 * surrogate + lambda2 * alignment;
    if !total.is_finite() {
        return Err(Error::NonFinite("total loss"));
    }
    Ok(LossBreakdown {
        entropy,
        surrogate,
        alignment,
        total,
        lambda1,
        lambda2,
    })
}

/// Views whose normalized entropy is below `delta`; if none qualify, the
/// single lowest-entropy view (lowest index on ties).
pub fn confident_views(views: &[Probabilities], delta: f64) -> Vec<usize> {
    let entropies: Vec<f64> = views
        .iter()
        .map(|p| normalized_entropy(p).unwrap_or(0.0))
        .collect();
    let selected: Vec<usize> = (0..views.len()).filter(|&i| entropies[i] < delta).collect();
    if !selected.is_empty() {
        return selected;
    }
    let mut best = 0;
    for i in 1..entropies.len() {
        if entropies[i] < entropies[best] {
            best = i;
        }
    }
    vec![best]
}

/// Mean class distribution over the confident views.
pub fn compute_view_averaged_probability(views: &[Probabilities], delta: f64) -> Result<Probabilities> {
    if views.is_empty() {
        return Err(Error::DimensionMismatch {
            expected: 1,
            actual: 0,
        });
    }
    let selected = confident_views(views, delta);
    let classes = views[0].len();
    let mut mean = vec![0.0; classes];
    for &i in &selected {
        for (m, p) in mean.iter_mut().zip(views[i].as_slice()) {
            *m += p;
        }
    }
    let inv = 1.0 / selected.len() as f64;
    mean.iter_mut().for_each(|m| *m *= inv);
    Ok(Probabilities::from_unchecked(mean))
}

/// Shannon entropy of the view-averaged distribution.
pub fn entropy_loss(averaged: &Probabilities) -> f64 {
    shannon_entropy(averaged)
}

/// Surrogate cross-entropy whose denominator carries the class-pair
/// covariance of the adjacent embeddings, evaluated in low-rank form:
/// `zᵀ W_{c,ỹ} z = (1/M) Σ_m (a_m^c - a_m^ỹ)²` with `a_m^c = z · (t̂_m^c - μ^c)`.
pub fn surrogate_loss(z: &[f64], label: usize, evolved: &AdjacentEmbeddings, tau: f64) -> Result<f64> {
    check_label(label, evolved.classes())?;
    if z.len() != evolved.dim() {
        return Err(Error::DimensionMismatch {
            expected: evolved.dim(),
            actual: z.len(),
        });
    }
    let terms = SurrogateTerms::new(z, label, evolved, tau);
    let loss = -terms.scaled[label] + log_sum_exp(&terms.denominator);
    if !loss.is_finite() {
        return Err(Error::NonFinite("surrogate loss"));
    }
    Ok(loss)
}

struct SurrogateTerms {
    /// `⟨z, t̂_M^c⟩ / τ`.
    scaled: Vec<f64>,
    /// Centered projections `a_m^c`, class-major.
    centered: Vec<f64>,
    /// `scaled_c + zᵀ W_{c,ỹ} z / 2τ²`.
    denominator: Vec<f64>,
}

impl SurrogateTerms {
    fn new(z: &[f64], label: usize, evolved: &AdjacentEmbeddings, tau: f64) -> Self {
        let (classes, members) = (evolved.classes(), evolved.members());
        let scaled: Vec<f64> = (0..classes).map(|c| evolved.prototype(c).dot(z) / tau).collect();
        let mut centered = vec![0.0; classes * members];
        for c in 0..classes {
            let row = &mut centered[c * members..(c + 1) * members];
            for (m, a) in row.iter_mut().enumerate() {
                *a = evolved.get(c, m).dot(z);
            }
            let mean = row.iter().sum::<f64>() / members as f64;
            row.iter_mut().for_each(|a| *a -= mean);
        }
        let scale = 1.0 / (2.0 * members as f64 * tau * tau);
        let denominator = (0..classes)
            .map(|c| {
                let quad: f64 = (0..members)
                    .map(|m| {
                        let diff = centered[c * members + m] - centered[label * members + m];
                        diff * diff
                    })
                    .sum();
                scaled[c] + quad * scale
            })
            .collect();
        SurrogateTerms {
            scaled,
            centered,
            denominator,
        }
    }
}

/// Symmetric image↔text cross-entropy between final text prototypes and
/// cache prototypes, averaged over classes that have a prototype. Returns
/// `None` when no class has one.
pub fn alignment_loss(evolved: &AdjacentEmbeddings, prototypes: &[Option<Embedding>]) -> Option<f64> {
    let active = active_classes(prototypes);
    if active.is_empty() {
        return None;
    }
    let sims = alignment_similarities(evolved, prototypes, &active);
    let n = active.len();
    let mut total = 0.0;
    for a in 0..n {
        let row: Vec<f64> = (0..n).map(|b| sims[a * n + b]).collect();
        let col: Vec<f64> = (0..n).map(|b| sims[b * n + a]).collect();
        total += -sims[a * n + a] + log_sum_exp(&row) - sims[a * n + a] + log_sum_exp(&col);
    }
    Some(total / n as f64)
}

fn active_classes(prototypes: &[Option<Embedding>]) -> Vec<usize> {
    prototypes
        .iter()
        .enumerate()
        .filter_map(|(c, p)| p.as_ref().map(|_| c))
        .collect()
}

/// `X[a][b] = t̂_M^{A_a} · F^{A_b}` over the active classes.
fn alignment_similarities(evolved: &AdjacentEmbeddings, prototypes: &[Option<Embedding>], active: &[usize]) -> Vec<f64> {
    let mut sims = Vec::with_capacity(active.len() * active.len());
    for &a in active {
        for &b in active {
            let f = prototypes[b].as_ref().expect("active class has a prototype");
            sims.push(evolved.prototype(a).dot(f.as_slice()));
        }
    }
    sims
}

fn check_label(label: usize, classes: usize) -> Result<()> {
    if label >= classes {
        return Err(Error::InvalidClass { class: label, classes });
    }
    Ok(())
}

/// Hyperparameters of the calibration objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSettings {
    pub tau: f64,
    /// Normalized-entropy threshold for the view filter.
    pub delta: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Cache modulating function parameters (constant term of the logits).
    pub alpha: f64,
    pub beta: f64,
}

/// One reliable test sample as seen by the calibration objective.
#[derive(Debug, Clone, Copy)]
pub struct CalibrationSample<'a> {
    /// Original view first, then augmented views.
    pub views: &'a [Embedding],
    pub pseudo_label: usize,
    /// Cache prototypes per class (`None` for empty slots).
    pub prototypes: &'a [Option<Embedding>],
}

/// Loss values plus per-term gradients with respect to every residual
/// (layout of [`ResidualState::residuals`]).
#[derive(Debug, Clone)]
pub struct LossEvaluation {
    pub breakdown: LossBreakdown,
    pub alignment_active: bool,
    pub selected_views: Vec<usize>,
    pub grad_entropy: Vec<f64>,
    pub grad_surrogate: Vec<f64>,
    pub grad_alignment: Vec<f64>,
}

impl LossEvaluation {
    /// Gradient of the weighted total.
    pub fn total_gradient(&self) -> Vec<f64> {
        let (l1, l2) = (self.breakdown.lambda1, self.breakdown.lambda2);
        self.grad_entropy
            .iter()
            .zip(&self.grad_surrogate)
            .zip(&self.grad_alignment)
            .map(|((e, s), a)| e + l1 * s + l2 * a)
            .collect()
    }
}

/// Class distribution of the classifier used inside the objective:
/// `softmax(⟨z, t̂_M^c⟩ / τ + A(z · F_c))`.
pub fn classifier_probabilities(
    z: &[f64],
    evolved: &AdjacentEmbeddings,
    prototypes: &[Option<Embedding>],
    settings: &LossSettings,
) -> Probabilities {
    let logits = classifier_logits(z, evolved, prototypes, settings);
    Probabilities::from_unchecked(softmax(&logits))
}

fn classifier_logits(
    z: &[f64],
    evolved: &AdjacentEmbeddings,
    prototypes: &[Option<Embedding>],
    settings: &LossSettings,
) -> Vec<f64> {
    let cache = cache_logits(z, prototypes, settings.alpha, settings.beta);
    evolved
        .prototype_scores(z)
        .into_iter()
        .zip(cache)
        .map(|(s, k)| s / settings.tau + k)
        .collect()
}

/// Loss values only (used by finite-difference checks).
pub fn evaluate_loss(
    base: &AdjacentEmbeddings,
    residuals: &ResidualState,
    sample: &CalibrationSample<'_>,
    settings: &LossSettings,
) -> Result<LossBreakdown> {
    let evolved = apply_residuals(base, residuals)?;
    let probs: Vec<Probabilities> = sample
        .views
        .iter()
        .map(|z| classifier_probabilities(z.as_slice(), &evolved, sample.prototypes, settings))
        .collect();
    let averaged = compute_view_averaged_probability(&probs, settings.delta)?;
    let entropy = entropy_loss(&averaged);
    let mut surrogate = 0.0;
    for z in sample.views {
        surrogate += surrogate_loss(z.as_slice(), sample.pseudo_label, &evolved, settings.tau)?;
    }
    surrogate /= sample.views.len() as f64;
    let alignment = alignment_loss(&evolved, sample.prototypes).unwrap_or(0.0);
    total_loss(entropy, surrogate, alignment, settings.lambda1, settings.lambda2)
}

/// Loss values and exact gradients.
///
/// The cache term of the classifier and the view-selection mask are treated
/// as constants; the surrogate term is averaged over all views.
pub fn loss_and_gradients(
    base: &AdjacentEmbeddings,
    residuals: &ResidualState,
    sample: &CalibrationSample<'_>,
    settings: &LossSettings,
) -> Result<LossEvaluation> {
    let (classes, members, dim) = (base.classes(), base.members(), base.dim());
    check_label(sample.pseudo_label, classes)?;
    if sample.views.is_empty() {
        return Err(Error::DimensionMismatch {
            expected: 1,
            actual: 0,
        });
    }
    if sample.prototypes.len() != classes {
        return Err(Error::DimensionMismatch {
            expected: classes,
            actual: sample.prototypes.len(),
        });
    }
    let evolved = apply_residuals(base, residuals)?;
    let row = |c: usize, m: usize| (c * members + m) * dim;
    let last = members - 1;

    // Entropy of the view-averaged classifier distribution.
    let mut g_ent = vec![0.0; classes * members * dim];
    let probs: Vec<Probabilities> = sample
        .views
        .iter()
        .map(|z| classifier_probabilities(z.as_slice(), &evolved, sample.prototypes, settings))
        .collect();
    let selected = confident_views(&probs, settings.delta);
    let inv_sel = 1.0 / selected.len() as f64;
    let mut averaged = vec![0.0; classes];
    for &i in &selected {
        for (a, p) in averaged.iter_mut().zip(probs[i].as_slice()) {
            *a += p * inv_sel;
        }
    }
    let entropy = entropy_of(&averaged);
    let d_avg: Vec<f64> = averaged
        .iter()
        .map(|&p| if p > 0.0 { -(p.ln() + 1.0) } else { 0.0 })
        .collect();
    for &i in &selected {
        let p = probs[i].as_slice();
        let mean_g: f64 = p.iter().zip(&d_avg).map(|(p, g)| p * g).sum();
        let z = sample.views[i].as_slice();
        for c in 0..classes {
            let d_logit = inv_sel * p[c] * (d_avg[c] - mean_g);
            axpy(&mut g_ent[row(c, last)..row(c, last) + dim], d_logit / settings.tau, z);
        }
    }

    // Surrogate loss, averaged over every view.
    let mut g_surr = vec![0.0; classes * members * dim];
    let mut surrogate = 0.0;
    let inv_views = 1.0 / sample.views.len() as f64;
    let label = sample.pseudo_label;
    let quad_scale = 1.0 / (members as f64 * settings.tau * settings.tau);
    for view in sample.views {
        let z = view.as_slice();
        let terms = SurrogateTerms::new(z, label, &evolved, settings.tau);
        let loss = -terms.scaled[label] + log_sum_exp(&terms.denominator);
        if !loss.is_finite() {
            return Err(Error::NonFinite("surrogate loss"));
        }
        surrogate += loss * inv_views;
        let weights = softmax(&terms.denominator);

        // d/d(centered a_m^c)
        let mut d_centered = vec![0.0; classes * members];
        for m in 0..members {
            let mut label_acc = 0.0;
            for c in 0..classes {
                let diff = terms.centered[c * members + m] - terms.centered[label * members + m];
                let g = weights[c] * diff * quad_scale;
                d_centered[c * members + m] += g;
                label_acc += g;
            }
            d_centered[label * members + m] -= label_acc;
        }
        for c in 0..classes {
            let grads = &d_centered[c * members..(c + 1) * members];
            let mean = grads.iter().sum::<f64>() / members as f64;
            for (m, g) in grads.iter().enumerate() {
                // Centering: a_m = p_m - mean_k p_k.
                axpy(&mut g_surr[row(c, m)..row(c, m) + dim], (g - mean) * inv_views, z);
            }
            let d_scaled = weights[c] - if c == label { 1.0 } else { 0.0 };
            axpy(
                &mut g_surr[row(c, last)..row(c, last) + dim],
                d_scaled * inv_views / settings.tau,
                z,
            );
        }
    }

    // Cross-modal alignment with the cache prototypes.
    let mut g_align = vec![0.0; classes * members * dim];
    let active = active_classes(sample.prototypes);
    let alignment = if active.is_empty() {
        0.0
    } else {
        let n = active.len();
        let sims = alignment_similarities(&evolved, sample.prototypes, &active);
        let row_soft: Vec<Vec<f64>> = (0..n).map(|a| softmax(&sims[a * n..(a + 1) * n])).collect();
        let col_soft: Vec<Vec<f64>> = (0..n)
            .map(|b| softmax(&(0..n).map(|a| sims[a * n + b]).collect::<Vec<_>>()))
            .collect();
        let mut total = 0.0;
        for a in 0..n {
            let row_vals = &sims[a * n..(a + 1) * n];
            let col_vals: Vec<f64> = (0..n).map(|b| sims[b * n + a]).collect();
            total += -2.0 * sims[a * n + a] + log_sum_exp(row_vals) + log_sum_exp(&col_vals);
        }
        let inv_n = 1.0 / n as f64;
        for a in 0..n {
            let c = active[a];
            for b in 0..n {
                let kron = if a == b { 2.0 } else { 0.0 };
                let d_sim = inv_n * (row_soft[a][b] + col_soft[b][a] - kron);
                let f = sample.prototypes[active[b]].as_ref().expect("active");
                axpy(&mut g_align[row(c, last)..row(c, last) + dim], d_sim, f.as_slice());
            }
        }
        total * inv_n
    };

    let breakdown = total_loss(entropy, surrogate, alignment, settings.lambda1, settings.lambda2)?;
    for grad in [&mut g_ent, &mut g_surr, &mut g_align] {
        pull_back_through_normalization(grad, base, residuals, &evolved)?;
    }
    Ok(LossEvaluation {
        breakdown,
        alignment_active: !active.is_empty(),
        selected_views: selected,
        grad_entropy: g_ent,
        grad_surrogate: g_surr,
        grad_alignment: g_align,
    })
}

/// Maps gradients w.r.t. `t' = u / ‖u‖` (with `u = t̂ + r`) to gradients
/// w.r.t. `r`: `(g - (g·t') t') / ‖u‖`.
fn pull_back_through_normalization(
    grad: &mut [f64],
    base: &AdjacentEmbeddings,
    residuals: &ResidualState,
    evolved: &AdjacentEmbeddings,
) -> Result<()> {
    let dim = base.dim();
    for (idx, (g, (b, t))) in grad
        .chunks_mut(dim)
        .zip(base.rows().iter().zip(evolved.rows()))
        .enumerate()
    {
        let r = &residuals.residuals[idx * dim..(idx + 1) * dim];
        let norm = b
            .as_slice()
            .iter()
            .zip(r)
            .map(|(x, y)| (x + y) * (x + y))
            .sum::<f64>()
            .sqrt();
        let radial = dot(g, t.as_slice());
        for (gi, ti) in g.iter_mut().zip(t.as_slice()) {
            *gi = (*gi - radial * ti) / norm;
        }
        if let Some(bad) = g.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient(idx * dim + bad));
        }
    }
    Ok(())
}

fn axpy(out: &mut [f64], scale: f64, x: &[f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += scale * v;
    }
}

/// Original-view classifier prediction, used by the pipeline for logging.
pub fn classifier_argmax(
    z: &[f64],
    evolved: &AdjacentEmbeddings,
    prototypes: &[Option<Embedding>],
    settings: &LossSettings,
) -> usize {
    argmax(&classifier_logits(z, evolved, prototypes, settings))
}
