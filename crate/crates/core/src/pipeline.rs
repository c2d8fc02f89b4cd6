//! Sequential adaptation over an embedding stream.
//!
//! Each sample goes through: projection and committee assessment, entropy
//! reweighting and cache update, (for reliable confident samples) one
//! calibration step followed by a progressive merge, and finally the fused
//! prediction.

use serde::{Deserialize, Serialize};

use crate::cache::{CacheEntry, CacheEntrySummary, InsertionOutcome, ReliabilityCache};
use crate::calibration::{
    apply_residuals, classifier_probabilities, fuse_predictions, gaussian_inference, loss_and_gradients, AdamW,
    CalibrationSample, EvolvedTextState, LossBreakdown, LossSettings, ResidualState,
};
use crate::consistency::{assess, original_prediction, reweight_entropy, CommitteeVerdict};
use crate::error::{Error, Result};
use crate::io::RunConfig;
use crate::metrics::expected_calibration_error;
use crate::numeric::{argmax, norm, shannon_entropy, softmax_with_temperature, Embedding};
use crate::textspace::{build_adjacent_embeddings, compute_text_subspace_projection, AdjacentEmbeddings, PromptSet, SubspaceProjector};

/// One test instance: the original view followed by its augmented views.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: u64,
    pub views: Vec<Embedding>,
    pub label: Option<usize>,
}

impl SampleRecord {
    pub fn original(&self) -> &Embedding {
        &self.views[0]
    }
}

/// Cache action taken for a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CacheAction {
    Inserted,
    Replaced,
    Rejected,
    Skipped,
}

impl From<&InsertionOutcome> for CacheAction {
    fn from(o: &InsertionOutcome) -> Self {
        match o {
            InsertionOutcome::Inserted => CacheAction::Inserted,
            InsertionOutcome::Replaced(_) => CacheAction::Replaced,
            InsertionOutcome::Rejected => CacheAction::Rejected,
        }
    }
}

/// One line of the prediction log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionLogRecord {
    pub id: u64,
    pub label: Option<usize>,
    /// Original prediction from the unprojected feature.
    pub y: usize,
    /// Committee majority label.
    pub y_star: usize,
    pub n_star: usize,
    pub w: f64,
    /// Shannon entropy (nats) of the text-classifier distribution.
    pub entropy: f64,
    pub normalized_entropy: f64,
    pub reweighted_entropy: f64,
    pub cache: CacheAction,
    /// Calibration gate passed and a step was taken.
    pub update: bool,
    /// Progressive merge accepted.
    pub merge: bool,
    pub loss: Option<LossBreakdown>,
    pub grad_norm: Option<f64>,
    pub predicted: usize,
    /// Argmax against the initial final-member prototypes.
    pub zero_shot: usize,
    /// Max of `p_final / (1 + η)`.
    pub confidence: f64,
    pub correct: Option<bool>,
    pub cache_purity: Option<f64>,
}

/// Per-sample result with the full fused score vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutcome {
    pub prediction: usize,
    pub scores: Vec<f64>,
    pub verdict: CommitteeVerdict,
    pub log: PredictionLogRecord,
}

/// The mutable adaptation state threaded through a stream.
#[derive(Debug, Clone)]
pub struct Engine {
    config: RunConfig,
    initial: AdjacentEmbeddings,
    text: EvolvedTextState,
    projector: SubspaceProjector,
    cache: ReliabilityCache,
    residuals: ResidualState,
    optimizer: AdamW,
    arrivals: u64,
}

impl Engine {
    /// Builds adjacent embeddings and the text-subspace projector from the
    /// prompt set. The requested rank is clamped to the available rank.
    pub fn new(prompts: &PromptSet, config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let adjacent = build_adjacent_embeddings(prompts, config.adjacent)?;
        let limit = (prompts.classes() * config.adjacent).min(prompts.dim());
        let rank = config.svd_rank.min(limit);
        if rank < config.svd_rank {
            log::info!("svd rank {} clamped to {rank} (C*M={}, d={})", config.svd_rank, prompts.classes() * config.adjacent, prompts.dim());
        }
        let projector = compute_text_subspace_projection(&adjacent, rank)?;
        Self::from_parts(adjacent, projector, config)
    }

    /// Assembles an engine from prebuilt adjacent embeddings and projector.
    pub fn from_parts(adjacent: AdjacentEmbeddings, projector: SubspaceProjector, config: &RunConfig) -> Result<Self> {
        config.validate()?;
        if projector.dim() != adjacent.dim() {
            return Err(Error::DimensionMismatch {
                expected: adjacent.dim(),
                actual: projector.dim(),
            });
        }
        let (classes, members, dim) = (adjacent.classes(), adjacent.members(), adjacent.dim());
        let text = if config.per_class_counter {
            EvolvedTextState::with_per_class_counters(adjacent.clone())
        } else {
            EvolvedTextState::new(adjacent.clone())
        };
        Ok(Engine {
            config: config.clone(),
            initial: adjacent,
            text,
            projector,
            cache: ReliabilityCache::new(classes, config.cache_size),
            residuals: ResidualState::zeros(classes, members, dim),
            optimizer: config.optimizer(),
            arrivals: 0,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn classes(&self) -> usize {
        self.initial.classes()
    }

    pub fn dim(&self) -> usize {
        self.initial.dim()
    }

    pub fn cache(&self) -> &ReliabilityCache {
        &self.cache
    }

    pub fn text_state(&self) -> &EvolvedTextState {
        &self.text
    }

    pub fn initial_embeddings(&self) -> &AdjacentEmbeddings {
        &self.initial
    }

    pub fn projector(&self) -> &SubspaceProjector {
        &self.projector
    }

    pub fn residuals(&self) -> &ResidualState {
        &self.residuals
    }

    fn loss_settings(&self) -> LossSettings {
        LossSettings {
            tau: self.config.tau,
            delta: self.config.delta,
            lambda1: self.config.lambda1,
            lambda2: self.config.lambda2,
            alpha: self.config.alpha,
            beta: self.config.beta,
        }
    }

    fn prototypes(&self) -> Vec<Option<Embedding>> {
        if self.config.enable_cache {
            self.cache.class_prototypes()
        } else {
            vec![None; self.classes()]
        }
    }

    /// Processes one sample and returns its prediction and diagnostics.
    pub fn adapt_sample(&mut self, record: &SampleRecord) -> Result<SampleOutcome> {
        let (classes, dim) = (self.classes(), self.dim());
        if record.views.is_empty() {
            return Err(Error::Dataset(format!("record {} has no views", record.id)));
        }
        if let Some(label) = record.label {
            if label >= classes {
                return Err(Error::InvalidClass { class: label, classes });
            }
        }
        let views = record
            .views
            .iter()
            .map(|v| {
                if v.dim() != dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        actual: v.dim(),
                    });
                }
                Embedding::normalized(v.as_slice().to_vec())
            })
            .collect::<Result<Vec<_>>>()?;
        let z = views[0].as_slice();
        let tau = self.config.tau;
        let zero_shot = argmax(&self.initial.prototype_scores(z));

        // Committee assessment and reweighted entropy.
        let current = self.text.embeddings();
        let z_proj = self.projector.project(z)?;
        let text_probs = softmax_with_temperature(&current.prototype_scores(z), tau)?;
        let entropy = shannon_entropy(&text_probs);
        let normalized_entropy = if classes > 1 { entropy / (classes as f64).ln() } else { 0.0 };
        let verdict = if self.config.enable_cer {
            assess(z, &z_proj, current, self.config.gamma)?
        } else {
            CommitteeVerdict::neutral(original_prediction(z, current))
        };
        let y = verdict.original_label;
        let reweighted = reweight_entropy(entropy, verdict.score);

        // Cache update.
        let cache_action = if self.config.enable_cache {
            let entry = CacheEntry {
                feature: views[0].clone(),
                pseudo_label: y,
                reweighted_entropy: reweighted,
                arrival_index: self.arrivals,
                true_label: record.label,
            };
            CacheAction::from(&self.cache.insert_or_evict(entry)?)
        } else {
            CacheAction::Skipped
        };
        self.arrivals += 1;

        // Calibration step and progressive merge.
        let mut update = false;
        let mut merge = false;
        let mut loss = None;
        let mut grad_norm = None;
        if self.config.enable_ddc && verdict.is_reliable() && normalized_entropy < self.config.tau_c {
            update = true;
            let prototypes = self.prototypes();
            let sample = CalibrationSample {
                views: &views,
                pseudo_label: y,
                prototypes: &prototypes,
            };
            let settings = self.loss_settings();
            let eval = loss_and_gradients(self.text.embeddings(), &self.residuals, &sample, &settings)?;
            let grads = eval.total_gradient();
            grad_norm = Some(norm(&grads));
            loss = Some(eval.breakdown);
            self.optimizer.step(&mut self.residuals, &grads);
            let merged = apply_residuals(self.text.embeddings(), &self.residuals)
                .and_then(|optimized| self.text.progressive_merge(&optimized, y));
            match merged {
                Ok(()) => merge = true,
                Err(Error::ZeroVector { .. }) => {
                    log::warn!("sample {}: degenerate merge rejected, prediction only", record.id);
                }
                Err(e) => return Err(e),
            }
            self.residuals.reset();
        }

        // Fused prediction from the post-update state.
        let prototypes = self.prototypes();
        let settings = self.loss_settings();
        let evolved = self.text.embeddings();
        let p_cls = classifier_probabilities(z, evolved, &prototypes, &settings);
        let fused = if self.config.enable_ddc {
            let p_gauss = gaussian_inference(z, evolved, tau)?;
            fuse_predictions(&p_cls, &p_gauss, self.config.eta)?
        } else {
            fuse_predictions(&p_cls, &p_cls, 0.0)?
        };
        let prediction = fused.label;
        let log = PredictionLogRecord {
            id: record.id,
            label: record.label,
            y,
            y_star: verdict.majority_label,
            n_star: verdict.majority_count,
            w: verdict.score,
            entropy,
            normalized_entropy,
            reweighted_entropy: reweighted,
            cache: cache_action,
            update,
            merge,
            loss,
            grad_norm,
            predicted: prediction,
            zero_shot,
            confidence: fused.confidence(),
            correct: record.label.map(|l| l == prediction),
            cache_purity: self.cache.purity(),
        };
        Ok(SampleOutcome {
            prediction,
            scores: fused.scores,
            verdict,
            log,
        })
    }
}

/// Point of the cache-purity trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PurityPoint {
    pub samples: usize,
    pub purity: f64,
}

/// Aggregate metrics of one stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub samples: usize,
    pub labeled: usize,
    pub top1_accuracy: Option<f64>,
    pub zero_shot_accuracy: Option<f64>,
    pub ece: Option<f64>,
    pub final_cache_purity: Option<f64>,
    pub cache_purity_trace: Vec<PurityPoint>,
    pub updates: usize,
    pub merges: usize,
    pub config: RunConfig,
    pub final_cache: Vec<Vec<CacheEntrySummary>>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: RunMetrics,
    pub log: Vec<PredictionLogRecord>,
}

/// Runs the stream in order, one pass.
pub fn run_stream<I>(prompts: &PromptSet, records: I, config: &RunConfig) -> Result<RunOutput>
where
    I: IntoIterator<Item = Result<SampleRecord>>,
{
    run_stream_with(prompts, records, config, |_| {})
}

/// [`run_stream`] with a callback invoked after every sample.
pub fn run_stream_with<I, F>(prompts: &PromptSet, records: I, config: &RunConfig, mut on_sample: F) -> Result<RunOutput>
where
    I: IntoIterator<Item = Result<SampleRecord>>,
    F: FnMut(&PredictionLogRecord),
{
    let mut engine = Engine::new(prompts, config)?;
    let mut log = Vec::new();
    let mut trace = Vec::new();
    for record in records {
        let outcome = engine.adapt_sample(&record?)?;
        on_sample(&outcome.log);
        log.push(outcome.log);
        if log.len() % config.purity_every == 0 {
            if let Some(purity) = engine.cache().purity() {
                trace.push(PurityPoint {
                    samples: log.len(),
                    purity,
                });
            }
        }
    }
    let metrics = summarize(&log, trace, &engine)?;
    Ok(RunOutput { metrics, log })
}

fn summarize(log: &[PredictionLogRecord], trace: Vec<PurityPoint>, engine: &Engine) -> Result<RunMetrics> {
    let labeled: Vec<&PredictionLogRecord> = log.iter().filter(|r| r.label.is_some()).collect();
    let n = labeled.len();
    let accuracy = |f: &dyn Fn(&PredictionLogRecord) -> bool| {
        (n > 0).then(|| labeled.iter().filter(|r| f(r)).count() as f64 / n as f64)
    };
    let top1_accuracy = accuracy(&|r| r.label == Some(r.predicted));
    let zero_shot_accuracy = accuracy(&|r| r.label == Some(r.zero_shot));
    let ece = if n > 0 {
        let conf: Vec<f64> = labeled.iter().map(|r| r.confidence).collect();
        let correct: Vec<bool> = labeled.iter().map(|r| r.label == Some(r.predicted)).collect();
        Some(expected_calibration_error(&conf, &correct, crate::metrics::ECE_BINS)?)
    } else {
        None
    };
    Ok(RunMetrics {
        samples: log.len(),
        labeled: n,
        top1_accuracy,
        zero_shot_accuracy,
        ece,
        final_cache_purity: engine.cache().purity(),
        cache_purity_trace: trace,
        updates: log.iter().filter(|r| r.update).count(),
        merges: log.iter().filter(|r| r.merge).count(),
        config: engine.config().clone(),
        final_cache: engine.cache().dump(),
    })
}
