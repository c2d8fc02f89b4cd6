//! Per-class bounded store of test features, prioritized by (reweighted)
//! entropy, and the cache-based logit correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{dot, Embedding};

#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub feature: Embedding,
    pub pseudo_label: usize,
    /// Priority key; lower is better.
    pub reweighted_entropy: f64,
    pub arrival_index: u64,
    /// Ground truth when known; only used for purity metrics.
    pub true_label: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum InsertionOutcome {
    Inserted,
    /// The slot was full; the returned entry (the slot's previous maximum) was evicted.
    Replaced(CacheEntry),
    Rejected,
}

impl InsertionOutcome {
    pub fn as_str(&self) -> &'static str {
        match self {
            InsertionOutcome::Inserted => "inserted",
            InsertionOutcome::Replaced(_) => "replaced",
            InsertionOutcome::Rejected => "rejected",
        }
    }
}

/// Serializable view of one cached entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntrySummary {
    pub arrival_index: u64,
    pub reweighted_entropy: f64,
    pub correct: Option<bool>,
}

#[derive(Debug, Clone)]
pub struct ReliabilityCache {
    capacity: usize,
    slots: Vec<Vec<CacheEntry>>,
}

impl ReliabilityCache {
    pub fn new(classes: usize, capacity: usize) -> Self {
        ReliabilityCache {
            capacity,
            slots: vec![Vec::with_capacity(capacity); classes],
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn classes(&self) -> usize {
        self.slots.len()
    }

    pub fn slot(&self, class: usize) -> &[CacheEntry] {
        &self.slots[class]
    }

    pub fn len(&self) -> usize {
        self.slots.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Inserts into a non-full slot; otherwise replaces the slot maximum when
    /// the new key is strictly smaller. Among equal maxima the oldest entry
    /// is evicted.
    pub fn insert_or_evict(&mut self, entry: CacheEntry) -> Result<InsertionOutcome> {
        let classes = self.slots.len();
        let slot = self
            .slots
            .get_mut(entry.pseudo_label)
            .ok_or(Error::InvalidClass {
                class: entry.pseudo_label,
                classes,
            })?;
        if !entry.reweighted_entropy.is_finite() {
            return Err(Error::NonFinite("cache priority"));
        }
        if self.capacity == 0 {
            return Ok(InsertionOutcome::Rejected);
        }
        if slot.len() < self.capacity {
            slot.push(entry);
            return Ok(InsertionOutcome::Inserted);
        }
        let worst = slot
            .iter()
            .enumerate()
            .max_by(|(_, a), (_, b)| {
                a.reweighted_entropy
                    .total_cmp(&b.reweighted_entropy)
                    // Older arrival compares greater so it wins the max.
                    .then(b.arrival_index.cmp(&a.arrival_index))
            })
            .map(|(i, _)| i)
            .expect("full slot is nonempty");
        if entry.reweighted_entropy < slot[worst].reweighted_entropy {
            let evicted = std::mem::replace(&mut slot[worst], entry);
            Ok(InsertionOutcome::Replaced(evicted))
        } else {
            Ok(InsertionOutcome::Rejected)
        }
    }

    /// Largest priority key stored for `class`, if any.
    pub fn max_priority(&self, class: usize) -> Option<f64> {
        self.slots[class]
            .iter()
            .map(|e| e.reweighted_entropy)
            .max_by(f64::total_cmp)
    }

    /// Normalized mean feature of every nonempty slot, indexed by class.
    pub fn class_prototypes(&self) -> Vec<Option<Embedding>> {
        self.slots
            .iter()
            .map(|slot| {
                let first = slot.first()?;
                let mut sum = vec![0.0; first.feature.dim()];
                for e in slot {
                    for (s, x) in sum.iter_mut().zip(e.feature.as_slice()) {
                        *s += x;
                    }
                }
                Embedding::normalized(sum).ok()
            })
            .collect()
    }

    /// Fraction of labeled entries whose pseudo-label equals the ground truth.
    pub fn purity(&self) -> Option<f64> {
        let (mut labeled, mut correct) = (0usize, 0usize);
        for e in self.slots.iter().flatten() {
            if let Some(t) = e.true_label {
                labeled += 1;
                correct += usize::from(t == e.pseudo_label);
            }
        }
        (labeled > 0).then(|| correct as f64 / labeled as f64)
    }

    /// Per-class summaries ordered by arrival.
    pub fn dump(&self) -> Vec<Vec<CacheEntrySummary>> {
        self.slots
            .iter()
            .map(|slot| {
                let mut rows: Vec<CacheEntrySummary> = slot
                    .iter()
                    .map(|e| CacheEntrySummary {
                        arrival_index: e.arrival_index,
                        reweighted_entropy: e.reweighted_entropy,
                        correct: e.true_label.map(|t| t == e.pseudo_label),
                    })
                    .collect();
                rows.sort_by_key(|r| r.arrival_index);
                rows
            })
            .collect()
    }
}

/// Modulating function `A(x) = α exp(-β (1 - x))`.
pub fn modulate(affinity: f64, alpha: f64, beta: f64) -> f64 {
    alpha * (-beta * (1.0 - affinity)).exp()
}

/// Cache-based logit correction: class `c` receives `A(z · F_c)` when it has
/// a prototype, zero otherwise.
pub fn cache_logits(z: &[f64], prototypes: &[Option<Embedding>], alpha: f64, beta: f64) -> Vec<f64> {
    prototypes
        .iter()
        .map(|p| match p {
            Some(f) => modulate(dot(z, f.as_slice()), alpha, beta),
            None => 0.0,
        })
        .collect()
}
