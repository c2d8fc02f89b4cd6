//! Brute-force reference implementations.
//!
//! Everything here is written from the definitions with plain vectors: an
//! explicit `d × d` covariance for the surrogate loss, forward-mode dual
//! numbers for gradients, one-sided Jacobi for the SVD, counting for votes
//! and a list simulation for the cache. None of it calls into the engine's
//! modules, so the two can be compared against each other.

use std::ops::{Add, Mul, Neg, Sub};

use crate::calibration::LossSettings;
use crate::io::RunConfig;
use crate::pipeline::SampleRecord;
use crate::textspace::PromptSet;

/// Arithmetic needed by the generic loss evaluation.
pub trait Scalar: Clone + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Neg<Output = Self> {
    fn constant(v: f64) -> Self;
    fn value(&self) -> f64;
    fn exp(&self) -> Self;
    fn ln(&self) -> Self;
    fn sqrt(&self) -> Self;
    fn recip(&self) -> Self;
    fn scale(&self, k: f64) -> Self;
}

impl Scalar for f64 {
    fn constant(v: f64) -> Self {
        v
    }
    fn value(&self) -> f64 {
        *self
    }
    fn exp(&self) -> Self {
        f64::exp(*self)
    }
    fn ln(&self) -> Self {
        f64::ln(*self)
    }
    fn sqrt(&self) -> Self {
        f64::sqrt(*self)
    }
    fn recip(&self) -> Self {
        1.0 / *self
    }
    fn scale(&self, k: f64) -> Self {
        self * k
    }
}

/// Forward-mode dual number carrying a full gradient. An empty `grad` means
/// a constant.
#[derive(Debug, Clone, PartialEq)]
pub struct Dual {
    pub val: f64,
    pub grad: Vec<f64>,
}

impl Dual {
    /// The `index`-th of `count` independent variables.
    pub fn variable(val: f64, index: usize, count: usize) -> Self {
        let mut grad = vec![0.0; count];
        grad[index] = 1.0;
        Dual { val, grad }
    }

    fn chain(&self, factor: f64, val: f64) -> Dual {
        Dual {
            val,
            grad: self.grad.iter().map(|g| g * factor).collect(),
        }
    }

    /// Gradient padded to `count` entries.
    pub fn gradient(&self, count: usize) -> Vec<f64> {
        if self.grad.is_empty() {
            vec![0.0; count]
        } else {
            self.grad.clone()
        }
    }
}

fn combine(a: &[f64], fa: f64, b: &[f64], fb: f64) -> Vec<f64> {
    match (a.is_empty(), b.is_empty()) {
        (true, true) => Vec::new(),
        (false, true) => a.iter().map(|x| x * fa).collect(),
        (true, false) => b.iter().map(|x| x * fb).collect(),
        (false, false) => a.iter().zip(b).map(|(x, y)| x * fa + y * fb).collect(),
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual {
            val: self.val + o.val,
            grad: combine(&self.grad, 1.0, &o.grad, 1.0),
        }
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual {
            val: self.val - o.val,
            grad: combine(&self.grad, 1.0, &o.grad, -1.0),
        }
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual {
            val: self.val * o.val,
            grad: combine(&self.grad, o.val, &o.grad, self.val),
        }
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        self.chain(-1.0, -self.val)
    }
}

impl Scalar for Dual {
    fn constant(v: f64) -> Self {
        Dual { val: v, grad: Vec::new() }
    }
    fn value(&self) -> f64 {
        self.val
    }
    fn exp(&self) -> Self {
        let e = self.val.exp();
        self.chain(e, e)
    }
    fn ln(&self) -> Self {
        self.chain(1.0 / self.val, self.val.ln())
    }
    fn sqrt(&self) -> Self {
        let s = self.val.sqrt();
        self.chain(0.5 / s, s)
    }
    fn recip(&self) -> Self {
        self.chain(-1.0 / (self.val * self.val), 1.0 / self.val)
    }
    fn scale(&self, k: f64) -> Self {
        self.chain(k, self.val * k)
    }
}

fn sum<S: Scalar>(items: impl IntoIterator<Item = S>) -> S {
    items.into_iter().fold(S::constant(0.0), |a, b| a + b)
}

fn dot_const<S: Scalar>(a: &[S], b: &[f64]) -> S {
    sum(a.iter().zip(b).map(|(x, &y)| x.scale(y)))
}

fn unit<S: Scalar>(v: &[S]) -> Vec<S> {
    let inv = sum(v.iter().map(|x| x.clone() * x.clone())).sqrt().recip();
    v.iter().map(|x| x.clone() * inv.clone()).collect()
}

fn lse<S: Scalar>(xs: &[S]) -> S {
    let m = xs.iter().map(Scalar::value).fold(f64::NEG_INFINITY, f64::max);
    S::constant(m) + sum(xs.iter().map(|x| (x.clone() - S::constant(m)).exp())).ln()
}

fn plain_argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..xs.len() {
        if xs[i] > xs[best] {
            best = i;
        }
    }
    best
}

fn plain_dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn plain_unit(v: &[f64]) -> Vec<f64> {
    let n = plain_dot(v, v).sqrt();
    v.iter().map(|x| x / n).collect()
}

fn plain_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn plain_entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum()
}

/// Surrogate loss built from explicit `d × d` class-pair covariance matrices.
/// `rows` holds the adjacent embeddings class-major (`c * members + m`).
pub fn surrogate_explicit<S: Scalar>(z: &[f64], label: usize, rows: &[Vec<S>], members: usize, tau: f64) -> S {
    let classes = rows.len() / members;
    let d = z.len();
    let inv_m = 1.0 / members as f64;
    let centered: Vec<Vec<Vec<S>>> = (0..classes)
        .map(|c| {
            let mean: Vec<S> = (0..d)
                .map(|i| sum((0..members).map(|m| rows[c * members + m][i].clone())).scale(inv_m))
                .collect();
            (0..members)
                .map(|m| {
                    (0..d)
                        .map(|i| rows[c * members + m][i].clone() - mean[i].clone())
                        .collect()
                })
                .collect()
        })
        .collect();
    // Σ^{ab}[i][j] = (1/M) Σ_m e_m^a[i] e_m^b[j]
    let cov = |a: usize, b: usize| -> Vec<S> {
        let mut out = Vec::with_capacity(d * d);
        for i in 0..d {
            for j in 0..d {
                out.push(sum((0..members).map(|m| centered[a][m][i].clone() * centered[b][m][j].clone())).scale(inv_m));
            }
        }
        out
    };
    let yy = cov(label, label);
    let mut denom = Vec::with_capacity(classes);
    for c in 0..classes {
        let (cc, cy, yc) = (cov(c, c), cov(c, label), cov(label, c));
        let mut quad = S::constant(0.0);
        for i in 0..d {
            for j in 0..d {
                let k = i * d + j;
                let w = cc[k].clone() + yy[k].clone() - cy[k].clone() - yc[k].clone();
                quad = quad + w.scale(z[i] * z[j]);
            }
        }
        let s = dot_const(&rows[c * members + members - 1], z).scale(1.0 / tau);
        denom.push(s + quad.scale(0.5 / (tau * tau)));
    }
    let s_label = dot_const(&rows[label * members + members - 1], z).scale(1.0 / tau);
    -s_label + lse(&denom)
}

/// Inputs of one calibration step in plain vectors.
#[derive(Debug, Clone)]
pub struct CalibrationProblem {
    pub members: usize,
    /// Current text state, class-major rows.
    pub base: Vec<Vec<f64>>,
    /// Original view first.
    pub views: Vec<Vec<f64>>,
    pub label: usize,
    pub prototypes: Vec<Option<Vec<f64>>>,
    pub settings: LossSettings,
}

#[derive(Debug, Clone)]
pub struct OracleLoss {
    pub entropy: f64,
    pub surrogate: f64,
    pub alignment: f64,
    pub total: f64,
    pub selected_views: Vec<usize>,
    pub grad_entropy: Vec<f64>,
    pub grad_surrogate: Vec<f64>,
    pub grad_alignment: Vec<f64>,
    pub grad_total: Vec<f64>,
}

impl CalibrationProblem {
    fn classes(&self) -> usize {
        self.base.len() / self.members
    }

    /// Loss terms at `residuals` with exact gradients from dual numbers.
    pub fn evaluate(&self, residuals: &[f64]) -> OracleLoss {
        let count = residuals.len();
        let d = self.base[0].len();
        let rows: Vec<Vec<Dual>> = self
            .base
            .iter()
            .enumerate()
            .map(|(k, t)| {
                let shifted: Vec<Dual> = (0..d)
                    .map(|i| Dual::constant(t[i]) + Dual::variable(residuals[k * d + i], k * d + i, count))
                    .collect();
                unit(&shifted)
            })
            .collect();
        let (entropy, selected) = self.entropy_term(&rows);
        let surrogate = sum(self
            .views
            .iter()
            .map(|z| surrogate_explicit(z, self.label, &rows, self.members, self.settings.tau)))
        .scale(1.0 / self.views.len() as f64);
        let alignment = self.alignment_term(&rows);
        let s = &self.settings;
        let total = entropy.clone() + surrogate.scale(s.lambda1) + alignment.scale(s.lambda2);
        OracleLoss {
            entropy: entropy.val,
            surrogate: surrogate.val,
            alignment: alignment.val,
            total: total.val,
            selected_views: selected,
            grad_entropy: entropy.gradient(count),
            grad_surrogate: surrogate.gradient(count),
            grad_alignment: alignment.gradient(count),
            grad_total: total.gradient(count),
        }
    }

    fn entropy_term(&self, rows: &[Vec<Dual>]) -> (Dual, Vec<usize>) {
        let classes = self.classes();
        let s = &self.settings;
        let probs: Vec<Vec<Dual>> = self
            .views
            .iter()
            .map(|z| {
                let logits: Vec<Dual> = (0..classes)
                    .map(|c| {
                        let bonus = match &self.prototypes[c] {
                            Some(f) => s.alpha * (-s.beta * (1.0 - plain_dot(z, f))).exp(),
                            None => 0.0,
                        };
                        dot_const(&rows[c * self.members + self.members - 1], z).scale(1.0 / s.tau)
                            + Dual::constant(bonus)
                    })
                    .collect();
                let norm = lse(&logits);
                logits.into_iter().map(|l| (l - norm.clone()).exp()).collect()
            })
            .collect();
        let ln_c = (classes as f64).ln();
        let spread: Vec<f64> = probs
            .iter()
            .map(|p| plain_entropy(&p.iter().map(|x| x.val).collect::<Vec<_>>()) / ln_c)
            .collect();
        let mut selected: Vec<usize> = (0..probs.len()).filter(|&i| spread[i] < s.delta).collect();
        if selected.is_empty() {
            let mut best = 0;
            for i in 1..spread.len() {
                if spread[i] < spread[best] {
                    best = i;
                }
            }
            selected.push(best);
        }
        let inv = 1.0 / selected.len() as f64;
        let averaged: Vec<Dual> = (0..classes)
            .map(|c| sum(selected.iter().map(|&i| probs[i][c].clone())).scale(inv))
            .collect();
        let h = -sum(averaged.iter().filter(|p| p.val > 0.0).map(|p| p.clone() * p.ln()));
        (h, selected)
    }

    fn alignment_term(&self, rows: &[Vec<Dual>]) -> Dual {
        let active: Vec<usize> = (0..self.classes()).filter(|&c| self.prototypes[c].is_some()).collect();
        if active.is_empty() {
            return Dual::constant(0.0);
        }
        let last = self.members - 1;
        let x = |a: usize, b: usize| {
            dot_const(
                &rows[active[a] * self.members + last],
                self.prototypes[active[b]].as_ref().expect("active"),
            )
        };
        let n = active.len();
        let mut total = Dual::constant(0.0);
        for a in 0..n {
            let row: Vec<Dual> = (0..n).map(|b| x(a, b)).collect();
            let col: Vec<Dual> = (0..n).map(|b| x(b, a)).collect();
            total = total + (lse(&row) - row[a].clone()) + (lse(&col) - col[a].clone());
        }
        total.scale(1.0 / n as f64)
    }
}

/// Central differences of `f` at `x` with step `h`.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Singular values in descending order with matching unit right singular
/// vectors (rows of `Vᵀ`).
#[derive(Debug, Clone)]
pub struct JacobiSvd {
    pub singular_values: Vec<f64>,
    pub right: Vec<Vec<f64>>,
}

impl JacobiSvd {
    /// `Φ = Σ_{i<n} v_i v_iᵀ`, row-major `d × d`.
    pub fn projector(&self, n: usize) -> Vec<f64> {
        let d = self.right.first().map_or(0, Vec::len);
        let mut phi = vec![0.0; d * d];
        for v in self.right.iter().take(n) {
            for i in 0..d {
                for j in 0..d {
                    phi[i * d + j] += v[i] * v[j];
                }
            }
        }
        phi
    }
}

/// One-sided Jacobi SVD of a row-major `rows × cols` matrix. Only singular
/// vectors with nonzero singular values are returned when `rows < cols`.
pub fn jacobi_svd(rows: usize, cols: usize, data: &[f64]) -> JacobiSvd {
    assert_eq!(data.len(), rows * cols);
    // Orthogonalize the columns of whichever of A, Aᵀ has fewer columns.
    let transposed = rows <= cols;
    let (len, count) = if transposed { (cols, rows) } else { (rows, cols) };
    let mut work: Vec<Vec<f64>> = (0..count)
        .map(|j| {
            (0..len)
                .map(|i| if transposed { data[j * cols + i] } else { data[i * cols + j] })
                .collect()
        })
        .collect();
    let mut v: Vec<Vec<f64>> = (0..count)
        .map(|j| (0..count).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..count {
            for q in p + 1..count {
                let a = plain_dot(&work[p], &work[p]);
                let b = plain_dot(&work[q], &work[q]);
                let g = plain_dot(&work[p], &work[q]);
                if g.abs() <= 1e-15 * (a * b).sqrt() || g == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (b - a) / (2.0 * g);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for cols_pair in [&mut work, &mut v] {
                    let (lo, hi) = cols_pair.split_at_mut(q);
                    for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
                        let (xp, yq) = (*x, *y);
                        *x = c * xp - s * yq;
                        *y = s * xp + c * yq;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut pairs: Vec<(f64, Vec<f64>)> = (0..count)
        .filter_map(|j| {
            let sigma = plain_dot(&work[j], &work[j]).sqrt();
            if transposed {
                (sigma > 1e-12).then(|| (sigma, work[j].iter().map(|x| x / sigma).collect()))
            } else {
                Some((sigma, v[j].clone()))
            }
        })
        .collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    JacobiSvd {
        singular_values: pairs.iter().map(|p| p.0).collect(),
        right: pairs.into_iter().map(|p| p.1).collect(),
    }
}

/// Prompt order by ascending summed cosine to the other prompts of the class,
/// index order on ties.
pub fn prompt_order(prompts: &[Vec<f64>]) -> Vec<usize> {
    let cos = |a: &[f64], b: &[f64]| plain_dot(a, b) / (plain_dot(a, a).sqrt() * plain_dot(b, b).sqrt());
    let sims: Vec<f64> = (0..prompts.len())
        .map(|i| {
            (0..prompts.len())
                .filter(|&j| j != i)
                .map(|j| cos(&prompts[i], &prompts[j]))
                .sum()
        })
        .collect();
    let mut order: Vec<usize> = (0..prompts.len()).collect();
    order.sort_by(|&a, &b| sims[a].total_cmp(&sims[b]).then(a.cmp(&b)));
    order
}

/// Adjacent embeddings by sort-then-average, class-major rows.
pub fn adjacent_oracle(prompts: &PromptSet, members: usize) -> Vec<Vec<f64>> {
    let k = prompts.per_class();
    let mut rows = Vec::new();
    for c in 0..prompts.classes() {
        let list: Vec<Vec<f64>> = prompts.class(c).iter().map(|e| e.as_slice().to_vec()).collect();
        let order = prompt_order(&list);
        for m in 1..=members {
            let q = m * k / members;
            let mut mean = vec![0.0; prompts.dim()];
            for &i in &order[..q] {
                for (s, x) in mean.iter_mut().zip(&list[i]) {
                    *s += x / q as f64;
                }
            }
            rows.push(plain_unit(&mean));
        }
    }
    rows
}

/// Committee outcome by counting every class: `(y*, n*, w)`.
pub fn vote_oracle(labels: &[usize], original: usize, classes: usize, gamma: f64) -> (usize, usize, f64) {
    let counts: Vec<usize> = (0..classes).map(|c| labels.iter().filter(|&&l| l == c).count()).collect();
    let top = *counts.iter().max().expect("at least one class");
    let winner = if counts[original] == top {
        original
    } else {
        (0..classes).find(|&c| counts[c] == top).expect("some class reaches the top count")
    };
    let r = if winner == original { 1.0 } else { gamma };
    let s = labels.len() as f64 / top as f64;
    (winner, top, 1.0 + (r * s).ln())
}

/// Final slot contents as the `capacity` smallest keys, earlier arrival first
/// on equal keys. Matches the cache whenever keys are distinct.
pub fn cache_sort_oracle(capacity: usize, items: &[(f64, u64)]) -> Vec<(f64, u64)> {
    let mut all = items.to_vec();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.truncate(capacity);
    all.sort_by_key(|x| x.1);
    all
}

/// Literal replay of the slot rules: insert while not full, otherwise replace
/// the oldest of the largest keys when the new key is strictly smaller.
/// Entries are returned by arrival.
pub fn cache_simulation_oracle(capacity: usize, items: &[(f64, u64)]) -> Vec<(f64, u64)> {
    let mut slot: Vec<(f64, u64)> = Vec::new();
    for &item in items {
        simulate_insert(&mut slot, capacity, item, |e| *e);
    }
    slot.sort_by_key(|x| x.1);
    slot
}

fn simulate_insert<T>(slot: &mut Vec<T>, capacity: usize, item: T, key: impl Fn(&T) -> (f64, u64)) -> &'static str {
    if capacity == 0 {
        return "rejected";
    }
    if slot.len() < capacity {
        slot.push(item);
        return "inserted";
    }
    let largest = slot.iter().map(|e| key(e).0).fold(f64::NEG_INFINITY, f64::max);
    let victim = slot
        .iter()
        .enumerate()
        .filter(|(_, e)| key(e).0 == largest)
        .min_by_key(|(_, e)| key(e).1)
        .map(|(i, _)| i)
        .expect("full slot");
    if key(&item).0 < largest {
        slot.remove(victim);
        slot.push(item);
        "replaced"
    } else {
        "rejected"
    }
}

/// Everything the reference algorithm decides for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub id: u64,
    pub zero_shot: usize,
    pub y: usize,
    pub y_star: usize,
    pub n_star: usize,
    pub w: f64,
    pub entropy: f64,
    pub reweighted_entropy: f64,
    /// "inserted", "replaced", "rejected" or "skipped".
    pub cache: &'static str,
    pub update: bool,
    pub merge: bool,
    pub loss_total: Option<f64>,
    pub prediction: usize,
    pub scores: Vec<f64>,
    pub confidence: f64,
    /// Per class: `(arrival, reweighted entropy)` ordered by arrival.
    pub slots: Vec<Vec<(u64, f64)>>,
    /// Text state after the sample, class-major rows.
    pub text: Vec<Vec<f64>>,
}

struct Cached {
    arrival: u64,
    key: f64,
    feature: Vec<f64>,
}

/// Runs the whole adaptation loop in one function from the definitions above.
pub fn reference_trace(prompts: &PromptSet, records: &[SampleRecord], config: &RunConfig) -> Vec<TraceStep> {
    let classes = prompts.classes();
    let members = config.adjacent;
    let d = prompts.dim();
    let tau = config.tau;
    let initial = adjacent_oracle(prompts, members);
    let flat: Vec<f64> = initial.iter().flatten().copied().collect();
    let rank = config.svd_rank.min(classes * members).min(d);
    let phi = jacobi_svd(classes * members, d, &flat).projector(rank);
    let mut text = initial.clone();
    let mut counters = vec![1u64; classes];
    let mut global = 1u64;
    let mut slots: Vec<Vec<Cached>> = (0..classes).map(|_| Vec::new()).collect();
    let settings = LossSettings {
        tau,
        delta: config.delta,
        lambda1: config.lambda1,
        lambda2: config.lambda2,
        alpha: config.alpha,
        beta: config.beta,
    };
    let row = |c: usize, m: usize| c * members + m;
    let last = members - 1;
    let mut out = Vec::with_capacity(records.len());

    for (arrival, record) in records.iter().enumerate() {
        let views: Vec<Vec<f64>> = record.views.iter().map(|v| plain_unit(v.as_slice())).collect();
        let z = &views[0];
        let zero_shot = plain_argmax(&(0..classes).map(|c| plain_dot(z, &initial[row(c, last)])).collect::<Vec<_>>());
        let z_proj: Vec<f64> = (0..d).map(|i| (0..d).map(|j| phi[i * d + j] * z[j]).sum()).collect();

        let scores: Vec<f64> = (0..classes).map(|c| plain_dot(z, &text[row(c, last)])).collect();
        let p_text = plain_softmax(&scores.iter().map(|s| s / tau).collect::<Vec<_>>());
        let entropy = plain_entropy(&p_text);
        let normalized = entropy / (classes as f64).ln();
        let y = plain_argmax(&scores);
        let (y_star, n_star, w) = if config.enable_cer {
            let votes: Vec<usize> = (0..members)
                .map(|m| plain_argmax(&(0..classes).map(|c| plain_dot(&z_proj, &text[row(c, m)])).collect::<Vec<_>>()))
                .collect();
            vote_oracle(&votes, y, classes, config.gamma)
        } else {
            (y, 1, 1.0)
        };
        let reliable = !config.enable_cer || n_star == members && y_star == y;
        let key = w * entropy;

        let cache = if config.enable_cache {
            let item = Cached {
                arrival: arrival as u64,
                key,
                feature: z.clone(),
            };
            simulate_insert(&mut slots[y], config.cache_size, item, |e| (e.key, e.arrival))
        } else {
            "skipped"
        };
        let prototypes: Vec<Option<Vec<f64>>> = slots
            .iter()
            .map(|slot| {
                if slot.is_empty() || !config.enable_cache {
                    return None;
                }
                let mut s = vec![0.0; d];
                for e in slot {
                    s.iter_mut().zip(&e.feature).for_each(|(a, b)| *a += b);
                }
                Some(plain_unit(&s))
            })
            .collect();

        let update = config.enable_ddc && reliable && normalized < config.tau_c;
        let mut merge = false;
        let mut loss_total = None;
        if update {
            let problem = CalibrationProblem {
                members,
                base: text.clone(),
                views: views.clone(),
                label: y,
                prototypes: prototypes.clone(),
                settings,
            };
            let loss = problem.evaluate(&vec![0.0; classes * members * d]);
            loss_total = Some(loss.total);
            // One adaptive-moment step from zero residuals and zero moments.
            let (b1, b2) = (config.beta1, config.beta2);
            let residual: Vec<f64> = loss
                .grad_total
                .iter()
                .map(|&g| {
                    let m_hat = (1.0 - b1) * g / (1.0 - b1);
                    let v_hat = (1.0 - b2) * g * g / (1.0 - b2);
                    -config.lr * (m_hat / (v_hat.sqrt() + config.adam_eps))
                })
                .collect();
            let merged: Vec<Vec<f64>> = text
                .iter()
                .enumerate()
                .map(|(k, t)| {
                    let optimized = plain_unit(&t.iter().zip(&residual[k * d..(k + 1) * d]).map(|(a, b)| a + b).collect::<Vec<_>>());
                    let l = if config.per_class_counter { counters[k / members] } else { global };
                    plain_unit(&t.iter().zip(&optimized).map(|(a, b)| (l - 1) as f64 * a + b).collect::<Vec<_>>())
                })
                .collect();
            if merged.iter().flatten().all(|x| x.is_finite()) {
                text = merged;
                merge = true;
                global += 1;
                counters[y] += 1;
            }
        }

        let logits: Vec<f64> = (0..classes)
            .map(|c| {
                let bonus = prototypes[c]
                    .as_ref()
                    .map_or(0.0, |f| config.alpha * (-config.beta * (1.0 - plain_dot(z, f))).exp());
                plain_dot(z, &text[row(c, last)]) / tau + bonus
            })
            .collect();
        let p_cls = plain_softmax(&logits);
        let eta = if config.enable_ddc { config.eta } else { 0.0 };
        let fused: Vec<f64> = if config.enable_ddc {
            let g: Vec<f64> = (0..classes)
                .map(|c| {
                    let mean: Vec<f64> = (0..d)
                        .map(|i| (0..members).map(|m| text[row(c, m)][i]).sum::<f64>() / members as f64)
                        .collect();
                    plain_dot(z, &mean) / tau
                })
                .collect();
            let p_gauss = plain_softmax(&g);
            p_cls.iter().zip(&p_gauss).map(|(a, b)| a + eta * b).collect()
        } else {
            p_cls
        };
        let prediction = plain_argmax(&fused);
        let confidence = fused[prediction] / (1.0 + eta);
        out.push(TraceStep {
            id: record.id,
            zero_shot,
            y,
            y_star,
            n_star,
            w,
            entropy,
            reweighted_entropy: key,
            cache,
            update,
            merge,
            loss_total,
            prediction,
            scores: fused,
            confidence,
            slots: slots
                .iter()
                .map(|s| {
                    let mut v: Vec<(u64, f64)> = s.iter().map(|e| (e.arrival, e.key)).collect();
                    v.sort_by_key(|x| x.0);
                    v
                })
                .collect(),
            text: text.clone(),
        });
    }
    out
}
