//! Seeded synthetic embedding streams with a controllable text/image shift.
//!
//! Class directions share a common component so classes are correlated.
//! Prompts scatter around their class direction; image features scatter
//! around the class direction rotated by `shift` radians inside a 2-plane.
//! The plane mixes a random orthogonal direction with the direction of a
//! randomly chosen confuser class (`confusion`). The first `facet_prompts`
//! prompts of each class are drawn around the class direction tilted by
//! `facet_angle` inside the same plane, so they describe the shifted
//! appearance better than the rest. A `noise_rate`
//! fraction of samples are drawn between their class and a random other
//! class. Augmented views add Gaussian jitter to the original feature and
//! renormalize.
//!
//! `SyntheticSpec::default()` is the reference benchmark: ten classes in 64
//! dimensions, eight prompts, eight views, a 0.6 rad shift and 10% boundary
//! samples.
//!
//! All vectors are rounded to `f32` at generation time so a stream written
//! to disk and read back is identical to the in-memory stream.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{header_for, DatasetHeader};
use crate::numeric::{dot, norm, Embedding};
use crate::pipeline::SampleRecord;
use crate::textspace::PromptSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub dim: usize,
    /// Prompts per class (K).
    pub prompts_per_class: usize,
    /// Adjacent embeddings the stream is meant for (M); only checked against K.
    pub members: usize,
    pub samples_per_class: usize,
    /// Rotation of image class means away from their text direction, radians.
    pub shift: f64,
    /// Standard deviation of the norm of the jitter added to each augmented view.
    pub view_jitter: f64,
    /// Fraction of samples placed between two classes.
    pub noise_rate: f64,
    /// Augmented views per record (N).
    pub views: usize,
    pub seed: u64,
    /// Weight of the shared component in class directions, in [0, 1).
    pub class_similarity: f64,
    /// Norm of the perturbation applied to each prompt.
    pub prompt_noise: f64,
    /// Within-class image spread as a multiple of `shift`.
    pub sample_spread: f64,
    /// Weight in [0, 1] of a confuser class direction in each shift plane;
    /// zero gives a uniformly random plane.
    pub confusion: f64,
    /// Prompts per class drawn around a direction tilted into the shift plane.
    pub facet_prompts: usize,
    /// Tilt of the facet prompts in radians, independent of `shift`.
    pub facet_angle: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 10,
            dim: 64,
            prompts_per_class: 8,
            members: 3,
            samples_per_class: 200,
            shift: 0.6,
            view_jitter: 0.15,
            noise_rate: 0.1,
            views: 8,
            seed: 1,
            class_similarity: 0.95,
            prompt_noise: 0.1,
            sample_spread: 0.3,
            confusion: 0.3,
            facet_prompts: 2,
            facet_angle: 0.3,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.classes < 2 {
            return bad(format!("classes must be >= 2, got {}", self.classes));
        }
        if self.dim < 2 {
            return bad(format!("dim must be >= 2, got {}", self.dim));
        }
        if self.members == 0 {
            return bad("members (M) must be >= 1".into());
        }
        if self.prompts_per_class < self.members || self.prompts_per_class < 2 {
            return bad(format!(
                "prompts per class K={} must satisfy K >= M={} and K >= 2",
                self.prompts_per_class, self.members
            ));
        }
        if self.samples_per_class == 0 {
            return bad("samples_per_class must be >= 1".into());
        }
        for (name, v) in [
            ("shift", self.shift),
            ("view_jitter", self.view_jitter),
            ("prompt_noise", self.prompt_noise),
            ("sample_spread", self.sample_spread),
            ("facet_angle", self.facet_angle),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if self.facet_prompts > self.prompts_per_class {
            return bad(format!(
                "facet_prompts={} exceeds K={}",
                self.facet_prompts, self.prompts_per_class
            ));
        }
        for (name, v) in [
            ("noise_rate", self.noise_rate),
            ("confusion", self.confusion),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must be in [0, 1], got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.class_similarity) {
            return bad(format!("class_similarity must be in [0, 1), got {}", self.class_similarity));
        }
        Ok(())
    }

    pub fn total_samples(&self) -> usize {
        self.classes * self.samples_per_class
    }
}

/// A generated stream together with its prompt set.
#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub prompts: PromptSet,
    pub records: Vec<SampleRecord>,
    pub class_names: Vec<String>,
}

impl Benchmark {
    pub fn header(&self) -> Result<DatasetHeader> {
        header_for(&self.prompts, &self.records, self.class_names.clone())
    }

    /// Records wrapped for [`crate::pipeline::run_stream`].
    pub fn stream(&self) -> impl Iterator<Item = Result<SampleRecord>> + '_ {
        self.records.iter().cloned().map(Ok)
    }
}

struct Sampler {
    rng: ChaCha8Rng,
    dim: usize,
}

impl Sampler {
    /// Gaussian vector whose expected squared norm is `scale²`.
    fn gaussian(&mut self, scale: f64) -> Vec<f64> {
        let s = scale / (self.dim as f64).sqrt();
        (0..self.dim)
            .map(|_| s * self.rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    fn unit(&mut self) -> Vec<f64> {
        loop {
            let v = self.gaussian(1.0);
            let n = norm(&v);
            if n > 1e-6 {
                return v.into_iter().map(|x| x / n).collect();
            }
        }
    }

    /// Random unit vector orthogonal to the unit vector `u`.
    fn orthogonal_unit(&mut self, u: &[f64]) -> Vec<f64> {
        loop {
            let mut v = self.unit();
            let p = dot(&v, u);
            v.iter_mut().zip(u).for_each(|(x, y)| *x -= p * y);
            let n = norm(&v);
            if n > 1e-6 {
                return v.into_iter().map(|x| x / n).collect();
            }
        }
    }

    fn perturbed(&mut self, center: &[f64], scale: f64) -> Result<Embedding> {
        let noise = self.gaussian(scale);
        quantized(center.iter().zip(noise).map(|(c, e)| c + e).collect())
    }
}

/// Normalizes, rounds every coordinate to `f32`, and keeps the rounded values.
fn quantized(values: Vec<f64>) -> Result<Embedding> {
    let unit = Embedding::normalized(values)?;
    Ok(Embedding::from_unit(
        unit.into_inner().into_iter().map(|x| x as f32 as f64).collect(),
    ))
}

fn blend(a: &[f64], wa: f64, b: &[f64], wb: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| wa * x + wb * y).collect()
}

/// Generates prompts and a shuffled labeled stream from `spec`.
pub fn generate_benchmark(spec: &SyntheticSpec) -> Result<Benchmark> {
    spec.validate()?;
    let mut s = Sampler {
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
        dim: spec.dim,
    };
    let shared = s.unit();
    let (ws, wo) = (spec.class_similarity.sqrt(), (1.0 - spec.class_similarity).sqrt());
    let directions: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            let own = s.unit();
            let u = blend(&shared, ws, &own, wo);
            let n = norm(&u);
            u.into_iter().map(|x| x / n).collect()
        })
        .collect();

    let planes: Vec<Vec<f64>> = directions
        .iter()
        .enumerate()
        .map(|(c, u)| {
            let random = s.orthogonal_unit(u);
            if spec.confusion == 0.0 {
                return random;
            }
            let mut other = s.rng.random_range(0..spec.classes - 1);
            if other >= c {
                other += 1;
            }
            let toward = &directions[other];
            let p = dot(toward, u);
            let mut v: Vec<f64> = toward.iter().zip(u).map(|(t, x)| t - p * x).collect();
            let n = norm(&v);
            v.iter_mut().for_each(|x| *x /= n);
            let mixed = blend(&v, spec.confusion, &random, 1.0 - spec.confusion);
            let p = dot(&mixed, u);
            let mut mixed: Vec<f64> = mixed.iter().zip(u).map(|(m, x)| m - p * x).collect();
            let n = norm(&mixed);
            mixed.iter_mut().for_each(|x| *x /= n);
            mixed
        })
        .collect();
    let rotate = |c: usize, angle: f64| blend(&directions[c], angle.cos(), &planes[c], angle.sin());

    let mut per_class = Vec::with_capacity(spec.classes);
    for c in 0..spec.classes {
        let facet_center = rotate(c, spec.facet_angle);
        let prompts = (0..spec.prompts_per_class)
            .map(|k| {
                let center = if k < spec.facet_prompts {
                    &facet_center
                } else {
                    &directions[c]
                };
                s.perturbed(center, spec.prompt_noise)
            })
            .collect::<Result<Vec<_>>>()?;
        per_class.push(prompts);
    }
    let prompts = PromptSet::new(per_class)?;

    let image_means: Vec<Vec<f64>> = (0..spec.classes).map(|c| rotate(c, spec.shift)).collect();

    let spread = spec.sample_spread * spec.shift;
    let mut samples = Vec::with_capacity(spec.total_samples());
    for (c, mean) in image_means.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            let center = if s.rng.random::<f64>() < spec.noise_rate {
                let mut other = s.rng.random_range(0..spec.classes - 1);
                if other >= c {
                    other += 1;
                }
                let lambda = s.rng.random_range(0.35..0.5);
                blend(mean, 1.0 - lambda, &image_means[other], lambda)
            } else {
                mean.clone()
            };
            let base = s.perturbed(&center, spread)?;
            let mut views = Vec::with_capacity(spec.views + 1);
            views.push(base.clone());
            for _ in 0..spec.views {
                views.push(s.perturbed(base.as_slice(), spec.view_jitter)?);
            }
            samples.push((c, views));
        }
    }
    samples.shuffle(&mut s.rng);
    let records = samples
        .into_iter()
        .enumerate()
        .map(|(i, (c, views))| SampleRecord {
            id: i as u64,
            views,
            label: Some(c),
        })
        .collect();
    Ok(Benchmark {
        prompts,
        records,
        class_names: (0..spec.classes).map(|c| format!("class_{c:02}")).collect(),
    })
}
