//! Text-side structures: per-class prompt sets, the nested "adjacent"
//! embeddings built by ascending progressive binning, and the projector onto
//! the principal subspace of those embeddings.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::numeric::{dot, Embedding};

/// Prompt embeddings for every class, `K` per class, all of dimension `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    classes: usize,
    per_class: usize,
    dim: usize,
    prompts: Vec<Embedding>,
}

impl PromptSet {
    /// Builds a prompt set from per-class lists. Every class must contribute
    /// the same number of prompts and every prompt the same dimension.
    pub fn new(per_class: Vec<Vec<Embedding>>) -> Result<Self> {
        let classes = per_class.len();
        if classes == 0 {
            return Err(Error::Dataset("prompt set has no classes".into()));
        }
        let k = per_class[0].len();
        if k == 0 {
            return Err(Error::TooFewPrompts { class: 0, count: 0 });
        }
        let dim = per_class[0][0].dim();
        let mut prompts = Vec::with_capacity(classes * k);
        for (c, list) in per_class.into_iter().enumerate() {
            if list.len() != k {
                return Err(Error::Dataset(format!(
                    "class {c} has {} prompts, expected {k} (all classes need the same count)",
                    list.len()
                )));
            }
            for p in list {
                if p.dim() != dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        actual: p.dim(),
                    });
                }
                prompts.push(p);
            }
        }
        Ok(PromptSet {
            classes,
            per_class: k,
            dim,
            prompts,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn per_class(&self) -> usize {
        self.per_class
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class(&self, c: usize) -> &[Embedding] {
        &self.prompts[c * self.per_class..(c + 1) * self.per_class]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Embedding> {
        self.prompts.iter()
    }
}

/// Orders the prompts of class `c` by ascending cumulative intra-class cosine
/// similarity (outliers first). Ties keep the original index order.
pub fn rank_prompts_by_intra_class_similarity(prompts: &PromptSet, c: usize) -> Result<Vec<usize>> {
    if c >= prompts.classes() {
        return Err(Error::InvalidClass {
            class: c,
            classes: prompts.classes(),
        });
    }
    let set = prompts.class(c);
    if set.len() < 2 {
        return Err(Error::TooFewPrompts {
            class: c,
            count: set.len(),
        });
    }
    let scores = cumulative_similarity(set);
    let mut order: Vec<usize> = (0..set.len()).collect();
    // Stable sort keeps ascending index on equal scores.
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    Ok(order)
}

fn cumulative_similarity(set: &[Embedding]) -> Vec<f64> {
    let k = set.len();
    let mut scores = vec![0.0; k];
    for i in 0..k {
        for j in (i + 1)..k {
            let s = dot(set[i].as_slice(), set[j].as_slice());
            scores[i] += s;
            scores[j] += s;
        }
    }
    scores
}

/// Pool sizes `Q_m = floor(m K / M)` for `m = 1..=M`.
pub fn bin_sizes(prompts: usize, members: usize) -> Result<Vec<usize>> {
    if members < 1 || members > prompts {
        return Err(Error::InvalidM { members, prompts });
    }
    Ok((1..=members).map(|m| m * prompts / members).collect())
}

/// `M` unit-norm embeddings per class, stored class-major.
///
/// Member `M - 1` (zero-based) is the class's final text prototype.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacentEmbeddings {
    classes: usize,
    members: usize,
    dim: usize,
    rows: Vec<Embedding>,
}

impl AdjacentEmbeddings {
    /// Builds from class-major rows (`rows[c * members + m]`).
    pub fn from_rows(classes: usize, members: usize, rows: Vec<Embedding>) -> Result<Self> {
        if classes == 0 || members == 0 || rows.len() != classes * members {
            return Err(Error::DimensionMismatch {
                expected: classes * members,
                actual: rows.len(),
            });
        }
        let dim = rows[0].dim();
        if let Some(bad) = rows.iter().find(|r| r.dim() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: bad.dim(),
            });
        }
        Ok(AdjacentEmbeddings {
            classes,
            members,
            dim,
            rows,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn members(&self) -> usize {
        self.members
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, class: usize, member: usize) -> &Embedding {
        &self.rows[class * self.members + member]
    }

    /// The class's final prototype (pool of all prompts).
    pub fn prototype(&self, class: usize) -> &Embedding {
        self.get(class, self.members - 1)
    }

    /// Unnormalized mean of the class's members.
    pub fn class_mean(&self, class: usize) -> Vec<f64> {
        let mut mean = vec![0.0; self.dim];
        for m in 0..self.members {
            for (acc, x) in mean.iter_mut().zip(self.get(class, m).as_slice()) {
                *acc += x;
            }
        }
        let inv = 1.0 / self.members as f64;
        mean.iter_mut().for_each(|x| *x *= inv);
        mean
    }

    pub fn rows(&self) -> &[Embedding] {
        &self.rows
    }

    /// Logits `⟨z, prototype_c⟩` for every class.
    pub fn prototype_scores(&self, z: &[f64]) -> Vec<f64> {
        (0..self.classes).map(|c| self.prototype(c).dot(z)).collect()
    }
}

/// Builds the nested adjacent embeddings: member `m` is the normalized mean of
/// the first `Q_m` prompts in ascending-similarity order.
pub fn build_adjacent_embeddings(prompts: &PromptSet, members: usize) -> Result<AdjacentEmbeddings> {
    let k = prompts.per_class();
    let sizes = bin_sizes(k, members)?;
    let mut rows = Vec::with_capacity(prompts.classes() * members);
    for c in 0..prompts.classes() {
        let set = prompts.class(c);
        let order = if k >= 2 {
            rank_prompts_by_intra_class_similarity(prompts, c)?
        } else {
            vec![0]
        };
        let mut sum = vec![0.0; prompts.dim()];
        let mut taken = 0;
        for &q in &sizes {
            while taken < q {
                for (acc, x) in sum.iter_mut().zip(set[order[taken]].as_slice()) {
                    *acc += x;
                }
                taken += 1;
            }
            // Normalizing the sum equals normalizing the mean.
            rows.push(Embedding::normalized(sum.clone())?);
        }
    }
    AdjacentEmbeddings::from_rows(prompts.classes(), members, rows)
}

/// Orthogonal projector onto the span of the top-`n` right singular vectors
/// of the stacked adjacent embeddings.
#[derive(Debug, Clone)]
pub struct SubspaceProjector {
    dim: usize,
    /// `n × d`, orthonormal rows.
    basis: DMatrix<f64>,
    singular_values: Vec<f64>,
}

/// Iteration cap handed to the SVD.
pub const SVD_MAX_ITERATIONS: usize = 10_000;

impl SubspaceProjector {
    /// Projector from an arbitrary `rows × d` matrix (row-major).
    pub fn from_matrix(rows: usize, dim: usize, data: &[f64], rank: usize) -> Result<Self> {
        let limit = rows.min(dim);
        if rank < 1 || rank > limit {
            return Err(Error::RankTooLarge { rank, limit });
        }
        if data.len() != rows * dim {
            return Err(Error::DimensionMismatch {
                expected: rows * dim,
                actual: data.len(),
            });
        }
        let matrix = DMatrix::from_row_slice(rows, dim, data);
        let svd = matrix
            .try_svd(false, true, f64::EPSILON, SVD_MAX_ITERATIONS)
            .ok_or(Error::SvdFailure(SVD_MAX_ITERATIONS))?;
        let v_t = svd.v_t.ok_or(Error::SvdFailure(SVD_MAX_ITERATIONS))?;
        let values = svd.singular_values;

        let mut order: Vec<usize> = (0..values.len()).collect();
        order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
        let keep = &order[..rank];

        let mut basis = DMatrix::zeros(rank, dim);
        for (r, &i) in keep.iter().enumerate() {
            basis.set_row(r, &v_t.row(i));
        }
        Ok(SubspaceProjector {
            dim,
            basis,
            singular_values: keep.iter().map(|&i| values[i]).collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rank(&self) -> usize {
        self.basis.nrows()
    }

    /// Retained singular values, descending.
    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    /// The retained right singular vectors as rows.
    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    /// The dense `d × d` projection matrix `VᵀV`.
    pub fn matrix(&self) -> DMatrix<f64> {
        self.basis.transpose() * &self.basis
    }

    /// `Φ z`. The result is not renormalized.
    pub fn project(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: z.len(),
            });
        }
        let coeffs: Vec<f64> = (0..self.rank())
            .map(|r| self.basis.row(r).iter().zip(z).map(|(a, b)| a * b).sum())
            .collect();
        let mut out = vec![0.0; self.dim];
        for (r, coeff) in coeffs.iter().enumerate() {
            for (o, v) in out.iter_mut().zip(self.basis.row(r).iter()) {
                *o += coeff * v;
            }
        }
        Ok(out)
    }
}

/// Projector onto the top-`n` principal text directions of `adjacent`.
pub fn compute_text_subspace_projection(adjacent: &AdjacentEmbeddings, n: usize) -> Result<SubspaceProjector> {
    let rows = adjacent.rows().len();
    let data: Vec<f64> = adjacent
        .rows()
        .iter()
        .flat_map(|r| r.as_slice().iter().copied())
        .collect();
    SubspaceProjector::from_matrix(rows, adjacent.dim(), &data, n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::l2_normalize;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Embedding {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        l2_normalize(&v).unwrap()
    }

    fn random_prompts(seed: u64, classes: usize, k: usize, d: usize) -> PromptSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PromptSet::new(
            (0..classes)
                .map(|_| (0..k).map(|_| random_unit(&mut rng, d)).collect())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn two_prompts_tie_keeps_index_order() {
        let set = random_prompts(1, 1, 2, 5);
        assert_eq!(rank_prompts_by_intra_class_similarity(&set, 0).unwrap(), vec![0, 1]);
    }

    #[test]
    fn outlier_ranks_first() {
        let near = l2_normalize(&[1.0, 0.01, 0.0]).unwrap();
        let set = PromptSet::new(vec![vec![
            Embedding::basis(3, 0),
            near,
            Embedding::basis(3, 2),
        ]])
        .unwrap();
        assert_eq!(rank_prompts_by_intra_class_similarity(&set, 0).unwrap(), vec![2, 0, 1]);
    }

    #[test]
    fn single_prompt_cannot_be_ranked() {
        let set = PromptSet::new(vec![vec![Embedding::basis(2, 0)]]).unwrap();
        assert!(matches!(
            rank_prompts_by_intra_class_similarity(&set, 0),
            Err(Error::TooFewPrompts { .. })
        ));
    }

    #[test]
    fn bin_sizes_floor_formula() {
        assert_eq!(bin_sizes(7, 3).unwrap(), vec![2, 4, 7]);
        assert_eq!(bin_sizes(6, 1).unwrap(), vec![6]);
        assert!(matches!(bin_sizes(2, 3), Err(Error::InvalidM { .. })));
        assert!(matches!(bin_sizes(4, 0), Err(Error::InvalidM { .. })));
    }

    #[test]
    fn single_member_is_mean_of_all() {
        let set = random_prompts(3, 2, 5, 4);
        let adj = build_adjacent_embeddings(&set, 1).unwrap();
        for c in 0..2 {
            let mut sum = vec![0.0; 4];
            for p in set.class(c) {
                for (s, x) in sum.iter_mut().zip(p.as_slice()) {
                    *s += x;
                }
            }
            let expect = l2_normalize(&sum).unwrap();
            for (a, b) in adj.get(c, 0).as_slice().iter().zip(expect.as_slice()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn last_member_is_permutation_invariant() {
        let set = random_prompts(4, 1, 6, 5);
        let mut reversed: Vec<Embedding> = set.class(0).to_vec();
        reversed.reverse();
        let other = PromptSet::new(vec![reversed]).unwrap();
        let a = build_adjacent_embeddings(&set, 3).unwrap();
        let b = build_adjacent_embeddings(&other, 3).unwrap();
        for (x, y) in a.prototype(0).as_slice().iter().zip(b.prototype(0).as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn full_rank_projection_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = 6;
        let data: Vec<f64> = (0..10 * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let proj = SubspaceProjector::from_matrix(10, d, &data, d).unwrap();
        let phi = proj.matrix();
        let diff = (phi - DMatrix::<f64>::identity(d, d)).norm();
        assert!(diff < 1e-5, "{diff}");
    }

    #[test]
    fn rank_one_projection() {
        let data: Vec<f64> = (0..4).flat_map(|_| [1.0, 0.0, 0.0]).collect();
        let proj = SubspaceProjector::from_matrix(4, 3, &data, 1).unwrap();
        let phi = proj.matrix();
        let mut expect = DMatrix::<f64>::zeros(3, 3);
        expect[(0, 0)] = 1.0;
        assert!((phi - expect).norm() < 1e-12);
        assert_eq!(proj.project(&[3.0, 4.0, 0.0]).unwrap(), vec![3.0, 0.0, 0.0]);
    }

    #[test]
    fn axis_projection_in_plane() {
        let proj = SubspaceProjector::from_matrix(1, 2, &[1.0, 0.0], 1).unwrap();
        let out = proj.project(&[3.0, 4.0]).unwrap();
        assert!((out[0] - 3.0).abs() < 1e-12 && out[1].abs() < 1e-12);
        assert!(matches!(proj.project(&[1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn rank_too_large_rejected() {
        let set = random_prompts(6, 2, 4, 8);
        let adj = build_adjacent_embeddings(&set, 2).unwrap();
        assert!(matches!(
            compute_text_subspace_projection(&adj, 5),
            Err(Error::RankTooLarge { rank: 5, limit: 4 })
        ));
        assert!(compute_text_subspace_projection(&adj, 4).is_ok());
    }

    #[test]
    fn projecting_twice_equals_once() {
        let set = random_prompts(7, 4, 5, 10);
        let adj = build_adjacent_embeddings(&set, 3).unwrap();
        let proj = compute_text_subspace_projection(&adj, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let z = random_unit(&mut rng, 10);
            let once = proj.project(z.as_slice()).unwrap();
            let twice = proj.project(&once).unwrap();
            for (a, b) in once.iter().zip(&twice) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn identity_projection_leaves_feature_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<f64> = (0..8 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let proj = SubspaceProjector::from_matrix(8, 4, &data, 4).unwrap();
        let z = random_unit(&mut rng, 4);
        for (a, b) in proj.project(z.as_slice()).unwrap().iter().zip(z.as_slice()) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
