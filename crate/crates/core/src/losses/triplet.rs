//! Top-eigenvalue triplet InfoNCE.
//!
//! The score of a candidate (image, 2D, 3D) triple is `λ₁` of `M Mᵀ`, where
//! `M` stacks the three unit embeddings. Each positive triple competes
//! against `B − 1` negatives drawn from the triples that share at least one
//! sample index with the anchor.

use std::collections::HashSet;

use ndarray::{Array1, Array2, ArrayView2};
use rand::seq::index;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg3::{Sym3, TopEigen};
use crate::losses::pair::{check_batch, check_tau};

pub type TripleIndex = [usize; 3];

/// Number of anchor-sharing negatives for a batch of size `b`.
///
/// `b³ − (b − 1)³` triples share an index with the anchor; the anchor's own
/// positive triple is excluded, leaving `3b² − 3b`.
pub fn negative_pool_size(batch_size: usize) -> usize {
    3 * batch_size * batch_size - 3 * batch_size
}

/// Decodes position `n` of the anchor-sharing negative pool into a triple.
///
/// The pool is ordered in three blocks: image index equal to the anchor
/// (`b² − 1` triples), then image index different but 2D index equal
/// (`(b − 1) b`), then only the 3D index equal (`(b − 1)²`).
pub fn pool_triple(batch_size: usize, anchor: usize, n: usize) -> Result<TripleIndex> {
    let b = batch_size;
    if anchor >= b || n >= negative_pool_size(b) {
        return Err(Error::invalid(format!(
            "pool position {n} / anchor {anchor} out of range for batch {b}"
        )));
    }
    let skip = |i: usize| if i >= anchor { i + 1 } else { i };
    let first = b * b - 1;
    let second = (b - 1) * b;
    Ok(if n < first {
        let m = if n >= anchor * b + anchor { n + 1 } else { n };
        [anchor, m / b, m % b]
    } else if n < first + second {
        let m = n - first;
        [skip(m / b), anchor, m % b]
    } else {
        let m = n - first - second;
        [skip(m / (b - 1)), skip(m % (b - 1)), anchor]
    })
}

/// Draws `B − 1` distinct negatives for one anchor, uniformly from the pool.
pub fn sample_negative_triplets<R: Rng + ?Sized>(
    batch_size: usize,
    anchor: usize,
    rng: &mut R,
) -> Result<Vec<TripleIndex>> {
    if batch_size < 2 {
        return Err(Error::invalid(format!(
            "negative sampling needs a batch of at least 2, got {batch_size}"
        )));
    }
    if anchor >= batch_size {
        return Err(Error::invalid(format!("anchor {anchor} outside batch of {batch_size}")));
    }
    index::sample(rng, negative_pool_size(batch_size), batch_size - 1)
        .into_iter()
        .map(|n| pool_triple(batch_size, anchor, n))
        .collect()
}

/// Sampled negatives for every anchor of one batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NegativeTripletSet {
    batch_size: usize,
    per_anchor: Vec<Vec<TripleIndex>>,
}

impl NegativeTripletSet {
    /// Samples negatives for all anchors; anchor `b` draws from stream `b`
    /// of a generator seeded with `seed`.
    pub fn sample(batch_size: usize, seed: u64) -> Result<Self> {
        let per_anchor = (0..batch_size)
            .map(|anchor| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(anchor as u64);
                sample_negative_triplets(batch_size, anchor, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        if batch_size < 2 {
            return Err(Error::invalid("negative sampling needs a batch of at least 2"));
        }
        Ok(NegativeTripletSet {
            batch_size,
            per_anchor,
        })
    }

    /// Wraps explicit negative lists after checking them against the pool rules.
    pub fn from_lists(batch_size: usize, per_anchor: Vec<Vec<TripleIndex>>) -> Result<Self> {
        if per_anchor.len() != batch_size {
            return Err(Error::invalid("one negative list per anchor is required"));
        }
        for (b, list) in per_anchor.iter().enumerate() {
            let mut seen = HashSet::new();
            for t in list {
                if t.iter().any(|&i| i >= batch_size) {
                    return Err(Error::invalid(format!("triple {t:?} outside batch")));
                }
                if *t == [b, b, b] || !t.contains(&b) || !seen.insert(*t) {
                    return Err(Error::invalid(format!(
                        "triple {t:?} is not a valid distinct negative for anchor {b}"
                    )));
                }
            }
        }
        Ok(NegativeTripletSet {
            batch_size,
            per_anchor,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn anchor(&self, b: usize) -> &[TripleIndex] {
        &self.per_anchor[b]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TripletLoss {
    pub loss: f64,
    /// Gradients for the image, 2D and 3D batches, in that order.
    pub grads: [Array2<f64>; 3],
    pub grad_tau: f64,
    /// Triples whose eigen-gap was too small for a gradient.
    pub skipped: usize,
}

/// Triplet InfoNCE: mean over anchors of
/// `−log( exp(λ⁺/τ) / (exp(λ⁺/τ) + Σ_neg exp(λ/τ)) )`.
///
/// Gram entries of every candidate triple are read from the three cross
/// similarity matrices, and `∂λ₁/∂M = 2 u uᵀ M` is accumulated back into
/// coefficient matrices so the embedding gradients are three matrix products.
pub fn info_nce_triplet(
    image: ArrayView2<'_, f64>,
    pose2d: ArrayView2<'_, f64>,
    pose3d: ArrayView2<'_, f64>,
    tau: f64,
    negatives: &NegativeTripletSet,
) -> Result<TripletLoss> {
    check_batch(image, pose2d, "triplet loss")?;
    check_batch(image, pose3d, "triplet loss")?;
    check_tau(tau)?;
    let b = image.nrows();
    if negatives.batch_size() != b {
        return Err(Error::invalid(format!(
            "negatives sampled for batch {} used with batch {b}",
            negatives.batch_size()
        )));
    }

    let s12 = image.dot(&pose2d.t());
    let s13 = image.dot(&pose3d.t());
    let s23 = pose2d.dot(&pose3d.t());
    let sq = |m: ArrayView2<'_, f64>| -> Array1<f64> { m.rows().into_iter().map(|r| r.dot(&r)).collect() };
    let (n1, n2, n3) = (sq(image), sq(pose2d), sq(pose3d));

    let mut c12 = Array2::<f64>::zeros((b, b));
    let mut c13 = Array2::<f64>::zeros((b, b));
    let mut c23 = Array2::<f64>::zeros((b, b));
    let mut d = [Array1::<f64>::zeros(b), Array1::zeros(b), Array1::zeros(b)];

    let mut loss = 0.0;
    let mut grad_tau = 0.0;
    let mut skipped = 0;
    let mut tops: Vec<(TripleIndex, TopEigen)> = Vec::with_capacity(b);
    for anchor in 0..b {
        tops.clear();
        let candidates = std::iter::once([anchor; 3]).chain(negatives.anchor(anchor).iter().copied());
        for t @ [i, j, k] in candidates {
            let gram = Sym3::new(n1[i], s12[[i, j]], s13[[i, k]], n2[j], s23[[j, k]], n3[k]);
            tops.push((t, TopEigen::of_gram(&gram)?));
        }
        let max = tops.iter().fold(f64::NEG_INFINITY, |m, (_, e)| m.max(e.value / tau));
        let sum: f64 = tops.iter().map(|(_, e)| (e.value / tau - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - tops[0].1.value / tau;

        for (pos, ([i, j, k], top)) in tops.iter().enumerate() {
            let p = (top.value / tau - lse).exp();
            let dl = (p - if pos == 0 { 1.0 } else { 0.0 }) / b as f64;
            grad_tau -= dl * top.value / (tau * tau);
            if top.is_degenerate() {
                skipped += 1;
                continue;
            }
            let g = 2.0 * dl / tau;
            let u = top.vector;
            c12[[*i, *j]] += g * u[0] * u[1];
            c13[[*i, *k]] += g * u[0] * u[2];
            c23[[*j, *k]] += g * u[1] * u[2];
            d[0][*i] += g * u[0] * u[0];
            d[1][*j] += g * u[1] * u[1];
            d[2][*k] += g * u[2] * u[2];
        }
    }
    loss /= b as f64;

    let scale_rows = |m: ArrayView2<'_, f64>, s: &Array1<f64>| -> Array2<f64> {
        let mut out = m.to_owned();
        for (mut row, f) in out.rows_mut().into_iter().zip(s) {
            row *= *f;
        }
        out
    };
    let g_img = c12.dot(&pose2d) + c13.dot(&pose3d) + scale_rows(image, &d[0]);
    let g_2d = c12.t().dot(&image) + c23.dot(&pose3d) + scale_rows(pose2d, &d[1]);
    let g_3d = c13.t().dot(&image) + c23.t().dot(&pose2d) + scale_rows(pose3d, &d[2]);
    Ok(TripletLoss {
        loss,
        grads: [g_img, g_2d, g_3d],
        grad_tau,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn pool_decoding_is_a_bijection_onto_the_anchor_sharing_set() {
        for b in 2..=5 {
            for anchor in 0..b {
                let decoded: HashSet<_> = (0..negative_pool_size(b))
                    .map(|n| pool_triple(b, anchor, n).unwrap())
                    .collect();
                assert_eq!(decoded.len(), negative_pool_size(b));
                for t in &decoded {
                    assert!(t.contains(&anchor) && *t != [anchor; 3]);
                }
            }
        }
    }

    #[test]
    fn sampler_rejects_tiny_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_negative_triplets(1, 0, &mut rng).is_err());
        assert!(NegativeTripletSet::sample(1, 0).is_err());
    }

    #[test]
    fn sampler_is_deterministic() {
        let a = NegativeTripletSet::sample(6, 99).unwrap();
        let b = NegativeTripletSet::sample(6, 99).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, NegativeTripletSet::sample(6, 100).unwrap());
    }

    #[test]
    fn from_lists_validates_membership() {
        assert!(NegativeTripletSet::from_lists(2, vec![vec![[0, 1, 1]], vec![[1, 0, 0]]]).is_ok());
        assert!(NegativeTripletSet::from_lists(2, vec![vec![[1, 1, 1]], vec![[1, 0, 0]]]).is_err());
        assert!(NegativeTripletSet::from_lists(2, vec![vec![[0, 0, 0]], vec![[1, 0, 0]]]).is_err());
        assert!(NegativeTripletSet::from_lists(2, vec![vec![[0, 1, 0], [0, 1, 0]], vec![]]).is_err());
    }

    #[test]
    fn aligned_orthogonal_samples() {
        // Per-sample identical modalities, samples mutually orthogonal:
        // λ⁺ = 3, a negative with two rows from the anchor has λ = 2.
        let x = array![[1.0, 0.0], [0.0, 1.0]];
        let neg = NegativeTripletSet::from_lists(2, vec![vec![[0, 0, 1]], vec![[0, 1, 1]]]).unwrap();
        let l = info_nce_triplet(x.view(), x.view(), x.view(), 1.0, &neg).unwrap();
        let per_anchor = -(3f64.exp() / (3f64.exp() + 2f64.exp())).ln();
        assert!((l.loss - per_anchor).abs() < 1e-12);
    }
}
