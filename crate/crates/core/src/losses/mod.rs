//! Contrastive and task losses with analytic gradients.

mod pair;
mod temperature;
mod triplet;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

pub use pair::{info_nce_pair, PairLoss};
pub use temperature::{Temperature, TemperatureConfig};
pub use triplet::{
    info_nce_triplet, negative_pool_size, pool_triple, sample_negative_triplets,
    NegativeTripletSet, TripleIndex, TripletLoss,
};

use crate::embedding::Modality;
use crate::error::{Error, Result};

/// Which contrastive terms are active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossTerms {
    pub pair_2d_3d: bool,
    pub pair_image_2d: bool,
    pub pair_image_3d: bool,
    pub triplet: bool,
}

impl LossTerms {
    pub fn pairs(&self) -> Vec<(Modality, Modality)> {
        let mut out = Vec::new();
        if self.pair_2d_3d {
            out.push((Modality::Pose2D, Modality::Pose3D));
        }
        if self.pair_image_2d {
            out.push((Modality::Image, Modality::Pose2D));
        }
        if self.pair_image_3d {
            out.push((Modality::Image, Modality::Pose3D));
        }
        out
    }

    /// Modalities whose embeddings the active terms read.
    pub fn required(&self) -> [bool; 3] {
        let mut need = [self.triplet; 3];
        for (a, b) in self.pairs() {
            need[a.index()] = true;
            need[b.index()] = true;
        }
        need
    }
}

/// Embedding batches indexed by [`Modality::index`]; absent modalities are `None`.
pub type TriBatch<'a> = [Option<ArrayView2<'a, f64>>; 3];

#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveLoss {
    /// `pair + α · triplet`.
    pub total: f64,
    pub pair: f64,
    pub triplet: f64,
    /// Gradient per modality; `None` where the modality was not provided.
    pub grads: [Option<Array2<f64>>; 3],
    pub grad_tau_pair: f64,
    pub grad_tau_triplet: f64,
    pub skipped: usize,
}

/// `L_cl = L_pair + α L_triplet`.
///
/// `L_pair` is the mean over the active modality pairs of the symmetrized
/// pair loss `½ (L(S→T) + L(T→S))`; it is zero when no pair is active.
pub fn contrastive_loss(
    batch: TriBatch<'_>,
    tau_pair: f64,
    tau_triplet: f64,
    alpha: f64,
    terms: LossTerms,
    negatives: Option<&NegativeTripletSet>,
) -> Result<ContrastiveLoss> {
    let need = terms.required();
    for m in Modality::ALL {
        if need[m.index()] && batch[m.index()].is_none() {
            return Err(Error::invalid(format!("active loss terms need {m} embeddings")));
        }
    }
    let mut grads: [Option<Array2<f64>>; 3] =
        std::array::from_fn(|i| batch[i].map(|b| Array2::zeros(b.raw_dim())));

    let pairs = terms.pairs();
    let mut pair = 0.0;
    let mut grad_tau_pair = 0.0;
    if !pairs.is_empty() {
        let w = 1.0 / pairs.len() as f64;
        for (s, t) in pairs {
            let (xs, xt) = (batch[s.index()].unwrap(), batch[t.index()].unwrap());
            let fwd = info_nce_pair(xs, xt, tau_pair)?;
            let bwd = info_nce_pair(xt, xs, tau_pair)?;
            pair += 0.5 * w * (fwd.loss + bwd.loss);
            grad_tau_pair += 0.5 * w * (fwd.grad_tau + bwd.grad_tau);
            if let Some(g) = grads[s.index()].as_mut() {
                g.scaled_add(0.5 * w, &fwd.grad_source);
                g.scaled_add(0.5 * w, &bwd.grad_target);
            }
            if let Some(g) = grads[t.index()].as_mut() {
                g.scaled_add(0.5 * w, &fwd.grad_target);
                g.scaled_add(0.5 * w, &bwd.grad_source);
            }
        }
    }

    let mut triplet = 0.0;
    let mut grad_tau_triplet = 0.0;
    let mut skipped = 0;
    if terms.triplet {
        let negatives = negatives
            .ok_or_else(|| Error::invalid("triplet term is active but no negatives were given"))?;
        let t = info_nce_triplet(
            batch[0].unwrap(),
            batch[1].unwrap(),
            batch[2].unwrap(),
            tau_triplet,
            negatives,
        )?;
        triplet = t.loss;
        grad_tau_triplet = alpha * t.grad_tau;
        skipped = t.skipped;
        for (slot, g) in grads.iter_mut().zip(&t.grads) {
            if let Some(acc) = slot.as_mut() {
                acc.scaled_add(alpha, g);
            }
        }
    }

    Ok(ContrastiveLoss {
        total: pair + alpha * triplet,
        pair,
        triplet,
        grads,
        grad_tau_pair,
        grad_tau_triplet,
        skipped,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseLoss {
    pub loss: f64,
    pub grad: Array2<f64>,
}

/// Mean squared error over every joint coordinate.
///
/// Rows may hold one flattened pose each (`B × J·K`) or a single pose as `J × K`.
pub fn l2_pose_loss(pred: ArrayView2<'_, f64>, target: ArrayView2<'_, f64>) -> Result<PoseLoss> {
    if pred.dim() != target.dim() {
        return Err(Error::invalid(format!(
            "pose shapes differ: {:?} vs {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    let n = pred.len();
    if n == 0 {
        return Err(Error::invalid("empty pose batch"));
    }
    let diff = &pred - &target;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n as f64;
    Ok(PoseLoss {
        loss,
        grad: diff * (2.0 / n as f64),
    })
}
