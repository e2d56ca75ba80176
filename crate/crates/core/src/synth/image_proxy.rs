//! Synthetic stand-in for image features: a frozen random projection of the
//! 2D pose and nuisance variables, squashed by `tanh`.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};

/// Number of appearance-like nuisance inputs.
pub const APPEARANCE_DIM: usize = 8;

const SHIFT_STD: f64 = 0.03;
const SCALE_STD: f64 = 0.05;
const KEYPOINT_STD: f64 = 0.01;
const POSE_GAIN: f64 = 1.5;
const APPEARANCE_GAIN: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct ImageProxy {
    joints: usize,
    weights: Array2<f64>,
    bias: Array1<f64>,
}

impl ImageProxy {
    pub fn new(joints: usize, feat_dim: usize, seed: u64) -> Result<Self> {
        if joints == 0 || feat_dim == 0 {
            return Err(Error::invalid("image proxy needs joints > 0 and feature dim > 0"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::MAX);
        let pose_in = 2 * joints;
        let pose_std = POSE_GAIN / (pose_in as f64).sqrt();
        let app_std = APPEARANCE_GAIN / (APPEARANCE_DIM as f64).sqrt();
        let weights = Array2::from_shape_fn((feat_dim, pose_in + APPEARANCE_DIM), |(_, c)| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * if c < pose_in { pose_std } else { app_std }
        });
        let bias = Array1::from_shape_simple_fn(feat_dim, || rng.random_range(-0.5..0.5));
        Ok(ImageProxy {
            joints,
            weights,
            bias,
        })
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn feat_dim(&self) -> usize {
        self.weights.nrows()
    }

    /// Features for `pose2d` (box-normalized) with nuisance drawn from `rng`
    /// and scaled by `amplitude`. At zero amplitude the output depends only on
    /// the pose.
    pub fn featurize<R: Rng + ?Sized>(
        &self,
        pose2d: &[[f64; 2]],
        amplitude: f64,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        if pose2d.len() != self.joints {
            return Err(Error::invalid(format!(
                "image proxy expects {} joints, got {}",
                self.joints,
                pose2d.len()
            )));
        }
        if !(amplitude >= 0.0) || !amplitude.is_finite() {
            return Err(Error::invalid("nuisance amplitude must be finite and non-negative"));
        }
        let normal = |std: f64| Normal::new(0.0, std * amplitude).expect("finite std");
        let shift = [normal(SHIFT_STD).sample(rng), normal(SHIFT_STD).sample(rng)];
        let scale = 1.0 + normal(SCALE_STD).sample(rng);
        let mut z = Vec::with_capacity(self.weights.ncols());
        for p in pose2d {
            for a in 0..2 {
                let jitter = normal(KEYPOINT_STD).sample(rng);
                z.push(2.0 * ((p[a] - 0.5) * scale + shift[a] + jitter));
            }
        }
        for _ in 0..APPEARANCE_DIM {
            z.push(normal(1.0).sample(rng));
        }
        let z = Array1::from(z);
        let feat = self.weights.dot(&z) + &self.bias;
        Ok(feat.mapv(f64::tanh).to_vec())
    }
}

/// Features for one sample with nuisance drawn from its own seed.
pub fn featurize_image_proxy(
    proxy: &ImageProxy,
    pose2d: &[[f64; 2]],
    amplitude: f64,
    nuisance_seed: u64,
) -> Result<Vec<f64>> {
    proxy.featurize(pose2d, amplitude, &mut ChaCha8Rng::seed_from_u64(nuisance_seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pose() -> Vec<[f64; 2]> {
        (0..5).map(|i| [i as f64 / 4.0, 1.0 - i as f64 / 4.0]).collect()
    }

    #[test]
    fn nuisance_contract() {
        let proxy = ImageProxy::new(5, 16, 1).unwrap();
        let a = featurize_image_proxy(&proxy, &pose(), 1.0, 10).unwrap();
        let b = featurize_image_proxy(&proxy, &pose(), 1.0, 11).unwrap();
        assert_ne!(a, b);
        let a = featurize_image_proxy(&proxy, &pose(), 0.0, 10).unwrap();
        let b = featurize_image_proxy(&proxy, &pose(), 0.0, 11).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn frozen_map_depends_on_seed_only() {
        assert_eq!(ImageProxy::new(5, 8, 3).unwrap(), ImageProxy::new(5, 8, 3).unwrap());
        assert_ne!(ImageProxy::new(5, 8, 3).unwrap(), ImageProxy::new(5, 8, 4).unwrap());
    }

    #[test]
    fn rejects_wrong_joint_count() {
        let proxy = ImageProxy::new(4, 8, 0).unwrap();
        assert!(featurize_image_proxy(&proxy, &pose(), 0.5, 0).is_err());
    }
}
