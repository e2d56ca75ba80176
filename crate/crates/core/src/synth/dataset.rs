use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::Modality;
use crate::error::{Error, Result};
use crate::linalg3::Vec3;
use crate::synth::camera::{project_to_2d, BBox, Camera, IMAGE_SIZE};
use crate::synth::image_proxy::ImageProxy;
use crate::synth::skeleton::{sample_pose3d, Skeleton, MAX_JOINTS};

/// Extra 2D-encoder inputs derived from the bounding box.
pub const BBOX_FEATURES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub size: usize,
    pub joints: usize,
    pub feat_dim: usize,
    pub seed: u64,
    /// Scale of image-proxy nuisance (jitter and appearance noise).
    pub nuisance: f64,
    /// Maximum camera azimuth away from the frontal view, radians.
    pub camera_spread: f64,
    /// Fraction of samples (taken from the end) tagged as test.
    pub test_fraction: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            size: 5000,
            joints: MAX_JOINTS,
            feat_dim: 64,
            seed: 0,
            nuisance: 0.5,
            camera_spread: 0.3,
            test_fraction: 0.1,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(3..=MAX_JOINTS).contains(&self.joints) {
            return Err(Error::config("joints", format!("must be in 3..={MAX_JOINTS}")));
        }
        if self.feat_dim == 0 {
            return Err(Error::config("feat_dim", "must be positive"));
        }
        if !(self.nuisance >= 0.0 && self.nuisance.is_finite()) {
            return Err(Error::config("nuisance", "must be finite and non-negative"));
        }
        if !(0.0..=std::f64::consts::FRAC_PI_2).contains(&self.camera_spread) {
            return Err(Error::config("camera_spread", "must be in [0, pi/2]"));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::config("test_fraction", "must be in [0, 1)"));
        }
        Ok(())
    }

    pub fn test_count(&self) -> usize {
        (self.size as f64 * self.test_fraction).round() as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseSample {
    pub frame_id: u64,
    pub split: Split,
    /// Root-relative joint positions in meters, world frame (y up).
    pub pose3d: Vec<Vec3>,
    /// Box-normalized keypoints in [0,1]².
    pub pose2d: Vec<[f64; 2]>,
    pub bbox: BBox,
    pub image_feat: Vec<f64>,
    pub camera: Camera,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    config: GenConfig,
    skeleton: Skeleton,
    samples: Vec<PoseSample>,
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

impl Dataset {
    /// Pure function of the config: sample `i` draws from its own substream.
    pub fn generate(config: GenConfig) -> Result<Dataset> {
        config.validate()?;
        let skeleton = Skeleton::with_joints(config.joints)?;
        let proxy = ImageProxy::new(config.joints, config.feat_dim, config.seed)?;
        let first_test = config.size - config.test_count();
        let samples = (0..config.size)
            .map(|i| {
                let mut rng = sample_rng(config.seed, i);
                let pose3d = sample_pose3d(&skeleton, &mut rng);
                let camera = Camera::sample(config.camera_spread, &mut rng)?;
                let proj = project_to_2d(&pose3d, &camera)?;
                let image_feat = proxy.featurize(&proj.keypoints, config.nuisance, &mut rng)?;
                Ok(PoseSample {
                    frame_id: i as u64,
                    split: if i < first_test { Split::Train } else { Split::Test },
                    pose3d,
                    pose2d: proj.keypoints,
                    bbox: proj.bbox,
                    image_feat,
                    camera,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            config,
            skeleton,
            samples,
        })
    }

    pub(crate) fn from_parts(config: GenConfig, samples: Vec<PoseSample>) -> Result<Dataset> {
        let skeleton = Skeleton::with_joints(config.joints)?;
        Ok(Dataset {
            config,
            skeleton,
            samples,
        })
    }

    pub fn config(&self) -> &GenConfig {
        &self.config
    }

    pub fn skeleton(&self) -> &Skeleton {
        &self.skeleton
    }

    pub fn samples(&self) -> &[PoseSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn joints(&self) -> usize {
        self.config.joints
    }

    pub fn feat_dim(&self) -> usize {
        self.config.feat_dim
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Width of the encoder input for `modality`.
    pub fn input_dim(&self, modality: Modality) -> usize {
        input_dim(modality, self.config.joints, self.config.feat_dim)
    }

    /// Encoder inputs for the given samples, one row each.
    pub fn inputs(&self, modality: Modality, indices: &[usize]) -> Result<Array2<f64>> {
        let dim = self.input_dim(modality);
        let mut out = Array2::zeros((indices.len(), dim));
        for (mut row, &i) in out.rows_mut().into_iter().zip(indices) {
            let s = self.sample(i)?;
            let v = match modality {
                Modality::Image => s.image_feat.clone(),
                Modality::Pose2D => pose2d_features(&s.pose2d, &s.bbox),
                Modality::Pose3D => flatten3(&s.pose3d),
            };
            row.assign(&ndarray::ArrayView1::from(&v));
        }
        Ok(out)
    }

    /// Flattened 3D poses (`B × 3J`, meters).
    pub fn pose3d_targets(&self, indices: &[usize]) -> Result<Array2<f64>> {
        self.rows(indices, 3 * self.config.joints, |s| flatten3(&s.pose3d))
    }

    /// Flattened box-normalized 2D poses (`B × 2J`).
    pub fn pose2d_targets(&self, indices: &[usize]) -> Result<Array2<f64>> {
        self.rows(indices, 2 * self.config.joints, |s| {
            s.pose2d.iter().flatten().copied().collect()
        })
    }

    pub fn sample(&self, i: usize) -> Result<&PoseSample> {
        self.samples
            .get(i)
            .ok_or_else(|| Error::invalid(format!("sample index {i} out of range ({})", self.len())))
    }

    fn rows(
        &self,
        indices: &[usize],
        dim: usize,
        f: impl Fn(&PoseSample) -> Vec<f64>,
    ) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((indices.len(), dim));
        for (mut row, &i) in out.rows_mut().into_iter().zip(indices) {
            row.assign(&ndarray::ArrayView1::from(&f(self.sample(i)?)));
        }
        Ok(out)
    }
}

pub fn input_dim(modality: Modality, joints: usize, feat_dim: usize) -> usize {
    match modality {
        Modality::Image => feat_dim,
        Modality::Pose2D => 2 * joints + BBOX_FEATURES,
        Modality::Pose3D => 3 * joints,
    }
}

pub fn flatten3(pose: &[Vec3]) -> Vec<f64> {
    pose.iter().flatten().copied().collect()
}

/// `[J×3]` rows from a flat `3J` vector.
pub fn unflatten3(flat: &[f64]) -> Vec<Vec3> {
    flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}

/// 2D encoder input: centered keypoints followed by the box center offset
/// (in box units) and log box size relative to the image.
pub fn pose2d_features(pose2d: &[[f64; 2]], bbox: &BBox) -> Vec<f64> {
    let mut v: Vec<f64> = pose2d
        .iter()
        .flat_map(|p| [2.0 * (p[0] - 0.5), 2.0 * (p[1] - 0.5)])
        .collect();
    v.push((bbox.center[0] - IMAGE_SIZE / 2.0) / bbox.size);
    v.push((bbox.center[1] - IMAGE_SIZE / 2.0) / bbox.size);
    v.push((bbox.size / IMAGE_SIZE).ln());
    v
}
