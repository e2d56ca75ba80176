//! Synthetic tri-modal data: articulated 3D poses, their 2D projections and
//! image-proxy features, with a binary container and batching.

pub mod camera;
pub mod dataset;
pub mod image_proxy;
pub mod io;
pub mod skeleton;

pub use camera::{normalize_keypoints, project_pixels, project_to_2d, BBox, Camera, Projection};
pub use dataset::{
    flatten3, input_dim, pose2d_features, unflatten3, Dataset, GenConfig, PoseSample, Split,
};
pub use image_proxy::{featurize_image_proxy, ImageProxy};
pub use io::{dataset_checksum, dataset_from_bytes, dataset_to_bytes, read_dataset, write_dataset};
pub use skeleton::{forward_kinematics, sample_angles, sample_pose3d, JointSpec, Skeleton};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Shuffles `indices` and cuts them into batches of `batch_size`; the last
/// batch holds the remainder, so every index appears exactly once.
pub fn make_batches<R: Rng + ?Sized>(
    indices: &[usize],
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    if batch_size > indices.len() {
        return Err(Error::invalid(format!(
            "batch size {batch_size} exceeds split size {}",
            indices.len()
        )));
    }
    let mut order = indices.to_vec();
    order.shuffle(rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Endless sequence of full-size batches. Epoch `e` is shuffled with substream
/// `e` of `seed`; a short remainder batch at the end of an epoch is skipped.
#[derive(Clone, Debug)]
pub struct BatchStream {
    indices: Vec<usize>,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    pending: std::vec::IntoIter<Vec<usize>>,
}

impl BatchStream {
    pub fn new(indices: Vec<usize>, batch_size: usize, seed: u64) -> Result<Self> {
        // Validate eagerly.
        make_batches(&indices, batch_size, &mut ChaCha8Rng::seed_from_u64(seed))?;
        Ok(BatchStream {
            indices,
            batch_size,
            seed,
            epoch: 0,
            pending: Vec::new().into_iter(),
        })
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        loop {
            if let Some(b) = self.pending.next() {
                if b.len() == self.batch_size {
                    return b;
                }
                continue;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(self.epoch);
            self.epoch += 1;
            self.pending = make_batches(&self.indices, self.batch_size, &mut rng)
                .expect("validated in new")
                .into_iter();
        }
    }
}
