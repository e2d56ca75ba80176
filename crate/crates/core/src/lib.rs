//! Tri-modal contrastive alignment of image features, 2D keypoints and 3D
//! poses in one embedding space.
//!
//! The pieces, bottom-up:
//!
//! * [`linalg3`]: closed-form 3×3 eigensolver, `λ₁(M Mᵀ)` and its gradient,
//!   SVD and Procrustes alignment.
//! * [`embedding`]: unit-norm embeddings, cosine similarity, triplet
//!   matrices and spherical interpolation.
//! * [`losses`]: pairwise InfoNCE, the top-eigenvalue triplet InfoNCE with
//!   anchor-sharing negative sampling, and the pose regression loss.
//! * [`nn`]: MLP encoders/decoders, representation tokens, Adam and
//!   gradient checking.
//! * [`synth`]: synthetic skeletons, camera projection, image-proxy
//!   features and the dataset file format.
//! * [`trainer`]: the two alignment steps and the task finetune.
//! * [`eval`]: MPJPE / PA-MPJPE, retrieval and interpolation metrics.

pub mod embedding;
pub mod error;
pub mod eval;
pub mod gradgate;
pub mod linalg3;
pub mod losses;
pub mod nn;
pub mod synth;
pub mod trainer;
mod util;

pub use error::{Error, Result};
