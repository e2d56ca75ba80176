//! Dense networks with a hand-written backward pass, Adam, and a
//! finite-difference gradient checker.

mod adam;
mod codec;
mod gradcheck;
mod mlp;

pub use adam::{AdamConfig, AdamState};
pub use codec::{
    decode, decode_backward, embed, encode, encode_backward, predict_pose, DecodeCache,
    DecodeGrads, EncodeCache, PoseKind, RepresentationToken,
};
pub use gradcheck::{gradient_check, relative_error, GradCheckOptions, GradCheckReport, REL_FLOOR};
pub use mlp::{gelu, gelu_grad, param_count, DenseMlp, MlpCache, MlpGrads};
