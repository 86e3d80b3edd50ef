//! Network building blocks: task-specific squeeze-excitation, batch norm and
//! residual adapters on a shared trunk, cross and affinity propagation
//! between the decoder streams, and the pose head.

mod fusion;
mod layers;
mod network;

pub use fusion::{apu_affinity, apu_propagate, AffinityPropagation, CrossPropagation, MAX_AFFINITY_PIXELS};
pub use layers::{BatchNorm, Builder, Conv, Ctx, Init, PerTask, ResidualBlock, SeBlock, TaskBatchNorm, SE_REDUCTION};
pub use network::{
    DecoderPair, NetConfig, PoseNet, Prediction, SafeNet, SharedEncoder, NUM_DISP_SCALES, NUM_STAGES, POSE_SCALE,
};
