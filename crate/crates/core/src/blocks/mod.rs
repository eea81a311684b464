//! Architectural blocks: Group-Norm with affine transform, pooling, the LFP
//! and ResP blocks, stages, and the full classifier.

mod config;
mod gam;
mod lfp;
mod linear;
mod model;
mod resp;
mod sensitivity;
mod stage;

pub use config::{Ablation, Backend, ModelConfig, StageConfig};
pub use gam::{
    group_norm_affine, group_norm_affine_backward, max_pool_neighbors, max_pool_neighbors_backward, s_pool,
    s_pool_backward, AffineParams, GroupNormCache, GroupedFeatures, SPoolCache, GROUP_NORM_EPS,
};
pub use lfp::{dwconv_neighbors, DwConv, Lfp, LfpCache, PhiCache, PhiSpec, PhiStack};
pub use linear::Linear;
pub use model::{argmax, Model, ModelCache, Sample, SamplePlan};
pub use resp::{BatchNorm, BatchNormCache, BatchStats, Mode, ResPBlock, ResPCache, RunningStats, BN_EPS, BN_MOMENTUM};
pub use sensitivity::{percentile_flags, sensitivity_scores};
pub use stage::{LocalCache, Stage};
