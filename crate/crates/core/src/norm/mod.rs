//! BatchNorm with explicit statistics modes, its affine companion, and fusion.

mod affine;
mod fusion;
mod layer;

pub use affine::{AffineBank, AffineGrad, AffineLayer};
pub use fusion::{fuse_frozen, fusion_finetune_demo};
pub use layer::{BatchCtx, BnCache, BnLayer, BnMode, Cohorts, DEFAULT_EPS};
