//! Self-supervised learning of dense video correspondence.
//!
//! A teacher-student vision transformer is trained on unlabeled clips with
//! two families of objectives: class-token distribution matching between
//! global and local crops of paired frames ("out-generative"), and masked
//! patch-token prediction plus cross-frame affinity consistency
//! ("in-generative"). At inference the backbone's intermediate patch
//! features drive first-frame label propagation, scored with the region
//! similarity J and contour accuracy F.
//!
//! Module map:
//!
//! - [`numerics`]: tensors, autodiff tape, RNG, interpolation, records
//! - [`encoder`]: ViT backbone and projection head
//! - [`views`]: clip sampling, multi-crop augmentation, masking, video I/O
//! - [`objectives`]: the four losses and the teacher machinery
//! - [`optimizer`]: AdamW and its schedules
//! - [`propagation`]: restricted-attention label propagation
//! - [`metrics`]: J, F and their aggregates
//! - [`harness`]: configuration, synthetic data, training, evaluation

pub mod encoder;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod numerics;
pub mod objectives;
pub mod optimizer;
pub mod propagation;
pub mod views;

pub use error::{Error, Result};
pub use numerics::{Real, Rng, Tape, Tensor, Var};
