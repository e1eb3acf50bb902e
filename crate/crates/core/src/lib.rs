//! Graph-guided state-space hand reconstruction, from scratch.
//!
//! A desk-scale stack for single-image 3D hand mesh recovery built on a
//! selective-scan state space decoder guided by the hand kinematic graph:
//!
//! - [`tensor`] / [`tape`] / [`ops`]: dense f64 tensors with reverse-mode
//!   differentiation over an explicit op tape;
//! - [`ssm`]: zero-order-hold discretization, selective scans, and the
//!   bidirectional sequence block;
//! - [`graph`]: the 21-joint hand skeleton and semantic graph convolution;
//! - [`decoder`]: token sampling, the joints regressor, the graph-guided
//!   state-space block stack, and the fusion heads;
//! - [`hand`] / [`synth`]: a simplified parametric hand and the synthetic
//!   data generator used for training;
//! - [`loss`] / [`train`]: the combined objective, adversarial priors,
//!   AdamW, and the training loop;
//! - [`metrics`]: Procrustes-aligned errors, F-scores, PCK, AUC, and
//!   test-time augmentation;
//! - [`io`]: dataset, checkpoint, mesh, and run-config formats.

pub mod decoder;
pub mod error;
pub mod nn;
pub mod ssm;
pub mod synth;
pub mod gradcheck;
pub mod graph;
pub mod hand;
pub mod loss;
pub mod ops;
pub mod params;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use params::{Mode, ParamStore, StateStore};
pub use tape::{backward, Gradients, Tape, Var};
pub use tensor::Tensor;
