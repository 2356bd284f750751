//! S3TU-Net: a U-shaped segmentation network built from structured
//! convolution blocks (DWF-Conv / D2BR-Conv), a residual super-token
//! transformer bottleneck (RM-SViT) and spatial-shift MLP skip connectors
//! (S2-MLP Link), on top of a minimal f64 tensor/autodiff engine.
//!
//! Everything runs on the CPU in deterministic double precision so that
//! every gradient rule can be checked against central finite differences.

pub mod autodiff;
pub mod blocks;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod rng;
pub mod s2link;
pub mod svit;
pub mod tensor;

pub use autodiff::{Gradients, Tape, TensorId};
pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
