//! Two-stage fundus-image analysis pipeline.
//!
//! A local convolutional network classifies overlapped image patches into
//! lesion types, its per-patch labels and probabilities are fused into a
//! weighting matrix that re-weights the image, and a global network grades
//! NPDR severity from the weighted image. Everything — tensors, layers,
//! training, preprocessing, map construction, metrics, and the synthetic
//! test corpus — is implemented here from scratch.

pub mod error;
pub mod networks;
pub mod nn;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};

pub mod lesionmap;
pub mod metrics;
pub mod preprocess;
pub mod synthdata;
pub mod tiling;
