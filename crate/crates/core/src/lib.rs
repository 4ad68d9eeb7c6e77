// SPDX-License-Identifier: MIT OR Apache-2.0

//! Vision Transformer inference and attribution engine.
//!
//! Every ViT layer is written as a dynamic-linear operator
//! `F(X) = L(X)(X) + B`. Freezing the input-generated operators at an input
//! makes the whole network an affine map of the image; its row for a logit is
//! the *effective transformation*. DAVE averages that row over random spatial
//! transforms and input noise and multiplies it into the image.
//!
//! Layout conventions: tensors are row-major `f64`; token matrices are
//! `[tokens, width]`; images and attribution maps are `[3, H, W]`.

pub mod attribution;
pub mod dynlin;
pub mod error;
pub mod fixtures;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod transforms;

pub use attribution::{AttributionMap, DaveParams, Method};
pub use dynlin::{ActivationKind, LayerSpec, OperatorCache};
pub use error::{DaveError, Result};
pub use model::{EffectiveRow, Model, ModelConfig, WeightFile};
pub use rng::Rng;
pub use tensor::Tensor;
pub use transforms::{NoiseScheme, SpatialTransform, TransformDistribution};
