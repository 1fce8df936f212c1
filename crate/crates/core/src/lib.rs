//! Differentiable geometry for a 3D morphable model spatial transformer.
//!
//! The pipeline maps pose and shape parameters to per-vertex sample points
//! ([`transform`]), resamples a source image onto the model's flattened
//! output grid with a self-occlusion mask ([`sampler`]), and scores the
//! result with geometric losses ([`losses`]). Every stage has an analytic
//! backward pass; [`fit`] uses them for fitting, toy localiser training and
//! finite-difference verification. [`flatten`] builds output grids from
//! triangle meshes.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod fit;
pub mod flatten;
pub mod io;
pub mod losses;
pub mod model;
pub mod raster;
pub mod sampler;
pub mod synthetic;
pub mod transform;

pub use error::{Error, Result};
pub use losses::{LandmarkSet, LossGradients, LossValue};
pub use model::{ModeSymmetry, MorphableModel, ShapeInstance};
pub use sampler::{FlatImage, Image, OcclusionMask};
pub use transform::{PoseShapeParams, RotationMatrix, SampleGrid};
