//! Two-view reconstruction of pixel-aligned 3D Gaussian splats.
//!
//! The crate is organized bottom-up:
//!
//! * [`geometry`]: pinhole cameras, rays, epipolar sampling, triangulation.
//! * [`gaussians`]: the Gaussian primitive, covariance and SH color.
//! * [`rasterizer`]: tile-based splatting with an analytic backward pass.
//! * [`autodiff`]: a tape-based reverse-mode engine over dense `f64` arrays.
//! * [`encoder`]: feature extraction and epipolar/self attention.
//! * [`head`]: depth buckets, probabilistic depth and per-pixel Gaussians.
//! * [`model`]: the encoder and head wired into one differentiable pipeline.
//!
//! Geometric and rendering code is generic over [`Scalar`] (`f32`/`f64`); the
//! learned components run in `f64`.

pub mod autodiff;
pub mod encoder;
pub mod error;
pub mod gaussians;
pub mod geometry;
pub mod gradcheck;
pub mod head;
pub mod linalg;
pub mod model;
#[cfg(any(test, feature = "oracles"))]
pub mod oracles;
pub mod rasterizer;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Vec2f = linalg::Vec2<f64>;
pub type Vec3f = linalg::Vec3<f64>;
pub type Mat3f = linalg::Mat3<f64>;
pub type Camera64 = geometry::Camera<f64>;
pub type Camera32 = geometry::Camera<f32>;
pub type Ray64 = geometry::Ray<f64>;
pub type Gaussian64 = gaussians::GaussianPrimitive<f64>;
pub type Gaussian32 = gaussians::GaussianPrimitive<f32>;
pub type Sh64 = gaussians::ShCoefficients<f64>;
pub type RenderedImage64 = rasterizer::RenderedImage<f64>;
pub type RenderGradients64 = rasterizer::RenderGradients<f64>;
