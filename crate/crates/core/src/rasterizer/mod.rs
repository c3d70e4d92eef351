//! Differentiable splatting of [`GaussianPrimitive`]s.
//!
//! Primitives are projected to screen-space ellipses ([`Splat2D`]), sorted
//! once per camera by view depth and composited front to back. The backward
//! pass recomputes the per-pixel compositing lists tile by tile and chains the
//! screen-space gradients through the projection, the covariance factorization
//! and the SH color model.
//!
//! Compositing rules shared by every path:
//! * per-splat weight `w = min(0.999, α·exp(-½ dᵀ Σ₂⁻¹ d))`, skipped when
//!   `w < 1/255`; the clamp and the skip are stop-gradient regions;
//! * a splat that would drive transmittance below `1e-4` ends the pixel and is
//!   not composited;
//! * depth is composited with the same weights and is not normalized by alpha.

mod backward;
mod forward;
mod project;

pub use backward::{render_backward, render_backward_tiled, ImageGradient, RenderGradients};
pub use forward::{render, render_tiled, sort_splats, RenderedImage, TILE_SIZES};
pub use project::{project_gaussian, Splat2D};

/// Added to the diagonal of every projected 2D covariance (pixels²).
pub const BLUR_FLOOR: f64 = 0.3;
/// Upper clamp on a single splat's weight.
pub const MAX_WEIGHT: f64 = 0.999;
/// Splats whose weight at a pixel falls below this are skipped there.
pub const MIN_WEIGHT: f64 = 1.0 / 255.0;
/// Compositing stops before transmittance would drop below this value.
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
/// Primitives closer than this camera-frame depth are culled.
pub const NEAR_CULL: f64 = 0.01;
/// Default tile edge in pixels.
pub const DEFAULT_TILE_SIZE: usize = 16;

#[cfg(test)]
mod tests;
