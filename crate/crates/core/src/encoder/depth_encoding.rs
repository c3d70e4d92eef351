use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Default number of frequency bands `B`.
pub const DEFAULT_BANDS: usize = 8;

/// Sinusoidal encoding `γ` of a triangulated depth, computed on the depth's
/// normalized disparity
/// `n(d) = (1/near − 1/d) / (1/near − 1/far)`,
/// which is 0 at `near`, 1 at `far` and unchanged when depth, near and far are
/// scaled together.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthEncoding {
    pub bands: usize,
    pub near: f64,
    pub far: f64,
}

impl DepthEncoding {
    pub fn new(bands: usize, near: f64, far: f64) -> Result<Self> {
        if bands == 0 {
            return Err(Error::domain("depth encoding needs at least one band"));
        }
        if !(near > 0.0 && near < far && far.is_finite()) {
            return Err(Error::domain(format!("depth encoding needs 0 < near < far, got [{near}, {far}]")));
        }
        Ok(Self { bands, near, far })
    }

    pub fn dim(&self) -> usize {
        2 * self.bands
    }

    /// Normalized disparity clamped to `[0, 1]`, and whether clamping applied.
    pub fn normalize(&self, depth: f64) -> (f64, bool) {
        let inv_near = 1.0 / self.near;
        let n = (inv_near - 1.0 / depth) / (inv_near - 1.0 / self.far);
        if n.is_nan() || depth <= 0.0 {
            return (0.0, true);
        }
        let c = n.clamp(0.0, 1.0);
        (c, c != n)
    }

    /// `(sin 2ᵏπn, cos 2ᵏπn)` for `k = 0..B`, interleaved per band.
    pub fn encode(&self, depth: f64) -> (Vec<f64>, bool) {
        let (n, clamped) = self.normalize(depth);
        let mut out = Vec::with_capacity(self.dim());
        for k in 0..self.bands {
            let (s, c) = ((1u64 << k) as f64 * PI * n).sin_cos();
            out.push(s);
            out.push(c);
        }
        (out, clamped)
    }
}
