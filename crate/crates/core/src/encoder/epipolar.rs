use std::sync::Arc;

use crate::autodiff::{SparseRows, Tensor};
use crate::error::Result;
use crate::geometry::{epipolar_segment, Camera};
use crate::linalg::Vec2;

use super::depth_encoding::DepthEncoding;

/// Epipolar sampling of one query view against one target view, flattened
/// into the constant operands of an attention layer.
#[derive(Clone, Debug)]
pub struct EpipolarGeometry {
    samples: usize,
    target_pixels: usize,
    valid: Vec<usize>,
    bilinear: Arc<SparseRows>,
    encodings: Tensor,
    depths: Vec<f64>,
    sample_pixels: Vec<Vec2<f64>>,
    clamped: usize,
}

/// Bilinear taps of a continuous coordinate on a `width`×`height` grid with
/// pixel-center sampling and edge clamping.
pub(crate) fn bilinear_taps(p: Vec2<f64>, width: usize, height: usize) -> Vec<(usize, f64)> {
    let fx = p.x - 0.5;
    let fy = p.y - 0.5;
    let x0 = fx.floor();
    let y0 = fy.floor();
    let (tx, ty) = (fx - x0, fy - y0);
    let clamp = |v: f64, n: usize| v.max(0.0).min((n - 1) as f64) as usize;
    let (xa, xb) = (clamp(x0, width), clamp(x0 + 1.0, width));
    let (ya, yb) = (clamp(y0, height), clamp(y0 + 1.0, height));
    vec![
        (ya * width + xa, (1.0 - tx) * (1.0 - ty)),
        (ya * width + xb, tx * (1.0 - ty)),
        (yb * width + xa, (1.0 - tx) * ty),
        (yb * width + xb, tx * ty),
    ]
}

impl EpipolarGeometry {
    /// `source` and `target` are feature-resolution cameras.
    pub fn new(
        source: &Camera<f64>,
        target: &Camera<f64>,
        near: f64,
        far: f64,
        samples: usize,
        encoding: &DepthEncoding,
    ) -> Result<Self> {
        let (w, h) = (source.width(), source.height());
        let (tw, th) = (target.width(), target.height());
        let mut valid = Vec::new();
        let mut rows = Vec::new();
        let mut enc = Vec::new();
        let mut depths = Vec::new();
        let mut sample_pixels = Vec::new();
        let mut clamped = 0;
        for j in 0..h {
            for i in 0..w {
                let seg = epipolar_segment(source, target, Camera::pixel_center(i, j), near, far, samples)?;
                if seg.is_empty() {
                    continue;
                }
                valid.push(j * w + i);
                for s in &seg.samples {
                    rows.push(bilinear_taps(s.pixel, tw, th));
                    let (e, c) = encoding.encode(s.depth);
                    clamped += usize::from(c);
                    enc.extend(e);
                    depths.push(s.depth);
                    sample_pixels.push(s.pixel);
                }
            }
        }
        let encodings = Tensor::new(&[valid.len() * samples, encoding.dim()], enc)?;
        Ok(Self {
            samples,
            target_pixels: tw * th,
            valid,
            bilinear: Arc::new(SparseRows::new(tw * th, rows)?),
            encodings,
            depths,
            sample_pixels,
            clamped,
        })
    }

    /// Samples per valid segment (`L`).
    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn target_pixels(&self) -> usize {
        self.target_pixels
    }

    /// Query pixels whose segment is non-empty, ascending.
    pub fn valid_pixels(&self) -> &[usize] {
        &self.valid
    }

    pub fn valid_mask(&self, pixels: usize) -> Vec<bool> {
        let mut mask = vec![false; pixels];
        for &p in &self.valid {
            mask[p] = true;
        }
        mask
    }

    /// `[pixels, L]` table of sample depths, zero for invalid pixels.
    pub fn depth_table(&self, pixels: usize) -> Tensor {
        let l = self.samples;
        let mut t = Tensor::zeros(&[pixels, l]);
        for (row, &p) in self.valid.iter().enumerate() {
            t.data_mut()[p * l..(p + 1) * l].copy_from_slice(&self.depths[row * l..(row + 1) * l]);
        }
        t
    }

    pub fn bilinear(&self) -> Arc<SparseRows> {
        self.bilinear.clone()
    }

    /// `[valid·L, 2B]` depth encodings.
    pub fn encodings(&self) -> &Tensor {
        &self.encodings
    }

    /// Target-view sample coordinates and depths of query pixel `pixel`.
    pub fn segment(&self, pixel: usize) -> Option<(&[Vec2<f64>], &[f64])> {
        let row = self.valid.binary_search(&pixel).ok()?;
        let l = self.samples;
        Some((&self.sample_pixels[row * l..(row + 1) * l], &self.depths[row * l..(row + 1) * l]))
    }

    /// Samples whose depth fell outside `[near, far]` and were clamped in `γ`.
    pub fn clamped_samples(&self) -> usize {
        self.clamped
    }
}

/// Epipolar geometry in both directions for a camera pair.
#[derive(Clone, Debug)]
pub struct PairGeometry {
    forward: EpipolarGeometry,
    backward: EpipolarGeometry,
}

impl PairGeometry {
    /// `cameras` at image resolution; geometry is built for the cameras
    /// downsampled by `downsample`.
    pub fn new(
        cameras: [&Camera<f64>; 2],
        downsample: usize,
        near: f64,
        far: f64,
        samples: usize,
        encoding: &DepthEncoding,
    ) -> Result<Self> {
        let a = cameras[0].downsampled(downsample)?;
        let b = cameras[1].downsampled(downsample)?;
        Ok(Self {
            forward: EpipolarGeometry::new(&a, &b, near, far, samples, encoding)?,
            backward: EpipolarGeometry::new(&b, &a, near, far, samples, encoding)?,
        })
    }

    /// View 0 queries against view 1.
    pub fn forward(&self) -> &EpipolarGeometry {
        &self.forward
    }

    /// View 1 queries against view 0.
    pub fn backward(&self) -> &EpipolarGeometry {
        &self.backward
    }

    pub fn view(&self, query_view: usize) -> &EpipolarGeometry {
        if query_view == 0 {
            &self.forward
        } else {
            &self.backward
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_taps_at_center_and_edge() {
        let taps = bilinear_taps(Vec2::new(1.5, 2.5), 4, 4);
        let total: f64 = taps.iter().filter(|(i, _)| *i == 2 * 4 + 1).map(|(_, w)| w).sum();
        assert_eq!(total, 1.0);
        let taps = bilinear_taps(Vec2::new(0.0, 0.0), 4, 4);
        assert!(taps.iter().all(|(i, _)| *i == 0));
        assert!((taps.iter().map(|(_, w)| w).sum::<f64>() - 1.0).abs() < 1e-15);
    }
}
