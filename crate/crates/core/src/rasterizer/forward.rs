use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::gaussians::GaussianPrimitive;
use crate::geometry::Camera;
use crate::scalar::Scalar;

use super::project::{project_gaussian, Splat2D};
use super::{MAX_WEIGHT, MIN_TRANSMITTANCE, MIN_WEIGHT};

pub const TILE_SIZES: [usize; 3] = [8, 16, 32];

/// Row-major rendered image with alpha, depth and per-pixel splat counts.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedImage<T> {
    pub width: usize,
    pub height: usize,
    pub color: Vec<[T; 3]>,
    pub alpha: Vec<T>,
    pub depth: Vec<T>,
    pub count: Vec<u32>,
}

impl<T: Scalar> RenderedImage<T> {
    pub fn new(width: usize, height: usize, background: [T; 3]) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            color: vec![background; n],
            alpha: vec![T::zero(); n],
            depth: vec![T::zero(); n],
            count: vec![0; n],
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Bitwise comparison of every channel.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        let bits = |v: &T| v.to_f64_lossy().to_bits();
        self.width == other.width
            && self.height == other.height
            && self.count == other.count
            && self.alpha.iter().map(bits).eq(other.alpha.iter().map(bits))
            && self.depth.iter().map(bits).eq(other.depth.iter().map(bits))
            && self
                .color
                .iter()
                .flatten()
                .map(bits)
                .eq(other.color.iter().flatten().map(bits))
    }
}

fn key_cmp<T: Scalar>(a: T, b: T) -> Ordering {
    a.to_f64_lossy().total_cmp(&b.to_f64_lossy())
}

/// Global front-to-back order.
///
/// Ties in view depth are broken by the splat's own content, then by index.
/// Two splats that tie on content are interchangeable, so the composited image
/// does not depend on the order of the input list.
pub fn sort_splats<T: Scalar>(splats: &mut [Splat2D<T>]) {
    splats.sort_by(|a, b| {
        key_cmp(a.view_depth, b.view_depth)
            .then_with(|| key_cmp(a.mean2d.x, b.mean2d.x))
            .then_with(|| key_cmp(a.mean2d.y, b.mean2d.y))
            .then_with(|| key_cmp(a.opacity, b.opacity))
            .then_with(|| key_cmp(a.color[0], b.color[0]))
            .then_with(|| key_cmp(a.color[1], b.color[1]))
            .then_with(|| key_cmp(a.color[2], b.color[2]))
            .then_with(|| key_cmp(a.conic.m[0][0], b.conic.m[0][0]))
            .then_with(|| key_cmp(a.conic.m[0][1], b.conic.m[0][1]))
            .then_with(|| key_cmp(a.conic.m[1][1], b.conic.m[1][1]))
            .then_with(|| a.index.cmp(&b.index))
    });
}

pub(crate) fn project_and_sort<T: Scalar>(camera: &Camera<T>, primitives: &[GaussianPrimitive<T>]) -> Vec<Splat2D<T>> {
    let mut splats: Vec<Splat2D<T>> = primitives
        .iter()
        .enumerate()
        .filter_map(|(i, g)| project_gaussian(camera, g, i))
        .collect();
    sort_splats(&mut splats);
    splats
}

/// One pixel's compositing result.
pub(crate) struct PixelResult<T> {
    pub color: [T; 3],
    pub transmittance: T,
    pub depth: T,
    pub count: u32,
}

/// Front-to-back compositing of `splats` (already in global order) at a pixel
/// center.
#[inline]
pub(crate) fn composite<'a, T: Scalar, I>(splats: I, px: T, py: T) -> PixelResult<T>
where
    I: IntoIterator<Item = &'a Splat2D<T>>,
{
    let max_w = T::lit(MAX_WEIGHT);
    let min_w = T::lit(MIN_WEIGHT);
    let min_t = T::lit(MIN_TRANSMITTANCE);
    let mut t = T::one();
    let mut color = [T::zero(); 3];
    let mut depth = T::zero();
    let mut count = 0u32;
    for s in splats {
        let w = (s.opacity * s.power_at(px, py).exp()).min(max_w);
        if w < min_w {
            continue;
        }
        let next_t = t * (T::one() - w);
        if next_t < min_t {
            break;
        }
        let wt = w * t;
        for ch in 0..3 {
            color[ch] += s.color[ch] * wt;
        }
        depth += s.view_depth * wt;
        count += 1;
        t = next_t;
    }
    PixelResult {
        color,
        transmittance: t,
        depth,
        count,
    }
}

pub(crate) fn write_pixel<T: Scalar>(img: &mut RenderedImage<T>, idx: usize, r: PixelResult<T>, background: [T; 3]) {
    let mut c = r.color;
    for ch in 0..3 {
        c[ch] += background[ch] * r.transmittance;
    }
    img.color[idx] = c;
    img.alpha[idx] = T::one() - r.transmittance;
    img.depth[idx] = r.depth;
    img.count[idx] = r.count;
}

/// Reference renderer: every pixel walks the full depth-sorted splat list.
pub fn render<T: Scalar>(camera: &Camera<T>, primitives: &[GaussianPrimitive<T>], background: [T; 3]) -> RenderedImage<T> {
    let splats = project_and_sort(camera, primitives);
    let (w, h) = (camera.width(), camera.height());
    let mut img = RenderedImage::new(w, h, background);
    if splats.is_empty() {
        return img;
    }
    for y in 0..h {
        let py = T::lit(y as f64 + 0.5);
        for x in 0..w {
            let px = T::lit(x as f64 + 0.5);
            let r = composite(splats.iter(), px, py);
            write_pixel(&mut img, y * w + x, r, background);
        }
    }
    img
}

/// Per-tile lists of indices into the sorted splat array, each list in global
/// depth order.
pub(crate) struct TileBins {
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub bins: Vec<Vec<u32>>,
}

pub(crate) fn bin_splats<T: Scalar>(splats: &[Splat2D<T>], width: usize, height: usize, tile_size: usize) -> TileBins {
    let tiles_x = width.div_ceil(tile_size);
    let tiles_y = height.div_ceil(tile_size);
    let mut bins = vec![Vec::new(); tiles_x * tiles_y];
    for (si, s) in splats.iter().enumerate() {
        let Some((x0, x1, y0, y1)) = s.pixel_bounds(width, height) else {
            continue;
        };
        for ty in y0 / tile_size..=(y1 - 1) / tile_size {
            for tx in x0 / tile_size..=(x1 - 1) / tile_size {
                bins[ty * tiles_x + tx].push(si as u32);
            }
        }
    }
    TileBins {
        tiles_x,
        tiles_y,
        bins,
    }
}

pub(crate) fn check_tile_size(tile_size: usize) -> Result<()> {
    if TILE_SIZES.contains(&tile_size) {
        Ok(())
    } else {
        Err(Error::domain(format!("tile size must be one of {TILE_SIZES:?}, got {tile_size}")))
    }
}

/// Tile-binned renderer. Produces the same bits as [`render`]: per-pixel lists
/// keep the global order and only omit splats whose weight is below the skip
/// threshold at every pixel of the tile.
pub fn render_tiled<T: Scalar>(
    camera: &Camera<T>,
    primitives: &[GaussianPrimitive<T>],
    background: [T; 3],
    tile_size: usize,
) -> Result<RenderedImage<T>> {
    check_tile_size(tile_size)?;
    let splats = project_and_sort(camera, primitives);
    let (w, h) = (camera.width(), camera.height());
    let mut img = RenderedImage::new(w, h, background);
    let tiles = bin_splats(&splats, w, h, tile_size);
    for ty in 0..tiles.tiles_y {
        for tx in 0..tiles.tiles_x {
            let bin = &tiles.bins[ty * tiles.tiles_x + tx];
            if bin.is_empty() {
                continue;
            }
            let y_end = ((ty + 1) * tile_size).min(h);
            let x_end = ((tx + 1) * tile_size).min(w);
            for y in ty * tile_size..y_end {
                let py = T::lit(y as f64 + 0.5);
                for x in tx * tile_size..x_end {
                    let px = T::lit(x as f64 + 0.5);
                    let r = composite(bin.iter().map(|&i| &splats[i as usize]), px, py);
                    write_pixel(&mut img, y * w + x, r, background);
                }
            }
        }
    }
    Ok(img)
}
