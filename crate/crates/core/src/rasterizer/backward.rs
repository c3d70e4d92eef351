use crate::error::{Error, Result};
use crate::gaussians::{sh_basis_grad, GaussianPrimitive};
use crate::geometry::Camera;
use crate::linalg::{Mat2, Mat3, Vec2, Vec3};
use crate::scalar::Scalar;

use super::forward::{bin_splats, check_tile_size, project_and_sort};
use super::project::{project_with_cache, ProjectionCache, Splat2D};
use super::{DEFAULT_TILE_SIZE, MAX_WEIGHT, MIN_TRANSMITTANCE, MIN_WEIGHT};

/// Upstream gradient of a loss with respect to a rendered image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGradient<T> {
    pub width: usize,
    pub height: usize,
    pub color: Vec<[T; 3]>,
    pub depth: Option<Vec<T>>,
}

impl<T: Scalar> ImageGradient<T> {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            color: vec![[T::zero(); 3]; width * height],
            depth: None,
        }
    }
}

/// Loss gradients for every primitive, indexed like the input list.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderGradients<T> {
    pub mean: Vec<Vec3<T>>,
    pub scale_raw: Vec<Vec3<T>>,
    pub rotation_raw: Vec<[T; 4]>,
    pub opacity: Vec<T>,
    pub sh: Vec<Vec<[T; 3]>>,
}

impl<T: Scalar> RenderGradients<T> {
    pub fn zeros(primitives: &[GaussianPrimitive<T>]) -> Self {
        Self {
            mean: vec![Vec3::zero(); primitives.len()],
            scale_raw: vec![Vec3::zero(); primitives.len()],
            rotation_raw: vec![[T::zero(); 4]; primitives.len()],
            opacity: vec![T::zero(); primitives.len()],
            sh: primitives.iter().map(|g| vec![[T::zero(); 3]; g.sh.coeffs().len()]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }
}

/// Screen-space gradients of one splat.
#[derive(Clone, Copy, Debug)]
struct SplatGrad<T> {
    mean2d: Vec2<T>,
    /// Gradient w.r.t. conic entries (a, b, c) of `[[a, b], [b, c]]`, with `b`
    /// counted once.
    conic: [T; 3],
    opacity: T,
    color: [T; 3],
    depth: T,
}

impl<T: Scalar> SplatGrad<T> {
    fn zero() -> Self {
        Self {
            mean2d: Vec2::new(T::zero(), T::zero()),
            conic: [T::zero(); 3],
            opacity: T::zero(),
            color: [T::zero(); 3],
            depth: T::zero(),
        }
    }
}

struct Contribution<T> {
    splat: usize,
    w: T,
    gauss: T,
    t_before: T,
    clamped: bool,
}

/// Backward pass for one pixel. Recomputes the forward compositing list, then
/// walks it back to front.
#[allow(clippy::too_many_arguments)]
fn backward_pixel<'a, T: Scalar, I>(
    order: I,
    splats: &[Splat2D<T>],
    px: T,
    py: T,
    background: [T; 3],
    g_color: [T; 3],
    g_depth: T,
    scratch: &mut Vec<Contribution<T>>,
    out: &mut [SplatGrad<T>],
) where
    I: IntoIterator<Item = usize>,
{
    let max_w = T::lit(MAX_WEIGHT);
    let min_w = T::lit(MIN_WEIGHT);
    let min_t = T::lit(MIN_TRANSMITTANCE);
    scratch.clear();
    let mut t = T::one();
    for si in order {
        let s = &splats[si];
        let gauss = s.power_at(px, py).exp();
        let raw = s.opacity * gauss;
        let w = raw.min(max_w);
        if w < min_w {
            continue;
        }
        let next_t = t * (T::one() - w);
        if next_t < min_t {
            break;
        }
        scratch.push(Contribution {
            splat: si,
            w,
            gauss,
            t_before: t,
            clamped: raw > max_w,
        });
        t = next_t;
    }

    let mut suffix_c = [background[0] * t, background[1] * t, background[2] * t];
    let mut suffix_d = T::zero();
    for c in scratch.iter().rev() {
        let s = &splats[c.splat];
        let g = &mut out[c.splat];
        let wt = c.w * c.t_before;
        let inv_1mw = T::one() / (T::one() - c.w);
        let mut dl_dw = T::zero();
        for ch in 0..3 {
            g.color[ch] += g_color[ch] * wt;
            dl_dw += g_color[ch] * (s.color[ch] * c.t_before - suffix_c[ch] * inv_1mw);
            suffix_c[ch] += s.color[ch] * wt;
        }
        g.depth += g_depth * wt;
        dl_dw += g_depth * (s.view_depth * c.t_before - suffix_d * inv_1mw);
        suffix_d += s.view_depth * wt;

        if c.clamped {
            continue;
        }
        g.opacity += dl_dw * c.gauss;
        let dl_dpower = dl_dw * c.w;
        let dx = px - s.mean2d.x;
        let dy = py - s.mean2d.y;
        let a = s.conic.m[0][0];
        let b = s.conic.m[0][1];
        let cc = s.conic.m[1][1];
        g.mean2d.x += dl_dpower * (a * dx + b * dy);
        g.mean2d.y += dl_dpower * (b * dx + cc * dy);
        let half = T::lit(0.5);
        g.conic[0] -= dl_dpower * half * dx * dx;
        g.conic[1] -= dl_dpower * dx * dy;
        g.conic[2] -= dl_dpower * half * dy * dy;
    }
}

fn mat2_mul<T: Scalar>(a: &Mat2<T>, b: &Mat2<T>) -> Mat2<T> {
    let mut m = [[T::zero(); 2]; 2];
    for (i, row) in m.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = a.m[i][0] * b.m[0][j] + a.m[i][1] * b.m[1][j];
        }
    }
    Mat2 { m }
}

/// Chains screen-space gradients through projection, covariance and color.
fn chain_projection<T: Scalar>(
    camera: &Camera<T>,
    prim: &GaussianPrimitive<T>,
    splat: &Splat2D<T>,
    cache: &ProjectionCache<T>,
    g: &SplatGrad<T>,
    out: &mut RenderGradients<T>,
    i: usize,
) {
    let zero = T::zero();
    let two = T::lit(2.0);
    let half = T::lit(0.5);

    // Conic -> 2D covariance: dL/dC = -A·G_A·A.
    let ga = Mat2::new(g.conic[0], half * g.conic[1], half * g.conic[1], g.conic[2]);
    let a = splat.conic;
    let gc = mat2_mul(&mat2_mul(&a, &ga), &a);
    let gc = Mat2::new(-gc.m[0][0], -gc.m[0][1], -gc.m[1][0], -gc.m[1][1]);

    // C = J Σc Jᵀ + blur.
    let jac = cache.jac;
    let mut g_cov_cam = Mat3::zeros();
    for k in 0..3 {
        for l in 0..3 {
            let mut acc = zero;
            for (ii, ji) in jac.iter().enumerate() {
                for (jj, jj_row) in jac.iter().enumerate() {
                    acc += ji[k] * gc.m[ii][jj] * jj_row[l];
                }
            }
            g_cov_cam.m[k][l] = acc;
        }
    }
    // dL/dJ = (G + Gᵀ)·J·Σc
    let gsym = Mat2::new(gc.m[0][0] * two, gc.m[0][1] + gc.m[1][0], gc.m[0][1] + gc.m[1][0], gc.m[1][1] * two);
    let jsig = [cache.cov_cam.transpose().mul_vec(jac[0]), cache.cov_cam.transpose().mul_vec(jac[1])];
    let g_jac = [
        jsig[0] * gsym.m[0][0] + jsig[1] * gsym.m[0][1],
        jsig[0] * gsym.m[1][0] + jsig[1] * gsym.m[1][1],
    ];

    let k = camera.intrinsics();
    let (fx, skew, fy) = (k.m[0][0], k.m[0][1], k.m[1][1]);
    let p = cache.p_cam;
    let inv_z = T::one() / p.z;
    let inv_z2 = inv_z * inv_z;
    let inv_z3 = inv_z2 * inv_z;
    let mut gp = Vec3::zero();
    // Jacobian entries as functions of the camera-frame point.
    gp.x -= g_jac[0].z * fx * inv_z2;
    gp.y -= g_jac[0].z * skew * inv_z2 + g_jac[1].z * fy * inv_z2;
    gp.z += -g_jac[0].x * fx * inv_z2 - g_jac[0].y * skew * inv_z2
        + g_jac[0].z * two * (fx * p.x + skew * p.y) * inv_z3
        - g_jac[1].y * fy * inv_z2
        + g_jac[1].z * two * fy * p.y * inv_z3;
    // Projected mean.
    let (gu, gv) = (g.mean2d.x, g.mean2d.y);
    gp.x += gu * fx * inv_z;
    gp.y += gu * skew * inv_z + gv * fy * inv_z;
    gp.z -= gu * (fx * p.x + skew * p.y) * inv_z2 + gv * fy * p.y * inv_z2;
    // View depth.
    gp.z += g.depth;

    let rcam = *camera.rotation();
    // Σc = Wᵀ... with W = Rcamᵀ: Σc = Rcamᵀ Σ Rcam, so G_Σ = Rcam G_Σc Rcamᵀ.
    let g_cov = rcam * g_cov_cam * rcam.transpose();
    let mut g_mean = rcam.mul_vec(gp);

    // Color.
    let degree = prim.sh.degree();
    let basis_grad = sh_basis_grad(degree, cache.view_dir);
    let mut g_dir = Vec3::zero();
    for ch in 0..3 {
        if !cache.color_active[ch] {
            continue;
        }
        let gch = g.color[ch];
        for (kk, coeff) in prim.sh.coeffs().iter().enumerate() {
            out.sh[i][kk][ch] += gch * cache.basis[kk];
            g_dir += basis_grad[kk] * (gch * coeff[ch]);
        }
    }
    let v = cache.view_dir;
    g_mean += (g_dir - v * v.dot(g_dir)) * (T::one() / cache.view_dist);
    out.mean[i] += g_mean;
    out.opacity[i] += g.opacity;

    // Σ = M Mᵀ, M = R·S.
    let mut m = cache.rot;
    for row in m.m.iter_mut() {
        for (j, val) in row.iter_mut().enumerate() {
            *val *= cache.scales[j];
        }
    }
    let g_m = (g_cov + g_cov.transpose()) * m;
    let mut g_rot = Mat3::zeros();
    for j in 0..3 {
        let mut gs = zero;
        for r in 0..3 {
            gs += cache.rot.m[r][j] * g_m.m[r][j];
            g_rot.m[r][j] = g_m.m[r][j] * cache.scales[j];
        }
        out.scale_raw[i][j] += gs * cache.scales[j];
    }

    let [w, x, y, z] = cache.q_unit;
    let r = &g_rot.m;
    let t2 = two;
    let t4 = two * two;
    let gw = t2 * (-z * r[0][1] + y * r[0][2] + z * r[1][0] - x * r[1][2] - y * r[2][0] + x * r[2][1]);
    let gx = t2 * (y * r[0][1] + z * r[0][2] + y * r[1][0] - w * r[1][2] + z * r[2][0] + w * r[2][1])
        - t4 * x * (r[1][1] + r[2][2]);
    let gy = t2 * (x * r[0][1] + w * r[0][2] + x * r[1][0] + z * r[1][2] - w * r[2][0] + z * r[2][1])
        - t4 * y * (r[0][0] + r[2][2]);
    let gz = t2 * (-w * r[0][1] + x * r[0][2] + w * r[1][0] + y * r[1][2] + x * r[2][0] + y * r[2][1])
        - t4 * z * (r[0][0] + r[1][1]);
    let gq = [gw, gx, gy, gz];
    let dot = gq[0] * w + gq[1] * x + gq[2] * y + gq[3] * z;
    let inv_norm = T::one() / cache.q_norm;
    for (c, (gqc, qc)) in gq.iter().zip(cache.q_unit).enumerate() {
        out.rotation_raw[i][c] += (*gqc - qc * dot) * inv_norm;
    }
}

fn check_gradient_shape<T: Scalar>(camera: &Camera<T>, grad: &ImageGradient<T>) -> Result<()> {
    let n = camera.width() * camera.height();
    let depth_ok = grad.depth.as_ref().map_or(true, |d| d.len() == n);
    if grad.width != camera.width() || grad.height != camera.height() || grad.color.len() != n || !depth_ok {
        return Err(Error::shape(
            "render_backward",
            &[grad.height, grad.width, grad.color.len()],
            &[camera.height(), camera.width(), n],
        ));
    }
    Ok(())
}

/// Exact gradients of the forward compositing with respect to every primitive
/// parameter, using the default tile size.
pub fn render_backward<T: Scalar>(
    camera: &Camera<T>,
    primitives: &[GaussianPrimitive<T>],
    background: [T; 3],
    grad: &ImageGradient<T>,
) -> Result<RenderGradients<T>> {
    render_backward_tiled(camera, primitives, background, grad, DEFAULT_TILE_SIZE)
}

/// Backward pass over tiles. Screen-space gradients are accumulated per tile
/// into a private buffer and reduced into the shared one in tile order.
pub fn render_backward_tiled<T: Scalar>(
    camera: &Camera<T>,
    primitives: &[GaussianPrimitive<T>],
    background: [T; 3],
    grad: &ImageGradient<T>,
    tile_size: usize,
) -> Result<RenderGradients<T>> {
    check_tile_size(tile_size)?;
    check_gradient_shape(camera, grad)?;
    let mut out = RenderGradients::zeros(primitives);
    let splats = project_and_sort(camera, primitives);
    if splats.is_empty() {
        return Ok(out);
    }
    let (w, h) = (camera.width(), camera.height());
    let tiles = bin_splats(&splats, w, h, tile_size);
    let mut total = vec![SplatGrad::zero(); splats.len()];
    let mut tile_buf = vec![SplatGrad::zero(); splats.len()];
    let mut scratch = Vec::new();
    for ty in 0..tiles.tiles_y {
        for tx in 0..tiles.tiles_x {
            let bin = &tiles.bins[ty * tiles.tiles_x + tx];
            if bin.is_empty() {
                continue;
            }
            for &si in bin {
                tile_buf[si as usize] = SplatGrad::zero();
            }
            let y_end = ((ty + 1) * tile_size).min(h);
            let x_end = ((tx + 1) * tile_size).min(w);
            for y in ty * tile_size..y_end {
                let py = T::lit(y as f64 + 0.5);
                for x in tx * tile_size..x_end {
                    let idx = y * w + x;
                    let gc = grad.color[idx];
                    let gd = grad.depth.as_ref().map_or(T::zero(), |d| d[idx]);
                    if gc.iter().all(|v| *v == T::zero()) && gd == T::zero() {
                        continue;
                    }
                    let px = T::lit(x as f64 + 0.5);
                    backward_pixel(
                        bin.iter().map(|&i| i as usize),
                        &splats,
                        px,
                        py,
                        background,
                        gc,
                        gd,
                        &mut scratch,
                        &mut tile_buf,
                    );
                }
            }
            for &si in bin {
                let src = tile_buf[si as usize];
                let dst = &mut total[si as usize];
                dst.mean2d += src.mean2d;
                for c in 0..3 {
                    dst.conic[c] += src.conic[c];
                    dst.color[c] += src.color[c];
                }
                dst.opacity += src.opacity;
                dst.depth += src.depth;
            }
        }
    }

    for (splat, g) in splats.iter().zip(&total) {
        let prim = &primitives[splat.index];
        // Projection is deterministic, so this reproduces the forward splat.
        let (_, cache) = project_with_cache(camera, prim, splat.index).expect("splat was visible in forward pass");
        chain_projection(camera, prim, splat, &cache, g, &mut out, splat.index);
    }
    Ok(out)
}
