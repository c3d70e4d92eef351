//! Image quality metrics on `[H, W, 3]` tensors with values in `[0, 1]`.

use pairsplat::autodiff::Tensor;

use crate::error::{HarnessError, Result};

/// Reported PSNR when the images match exactly.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_pair(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    if a.shape() != b.shape() || a.rank() != 3 {
        return Err(HarnessError::validation(format!(
            "metric needs two [H, W, C] images of equal shape, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let s = a.shape();
    Ok((s[0], s[1], s[2]))
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_pair(a, b)?;
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.len() as f64)
}

/// `10·log10(1/MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    let e = mse(a, b)?;
    if e == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * e.log10()).min(PSNR_CAP))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filter over the fully-inside window positions.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for j in 0..h {
        for i in 0..ow {
            rows[j * ow + i] = (0..n).map(|t| k[t] * x[j * w + i + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for j in 0..oh {
        for i in 0..ow {
            out[j * ow + i] = (0..n).map(|t| k[t] * rows[(j + t) * ow + i]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean SSIM over channels and all fully-inside 11×11 Gaussian windows
/// (σ = 1.5, `C1 = (0.01)²`, `C2 = (0.03)²`, data range 1).
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (h, w, c) = check_pair(a, b)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(HarnessError::validation(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images")));
    }
    let k = gaussian_window();
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let x: Vec<f64> = a.data().iter().skip(ch).step_by(c).copied().collect();
        let y: Vec<f64> = b.data().iter().skip(ch).step_by(c).copied().collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let (mx, ..) = filter_valid(&x, h, w, &k);
        let (my, ..) = filter_valid(&y, h, w, &k);
        let (sxx, ..) = filter_valid(&xx, h, w, &k);
        let (syy, ..) = filter_valid(&yy, h, w, &k);
        let (sxy, ..) = filter_valid(&xy, h, w, &k);
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            total += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}
