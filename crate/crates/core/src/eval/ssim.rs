//! Structural similarity with an 11×11 Gaussian window (σ = 1.5), averaged
//! over the valid window positions.

use crate::error::{Error, Result};
use crate::image::SliceImage;

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps() -> [f64; WINDOW] {
    let mut taps = [0.0; WINDOW];
    let mid = (WINDOW / 2) as f64;
    for (k, t) in taps.iter_mut().enumerate() {
        let d = k as f64 - mid;
        *t = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Dynamic range shared by both images; 1 when both are the same constant.
pub fn joint_range(a: &SliceImage, b: &SliceImage) -> f64 {
    let (alo, ahi) = a.min_max();
    let (blo, bhi) = b.min_max();
    let range = ahi.max(bhi) - alo.min(blo);
    if range > 0.0 {
        range
    } else {
        1.0
    }
}

/// Valid-region separable filtering of a square image.
fn filter_valid(pixels: &[f64], size: usize, taps: &[f64; WINDOW]) -> Vec<f64> {
    let out_size = size + 1 - WINDOW;
    let mut rows = vec![0.0; size * out_size];
    for r in 0..size {
        let line = &pixels[r * size..(r + 1) * size];
        for c in 0..out_size {
            rows[r * out_size + c] = taps.iter().zip(&line[c..c + WINDOW]).map(|(t, p)| t * p).sum();
        }
    }
    let mut out = vec![0.0; out_size * out_size];
    for r in 0..out_size {
        for c in 0..out_size {
            out[r * out_size + c] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * rows[(r + k) * out_size + c])
                .sum();
        }
    }
    out
}

/// SSIM of two equally sized images using the joint dynamic range.
pub fn ssim(a: &SliceImage, b: &SliceImage) -> Result<f64> {
    ssim_with_range(a, b, joint_range(a, b))
}

pub fn ssim_with_range(a: &SliceImage, b: &SliceImage, dynamic_range: f64) -> Result<f64> {
    if a.size() != b.size() {
        return Err(Error::Contract(format!(
            "ssim of {}x{} and {}x{} images",
            a.size(),
            a.size(),
            b.size(),
            b.size()
        )));
    }
    let size = a.size();
    if size < WINDOW {
        return Err(Error::Contract(format!(
            "ssim needs images of at least {WINDOW}x{WINDOW} pixels"
        )));
    }
    let c1 = (K1 * dynamic_range).powi(2);
    let c2 = (K2 * dynamic_range).powi(2);
    let taps = gaussian_taps();
    let (pa, pb) = (a.pixels(), b.pixels());
    let aa: Vec<f64> = pa.iter().map(|x| x * x).collect();
    let bb: Vec<f64> = pb.iter().map(|x| x * x).collect();
    let ab: Vec<f64> = pa.iter().zip(pb).map(|(x, y)| x * y).collect();
    let mu_a = filter_valid(pa, size, &taps);
    let mu_b = filter_valid(pb, size, &taps);
    let e_aa = filter_valid(&aa, size, &taps);
    let e_bb = filter_valid(&bb, size, &taps);
    let e_ab = filter_valid(&ab, size, &taps);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|k| {
            let (ma, mb) = (mu_a[k], mu_b[k]);
            let var_a = e_aa[k] - ma * ma;
            let var_b = e_bb[k] - mb * mb;
            let cov = e_ab[k] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2))
        })
        .sum();
    Ok(total / n as f64)
}
