//! Brute-force reference computations written directly from the metric
//! definitions, without sharing code with the library.

use cbct_motion::geometry::ScanGeometry;
use cbct_motion::image::SliceImage;
use cbct_motion::motion::MotionTrajectory;

/// Detector offset (mm, relative to the principal point) of `x` seen from
/// view angle `deg`, by intersecting the source ray with the detector
/// plane.
fn detector_mm(g: &ScanGeometry, deg: f64, x: [f64; 3]) -> [f64; 2] {
    let (s, c) = deg.to_radians().sin_cos();
    let source = [-s * g.source_axis_distance, c * g.source_axis_distance, 0.0];
    let axis = [s, -c, 0.0];
    let u_dir = [c, s, 0.0];
    let v_dir = [0.0, 0.0, 1.0];
    let ray = [x[0] - source[0], x[1] - source[1], x[2] - source[2]];
    let dot = |a: [f64; 3], b: [f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let scale = g.source_detector_distance / dot(ray, axis);
    [scale * dot(ray, u_dir), scale * dot(ray, v_dir)]
}

/// Mean over views and points of the squared detector displacement (mm²)
/// caused by moving each point with the view's rigid motion.
pub fn rpe_oracle(g: &ScanGeometry, points: &[[f64; 3]], traj: &MotionTrajectory) -> f64 {
    let mut total = 0.0;
    for view in 0..g.n_views {
        let deg = g.start_angle + view as f64 * g.angular_step();
        let m = traj.get(view);
        let (r, t) = (m.rotation(), m.translation());
        for x in points {
            let moved = [
                r[(0, 0)] * x[0] + r[(0, 1)] * x[1] + r[(0, 2)] * x[2] + t[0],
                r[(1, 0)] * x[0] + r[(1, 1)] * x[1] + r[(1, 2)] * x[2] + t[1],
                r[(2, 0)] * x[0] + r[(2, 1)] * x[1] + r[(2, 2)] * x[2] + t[2],
            ];
            let a = detector_mm(g, deg, *x);
            let b = detector_mm(g, deg, moved);
            total += (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
        }
    }
    total / (g.n_views * points.len()) as f64
}

/// SSIM evaluated window by window with explicit 2-D Gaussian weights.
pub fn ssim_brute(a: &SliceImage, b: &SliceImage) -> f64 {
    const W: usize = 11;
    let n = a.size();
    let (pa, pb) = (a.pixels(), b.pixels());
    let lo = pa.iter().chain(pb).cloned().fold(f64::INFINITY, f64::min);
    let hi = pa.iter().chain(pb).cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = if hi > lo { hi - lo } else { 1.0 };
    let (c1, c2) = ((0.01 * range).powi(2), (0.03 * range).powi(2));
    let mut weights = [[0.0; W]; W];
    let mut wsum = 0.0;
    for (i, row) in weights.iter_mut().enumerate() {
        for (j, w) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *w = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            wsum += *w;
        }
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for r0 in 0..=n - W {
        for c0 in 0..=n - W {
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..W {
                for j in 0..W {
                    let w = weights[i][j] / wsum;
                    ma += w * a.get(r0 + i, c0 + j);
                    mb += w * b.get(r0 + i, c0 + j);
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..W {
                for j in 0..W {
                    let w = weights[i][j] / wsum;
                    let (x, y) = (a.get(r0 + i, c0 + j) - ma, b.get(r0 + i, c0 + j) - mb);
                    va += w * x * x;
                    vb += w * y * y;
                    cov += w * x * y;
                }
            }
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    total / count as f64
}

/// Histogram entropy (nats) with bins placed by explicit edge comparison.
pub fn entropy_brute(img: &SliceImage, bins: usize) -> f64 {
    let px = img.pixels();
    let lo = px.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = px.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return 0.0;
    }
    let width = (hi - lo) / bins as f64;
    let mut h = 0.0;
    for b in 0..bins {
        let (left, right) = (lo + b as f64 * width, lo + (b + 1) as f64 * width);
        let count = px
            .iter()
            .filter(|v| **v >= left && (**v < right || b == bins - 1))
            .count();
        if count > 0 {
            let p = count as f64 / px.len() as f64;
            h -= p * p.ln();
        }
    }
    h
}

/// Isotropic total variation summed pixel by pixel, with zero differences
/// past the last row and column.
pub fn tv_brute(img: &SliceImage) -> f64 {
    let n = img.size();
    let mut tv = 0.0;
    for r in 0..n {
        for c in 0..n {
            let right = if c + 1 < n { img.get(r, c + 1) } else { img.get(r, c) };
            let down = if r + 1 < n { img.get(r + 1, c) } else { img.get(r, c) };
            tv += (right - img.get(r, c)).hypot(down - img.get(r, c));
        }
    }
    tv
}

/// Uniform random pixels in `[lo, hi)` from a simple seeded generator.
pub fn random_image(size: usize, seed: u64, lo: f64, hi: f64) -> SliceImage {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let px = (0..size * size).map(|_| rng.gen_range(lo..hi)).collect();
    SliceImage::from_pixels(size, 100.0, 0.0, px).unwrap()
}
