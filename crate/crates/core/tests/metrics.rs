//! Image metrics against brute-force references.

mod common;

use cbct_motion::eval::ssim;
use cbct_motion::image::SliceImage;
use cbct_motion::iqm::{entropy_iqm, total_variation};
use common::oracles::{entropy_brute, random_image, ssim_brute, tv_brute};

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * b.abs().max(1.0)
}

#[test]
fn ssim_matches_brute_force_on_checkerboards() {
    let board = |phase: usize, contrast: f64| {
        let px = (0..256)
            .map(|k| if (k / 16 / 2 + k % 16 / 2 + phase) % 2 == 0 { contrast } else { 0.0 })
            .collect();
        SliceImage::from_pixels(16, 16.0, 0.0, px).unwrap()
    };
    for (a, b) in [(board(0, 1.0), board(0, 1.0)), (board(0, 1.0), board(1, 1.0)), (board(0, 1.0), board(0, 0.5))] {
        let fast = ssim(&a, &b).unwrap();
        assert!(close(fast, ssim_brute(&a, &b)), "{fast}");
    }
    let a = board(0, 1.0);
    assert!(close(ssim(&a, &a).unwrap(), 1.0));
}

#[test]
fn ssim_matches_brute_force_on_random_images() {
    for seed in 0..5 {
        let a = random_image(24, seed, 0.0, 1.0);
        let b = random_image(24, seed + 100, -0.5, 2.0);
        let noisy = SliceImage::from_pixels(
            24,
            100.0,
            0.0,
            a.pixels().iter().zip(b.pixels()).map(|(x, y)| x + 0.1 * y).collect(),
        )
        .unwrap();
        for other in [&b, &noisy] {
            let fast = ssim(&a, other).unwrap();
            assert!(close(fast, ssim_brute(&a, other)), "seed {seed}: {fast}");
        }
    }
}

#[test]
fn entropy_matches_brute_force() {
    for seed in 0..5 {
        let img = random_image(32, seed, -1.0, 3.0);
        for bins in [2, 16, 256] {
            let fast = entropy_iqm(&img, bins).unwrap();
            assert!(close(fast, entropy_brute(&img, bins)), "seed {seed} bins {bins}");
        }
    }
    let flat = SliceImage::zeros(8, 10.0, 0.0);
    assert_eq!(entropy_iqm(&flat, 256).unwrap(), 0.0);
}

#[test]
fn entropy_of_two_equal_halves_is_ln2() {
    let px = (0..64).map(|k| if k < 32 { 0.0 } else { 1.0 }).collect();
    let img = SliceImage::from_pixels(8, 8.0, 0.0, px).unwrap();
    assert!(close(entropy_iqm(&img, 256).unwrap(), std::f64::consts::LN_2));
}

#[test]
fn total_variation_matches_brute_force() {
    for seed in 0..5 {
        let img = random_image(32, seed, -1.0, 3.0);
        let fast = total_variation(&img).unwrap();
        assert!(close(fast, tv_brute(&img)), "seed {seed}");
    }
}

#[test]
fn total_variation_of_a_step_edge() {
    // one vertical edge of height 2 across 4 rows
    let px = (0..16).map(|k| if k % 4 < 2 { 0.0 } else { 2.0 }).collect();
    let img = SliceImage::from_pixels(4, 4.0, 0.0, px).unwrap();
    assert!(close(total_variation(&img).unwrap(), 8.0));
}
