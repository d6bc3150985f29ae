mod common;

use common::*;
use kpforge::compositor::{alpha_blend, laplacian_blend, poisson_blend, BlendMode, blend_with};
use kpforge::imaging::FloatImage;
use rand::Rng;

#[test]
fn poisson_matches_dense_direct_solve() {
    let mut r = rng(5);
    for trial in 0..3 {
        let fg = random_image(&mut r, 32, 32, 3);
        let bg = random_image(&mut r, 32, 32, 3);
        let mask = disc_mask(32, 32, r.random_range(12.0..20.0), r.random_range(12.0..20.0), r.random_range(6.0..12.0));
        let out = poisson_blend(&fg, &mask, &bg).unwrap();
        for c in 0..3 {
            let want = dense_poisson(&fg, &mask, &bg, c);
            let worst = (0..32 * 32)
                .map(|i| (out.get(i % 32, i / 32, c) - want.get(i % 32, i / 32, 0)).abs())
                .fold(0.0f32, f32::max);
            assert!(worst < 1e-4, "trial {trial} channel {c}: max deviation {worst}");
        }
    }
}

#[test]
fn poisson_constant_into_constant() {
    let fg = FloatImage::filled(48, 40, 3, 200.0);
    let bg = FloatImage::filled(48, 40, 3, 37.0);
    let mask = disc_mask(48, 40, 24.0, 20.0, 12.0);
    let out = poisson_blend(&fg, &mask, &bg).unwrap();
    let worst = out.data.iter().map(|v| (v - 37.0).abs()).fold(0.0f32, f32::max);
    assert!(worst < 1e-3, "{worst}");
}

#[test]
fn laplacian_blend_identities() {
    let mut r = rng(8);
    let a = random_image(&mut r, 40, 36, 3);
    let b = random_image(&mut r, 40, 36, 3);
    let mask = disc_mask(40, 36, 20.0, 18.0, 9.0);
    let same = laplacian_blend(&a, &mask, &a, 4).unwrap();
    let worst = same.data.iter().zip(&a.data).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
    assert!(worst < 1e-3, "{worst}");
    let one = laplacian_blend(&a, &mask, &b, 1).unwrap();
    let alpha = alpha_blend(&a, &mask, &b).unwrap();
    let worst = one.data.iter().zip(&alpha.data).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
    assert!(worst < 1e-6, "{worst}");
}

#[test]
fn all_modes_leave_far_field_untouched() {
    let mut r = rng(21);
    let (w, h) = (96, 96);
    let fg = random_image(&mut r, w, h, 3);
    let bg = random_image(&mut r, w, h, 3);
    let mask = disc_mask(w, h, 30.0, 30.0, 8.0);
    for mode in BlendMode::ALL {
        let out = blend_with(mode, &fg, &mask, &bg).unwrap();
        // Laplacian pyramids smear the mask by a few pixels per level
        for y in 0..h {
            for x in 0..w {
                let far = (x as f64 - 30.0).hypot(y as f64 - 30.0) > 8.0 + 40.0;
                if far {
                    for c in 0..3 {
                        assert_eq!(out.get(x, y, c).to_bits(), bg.get(x, y, c).to_bits(), "{mode:?} at ({x}, {y})");
                    }
                }
            }
        }
    }
}
