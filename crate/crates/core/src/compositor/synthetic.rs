//! Procedurally drawn tools, distractors and backgrounds.
//!
//! Used for fixtures and smoke runs where no photographed cutouts exist.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Cutout, ForegroundAsset};
use crate::imaging::FloatImage;

pub const TOY_KEYPOINTS: [&str; 2] = ["tip", "handle"];

fn random_color(rng: &mut impl Rng) -> [f32; 3] {
    [rng.random_range(20.0..235.0), rng.random_range(20.0..235.0), rng.random_range(20.0..235.0)]
}

/// A screwdriver-like cutout: a striped handle and a grey shaft along the
/// x axis. Keypoints `tip` (shaft end) and `handle` (handle end).
pub fn toy_tool(seed: u64, tool_name: &str) -> ForegroundAsset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let handle_len = rng.random_range(40..60usize);
    let handle_thick = rng.random_range(16..26usize);
    let shaft_len = rng.random_range(45..70usize);
    let shaft_thick = rng.random_range(4..8usize);
    let margin = 4;
    let width = margin * 2 + handle_len + shaft_len;
    let height = margin * 2 + handle_thick;
    let cy = height as f64 / 2.0 - 0.5;
    let handle_color = random_color(&mut rng);
    let stripe_color = random_color(&mut rng);
    let stripe_period = rng.random_range(5..10usize);
    let grey: f32 = rng.random_range(150.0..210.0);

    let mut color = FloatImage::new(width, height, 3);
    let mut alpha = FloatImage::new(width, height, 1);
    let x_handle = margin;
    let x_shaft = margin + handle_len;
    let x_end = x_shaft + shaft_len;
    for y in 0..height {
        let dy = (y as f64 - cy).abs();
        for x in 0..width {
            let (inside, rgb) = if x >= x_handle && x < x_shaft && dy <= handle_thick as f64 / 2.0 {
                let stripe = ((x - x_handle) / stripe_period) % 2 == 0;
                let base = if stripe { handle_color } else { stripe_color };
                // cheap shading across the handle
                let shade = 1.0 - 0.35 * (dy / (handle_thick as f64 / 2.0)) as f32;
                (true, base.map(|v| v * shade))
            } else if x >= x_shaft && x < x_end && dy <= shaft_thick as f64 / 2.0 {
                let taper = if x + 6 >= x_end { 0.8 } else { 1.0 };
                (true, [grey * taper, grey * taper, (grey + 15.0).min(255.0) * taper])
            } else {
                (false, [0.0; 3])
            };
            if inside {
                alpha.set(x, y, 0, 1.0);
                for c in 0..3 {
                    color.set(x, y, c, rgb[c]);
                }
            }
        }
    }
    let cut = Cutout::new(color, alpha).expect("non-empty toy cutout");
    let keypoints = vec![
        ("tip".to_string(), (x_end - 1) as f64, cy.round()),
        ("handle".to_string(), x_handle as f64, cy.round()),
    ];
    ForegroundAsset::new(cut, keypoints, tool_name).expect("toy keypoints inside mask")
}

/// A filled ellipse of random colour and aspect ratio.
pub fn toy_distractor(seed: u64) -> Cutout {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD15C);
    let w = rng.random_range(30..80usize);
    let h = rng.random_range(20..60usize);
    let rgb = random_color(&mut rng);
    let (rx, ry) = (w as f64 / 2.0, h as f64 / 2.0);
    let inside = |x: usize, y: usize| {
        let dx = (x as f64 + 0.5 - rx) / rx;
        let dy = (y as f64 + 0.5 - ry) / ry;
        dx * dx + dy * dy <= 1.0
    };
    let alpha = FloatImage::from_fn(w, h, 1, |x, y, _| if inside(x, y) { 1.0 } else { 0.0 });
    let color = FloatImage::from_fn(w, h, 3, |x, y, c| if inside(x, y) { rgb[c] } else { 0.0 });
    Cutout::new(color, alpha).expect("non-empty ellipse")
}

/// Smooth colour gradients plus low-frequency waves and pixel noise.
pub fn toy_background(seed: u64, size: usize) -> FloatImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xBA5E);
    let c0 = random_color(&mut rng);
    let c1 = random_color(&mut rng);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let waves: Vec<(f64, f64, f64, f32)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.01..0.15),
                rng.random_range(0.01..0.15),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(5.0..30.0),
            )
        })
        .collect();
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0015E);
    let mut img = FloatImage::new(size, size, 3);
    for y in 0..size {
        for x in 0..size {
            let t = (((x as f64 * dx + y as f64 * dy) / size as f64) * 0.5 + 0.5).clamp(0.0, 1.0) as f32;
            let wave: f32 = waves
                .iter()
                .map(|&(fx, fy, ph, amp)| amp * ((x as f64 * fx + y as f64 * fy + ph).sin() as f32))
                .sum();
            for c in 0..3 {
                let n: f32 = noise_rng.random_range(-8.0..8.0);
                img.set(x, y, c, (c0[c] * (1.0 - t) + c1[c] * t + wave + n).clamp(0.0, 255.0));
            }
        }
    }
    img
}
