//! Label-consistent image augmentation.
//!
//! Geometric operations build a single projective map that warps the image
//! and transports keypoints and bounding box; photometric operations touch
//! pixels only. Targets are rendered afterwards from the transported labels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::SampleAnnotation;
use crate::error::{Error, Result};
use crate::imaging::{gaussian_blur, warp, FloatImage, Homography};

/// Enable flags and sampling ranges. Every range is `[low, high]`; equal
/// bounds give a fixed value. Translation and perspective jitter are
/// fractions of the image size; blur radius is the Gaussian sigma in pixels;
/// intensities are on the 0..255 scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    pub affine: bool,
    pub rotation_deg: [f64; 2],
    pub translate_x: [f64; 2],
    pub translate_y: [f64; 2],
    pub scale: [f64; 2],
    pub shear_deg: [f64; 2],
    pub perspective: bool,
    pub perspective_jitter: [f64; 2],
    pub blur: bool,
    pub blur_radius: [f64; 2],
    pub add: bool,
    pub add_value: [f64; 2],
    pub multiply: bool,
    pub multiply_value: [f64; 2],
    pub noise: bool,
    pub noise_sigma: [f64; 2],
    /// Geometric draws that push every keypoint off-frame are retried up to
    /// this many times.
    pub max_retries: usize,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            affine: true,
            rotation_deg: [-25.0, 25.0],
            translate_x: [-0.1, 0.1],
            translate_y: [-0.1, 0.1],
            scale: [0.8, 1.2],
            shear_deg: [-8.0, 8.0],
            perspective: true,
            perspective_jitter: [0.0, 0.05],
            blur: true,
            blur_radius: [0.0, 2.0],
            add: true,
            add_value: [-20.0, 20.0],
            multiply: true,
            multiply_value: [0.8, 1.2],
            noise: true,
            noise_sigma: [0.0, 8.0],
            max_retries: 50,
        }
    }
}

impl AugmentationConfig {
    /// Every operation switched off.
    pub fn disabled() -> Self {
        Self {
            affine: false,
            perspective: false,
            blur: false,
            add: false,
            multiply: false,
            noise: false,
            ..Self::default()
        }
    }

    pub fn any_enabled(&self) -> bool {
        self.affine || self.perspective || self.blur || self.add || self.multiply || self.noise
    }

    pub fn is_geometric(&self) -> bool {
        self.affine || self.perspective
    }

    pub fn validate(&self) -> Result<()> {
        let check = |enabled: bool, name: &str, r: [f64; 2], min: f64| -> Result<()> {
            if enabled && !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1] && r[0] >= min) {
                return Err(Error::Config(format!("augmentation range `{name}` {r:?} is invalid")));
            }
            Ok(())
        };
        check(self.affine, "rotation_deg", self.rotation_deg, f64::MIN)?;
        check(self.affine, "translate_x", self.translate_x, f64::MIN)?;
        check(self.affine, "translate_y", self.translate_y, f64::MIN)?;
        check(self.affine, "scale", self.scale, f64::MIN_POSITIVE)?;
        check(self.affine, "shear_deg", self.shear_deg, -89.0)?;
        if self.affine && self.shear_deg[1] >= 89.0 {
            return Err(Error::Config("shear must stay within ±89°".into()));
        }
        check(self.perspective, "perspective_jitter", self.perspective_jitter, 0.0)?;
        if self.perspective && self.perspective_jitter[1] >= 0.25 {
            return Err(Error::Config("perspective jitter must be below 0.25".into()));
        }
        check(self.blur, "blur_radius", self.blur_radius, 0.0)?;
        check(self.add, "add_value", self.add_value, f64::MIN)?;
        check(self.multiply, "multiply_value", self.multiply_value, 0.0)?;
        check(self.noise, "noise_sigma", self.noise_sigma, 0.0)?;
        if self.is_geometric() && self.max_retries == 0 {
            return Err(Error::Config("max_retries must be positive".into()));
        }
        Ok(())
    }
}

fn draw(rng: &mut impl Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..=r[1])
    }
}

/// Samples the geometric transform (source → augmented pixel coordinates).
fn sample_geometry(rng: &mut impl Rng, config: &AugmentationConfig, w: f64, h: f64) -> Option<Homography> {
    let mut map = Homography::IDENTITY;
    if config.affine {
        let rot = draw(rng, config.rotation_deg).to_radians();
        let tx = draw(rng, config.translate_x) * w;
        let ty = draw(rng, config.translate_y) * h;
        let s = draw(rng, config.scale);
        let shear = draw(rng, config.shear_deg).to_radians().tan();
        let (cx, cy) = (w / 2.0, h / 2.0);
        let (c, sn) = (rot.cos(), rot.sin());
        // R·S·Shear about the image centre, then translate
        let linear = Homography([[c * s, (c * shear - sn) * s, 0.0], [sn * s, (sn * shear + c) * s, 0.0], [0.0, 0.0, 1.0]]);
        let about_centre = Homography::translation(cx + tx, cy + ty)
            .then_after(&linear)
            .then_after(&Homography::translation(-cx, -cy));
        map = about_centre.then_after(&map);
    }
    if config.perspective {
        let corners = [(0.0, 0.0), (w, 0.0), (w, h), (0.0, h)];
        let mut moved = corners;
        for p in &mut moved {
            p.0 += draw(rng, config.perspective_jitter) * w * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            p.1 += draw(rng, config.perspective_jitter) * h * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        }
        let persp = Homography::from_correspondences(corners, moved)?;
        map = persp.then_after(&map);
    }
    Some(map)
}

/// Moves keypoints and bbox through `map`. Keypoints leaving the frame become
/// invisible. Returns `None` when no keypoint stays in frame or the bbox
/// collapses.
fn transport(annotation: &SampleAnnotation, map: &Homography) -> Option<SampleAnnotation> {
    let mut out = annotation.clone();
    let mut any_in_frame = annotation.keypoints.is_empty();
    for kp in &mut out.keypoints {
        let (x, y) = map.apply(kp.x, kp.y);
        if !x.is_finite() || !y.is_finite() {
            return None;
        }
        kp.x = x;
        kp.y = y;
        let inside = annotation.in_frame(x, y);
        kp.visible &= inside;
        any_in_frame |= inside;
    }
    if !any_in_frame {
        return None;
    }
    let [x0, y0, x1, y1] = annotation.bbox;
    let pts = [(x0, y0), (x1, y0), (x0, y1), (x1, y1)].map(|(x, y)| map.apply(x, y));
    let (w, h) = (annotation.width as f64, annotation.height as f64);
    let bx0 = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min).clamp(0.0, w);
    let by0 = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min).clamp(0.0, h);
    let bx1 = pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max).clamp(0.0, w);
    let by1 = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max).clamp(0.0, h);
    if !(bx0 < bx1 && by0 < by1) {
        return None;
    }
    out.bbox = [bx0, by0, bx1, by1];
    Some(out)
}

/// Augments one sample. The image must match the annotation's size.
/// Deterministic for a given `seed`.
pub fn augment(
    image: &FloatImage,
    annotation: &SampleAnnotation,
    config: &AugmentationConfig,
    seed: u64,
) -> Result<(FloatImage, SampleAnnotation)> {
    config.validate()?;
    let (w, h) = image.dims();
    if (w as u32, h as u32) != (annotation.width, annotation.height) {
        return Err(Error::Shape(format!(
            "image {w}x{h} vs annotation {}x{}",
            annotation.width, annotation.height
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut img, ann) = if config.is_geometric() {
        let mut accepted = None;
        for _ in 0..config.max_retries {
            let Some(map) = sample_geometry(&mut rng, config, w as f64, h as f64) else {
                continue;
            };
            if let Some(ann) = transport(annotation, &map) {
                accepted = Some((map, ann));
                break;
            }
        }
        let (map, ann) = accepted.ok_or_else(|| {
            Error::Rejected(format!("augmentation left no keypoint in frame after {} draws", config.max_retries))
        })?;
        (warp(image, &map, w, h, 0.0)?, ann)
    } else {
        (image.clone(), annotation.clone())
    };

    if config.blur {
        let sigma = draw(&mut rng, config.blur_radius);
        img = gaussian_blur(&img, sigma);
    }
    if config.multiply {
        let m = draw(&mut rng, config.multiply_value) as f32;
        img.data.iter_mut().for_each(|v| *v *= m);
    }
    if config.add {
        let a = draw(&mut rng, config.add_value) as f32;
        img.data.iter_mut().for_each(|v| *v += a);
    }
    if config.noise {
        let sigma = draw(&mut rng, config.noise_sigma);
        if sigma > 0.0 {
            let normal = Normal::new(0.0f32, sigma as f32).expect("finite sigma");
            img.data.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
        }
    }
    img.clamp_intensity();
    Ok((img, ann))
}
