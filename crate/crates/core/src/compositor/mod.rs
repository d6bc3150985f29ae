//! Cut-and-paste generation of labelled training images.
//!
//! A foreground cutout is warped onto a background with a random similarity
//! transform and pasted with one of three blending modes; keypoint labels are
//! carried through the same transform. Each composite can additionally get a
//! copy with a distractor pasted in front of it or with its background
//! replaced.

mod blend;
pub mod synthetic;

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use blend::{
    alpha_blend, conjugate_gradient, erode, laplacian_blend, poisson_blend, poisson_blend_with, PoissonOptions,
    PoissonSystem,
};

use crate::dataset::{write_manifest, Keypoint, KeypointSchema, SampleAnnotation, Source};
use crate::error::{Error, Result};
use crate::imaging::{load_rgba, mask_bbox, warp, FloatImage, Homography};

/// Output canvas side length; matches the network input.
pub const CANVAS_SIZE: usize = 224;
/// Pyramid depth used for Laplacian blending.
pub const DEFAULT_LAPLACIAN_LEVELS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlendMode {
    Alpha,
    Poisson,
    Laplacian,
}

impl BlendMode {
    pub const ALL: [BlendMode; 3] = [BlendMode::Alpha, BlendMode::Poisson, BlendMode::Laplacian];

    pub fn random(rng: &mut impl Rng) -> Self {
        Self::ALL[rng.random_range(0..3)]
    }
}

/// Colour image with a `[0, 1]` transparency mask.
#[derive(Debug, Clone)]
pub struct Cutout {
    pub color: FloatImage,
    pub alpha: FloatImage,
}

impl Cutout {
    pub fn new(color: FloatImage, alpha: FloatImage) -> Result<Self> {
        if color.dims() != alpha.dims() || color.channels != 3 || alpha.channels != 1 {
            return Err(Error::Shape("cutout colour and alpha planes differ in size".into()));
        }
        if mask_bbox(&alpha).is_none() {
            return Err(Error::Config("cutout mask is empty".into()));
        }
        Ok(Self { color, alpha })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (color, alpha) = load_rgba(path)?;
        Self::new(color, alpha)
    }

    pub fn mask_bbox(&self) -> [f64; 4] {
        mask_bbox(&self.alpha).expect("validated on construction")
    }

    /// Length of the longer side of the mask bounding box.
    pub fn long_side(&self) -> f64 {
        let b = self.mask_bbox();
        (b[2] - b[0]).max(b[3] - b[1])
    }
}

/// A tool cutout with keypoints in asset pixel coordinates.
#[derive(Debug, Clone)]
pub struct ForegroundAsset {
    pub cutout: Cutout,
    pub keypoints: Vec<(String, f64, f64)>,
    pub tool_name: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AssetSidecar {
    tool: String,
    keypoints: Vec<SidecarKeypoint>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SidecarKeypoint {
    name: String,
    x: f64,
    y: f64,
}

impl ForegroundAsset {
    pub fn new(cutout: Cutout, keypoints: Vec<(String, f64, f64)>, tool_name: impl Into<String>) -> Result<Self> {
        let [x0, y0, x1, y1] = cutout.mask_bbox();
        for (name, x, y) in &keypoints {
            // bbox is exclusive on the max side; keypoints are continuous
            if !(*x >= x0 - 0.5 && *x <= x1 - 0.5 && *y >= y0 - 0.5 && *y <= y1 - 0.5) {
                return Err(Error::Config(format!("asset keypoint `{name}` ({x}, {y}) outside mask bounds")));
            }
        }
        Ok(Self {
            cutout,
            keypoints,
            tool_name: tool_name.into(),
        })
    }

    /// Loads `NAME.png` (RGBA) and its sidecar `NAME.json`.
    pub fn load(png: &Path) -> Result<Self> {
        let cutout = Cutout::load(png)?;
        let sidecar_path = png.with_extension("json");
        let text = fs::read_to_string(&sidecar_path).map_err(|e| Error::io(&sidecar_path, e))?;
        let sidecar: AssetSidecar = serde_json::from_str(&text)?;
        let keypoints = sidecar.keypoints.into_iter().map(|k| (k.name, k.x, k.y)).collect();
        Self::new(cutout, keypoints, sidecar.tool)
    }

    /// Writes the asset as `NAME.png` plus sidecar `NAME.json`.
    pub fn save(&self, png: &Path) -> Result<()> {
        let (w, h) = self.cutout.color.dims();
        let mut img = image::RgbaImage::new(w as u32, h as u32);
        for (x, y, px) in img.enumerate_pixels_mut() {
            let (xu, yu) = (x as usize, y as usize);
            let c = |i| self.cutout.color.get(xu, yu, i).round().clamp(0.0, 255.0) as u8;
            let a = (self.cutout.alpha.get(xu, yu, 0) * 255.0).round().clamp(0.0, 255.0) as u8;
            *px = image::Rgba([c(0), c(1), c(2), a]);
        }
        img.save(png)?;
        let sidecar = AssetSidecar {
            tool: self.tool_name.clone(),
            keypoints: self
                .keypoints
                .iter()
                .map(|(name, x, y)| SidecarKeypoint {
                    name: name.clone(),
                    x: *x,
                    y: *y,
                })
                .collect(),
        };
        let path = png.with_extension("json");
        fs::write(&path, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(&path, e))
    }
}

/// Pose and blending parameters of one composite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompositeSpec {
    pub rotation_deg: f64,
    pub scale: f64,
    pub translation: (f64, f64),
    pub blend_mode: BlendMode,
    pub seed: u64,
}

impl CompositeSpec {
    pub fn identity(blend_mode: BlendMode) -> Self {
        Self {
            rotation_deg: 0.0,
            scale: 1.0,
            translation: (0.0, 0.0),
            blend_mode,
            seed: 0,
        }
    }
}

/// Affine map from asset coordinates to canvas coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineMap(pub [[f64; 3]; 2]);

impl AffineMap {
    /// Rotation and scale about `pivot`, followed by `spec.translation`.
    pub fn from_spec(spec: &CompositeSpec, pivot: (f64, f64)) -> Result<Self> {
        if !(spec.scale > 0.0) || !spec.scale.is_finite() {
            return Err(Error::Config(format!("scale must be positive, got {}", spec.scale)));
        }
        let theta = spec.rotation_deg.to_radians();
        let (s, c) = theta.sin_cos();
        let (a, b, cc, d) = (spec.scale * c, -spec.scale * s, spec.scale * s, spec.scale * c);
        let (px, py) = pivot;
        let tx = px - (a * px + b * py) + spec.translation.0;
        let ty = py - (cc * px + d * py) + spec.translation.1;
        Ok(AffineMap([[a, b, tx], [cc, d, ty]]))
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.0;
        (m[0][0] * x + m[0][1] * y + m[0][2], m[1][0] * x + m[1][1] * y + m[1][2])
    }

    pub fn determinant(&self) -> f64 {
        self.0[0][0] * self.0[1][1] - self.0[0][1] * self.0[1][0]
    }

    pub fn homography(&self) -> Homography {
        Homography::from_affine(self.0)
    }
}

fn canvas_pivot(width: usize, height: usize) -> (f64, f64) {
    (width as f64 / 2.0, height as f64 / 2.0)
}

/// A generated image with its label and the foreground mask used to paste
/// the tool.
#[derive(Debug, Clone)]
pub struct Composite {
    pub image: FloatImage,
    pub mask: FloatImage,
    pub annotation: SampleAnnotation,
}

/// Pastes `fg` (with soft `mask`) onto `bg` using `mode`.
pub fn blend_with(mode: BlendMode, fg: &FloatImage, mask: &FloatImage, bg: &FloatImage) -> Result<FloatImage> {
    match mode {
        BlendMode::Alpha => alpha_blend(fg, mask, bg),
        BlendMode::Poisson => {
            let binary = erode(mask);
            if mask_bbox(&binary).is_none() {
                return alpha_blend(fg, mask, bg);
            }
            let mut out = poisson_blend(fg, &binary, bg)?;
            out.clamp_intensity();
            Ok(out)
        }
        BlendMode::Laplacian => {
            // pre-mixing keeps the empty area around the cutout from bleeding
            // dark fringes into the seam
            let filled = alpha_blend(fg, mask, bg)?;
            laplacian_blend(&filled, mask, bg, DEFAULT_LAPLACIAN_LEVELS)
        }
    }
}

/// Warps `asset` onto `background` according to `spec` and transports the
/// keypoints. Fails with [`Error::Rejected`] when no keypoint lands on the
/// canvas or the tool is entirely off-canvas.
pub fn compose_sample(asset: &ForegroundAsset, background: &FloatImage, spec: &CompositeSpec) -> Result<Composite> {
    let (w, h) = background.dims();
    let map = AffineMap::from_spec(spec, canvas_pivot(w, h))?;
    let hmg = map.homography();
    let fg = warp(&asset.cutout.color, &hmg, w, h, 0.0)?;
    let mask = warp(&asset.cutout.alpha, &hmg, w, h, 0.0)?;

    let keypoints: Vec<Keypoint> = asset
        .keypoints
        .iter()
        .map(|(name, x, y)| {
            let (kx, ky) = map.apply(*x, *y);
            Keypoint {
                name: name.clone(),
                x: kx,
                y: ky,
                visible: kx >= 0.0 && ky >= 0.0 && kx < w as f64 && ky < h as f64,
            }
        })
        .collect();
    if !keypoints.iter().any(|k| k.visible) {
        return Err(Error::Rejected("all keypoints off-canvas".into()));
    }
    let bbox = mask_bbox(&mask).ok_or_else(|| Error::Rejected("tool entirely off-canvas".into()))?;
    let image = blend_with(spec.blend_mode, &fg, &mask, background)?;
    let annotation = SampleAnnotation {
        image_path: String::new(),
        width: w as u32,
        height: h as u32,
        bbox,
        tool_name: asset.tool_name.clone(),
        source: Source::Composite2d,
        keypoints,
    };
    Ok(Composite { image, mask, annotation })
}

/// Random pose ranges for composites.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpecSampler {
    /// Long side of the pasted tool as a fraction of the canvas width.
    pub min_relative_size: f64,
    pub max_relative_size: f64,
    pub max_attempts: usize,
}

impl Default for SpecSampler {
    fn default() -> Self {
        Self {
            min_relative_size: 0.3,
            max_relative_size: 1.0,
            max_attempts: 100,
        }
    }
}

impl SpecSampler {
    /// Uniform rotation, uniform relative size, and a uniformly placed tool
    /// centre, resampled until at least one keypoint lands on the canvas.
    pub fn sample(&self, rng: &mut impl Rng, asset: &ForegroundAsset, width: usize, height: usize) -> Result<CompositeSpec> {
        let pivot = canvas_pivot(width, height);
        let [x0, y0, x1, y1] = asset.cutout.mask_bbox();
        let centre = ((x0 + x1 - 1.0) / 2.0, (y0 + y1 - 1.0) / 2.0);
        for _ in 0..self.max_attempts {
            let rotation_deg = rng.random_range(0.0..360.0);
            let rel = rng.random_range(self.min_relative_size..=self.max_relative_size);
            let scale = rel * width as f64 / asset.cutout.long_side();
            let target = (rng.random_range(0.0..width as f64), rng.random_range(0.0..height as f64));
            let mut spec = CompositeSpec {
                rotation_deg,
                scale,
                translation: (0.0, 0.0),
                blend_mode: BlendMode::random(rng),
                seed: rng.next_u64(),
            };
            let (cx, cy) = AffineMap::from_spec(&spec, pivot)?.apply(centre.0, centre.1);
            spec.translation = (target.0 - cx, target.1 - cy);
            let map = AffineMap::from_spec(&spec, pivot)?;
            let on_canvas = asset.keypoints.iter().any(|(_, x, y)| {
                let (kx, ky) = map.apply(*x, *y);
                kx >= 0.0 && ky >= 0.0 && kx < width as f64 && ky < height as f64
            });
            if on_canvas {
                return Ok(spec);
            }
        }
        Err(Error::Rejected(format!("no on-canvas placement after {} attempts", self.max_attempts)))
    }
}

/// Which occlusion variant [`augment_with_distractors`] produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OcclusionVariant {
    Distractor,
    BackgroundSwap,
}

/// Pastes `distractor` in front of the image with `spec`; keypoints whose
/// pixel ends up covered (mask ≥ 0.5) become invisible.
pub fn paste_distractor(
    image: &FloatImage,
    annotation: &SampleAnnotation,
    distractor: &Cutout,
    spec: &CompositeSpec,
) -> Result<(FloatImage, SampleAnnotation)> {
    let (w, h) = image.dims();
    let map = AffineMap::from_spec(spec, canvas_pivot(w, h))?.homography();
    let fg = warp(&distractor.color, &map, w, h, 0.0)?;
    let mask = warp(&distractor.alpha, &map, w, h, 0.0)?;
    let out = blend_with(spec.blend_mode, &fg, &mask, image)?;
    let mut ann = annotation.clone();
    for kp in &mut ann.keypoints {
        let (px, py) = (kp.x.round(), kp.y.round());
        if px >= 0.0 && py >= 0.0 && (px as usize) < w && (py as usize) < h && mask.get(px as usize, py as usize, 0) >= 0.5 {
            kp.visible = false;
        }
    }
    Ok((out, ann))
}

/// Creates the occlusion copy of a composite: with equal probability a
/// random distractor is pasted in front, or the background is replaced
/// (which needs the foreground mask). Keypoint coordinates never change.
pub fn augment_with_distractors(
    image: &FloatImage,
    annotation: &SampleAnnotation,
    mask: Option<&FloatImage>,
    distractor_pool: &[Cutout],
    background_pool: &[FloatImage],
    seed: u64,
) -> Result<(FloatImage, SampleAnnotation, OcclusionVariant)> {
    if distractor_pool.is_empty() || background_pool.is_empty() {
        return Err(Error::Config("distractor and background pools must be non-empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = image.dims();
    if rng.random_bool(0.5) {
        let distractor = &distractor_pool[rng.random_range(0..distractor_pool.len())];
        let rel = rng.random_range(0.2..=0.6);
        let [x0, y0, x1, y1] = distractor.mask_bbox();
        let centre = ((x0 + x1 - 1.0) / 2.0, (y0 + y1 - 1.0) / 2.0);
        let mut spec = CompositeSpec {
            rotation_deg: rng.random_range(0.0..360.0),
            scale: rel * w as f64 / distractor.long_side(),
            translation: (0.0, 0.0),
            blend_mode: BlendMode::random(&mut rng),
            seed,
        };
        let target = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
        let (cx, cy) = AffineMap::from_spec(&spec, canvas_pivot(w, h))?.apply(centre.0, centre.1);
        spec.translation = (target.0 - cx, target.1 - cy);
        let (img, ann) = paste_distractor(image, annotation, distractor, &spec)?;
        Ok((img, ann, OcclusionVariant::Distractor))
    } else {
        let mask = mask.ok_or_else(|| Error::Config("background swap needs the foreground mask".into()))?;
        let bg = &background_pool[rng.random_range(0..background_pool.len())];
        let bg = bg.resize(w, h);
        let out = blend_with(BlendMode::random(&mut rng), image, mask, &bg)?;
        Ok((out, annotation.clone(), OcclusionVariant::BackgroundSwap))
    }
}

/// Mixes a global seed and an index into an independent per-sample seed.
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Input pools for dataset generation.
pub struct AssetPools {
    pub assets: Vec<ForegroundAsset>,
    pub backgrounds: Vec<FloatImage>,
    pub distractors: Vec<Cutout>,
}

fn sorted_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

impl AssetPools {
    pub fn load(assets: &Path, backgrounds: &Path, distractors: Option<&Path>) -> Result<Self> {
        let assets = sorted_images(assets)?
            .iter()
            .map(|p| ForegroundAsset::load(p))
            .collect::<Result<Vec<_>>>()?;
        let backgrounds = sorted_images(backgrounds)?
            .iter()
            .map(|p| FloatImage::load_rgb(p))
            .collect::<Result<Vec<_>>>()?;
        let distractors = match distractors {
            Some(dir) => sorted_images(dir)?.iter().map(|p| Cutout::load(p)).collect::<Result<Vec<_>>>()?,
            None => Vec::new(),
        };
        if assets.is_empty() || backgrounds.is_empty() {
            return Err(Error::Config("need at least one asset and one background".into()));
        }
        if let Some(a) = assets.iter().find(|a| a.tool_name != assets[0].tool_name) {
            return Err(Error::Config(format!(
                "assets mix tools `{}` and `{}`; generate one tool at a time",
                assets[0].tool_name, a.tool_name
            )));
        }
        Ok(Self {
            assets,
            backgrounds,
            distractors,
        })
    }

    /// Schema with the keypoints of the first asset and no merge groups.
    pub fn implied_schema(&self) -> Result<KeypointSchema> {
        let first = &self.assets[0];
        KeypointSchema::new(
            first.tool_name.clone(),
            first.keypoints.iter().map(|(n, _, _)| n.clone()).collect(),
            Vec::new(),
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub count: usize,
    pub seed: u64,
    pub canvas_size: usize,
    pub sampler: SpecSampler,
    /// Add one occlusion copy per composite when distractors are available.
    pub occlusion_copies: bool,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            count: 100,
            seed: 0,
            canvas_size: CANVAS_SIZE,
            sampler: SpecSampler::default(),
            occlusion_copies: true,
        }
    }
}

/// One generated image before it is written to disk.
pub struct GeneratedSample {
    pub image: FloatImage,
    pub annotation: SampleAnnotation,
}

/// Generates composite `index` of a run. Depends only on `(pools, config,
/// index)`.
pub fn generate_one(pools: &AssetPools, config: &GenerateConfig, index: usize) -> Result<Vec<GeneratedSample>> {
    let size = config.canvas_size;
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(config.seed, index as u64));
    let mut last_err = None;
    for _ in 0..config.sampler.max_attempts {
        let asset = &pools.assets[rng.random_range(0..pools.assets.len())];
        let background = pools.backgrounds[rng.random_range(0..pools.backgrounds.len())].resize(size, size);
        let spec = config.sampler.sample(&mut rng, asset, size, size)?;
        match compose_sample(asset, &background, &spec) {
            Ok(composite) => {
                let mut out = Vec::with_capacity(2);
                if config.occlusion_copies && !pools.distractors.is_empty() {
                    let (img, ann, _) = augment_with_distractors(
                        &composite.image,
                        &composite.annotation,
                        Some(&composite.mask),
                        &pools.distractors,
                        &pools.backgrounds,
                        rng.next_u64(),
                    )?;
                    out.push(GeneratedSample {
                        image: composite.image,
                        annotation: composite.annotation,
                    });
                    out.push(GeneratedSample { image: img, annotation: ann });
                } else {
                    out.push(GeneratedSample {
                        image: composite.image,
                        annotation: composite.annotation,
                    });
                }
                return Ok(out);
            }
            Err(e @ Error::Rejected(_)) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last_err.unwrap_or_else(|| Error::Rejected("no valid composite".into())))
}

/// Generates `config.count` composites (plus occlusion copies) into
/// `out_dir/images/` and writes `out_dir/manifest.jsonl`.
pub fn generate_dataset(pools: &AssetPools, config: &GenerateConfig, out_dir: &Path) -> Result<Vec<SampleAnnotation>> {
    let image_dir = out_dir.join("images");
    fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
    let per_index: Vec<Vec<SampleAnnotation>> = (0..config.count)
        .into_par_iter()
        .map(|i| {
            let samples = generate_one(pools, config, i)?;
            samples
                .into_iter()
                .enumerate()
                .map(|(k, s)| {
                    let rel = format!("images/{i:06}_{k}.png");
                    s.image.save_png(&out_dir.join(&rel))?;
                    Ok(SampleAnnotation {
                        image_path: rel,
                        ..s.annotation
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let annotations: Vec<SampleAnnotation> = per_index.into_iter().flatten().collect();
    write_manifest(&out_dir.join("manifest.jsonl"), &annotations)?;
    Ok(annotations)
}
