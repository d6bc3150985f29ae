//! Gaussian heatmap targets.
//!
//! Every keypoint present in an annotation (visible or not) places an
//! isotropic Gaussian with `sigma = size / 64` centred on its rounded pixel,
//! so the target peaks at exactly 1.0 there. Keypoints of a merge group are
//! summed into one channel and clamped to 1.0.

use std::path::Path;

use crate::dataset::{KeypointSchema, SampleAnnotation};
use crate::error::{Error, Result};
use crate::imaging::FloatImage;

/// Ratio between heatmap width and Gaussian sigma.
pub const SIGMA_DIVISOR: f64 = 64.0;

/// Per-channel probability maps stored channel-major (`c, y, x`).
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapStack {
    pub width: usize,
    pub height: usize,
    pub channel_names: Vec<String>,
    pub values: Vec<f32>,
}

impl HeatmapStack {
    pub fn zeros(width: usize, height: usize, channel_names: Vec<String>) -> Self {
        let n = channel_names.len();
        Self {
            width,
            height,
            channel_names,
            values: vec![0.0; n * width * height],
        }
    }

    pub fn channels(&self) -> usize {
        self.channel_names.len()
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize) -> f32 {
        self.values[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, x: usize, y: usize, v: f32) {
        self.values[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.values[c * n..(c + 1) * n]
    }

    /// Writes one grayscale PNG per channel into `dir`.
    pub fn dump_pngs(&self, dir: &Path, prefix: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (c, name) in self.channel_names.iter().enumerate() {
            let img = FloatImage::from_fn(self.width, self.height, 1, |x, y, _| self.get(c, x, y) * 255.0);
            img.save_png(&dir.join(format!("{prefix}_{c}_{name}.png")))?;
        }
        Ok(())
    }
}

/// Target stacks at every supervision level, smallest first.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapPyramid {
    pub levels: Vec<HeatmapStack>,
}

pub fn sigma_for(size: usize) -> f64 {
    size as f64 / SIGMA_DIVISOR
}

/// Unnormalised Gaussian kernel value at offset `(dx, dy)`.
#[inline]
pub fn gaussian(dx: f64, dy: f64, sigma: f64) -> f64 {
    (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
}

/// Nearest pixel to a coordinate. In-frame coordinates in the last half
/// pixel would round off the grid, so they are kept on the last pixel.
fn peak_pixel(v: f64, size: usize) -> i64 {
    let p = v.round() as i64;
    if v >= 0.0 && v < size as f64 {
        p.min(size as i64 - 1)
    } else {
        p
    }
}

/// Renders a `size × size` target stack. Annotation coordinates must already
/// be expressed at the target resolution.
pub fn render_targets(annotation: &SampleAnnotation, schema: &KeypointSchema, size: usize) -> HeatmapStack {
    let channels = schema.channels();
    let names = channels.iter().map(|c| c.name.clone()).collect();
    let mut stack = HeatmapStack::zeros(size, size, names);
    if size == 0 {
        return stack;
    }
    let sigma = sigma_for(size);
    for (c, channel) in channels.iter().enumerate() {
        let mut centres: Vec<(i64, i64)> = channel
            .members
            .iter()
            .filter_map(|m| annotation.keypoint(m))
            .map(|k| (peak_pixel(k.x, size), peak_pixel(k.y, size)))
            .collect();
        if centres.is_empty() {
            continue;
        }
        // canonical order makes the summed channel independent of member order
        centres.sort_unstable_by_key(|&(x, y)| (y, x));
        for y in 0..size {
            for x in 0..size {
                let v: f64 = centres
                    .iter()
                    .map(|&(cx, cy)| gaussian(x as f64 - cx as f64, y as f64 - cy as f64, sigma))
                    .sum();
                stack.set(c, x, y, v.min(1.0) as f32);
            }
        }
    }
    stack
}

/// Renders one stack per level. Keypoints are rescaled from the annotation's
/// image size to each level; sizes must double from level to level.
pub fn render_pyramid(
    annotation: &SampleAnnotation,
    schema: &KeypointSchema,
    level_sizes: &[usize],
) -> Result<HeatmapPyramid> {
    validate_level_sizes(level_sizes)?;
    let levels = level_sizes
        .iter()
        .map(|&size| {
            let scaled = annotation.rescaled(size as u32, size as u32);
            render_targets(&scaled, schema, size)
        })
        .collect();
    Ok(HeatmapPyramid { levels })
}

pub fn validate_level_sizes(level_sizes: &[usize]) -> Result<()> {
    if level_sizes.is_empty() || level_sizes[0] == 0 {
        return Err(Error::Config("level sizes must be a non-empty list of positive sizes".into()));
    }
    if let Some(w) = level_sizes.windows(2).find(|w| w[1] != 2 * w[0]) {
        return Err(Error::Config(format!("level sizes must double: {} then {}", w[0], w[1])));
    }
    Ok(())
}
