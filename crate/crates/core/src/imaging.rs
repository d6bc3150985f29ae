//! Float image buffers, projective warps and the small set of filters shared
//! by the compositor and the augmentation pipeline.
//!
//! Intensities are stored as `f32` on the 0..=255 scale. Pixel `(x, y)` sits
//! at the continuous coordinate `(x, y)`, i.e. the origin is the centre of the
//! top-left pixel.

use std::path::Path;

use image::{DynamicImage, GrayImage, Rgb, RgbImage, Rgba, RgbaImage};

use crate::error::{Error, Result};

/// Interleaved multi-channel `f32` image.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl FloatImage {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[self.index(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        let i = self.index(x, y, c);
        self.data[i] = v;
    }

    pub fn same_shape(&self, other: &FloatImage) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    /// Extracts one channel as a single-channel image.
    pub fn channel(&self, c: usize) -> FloatImage {
        FloatImage::from_fn(self.width, self.height, 1, |x, y, _| self.get(x, y, c))
    }

    pub fn clamp_intensity(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 255.0);
        }
    }

    /// Bilinear sample of channel `c` at a continuous position. Samples that
    /// fall outside the image take the value `fill`.
    pub fn sample_bilinear(&self, x: f64, y: f64, c: usize, fill: f32) -> f32 {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = (x - x0) as f32;
        let fy = (y - y0) as f32;
        let x0 = x0 as i64;
        let y0 = y0 as i64;
        let at = |xi: i64, yi: i64| -> f32 {
            if xi < 0 || yi < 0 || xi >= self.width as i64 || yi >= self.height as i64 {
                fill
            } else {
                self.get(xi as usize, yi as usize, c)
            }
        };
        // exact hits avoid mixing in out-of-range neighbours with zero weight
        if fx == 0.0 && fy == 0.0 {
            return at(x0, y0);
        }
        let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1, y0) * fx;
        let bottom = at(x0, y0 + 1) * (1.0 - fx) + at(x0 + 1, y0 + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Bilinear resize using pixel-centre alignment.
    pub fn resize(&self, width: usize, height: usize) -> FloatImage {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let mut out = FloatImage::new(width, height, self.channels);
        for y in 0..height {
            let src_y = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            for x in 0..width {
                let src_x = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                for c in 0..self.channels {
                    let v = self.sample_bilinear(src_x, src_y, c, 0.0);
                    out.set(x, y, c, v);
                }
            }
        }
        out
    }

    pub fn from_rgb(img: &RgbImage) -> Self {
        let (w, h) = img.dimensions();
        Self {
            width: w as usize,
            height: h as usize,
            channels: 3,
            data: img.as_raw().iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn from_gray(img: &GrayImage) -> Self {
        let (w, h) = img.dimensions();
        Self {
            width: w as usize,
            height: h as usize,
            channels: 1,
            data: img.as_raw().iter().map(|&v| v as f32).collect(),
        }
    }

    /// Splits an RGBA image into colour and a `[0, 1]` alpha mask.
    pub fn from_rgba(img: &RgbaImage) -> (Self, Self) {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut color = FloatImage::new(w, h, 3);
        let mut alpha = FloatImage::new(w, h, 1);
        for (x, y, Rgba(p)) in img.enumerate_pixels() {
            let (x, y) = (x as usize, y as usize);
            for c in 0..3 {
                color.set(x, y, c, p[c] as f32);
            }
            alpha.set(x, y, 0, p[3] as f32 / 255.0);
        }
        (color, alpha)
    }

    pub fn to_rgb(&self) -> RgbImage {
        let mut out = RgbImage::new(self.width as u32, self.height as u32);
        for (x, y, px) in out.enumerate_pixels_mut() {
            let (x, y) = (x as usize, y as usize);
            let mut rgb = [0u8; 3];
            for (c, slot) in rgb.iter_mut().enumerate() {
                let src = if self.channels == 1 { 0 } else { c };
                *slot = self.get(x, y, src).round().clamp(0.0, 255.0) as u8;
            }
            *px = Rgb(rgb);
        }
        out
    }

    pub fn load_rgb(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image(other),
        })?;
        Ok(Self::from_rgb(&img.to_rgb8()))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let dynamic = if self.channels == 1 {
            let mut g = GrayImage::new(self.width as u32, self.height as u32);
            for (x, y, px) in g.enumerate_pixels_mut() {
                px.0[0] = self.get(x as usize, y as usize, 0).round().clamp(0.0, 255.0) as u8;
            }
            DynamicImage::ImageLuma8(g)
        } else {
            DynamicImage::ImageRgb8(self.to_rgb())
        };
        dynamic.save(path)?;
        Ok(())
    }
}

/// Loads an RGBA image and returns its colour and alpha planes.
pub fn load_rgba(path: &Path) -> Result<(FloatImage, FloatImage)> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image(other),
    })?;
    Ok(FloatImage::from_rgba(&img.to_rgba8()))
}

/// 3×3 projective transform acting on column vectors `(x, y, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography(pub [[f64; 3]; 3]);

impl Homography {
    pub const IDENTITY: Homography = Homography([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    pub fn from_affine(m: [[f64; 3]; 2]) -> Self {
        Homography([m[0], m[1], [0.0, 0.0, 1.0]])
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self::from_affine([[1.0, 0.0, tx], [0.0, 1.0, ty]])
    }

    /// `self ∘ rhs`: applies `rhs` first.
    pub fn then_after(&self, rhs: &Homography) -> Homography {
        let (a, b) = (&self.0, &rhs.0);
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        Homography(out)
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.0;
        let w = m[2][0] * x + m[2][1] * y + m[2][2];
        (
            (m[0][0] * x + m[0][1] * y + m[0][2]) / w,
            (m[1][0] * x + m[1][1] * y + m[1][2]) / w,
        )
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn inverse(&self) -> Option<Homography> {
        let det = self.determinant();
        if det.abs() < 1e-12 || !det.is_finite() {
            return None;
        }
        let m = &self.0;
        let cof = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
        let adj = [
            [cof(1, 2, 1, 2), -cof(0, 2, 1, 2), cof(0, 1, 1, 2)],
            [-cof(1, 2, 0, 2), cof(0, 2, 0, 2), -cof(0, 1, 0, 2)],
            [cof(1, 2, 0, 1), -cof(0, 2, 0, 1), cof(0, 1, 0, 1)],
        ];
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                out[i][j] = adj[i][j] / det;
            }
        }
        Some(Homography(out))
    }

    /// Homography mapping the four `src` points onto the four `dst` points.
    pub fn from_correspondences(src: [(f64, f64); 4], dst: [(f64, f64); 4]) -> Option<Homography> {
        let mut a = [[0.0f64; 9]; 8];
        for i in 0..4 {
            let (x, y) = src[i];
            let (u, v) = dst[i];
            a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, u];
            a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, v];
        }
        let h = solve_augmented_8(a)?;
        Some(Homography([[h[0], h[1], h[2]], [h[3], h[4], h[5]], [h[6], h[7], 1.0]]))
    }
}

/// Gaussian elimination with partial pivoting on an 8×9 augmented system.
fn solve_augmented_8(mut a: [[f64; 9]; 8]) -> Option<[f64; 8]> {
    for col in 0..8 {
        let pivot = (col..8).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot);
        for row in 0..8 {
            if row != col {
                let f = a[row][col] / a[col][col];
                if f != 0.0 {
                    for k in col..9 {
                        a[row][k] -= f * a[col][k];
                    }
                }
            }
        }
    }
    let mut x = [0.0; 8];
    for i in 0..8 {
        x[i] = a[i][8] / a[i][i];
    }
    Some(x)
}

/// Warps `src` into a `width × height` canvas with the forward map `h`
/// (source → destination), sampling bilinearly through the inverse.
pub fn warp(src: &FloatImage, h: &Homography, width: usize, height: usize, fill: f32) -> Result<FloatImage> {
    let inv = h
        .inverse()
        .ok_or_else(|| Error::Config("warp transform is not invertible".into()))?;
    let mut out = FloatImage::new(width, height, src.channels);
    for y in 0..height {
        for x in 0..width {
            let (sx, sy) = inv.apply(x as f64, y as f64);
            if !sx.is_finite() || !sy.is_finite() {
                for c in 0..src.channels {
                    out.set(x, y, c, fill);
                }
                continue;
            }
            for c in 0..src.channels {
                out.set(x, y, c, src.sample_bilinear(sx, sy, c, fill));
            }
        }
    }
    Ok(out)
}

/// Separable Gaussian blur with clamp-to-edge borders. `sigma <= 0` is a no-op.
pub fn gaussian_blur(img: &FloatImage, sigma: f64) -> FloatImage {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32)
        .collect();
    let norm: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= norm);
    convolve_separable(img, &kernel)
}

/// Convolves rows then columns with a symmetric odd-length kernel, clamping
/// reads at the border.
pub fn convolve_separable(img: &FloatImage, kernel: &[f32]) -> FloatImage {
    let r = (kernel.len() / 2) as i64;
    let (w, h, ch) = (img.width as i64, img.height as i64, img.channels);
    let mut tmp = FloatImage::new(img.width, img.height, ch);
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0.0f32;
                for (k, kv) in kernel.iter().enumerate() {
                    let xi = (x + k as i64 - r).clamp(0, w - 1);
                    acc += kv * img.get(xi as usize, y as usize, c);
                }
                tmp.set(x as usize, y as usize, c, acc);
            }
        }
    }
    let mut out = FloatImage::new(img.width, img.height, ch);
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0.0f32;
                for (k, kv) in kernel.iter().enumerate() {
                    let yi = (y + k as i64 - r).clamp(0, h - 1);
                    acc += kv * tmp.get(x as usize, yi as usize, c);
                }
                out.set(x as usize, y as usize, c, acc);
            }
        }
    }
    out
}

/// Axis-aligned bounding box `(x_min, y_min, x_max, y_max)` of mask pixels
/// with weight ≥ 0.5; `x_max`/`y_max` are exclusive.
pub fn mask_bbox(mask: &FloatImage) -> Option<[f64; 4]> {
    let mut bounds: Option<[usize; 4]> = None;
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(x, y, 0) >= 0.5 {
                let b = bounds.get_or_insert([x, y, x, y]);
                b[0] = b[0].min(x);
                b[1] = b[1].min(y);
                b[2] = b[2].max(x);
                b[3] = b[3].max(y);
            }
        }
    }
    bounds.map(|b| [b[0] as f64, b[1] as f64, (b[2] + 1) as f64, (b[3] + 1) as f64])
}
