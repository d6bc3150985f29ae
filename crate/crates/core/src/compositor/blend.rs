//! Alpha, Poisson (seamless cloning) and Laplacian-pyramid blending.

use crate::error::{Error, Result};
use crate::imaging::{convolve_separable, FloatImage};

#[inline]
fn mix(fg: f32, bg: f32, m: f32) -> f32 {
    if m <= 0.0 {
        bg
    } else if m >= 1.0 {
        fg
    } else {
        bg + m * (fg - bg)
    }
}

fn check_pair(fg: &FloatImage, mask: &FloatImage, bg: &FloatImage) -> Result<()> {
    if !fg.same_shape(bg) {
        return Err(Error::Shape(format!(
            "foreground {}x{}x{} vs background {}x{}x{}",
            fg.width, fg.height, fg.channels, bg.width, bg.height, bg.channels
        )));
    }
    if mask.dims() != bg.dims() || mask.channels != 1 {
        return Err(Error::Shape(format!(
            "mask {}x{}x{} vs image {}x{}",
            mask.width, mask.height, mask.channels, bg.width, bg.height
        )));
    }
    Ok(())
}

/// `mask * fg + (1 - mask) * bg` per pixel and channel.
pub fn alpha_blend(fg: &FloatImage, mask: &FloatImage, bg: &FloatImage) -> Result<FloatImage> {
    check_pair(fg, mask, bg)?;
    let mut out = bg.clone();
    for y in 0..bg.height {
        for x in 0..bg.width {
            let m = mask.get(x, y, 0);
            for c in 0..bg.channels {
                out.set(x, y, c, mix(fg.get(x, y, c), bg.get(x, y, c), m));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
pub struct PoissonOptions {
    /// Stop once `|r| <= relative_tolerance * |b|`.
    pub relative_tolerance: f64,
    /// Iteration cap as a multiple of the number of unknowns.
    pub iterations_per_unknown: usize,
}

impl Default for PoissonOptions {
    fn default() -> Self {
        Self {
            relative_tolerance: 1e-10,
            iterations_per_unknown: 10,
        }
    }
}

/// Seamless cloning: inside the mask (pixels with weight ≥ 0.5, excluding
/// the image border) the output has the 4-neighbour Laplacian of `fg`;
/// everywhere else it equals `bg`. Solved per channel with conjugate
/// gradients.
pub fn poisson_blend(fg: &FloatImage, mask: &FloatImage, bg: &FloatImage) -> Result<FloatImage> {
    poisson_blend_with(fg, mask, bg, PoissonOptions::default())
}

pub fn poisson_blend_with(
    fg: &FloatImage,
    mask: &FloatImage,
    bg: &FloatImage,
    options: PoissonOptions,
) -> Result<FloatImage> {
    check_pair(fg, mask, bg)?;
    let system = PoissonSystem::new(mask);
    let mut out = bg.clone();
    if system.pixels.is_empty() {
        return Ok(out);
    }
    for c in 0..bg.channels {
        let b = system.rhs(fg, bg, c);
        let mut x: Vec<f64> = system.pixels.iter().map(|&(px, py)| bg.get(px, py, c) as f64).collect();
        let max_iter = options.iterations_per_unknown * system.pixels.len();
        conjugate_gradient(|v, out| system.apply(v, out), &b, &mut x, options.relative_tolerance, max_iter)?;
        for (&(px, py), v) in system.pixels.iter().zip(&x) {
            out.set(px, py, c, *v as f32);
        }
    }
    Ok(out)
}

/// Sparse structure of the masked Poisson problem.
pub struct PoissonSystem {
    width: usize,
    height: usize,
    /// Unknown pixels in row-major order.
    pub pixels: Vec<(usize, usize)>,
    /// Pixel → unknown index (`usize::MAX` outside the region).
    index: Vec<usize>,
}

const NEIGHBOURS: [(i64, i64); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

impl PoissonSystem {
    pub fn new(mask: &FloatImage) -> Self {
        let (w, h) = mask.dims();
        let mut index = vec![usize::MAX; w * h];
        let mut pixels = Vec::new();
        for y in 1..h.saturating_sub(1) {
            for x in 1..w.saturating_sub(1) {
                if mask.get(x, y, 0) >= 0.5 {
                    index[y * w + x] = pixels.len();
                    pixels.push((x, y));
                }
            }
        }
        Self {
            width: w,
            height: h,
            pixels,
            index,
        }
    }

    fn neighbours(&self, x: usize, y: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        NEIGHBOURS.iter().filter_map(move |&(dx, dy)| {
            let (nx, ny) = (x as i64 + dx, y as i64 + dy);
            (nx >= 0 && ny >= 0 && (nx as usize) < self.width && (ny as usize) < self.height)
                .then_some((nx as usize, ny as usize))
        })
    }

    pub fn unknown(&self, x: usize, y: usize) -> Option<usize> {
        let i = self.index[y * self.width + x];
        (i != usize::MAX).then_some(i)
    }

    /// Right-hand side: guidance Laplacian plus Dirichlet boundary values.
    pub fn rhs(&self, fg: &FloatImage, bg: &FloatImage, c: usize) -> Vec<f64> {
        self.pixels
            .iter()
            .map(|&(x, y)| {
                let fp = fg.get(x, y, c) as f64;
                self.neighbours(x, y)
                    .map(|(nx, ny)| {
                        let guidance = fp - fg.get(nx, ny, c) as f64;
                        match self.unknown(nx, ny) {
                            Some(_) => guidance,
                            None => guidance + bg.get(nx, ny, c) as f64,
                        }
                    })
                    .sum()
            })
            .collect()
    }

    /// `A v`: 4 on the diagonal, -1 for every neighbouring unknown.
    pub fn apply(&self, v: &[f64], out: &mut [f64]) {
        for (i, &(x, y)) in self.pixels.iter().enumerate() {
            let mut acc = 4.0 * v[i];
            for (nx, ny) in self.neighbours(x, y) {
                if let Some(j) = self.unknown(nx, ny) {
                    acc -= v[j];
                }
            }
            out[i] = acc;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Conjugate gradients for a symmetric positive definite operator. Returns
/// the iteration count.
pub fn conjugate_gradient(
    apply: impl Fn(&[f64], &mut [f64]),
    b: &[f64],
    x: &mut [f64],
    relative_tolerance: f64,
    max_iter: usize,
) -> Result<usize> {
    let n = b.len();
    let b_norm = dot(b, b).sqrt();
    if b_norm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(0);
    }
    let tol = relative_tolerance * b_norm;
    let mut ax = vec![0.0; n];
    apply(x, &mut ax);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let mut ap = vec![0.0; n];
    for it in 0..=max_iter {
        if rr.sqrt() <= tol {
            return Ok(it);
        }
        if it == max_iter {
            break;
        }
        apply(&p, &mut ap);
        let alpha = rr / dot(&p, &ap);
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_next = dot(&r, &r);
        let beta = rr_next / rr;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rr = rr_next;
    }
    Err(Error::NoConvergence {
        iterations: max_iter,
        residual: rr.sqrt(),
    })
}

const BINOMIAL5: [f32; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
const BINOMIAL5_X2: [f32; 5] = [2.0 / 16.0, 8.0 / 16.0, 12.0 / 16.0, 8.0 / 16.0, 2.0 / 16.0];

fn downsample(img: &FloatImage) -> FloatImage {
    let blurred = convolve_separable(img, &BINOMIAL5);
    FloatImage::from_fn(img.width / 2, img.height / 2, img.channels, |x, y, c| blurred.get(2 * x, 2 * y, c))
}

fn expand(img: &FloatImage, width: usize, height: usize) -> FloatImage {
    let mut up = FloatImage::new(width, height, img.channels);
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..img.channels {
                up.set(2 * x, 2 * y, c, img.get(x, y, c));
            }
        }
    }
    convolve_separable(&up, &BINOMIAL5_X2)
}

fn gaussian_pyramid(img: &FloatImage, levels: usize) -> Vec<FloatImage> {
    let mut out = vec![img.clone()];
    for _ in 1..levels {
        let next = downsample(out.last().unwrap());
        out.push(next);
    }
    out
}

fn laplacian_pyramid(img: &FloatImage, levels: usize) -> Vec<FloatImage> {
    let gauss = gaussian_pyramid(img, levels);
    let mut out = Vec::with_capacity(levels);
    for i in 0..levels - 1 {
        let up = expand(&gauss[i + 1], gauss[i].width, gauss[i].height);
        let mut band = gauss[i].clone();
        band.data.iter_mut().zip(&up.data).for_each(|(b, u)| *b -= u);
        out.push(band);
    }
    out.push(gauss[levels - 1].clone());
    out
}

fn pad_edge(img: &FloatImage, width: usize, height: usize) -> FloatImage {
    FloatImage::from_fn(width, height, img.channels, |x, y, c| {
        img.get(x.min(img.width - 1), y.min(img.height - 1), c)
    })
}

/// Multi-band blend: the Laplacian bands of `fg` and `bg` are mixed with the
/// Gaussian pyramid of `mask` and collapsed. Only the mixed difference is
/// collapsed and added to `bg`, so pixels the blurred mask never reaches keep
/// the exact background value.
pub fn laplacian_blend(fg: &FloatImage, mask: &FloatImage, bg: &FloatImage, levels: usize) -> Result<FloatImage> {
    check_pair(fg, mask, bg)?;
    if levels == 0 {
        return Err(Error::Config("laplacian blend needs at least one level".into()));
    }
    let factor = 1usize << (levels - 1);
    if bg.width < factor || bg.height < factor {
        return Err(Error::Shape(format!(
            "{}x{} image too small for {levels} pyramid levels",
            bg.width, bg.height
        )));
    }
    let pw = bg.width.div_ceil(factor) * factor;
    let ph = bg.height.div_ceil(factor) * factor;
    let (fgp, bgp, mp) = (pad_edge(fg, pw, ph), pad_edge(bg, pw, ph), pad_edge(mask, pw, ph));

    let la = laplacian_pyramid(&fgp, levels);
    let lb = laplacian_pyramid(&bgp, levels);
    let gm = gaussian_pyramid(&mp, levels);

    let mut acc: Option<FloatImage> = None;
    for i in (0..levels).rev() {
        let (a, b, m) = (&la[i], &lb[i], &gm[i]);
        let mut band = FloatImage::new(a.width, a.height, a.channels);
        for y in 0..a.height {
            for x in 0..a.width {
                let w = m.get(x, y, 0);
                if w == 0.0 {
                    continue;
                }
                for c in 0..a.channels {
                    band.set(x, y, c, w * (a.get(x, y, c) - b.get(x, y, c)));
                }
            }
        }
        if let Some(coarser) = acc {
            let up = expand(&coarser, band.width, band.height);
            band.data.iter_mut().zip(&up.data).for_each(|(v, u)| *v += u);
        }
        acc = Some(band);
    }
    let diff = acc.expect("levels >= 1");
    let mut out = bg.clone();
    for y in 0..bg.height {
        for x in 0..bg.width {
            for c in 0..bg.channels {
                let d = diff.get(x, y, c);
                if d != 0.0 {
                    let base = bg.get(x, y, c);
                    let v = if levels == 1 { mix(fg.get(x, y, c), base, mask.get(x, y, 0)) } else { base + d };
                    out.set(x, y, c, v.clamp(0.0, 255.0));
                }
            }
        }
    }
    Ok(out)
}

/// Erodes a binary (≥ 0.5) mask by one pixel with a 4-neighbourhood.
pub fn erode(mask: &FloatImage) -> FloatImage {
    FloatImage::from_fn(mask.width, mask.height, 1, |x, y, _| {
        let inside = |xi: i64, yi: i64| {
            xi >= 0
                && yi >= 0
                && (xi as usize) < mask.width
                && (yi as usize) < mask.height
                && mask.get(xi as usize, yi as usize, 0) >= 0.5
        };
        let (xi, yi) = (x as i64, y as i64);
        let keep = inside(xi, yi) && NEIGHBOURS.iter().all(|&(dx, dy)| inside(xi + dx, yi + dy));
        if keep {
            1.0
        } else {
            0.0
        }
    })
}
