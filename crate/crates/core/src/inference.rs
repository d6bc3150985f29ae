//! Heatmap decoding and latency measurement.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use tch::Tensor;

use crate::dataset::KeypointSchema;
use crate::error::{Error, Result};
use crate::heatmap::HeatmapStack;
use crate::imaging::FloatImage;
use crate::model::Model;
use crate::training::images_to_batch;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// Keypoint name, or the joined channel name for a merge group.
    pub name: String,
    pub x: f64,
    pub y: f64,
    pub confidence: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub confidence_threshold: f32,
    /// Peaks kept per merged channel; `None` keeps as many as the group has
    /// members.
    pub max_peaks_per_group: Option<usize>,
    /// Heatmap pixel → image pixel factor.
    pub output_scale: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            confidence_threshold: 0.5,
            max_peaks_per_group: None,
            output_scale: 1.0,
        }
    }
}

impl DecodeConfig {
    pub fn with_threshold(confidence_threshold: f32) -> Self {
        Self {
            confidence_threshold,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(Error::Config(format!("threshold {} not in [0, 1]", self.confidence_threshold)));
        }
        if self.max_peaks_per_group == Some(0) {
            return Err(Error::Config("max_peaks_per_group must be at least 1".into()));
        }
        if !(self.output_scale.is_finite() && self.output_scale > 0.0) {
            return Err(Error::Config("output_scale must be positive".into()));
        }
        Ok(())
    }
}

/// Row-major first maximum of a plane.
fn argmax(plane: &[f32]) -> (usize, f32) {
    let mut best = (0, plane[0]);
    for (i, &v) in plane.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

/// Pixels strictly greater than every in-bounds 8-neighbour.
fn strict_local_maxima(plane: &[f32], width: usize, height: usize) -> Vec<(usize, f32)> {
    let mut out = Vec::new();
    for y in 0..height {
        for x in 0..width {
            let v = plane[y * width + x];
            let mut is_max = true;
            'scan: for ny in y.saturating_sub(1)..=(y + 1).min(height - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(width - 1) {
                    if (nx, ny) != (x, y) && plane[ny * width + nx] >= v {
                        is_max = false;
                        break 'scan;
                    }
                }
            }
            if is_max {
                out.push((y * width + x, v));
            }
        }
    }
    out
}

/// Turns a heatmap stack into detections, channel by channel in schema
/// order.
pub fn decode_heatmaps(stack: &HeatmapStack, schema: &KeypointSchema, config: &DecodeConfig) -> Result<Vec<Detection>> {
    config.validate()?;
    let channels = schema.channels();
    let names: Vec<&str> = channels.iter().map(|c| c.name.as_str()).collect();
    if stack.channel_names.iter().map(String::as_str).ne(names.iter().copied()) {
        return Err(Error::Shape(format!("heatmap channels {:?} do not match schema {:?}", stack.channel_names, names)));
    }
    if stack.values.len() != stack.channels() * stack.width * stack.height {
        return Err(Error::Shape("heatmap buffer does not match its dimensions".into()));
    }
    let mut detections = Vec::new();
    if stack.width == 0 || stack.height == 0 {
        return Ok(detections);
    }
    let threshold = config.confidence_threshold;
    let to_detection = |name: &str, index: usize, confidence: f32| Detection {
        name: name.to_string(),
        x: (index % stack.width) as f64 * config.output_scale,
        y: (index / stack.width) as f64 * config.output_scale,
        confidence,
    };
    for (c, channel) in channels.iter().enumerate() {
        let plane = stack.plane(c);
        if !channel.is_group() {
            let (i, v) = argmax(plane);
            if v >= threshold {
                detections.push(to_detection(&channel.name, i, v));
            }
            continue;
        }
        let mut peaks: Vec<(usize, f32)> = strict_local_maxima(plane, stack.width, stack.height)
            .into_iter()
            .filter(|&(_, v)| v >= threshold)
            .collect();
        if peaks.is_empty() {
            // flat plateaus have no strict maximum; fall back to the argmax
            let (i, v) = argmax(plane);
            if v >= threshold {
                peaks.push((i, v));
            }
        }
        peaks.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        peaks.truncate(config.max_peaks_per_group.unwrap_or(channel.members.len()));
        detections.extend(peaks.into_iter().map(|(i, v)| to_detection(&channel.name, i, v)));
    }
    Ok(detections)
}

/// Which head to decode: index into the model's heads, coarsest first.
/// `None` selects the finest head.
pub type HeadLevel = Option<usize>;

fn tensor_to_stack(t: &Tensor, schema: &KeypointSchema) -> Result<HeatmapStack> {
    let size = t.size();
    if size.len() != 3 {
        return Err(Error::Shape(format!("expected [C, H, W], got {size:?}")));
    }
    let names = schema.channels().into_iter().map(|c| c.name).collect::<Vec<_>>();
    if names.len() as i64 != size[0] {
        return Err(Error::Shape(format!("{} channels vs schema {}", size[0], names.len())));
    }
    let values: Vec<f32> = Vec::try_from(t.contiguous().flatten(0, -1))?;
    Ok(HeatmapStack {
        width: size[2] as usize,
        height: size[1] as usize,
        channel_names: names,
        values,
    })
}

/// Forward pass in inference mode, returning one stack per image for the
/// chosen head. Images are resized to the network input.
pub fn predict_stacks(model: &Model, images: &[&FloatImage], schema: &KeypointSchema, level: HeadLevel) -> Result<Vec<HeatmapStack>> {
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let n = model.config.input_size;
    let resized: Vec<FloatImage> = images
        .iter()
        .map(|i| if i.dims() == (n, n) { (*i).clone() } else { i.resize(n, n) })
        .collect();
    let refs: Vec<&FloatImage> = resized.iter().collect();
    let outputs = tch::no_grad(|| model.forward(&images_to_batch(&refs), false))?;
    let head = match level {
        None => outputs.len() - 1,
        Some(l) if l < outputs.len() => l,
        Some(l) => return Err(Error::Config(format!("head {l} requested but the model has {}", outputs.len()))),
    };
    let out = &outputs[head];
    (0..images.len() as i64).map(|b| tensor_to_stack(&out.get(b), schema)).collect()
}

/// Detects keypoints in images of any size; coordinates are returned in the
/// pixel frame of each original image.
pub fn detect_batch(
    model: &Model,
    images: &[&FloatImage],
    schema: &KeypointSchema,
    config: &DecodeConfig,
    level: HeadLevel,
) -> Result<Vec<Vec<Detection>>> {
    let stacks = predict_stacks(model, images, schema, level)?;
    let n = model.config.input_size as f64;
    stacks
        .iter()
        .zip(images)
        .map(|(stack, img)| {
            let scale = n / stack.width as f64;
            let cfg = DecodeConfig {
                output_scale: scale,
                ..config.clone()
            };
            let mut dets = decode_heatmaps(stack, schema, &cfg)?;
            let (sx, sy) = (img.width as f64 / n, img.height as f64 / n);
            for d in &mut dets {
                d.x *= sx;
                d.y *= sy;
            }
            Ok(dets)
        })
        .collect()
}

/// [`detect_batch`] over any number of images, `batch_size` at a time.
pub fn detect_all(
    model: &Model,
    images: &[&FloatImage],
    schema: &KeypointSchema,
    config: &DecodeConfig,
    level: HeadLevel,
    batch_size: usize,
) -> Result<Vec<Vec<Detection>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch_size.max(1)) {
        out.extend(detect_batch(model, chunk, schema, config, level)?);
    }
    Ok(out)
}

pub fn detect(model: &Model, image: &FloatImage, schema: &KeypointSchema, config: &DecodeConfig, level: HeadLevel) -> Result<Vec<Detection>> {
    Ok(detect_batch(model, &[image], schema, config, level)?.remove(0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub warmup: usize,
    pub samples: usize,
    pub level: HeadLevel,
    pub decode: DecodeConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            warmup: 10,
            samples: 100,
            level: None,
            decode: DecodeConfig::default(),
        }
    }
}

/// Per-image wall time of forward pass plus decoding, in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub samples: usize,
    pub warmup: usize,
    pub mean_s: f64,
    pub median_s: f64,
    pub p95_s: f64,
    pub min_s: f64,
    pub max_s: f64,
}

impl TimingReport {
    pub fn from_samples(mut times: Vec<f64>, warmup: usize) -> Self {
        times.sort_by(f64::total_cmp);
        let n = times.len();
        if n == 0 {
            return Self {
                samples: 0,
                warmup,
                mean_s: 0.0,
                median_s: 0.0,
                p95_s: 0.0,
                min_s: 0.0,
                max_s: 0.0,
            };
        }
        let median = if n % 2 == 1 { times[n / 2] } else { (times[n / 2 - 1] + times[n / 2]) / 2.0 };
        // nearest-rank percentile
        let p95 = times[((0.95 * n as f64).ceil() as usize).clamp(1, n) - 1];
        Self {
            samples: n,
            warmup,
            mean_s: times.iter().sum::<f64>() / n as f64,
            median_s: median,
            p95_s: p95,
            min_s: times[0],
            max_s: times[n - 1],
        }
    }
}

/// Times single-image detection, cycling through `images`. Warm-up runs are
/// not recorded.
pub fn benchmark_latency(model: &Model, images: &[FloatImage], schema: &KeypointSchema, config: &BenchConfig) -> Result<TimingReport> {
    if images.is_empty() {
        return Err(Error::Config("benchmark needs at least one image".into()));
    }
    let samples = config.samples.max(1);
    let mut times = Vec::with_capacity(samples);
    for i in 0..config.warmup + samples {
        let img = &images[i % images.len()];
        let start = Instant::now();
        let dets = detect(model, img, schema, &config.decode, config.level)?;
        let elapsed = start.elapsed().as_secs_f64();
        std::hint::black_box(dets);
        if i >= config.warmup {
            times.push(elapsed);
        }
    }
    Ok(TimingReport::from_samples(times, config.warmup))
}
