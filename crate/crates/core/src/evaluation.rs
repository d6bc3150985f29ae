//! PCK scoring, PCK-vs-α curves, localisation error and report comparison.
//!
//! A keypoint counts as correct when a detection of its channel lies strictly
//! closer than `α · max(bbox width, bbox height)`. Missing detections count
//! as wrong; invisible keypoints are scored like visible ones. Peaks of a
//! merged channel are assigned to the group's members greedily by ascending
//! distance, each peak used at most once.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::dataset::{KeypointSchema, SampleAnnotation};
use crate::error::{Error, Result};
use crate::inference::{Detection, TimingReport};

pub const REFERENCE_ALPHA: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PckResult {
    pub alpha: f64,
    pub correct_count: usize,
    pub total_count: usize,
    pub pck: f64,
}

/// Outcome of matching one annotated keypoint.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointMatch {
    pub image: usize,
    pub name: String,
    /// Distance to the assigned detection, `None` when nothing was assigned.
    pub distance: Option<f64>,
    /// `max(bbox width, bbox height)` of the image's annotation.
    pub reference_size: f64,
}

impl KeypointMatch {
    pub fn is_correct(&self, alpha: f64) -> bool {
        self.distance.is_some_and(|d| d < alpha * self.reference_size)
    }
}

fn distance(d: &Detection, x: f64, y: f64) -> f64 {
    ((d.x - x).powi(2) + (d.y - y).powi(2)).sqrt()
}

/// Matches every annotated keypoint of every image to at most one detection.
pub fn match_keypoints(
    detections: &[Vec<Detection>],
    annotations: &[SampleAnnotation],
    schema: &KeypointSchema,
) -> Result<Vec<KeypointMatch>> {
    if detections.len() != annotations.len() {
        return Err(Error::Shape(format!(
            "{} detection lists for {} annotations",
            detections.len(),
            annotations.len()
        )));
    }
    let channels = schema.channels();
    let mut out = Vec::new();
    for (image, (dets, ann)) in detections.iter().zip(annotations).enumerate() {
        let (w, h) = ann.bbox_size();
        let reference_size = w.max(h);
        if !(reference_size.is_finite() && reference_size > 0.0) {
            return Err(Error::Validation {
                line: image + 1,
                field: "bbox",
                message: format!("{:?} has no extent", ann.bbox),
            });
        }
        for channel in &channels {
            let members: Vec<_> = channel.members.iter().filter_map(|m| ann.keypoint(m)).collect();
            if members.is_empty() {
                continue;
            }
            let peaks: Vec<&Detection> = dets.iter().filter(|d| d.name == channel.name).collect();
            let mut assigned: Vec<Option<f64>> = vec![None; members.len()];
            if channel.is_group() {
                let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(members.len() * peaks.len());
                for (m, kp) in members.iter().enumerate() {
                    for (p, det) in peaks.iter().enumerate() {
                        pairs.push((distance(det, kp.x, kp.y), m, p));
                    }
                }
                pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
                let mut peak_used = vec![false; peaks.len()];
                for (d, m, p) in pairs {
                    if assigned[m].is_none() && !peak_used[p] {
                        assigned[m] = Some(d);
                        peak_used[p] = true;
                    }
                }
            } else if let Some(det) = peaks.first() {
                assigned[0] = Some(distance(det, members[0].x, members[0].y));
            }
            for (kp, d) in members.iter().zip(assigned) {
                out.push(KeypointMatch {
                    image,
                    name: kp.name.clone(),
                    distance: d,
                    reference_size,
                });
            }
        }
    }
    Ok(out)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::Config(format!("alpha must be positive, got {alpha}")));
    }
    Ok(())
}

pub fn pck_from_matches(matches: &[KeypointMatch], alpha: f64) -> Result<PckResult> {
    check_alpha(alpha)?;
    let correct = matches.iter().filter(|m| m.is_correct(alpha)).count();
    let total = matches.len();
    Ok(PckResult {
        alpha,
        correct_count: correct,
        total_count: total,
        pck: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
    })
}

pub fn pck(detections: &[Vec<Detection>], annotations: &[SampleAnnotation], schema: &KeypointSchema, alpha: f64) -> Result<PckResult> {
    check_alpha(alpha)?;
    pck_from_matches(&match_keypoints(detections, annotations, schema)?, alpha)
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Config("alpha grid is empty".into()));
    }
    check_alpha(grid[0])?;
    if grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Config("alpha grid must be strictly increasing".into()));
    }
    Ok(())
}

pub fn pck_curve(
    detections: &[Vec<Detection>],
    annotations: &[SampleAnnotation],
    schema: &KeypointSchema,
    alpha_grid: &[f64],
) -> Result<Vec<PckResult>> {
    check_grid(alpha_grid)?;
    let matches = match_keypoints(detections, annotations, schema)?;
    alpha_grid.iter().map(|&a| pck_from_matches(&matches, a)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceSummary {
    pub count: usize,
    pub mean: Option<f64>,
    pub median: Option<f64>,
}

impl DistanceSummary {
    fn from(mut d: Vec<f64>) -> Self {
        d.sort_by(f64::total_cmp);
        let n = d.len();
        if n == 0 {
            return Self {
                count: 0,
                mean: None,
                median: None,
            };
        }
        let median = if n % 2 == 1 { d[n / 2] } else { (d[n / 2 - 1] + d[n / 2]) / 2.0 };
        Self {
            count: n,
            mean: Some(d.iter().sum::<f64>() / n as f64),
            median: Some(median),
        }
    }
}

/// Pixel error over correctly detected keypoints only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub reference_alpha: f64,
    pub per_keypoint: BTreeMap<String, DistanceSummary>,
    pub overall: DistanceSummary,
    /// True when no keypoint was correct.
    pub empty: bool,
    /// Annotation image size `(width, height)` when all images share one.
    pub image_size: Option<(u32, u32)>,
}

pub fn error_stats_from_matches(matches: &[KeypointMatch], annotations: &[SampleAnnotation], reference_alpha: f64) -> Result<ErrorStats> {
    check_alpha(reference_alpha)?;
    let mut per_name: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut all = Vec::new();
    for m in matches {
        let entry = per_name.entry(m.name.clone()).or_default();
        if m.is_correct(reference_alpha) {
            let d = m.distance.expect("correct implies assigned");
            entry.push(d);
            all.push(d);
        }
    }
    let image_size = annotations
        .first()
        .map(|a| (a.width, a.height))
        .filter(|s| annotations.iter().all(|a| (a.width, a.height) == *s));
    Ok(ErrorStats {
        reference_alpha,
        per_keypoint: per_name.into_iter().map(|(k, v)| (k, DistanceSummary::from(v))).collect(),
        empty: all.is_empty(),
        overall: DistanceSummary::from(all),
        image_size,
    })
}

pub fn localization_error(
    detections: &[Vec<Detection>],
    annotations: &[SampleAnnotation],
    schema: &KeypointSchema,
    reference_alpha: f64,
) -> Result<ErrorStats> {
    let matches = match_keypoints(detections, annotations, schema)?;
    error_stats_from_matches(&matches, annotations, reference_alpha)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub pck_at_reference: PckResult,
    pub curve: Vec<PckResult>,
    pub errors: ErrorStats,
    pub timing: Option<TimingReport>,
}

impl EvalReport {
    pub fn build(
        model: impl Into<String>,
        detections: &[Vec<Detection>],
        annotations: &[SampleAnnotation],
        schema: &KeypointSchema,
        alpha_grid: &[f64],
    ) -> Result<Self> {
        check_grid(alpha_grid)?;
        let matches = match_keypoints(detections, annotations, schema)?;
        Ok(Self {
            model: model.into(),
            pck_at_reference: pck_from_matches(&matches, REFERENCE_ALPHA)?,
            curve: alpha_grid.iter().map(|&a| pck_from_matches(&matches, a)).collect::<Result<_>>()?,
            errors: error_stats_from_matches(&matches, annotations, REFERENCE_ALPHA)?,
            timing: None,
        })
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.curve.iter().map(|p| p.alpha).collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: String,
    pub pck_at_reference: f64,
    pub mean_error_px: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSeries {
    pub model: String,
    pub pck: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub alphas: Vec<f64>,
    pub table: Vec<ComparisonRow>,
    pub series: Vec<CurveSeries>,
}

impl Comparison {
    /// Plain-text table, one row per model.
    pub fn to_table(&self) -> String {
        let mut s = format!("{:<24} {:>10} {:>14}\n", "model", "PCK@0.1", "mean err (px)");
        for r in &self.table {
            let err = r.mean_error_px.map_or_else(|| "-".to_string(), |e| format!("{e:.2}"));
            s.push_str(&format!("{:<24} {:>10.4} {:>14}\n", r.model, r.pck_at_reference, err));
        }
        s
    }
}

pub fn compare_reports(reports: &[EvalReport]) -> Result<Comparison> {
    let first = reports.first().ok_or_else(|| Error::Config("no reports to compare".into()))?;
    let alphas = first.alphas();
    if let Some(r) = reports.iter().find(|r| r.alphas() != alphas) {
        return Err(Error::Config(format!("report `{}` uses a different alpha grid", r.model)));
    }
    Ok(Comparison {
        alphas,
        table: reports
            .iter()
            .map(|r| ComparisonRow {
                model: r.model.clone(),
                pck_at_reference: r.pck_at_reference.pck,
                mean_error_px: r.errors.overall.mean,
            })
            .collect(),
        series: reports
            .iter()
            .map(|r| CurveSeries {
                model: r.model.clone(),
                pck: r.curve.iter().map(|p| p.pck).collect(),
            })
            .collect(),
    })
}

/// Parses `start:stop:step` (inclusive) or a comma separated list.
pub fn parse_alpha_grid(spec: &str) -> Result<Vec<f64>> {
    let bad = || Error::Config(format!("cannot parse alpha grid `{spec}`"));
    let grid: Vec<f64> = if spec.contains(':') {
        let parts: Vec<f64> = spec
            .split(':')
            .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        let [start, stop, step] = parts[..] else {
            return Err(bad());
        };
        if !(step > 0.0 && stop >= start) {
            return Err(bad());
        }
        let n = ((stop - start) / step + 1e-9).floor() as usize + 1;
        (0..n).map(|i| ((start + i as f64 * step) * 1e9).round() / 1e9).collect()
    } else {
        spec.split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_>>()?
    };
    check_grid(&grid)?;
    Ok(grid)
}

const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [23, 190, 207],
];

pub fn series_color(i: usize) -> [u8; 3] {
    PALETTE[i % PALETTE.len()]
}

fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: [u8; 3], thick: i64) {
    let steps = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
    for s in 0..=steps {
        let x = x0 + (x1 - x0) * s / steps;
        let y = y0 + (y1 - y0) * s / steps;
        for dy in -(thick / 2)..=(thick / 2) {
            for dx in -(thick / 2)..=(thick / 2) {
                let (px, py) = (x + dx, y + dy);
                if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                    img.put_pixel(px as u32, py as u32, Rgb(color));
                }
            }
        }
    }
}

fn fill_rect(img: &mut RgbImage, x0: i64, y0: i64, x1: i64, y1: i64, color: [u8; 3]) {
    for y in y0.max(0)..y1.min(img.height() as i64) {
        for x in x0.max(0)..x1.min(img.width() as i64) {
            img.put_pixel(x as u32, y as u32, Rgb(color));
        }
    }
}

/// Renders PCK-vs-α curves (left panel, y from 0 to 1) and mean localisation
/// error bars (right panel) as a PNG. Series colours follow
/// [`series_color`] in report order; the image carries no text, so callers
/// print the legend.
pub fn render_comparison_plot(cmp: &Comparison, path: &Path) -> Result<()> {
    const W: u32 = 960;
    const H: u32 = 420;
    const PAD: i64 = 40;
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let panel_w = (W as i64 - 3 * PAD) * 2 / 3;
    let (cx0, cy0, cx1, cy1) = (PAD, PAD, PAD + panel_w, H as i64 - PAD);
    let grey = [200, 200, 200];
    for i in 0..=10 {
        let y = cy1 - (cy1 - cy0) * i / 10;
        draw_line(&mut img, (cx0, y), (cx1, y), grey, 1);
    }
    draw_line(&mut img, (cx0, cy0), (cx0, cy1), [0, 0, 0], 2);
    draw_line(&mut img, (cx0, cy1), (cx1, cy1), [0, 0, 0], 2);
    let (amin, amax) = (
        cmp.alphas.first().copied().unwrap_or(0.0),
        cmp.alphas.last().copied().unwrap_or(1.0),
    );
    let span = if amax > amin { amax - amin } else { 1.0 };
    let to_px = |a: f64, p: f64| {
        (
            cx0 + ((a - amin) / span * (cx1 - cx0) as f64).round() as i64,
            cy1 - (p.clamp(0.0, 1.0) * (cy1 - cy0) as f64).round() as i64,
        )
    };
    for (i, s) in cmp.series.iter().enumerate() {
        let pts: Vec<(i64, i64)> = cmp.alphas.iter().zip(&s.pck).map(|(&a, &p)| to_px(a, p)).collect();
        for w in pts.windows(2) {
            draw_line(&mut img, w[0], w[1], series_color(i), 3);
        }
        for &(x, y) in &pts {
            fill_rect(&mut img, x - 3, y - 3, x + 4, y + 4, series_color(i));
        }
    }

    let (bx0, by0, bx1, by1) = (cx1 + PAD, PAD, W as i64 - PAD, H as i64 - PAD);
    draw_line(&mut img, (bx0, by0), (bx0, by1), [0, 0, 0], 2);
    draw_line(&mut img, (bx0, by1), (bx1, by1), [0, 0, 0], 2);
    let max_err = cmp.table.iter().filter_map(|r| r.mean_error_px).fold(0.0f64, f64::max);
    let n = cmp.table.len().max(1) as i64;
    let slot = (bx1 - bx0) / n;
    for (i, row) in cmp.table.iter().enumerate() {
        if let Some(e) = row.mean_error_px {
            let hgt = if max_err > 0.0 { (e / max_err * (by1 - by0) as f64 * 0.95) as i64 } else { 0 };
            let x = bx0 + slot * i as i64;
            fill_rect(&mut img, x + slot / 5, by1 - hgt, x + slot * 4 / 5, by1, series_color(i));
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(path)?;
    Ok(())
}
