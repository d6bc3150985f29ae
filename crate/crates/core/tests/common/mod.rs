//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use kpforge::dataset::{Keypoint, KeypointSchema, SampleAnnotation, Source};
use kpforge::heatmap::HeatmapStack;
use kpforge::imaging::FloatImage;
use kpforge::inference::Detection;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Exhaustive decode: every pixel is compared against its full 3×3 window.
pub fn decode_oracle(stack: &HeatmapStack, schema: &KeypointSchema, threshold: f32, scale: f64) -> Vec<Detection> {
    let (w, h) = (stack.width as i64, stack.height as i64);
    let mut out = Vec::new();
    for (c, ch) in schema.channels().iter().enumerate() {
        let mut best: Option<(i64, i64, f32)> = None;
        for y in 0..h {
            for x in 0..w {
                let v = stack.get(c, x as usize, y as usize);
                if best.is_none_or(|b| v > b.2) {
                    best = Some((x, y, v));
                }
            }
        }
        let argmax = best.filter(|b| b.2 >= threshold);
        let mut found: Vec<(i64, i64, f32)> = Vec::new();
        if ch.members.len() == 1 {
            found.extend(argmax);
        } else {
            for y in 0..h {
                for x in 0..w {
                    let v = stack.get(c, x as usize, y as usize);
                    let mut strict = true;
                    for dy in -1..=1i64 {
                        for dx in -1..=1i64 {
                            let (nx, ny) = (x + dx, y + dy);
                            if (dx, dy) == (0, 0) || nx < 0 || ny < 0 || nx >= w || ny >= h {
                                continue;
                            }
                            if stack.get(c, nx as usize, ny as usize) >= v {
                                strict = false;
                            }
                        }
                    }
                    if strict && v >= threshold {
                        found.push((x, y, v));
                    }
                }
            }
            if found.is_empty() {
                found.extend(argmax);
            }
            // descending confidence, then row-major
            found.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then((a.1, a.0).cmp(&(b.1, b.0))));
            found.truncate(ch.members.len());
        }
        out.extend(found.into_iter().map(|(x, y, v)| Detection {
            name: ch.name.clone(),
            x: x as f64 * scale,
            y: y as f64 * scale,
            confidence: v,
        }));
    }
    out
}

/// Brute-force PCK: groups are assigned by repeatedly taking the closest
/// remaining (member, peak) pair.
pub fn pck_oracle(
    detections: &[Vec<Detection>],
    annotations: &[SampleAnnotation],
    schema: &KeypointSchema,
    alpha: f64,
) -> (usize, usize) {
    let mut correct = 0;
    let mut total = 0;
    for (dets, ann) in detections.iter().zip(annotations) {
        let thr = alpha * (ann.bbox[2] - ann.bbox[0]).max(ann.bbox[3] - ann.bbox[1]);
        for ch in schema.channels() {
            let members: Vec<&Keypoint> = ch.members.iter().filter_map(|m| ann.keypoints.iter().find(|k| &k.name == m)).collect();
            let peaks: Vec<&Detection> = dets.iter().filter(|d| d.name == ch.name).collect();
            total += members.len();
            if members.len() == 1 && ch.members.len() == 1 {
                if let Some(p) = peaks.first() {
                    if ((p.x - members[0].x).powi(2) + (p.y - members[0].y).powi(2)).sqrt() < thr {
                        correct += 1;
                    }
                }
                continue;
            }
            let mut m_free = vec![true; members.len()];
            let mut p_free = vec![true; peaks.len()];
            loop {
                let mut best: Option<(f64, usize, usize)> = None;
                for (i, m) in members.iter().enumerate() {
                    for (j, p) in peaks.iter().enumerate() {
                        if !m_free[i] || !p_free[j] {
                            continue;
                        }
                        let d = ((p.x - m.x).powi(2) + (p.y - m.y).powi(2)).sqrt();
                        if best.is_none_or(|b| d < b.0) {
                            best = Some((d, i, j));
                        }
                    }
                }
                let Some((d, i, j)) = best else { break };
                m_free[i] = false;
                p_free[j] = false;
                if d < thr {
                    correct += 1;
                }
            }
        }
    }
    (correct, total)
}

/// Dense direct solve of the masked Poisson problem for one channel, built
/// straight from the definition: interior mask pixels are unknown, their
/// discrete Laplacian must equal that of `fg`, all other pixels keep `bg`.
pub fn dense_poisson(fg: &FloatImage, mask: &FloatImage, bg: &FloatImage, c: usize) -> FloatImage {
    let (w, h) = (fg.width, fg.height);
    let is_unknown = |x: usize, y: usize| x > 0 && y > 0 && x + 1 < w && y + 1 < h && mask.get(x, y, 0) >= 0.5;
    let mut ids = vec![None; w * h];
    let mut pixels = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if is_unknown(x, y) {
                ids[y * w + x] = Some(pixels.len());
                pixels.push((x, y));
            }
        }
    }
    let n = pixels.len();
    let mut a = DMatrix::<f64>::zeros(n, n);
    let mut b = DVector::<f64>::zeros(n);
    for (i, &(x, y)) in pixels.iter().enumerate() {
        for (dx, dy) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
            let (nx, ny) = ((x as i64 + dx) as usize, (y as i64 + dy) as usize);
            a[(i, i)] += 1.0;
            b[i] += fg.get(x, y, c) as f64 - fg.get(nx, ny, c) as f64;
            match ids[ny * w + nx] {
                Some(j) => a[(i, j)] -= 1.0,
                None => b[i] += bg.get(nx, ny, c) as f64,
            }
        }
    }
    let sol = a.lu().solve(&b).expect("non-singular Poisson system");
    let mut out = bg.channel(c);
    for (i, &(x, y)) in pixels.iter().enumerate() {
        out.set(x, y, 0, sol[i] as f32);
    }
    out
}

pub fn disc_mask(w: usize, h: usize, cx: f64, cy: f64, r: f64) -> FloatImage {
    FloatImage::from_fn(w, h, 1, |x, y, _| {
        if (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= r * r {
            1.0
        } else {
            0.0
        }
    })
}

pub fn random_image(rng: &mut impl Rng, w: usize, h: usize, c: usize) -> FloatImage {
    FloatImage::from_fn(w, h, c, |_, _, _| rng.random_range(0.0..255.0))
}

/// Random stack mixing smooth blobs, quantised plateaus and ties.
pub fn random_stack(rng: &mut impl Rng, schema: &KeypointSchema, w: usize, h: usize) -> HeatmapStack {
    let names = schema.channels().into_iter().map(|c| c.name).collect();
    let mut s = HeatmapStack::zeros(w, h, names);
    for c in 0..s.channels() {
        let kind = rng.random_range(0..3);
        let blobs: Vec<(f64, f64, f64, f64)> = (0..rng.random_range(0..5))
            .map(|_| {
                (
                    rng.random_range(0.0..w as f64),
                    rng.random_range(0.0..h as f64),
                    rng.random_range(0.5..4.0),
                    rng.random_range(0.1..1.0),
                )
            })
            .collect();
        for y in 0..h {
            for x in 0..w {
                let v = match kind {
                    0 => rng.random_range(0.0f32..1.0),
                    1 => (rng.random_range(0..5) as f32) / 4.0,
                    _ => blobs
                        .iter()
                        .map(|&(bx, by, sg, amp)| amp * (-((x as f64 - bx).powi(2) + (y as f64 - by).powi(2)) / (2.0 * sg * sg)).exp())
                        .fold(0.0, f64::max) as f32,
                };
                s.set(c, x, y, v);
            }
        }
    }
    s
}

pub fn annotation(width: u32, height: u32, bbox: [f64; 4], kps: &[(&str, f64, f64, bool)]) -> SampleAnnotation {
    SampleAnnotation {
        image_path: "img.png".into(),
        width,
        height,
        bbox,
        tool_name: "tool".into(),
        source: Source::Synthetic3d,
        keypoints: kps
            .iter()
            .map(|&(n, x, y, visible)| Keypoint {
                name: n.into(),
                x,
                y,
                visible,
            })
            .collect(),
    }
}

/// Schema with four keypoints where `c` and `d` share a channel.
pub fn grouped_schema() -> KeypointSchema {
    KeypointSchema::new(
        "tool",
        vec!["a".into(), "b".into(), "c".into(), "d".into()],
        vec![vec!["c".into(), "d".into()]],
    )
    .unwrap()
}

/// Sets of detections compared exactly, order included.
pub fn same_detections(a: &[Detection], b: &[Detection]) -> bool {
    a.len() == b.len()
        && a.iter()
            .zip(b)
            .all(|(p, q)| p.name == q.name && p.x == q.x && p.y == q.y && p.confidence == q.confidence)
}
