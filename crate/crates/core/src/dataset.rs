//! Keypoint schema, per-image annotations and line-delimited JSON manifests.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Component, Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Keypoints of one tool and the groups of look-alike keypoints that share a
/// heatmap channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeypointSchema {
    #[serde(rename = "tool")]
    pub tool_name: String,
    #[serde(rename = "keypoints")]
    pub keypoint_names: Vec<String>,
    #[serde(default)]
    pub merge_groups: Vec<Vec<String>>,
}

/// One output channel of the network: a single keypoint or a merge group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelSpec {
    pub name: String,
    pub members: Vec<String>,
}

impl ChannelSpec {
    pub fn is_group(&self) -> bool {
        self.members.len() > 1
    }
}

impl KeypointSchema {
    pub fn new(
        tool_name: impl Into<String>,
        keypoint_names: Vec<String>,
        merge_groups: Vec<Vec<String>>,
    ) -> Result<Self> {
        let schema = Self {
            tool_name: tool_name.into(),
            keypoint_names,
            merge_groups,
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tool_name.is_empty() {
            return Err(Error::Schema("tool name is empty".into()));
        }
        if self.keypoint_names.is_empty() {
            return Err(Error::Schema("schema has no keypoints".into()));
        }
        let mut seen = HashSet::new();
        for name in &self.keypoint_names {
            if name.is_empty() {
                return Err(Error::Schema("empty keypoint name".into()));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::Schema(format!("duplicate keypoint name `{name}`")));
            }
        }
        let mut grouped = HashSet::new();
        for group in &self.merge_groups {
            if group.is_empty() {
                return Err(Error::Schema("empty merge group".into()));
            }
            for name in group {
                if !seen.contains(name.as_str()) {
                    return Err(Error::Schema(format!("merge group member `{name}` is not a keypoint")));
                }
                if !grouped.insert(name.as_str()) {
                    return Err(Error::Schema(format!("`{name}` appears in more than one merge group")));
                }
            }
        }
        Ok(())
    }

    /// Channel layout in keypoint order; a merge group sits at the position of
    /// its first member and is named by joining its members with `+`.
    pub fn channels(&self) -> Vec<ChannelSpec> {
        let mut out = Vec::new();
        let mut emitted = HashSet::new();
        for name in &self.keypoint_names {
            if emitted.contains(name) {
                continue;
            }
            match self.merge_groups.iter().find(|g| g.contains(name)) {
                Some(group) => {
                    // order members by schema order so the layout is canonical
                    let members: Vec<String> = self
                        .keypoint_names
                        .iter()
                        .filter(|k| group.contains(k))
                        .cloned()
                        .collect();
                    emitted.extend(members.iter().cloned());
                    out.push(ChannelSpec {
                        name: members.join("+"),
                        members,
                    });
                }
                None => {
                    emitted.insert(name.clone());
                    out.push(ChannelSpec {
                        name: name.clone(),
                        members: vec![name.clone()],
                    });
                }
            }
        }
        out
    }

    pub fn num_channels(&self) -> usize {
        self.channels().len()
    }

    /// Maps every keypoint name to its channel index.
    pub fn channel_index(&self) -> HashMap<String, usize> {
        self.channels()
            .iter()
            .enumerate()
            .flat_map(|(i, ch)| ch.members.iter().map(move |m| (m.clone(), i)))
            .collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let schema: KeypointSchema = serde_json::from_str(&text)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Synthetic3d,
    Composite2d,
    Real,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Keypoint {
    pub name: String,
    pub x: f64,
    pub y: f64,
    pub visible: bool,
}

/// One labelled image. Coordinates are continuous pixels with the origin at
/// the centre of the top-left pixel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleAnnotation {
    #[serde(rename = "image")]
    pub image_path: String,
    pub width: u32,
    pub height: u32,
    /// `[x_min, y_min, x_max, y_max]` in pixels.
    pub bbox: [f64; 4],
    #[serde(rename = "tool")]
    pub tool_name: String,
    pub source: Source,
    pub keypoints: Vec<Keypoint>,
}

impl SampleAnnotation {
    pub fn bbox_size(&self) -> (f64, f64) {
        (self.bbox[2] - self.bbox[0], self.bbox[3] - self.bbox[1])
    }

    pub fn keypoint(&self, name: &str) -> Option<&Keypoint> {
        self.keypoints.iter().find(|k| k.name == name)
    }

    pub fn in_frame(&self, x: f64, y: f64) -> bool {
        x >= 0.0 && y >= 0.0 && x < self.width as f64 && y < self.height as f64
    }

    /// Rescales the annotation to a new image size.
    pub fn rescaled(&self, width: u32, height: u32) -> SampleAnnotation {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        let mut out = self.clone();
        out.width = width;
        out.height = height;
        out.bbox = [self.bbox[0] * sx, self.bbox[1] * sy, self.bbox[2] * sx, self.bbox[3] * sy];
        for k in &mut out.keypoints {
            k.x *= sx;
            k.y *= sy;
        }
        out
    }

    /// Checks the annotation invariants; `line` is reported in errors.
    pub fn validate(&self, schema: &KeypointSchema, line: usize) -> Result<()> {
        let invalid = |field: &'static str, message: String| Error::Validation { line, field, message };
        let path = Path::new(&self.image_path);
        if self.image_path.is_empty()
            || path.is_absolute()
            || path.components().any(|c| !matches!(c, Component::Normal(_) | Component::CurDir))
        {
            return Err(invalid("image", format!("`{}` does not resolve under the manifest root", self.image_path)));
        }
        if self.width == 0 {
            return Err(invalid("width", "must be positive".into()));
        }
        if self.height == 0 {
            return Err(invalid("height", "must be positive".into()));
        }
        let [x0, y0, x1, y1] = self.bbox;
        let (w, h) = (self.width as f64, self.height as f64);
        if !self.bbox.iter().all(|v| v.is_finite()) || !(0.0 <= x0 && x0 < x1 && x1 <= w && 0.0 <= y0 && y0 < y1 && y1 <= h) {
            return Err(invalid("bbox", format!("{:?} outside {}x{} or empty", self.bbox, self.width, self.height)));
        }
        if self.tool_name != schema.tool_name {
            return Err(Error::Schema(format!(
                "line {line}: tool `{}` does not match schema tool `{}`",
                self.tool_name, schema.tool_name
            )));
        }
        let mut seen = HashSet::new();
        for kp in &self.keypoints {
            if !schema.keypoint_names.contains(&kp.name) {
                return Err(Error::Schema(format!("line {line}: unknown keypoint `{}`", kp.name)));
            }
            if !seen.insert(kp.name.as_str()) {
                return Err(invalid("keypoints", format!("duplicate keypoint `{}`", kp.name)));
            }
            if !kp.x.is_finite() || !kp.y.is_finite() {
                return Err(invalid("keypoints", format!("non-finite coordinate for `{}`", kp.name)));
            }
            if kp.visible && !self.in_frame(kp.x, kp.y) {
                return Err(invalid(
                    "keypoints",
                    format!("visible keypoint `{}` at ({}, {}) outside {}x{}", kp.name, kp.x, kp.y, self.width, self.height),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub samples: Vec<SampleAnnotation>,
    pub schema: KeypointSchema,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn image_path(&self, sample: &SampleAnnotation) -> PathBuf {
        self.root.join(&sample.image_path)
    }

    fn with_samples(&self, samples: Vec<SampleAnnotation>) -> DatasetManifest {
        DatasetManifest {
            root: self.root.clone(),
            samples,
            schema: self.schema.clone(),
        }
    }
}

/// Reads a manifest; image paths are resolved relative to the manifest's
/// directory. Blank lines are skipped.
pub fn load_manifest(path: &Path, schema: &KeypointSchema) -> Result<DatasetManifest> {
    schema.validate()?;
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut samples = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SampleAnnotation = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        record.validate(schema, line_no)?;
        samples.push(record);
    }
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(DatasetManifest {
        root,
        samples,
        schema: schema.clone(),
    })
}

pub fn write_manifest(path: &Path, samples: &[SampleAnnotation]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Seeded train/validation split. The validation part holds
/// `round(fraction * n)` samples, at least one, and at most `n - 1` when the
/// manifest has more than one sample. Both parts keep manifest order.
pub fn split_dataset(
    manifest: &DatasetManifest,
    validation_fraction: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest)> {
    if manifest.is_empty() {
        return Err(Error::Config("cannot split an empty manifest".into()));
    }
    if !(validation_fraction > 0.0 && validation_fraction < 1.0) {
        return Err(Error::Config(format!("validation fraction {validation_fraction} not in (0, 1)")));
    }
    let n = manifest.len();
    let mut n_val = ((validation_fraction * n as f64).round() as usize).max(1);
    if n > 1 {
        n_val = n_val.min(n - 1);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_val = vec![false; n];
    for &i in &order[..n_val] {
        is_val[i] = true;
    }
    let (mut train, mut val) = (Vec::with_capacity(n - n_val), Vec::with_capacity(n_val));
    for (i, s) in manifest.samples.iter().enumerate() {
        if is_val[i] {
            val.push(s.clone());
        } else {
            train.push(s.clone());
        }
    }
    Ok((manifest.with_samples(train), manifest.with_samples(val)))
}
