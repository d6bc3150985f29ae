//! The heatmap network: a frozen ResNet-50 feature extractor, a chain of
//! upsampling blocks fed by skip connections, and a 1×1 sigmoid head after
//! every block (or only after the last one for the ablation variant).

pub mod backbone;
pub mod decoder;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tch::{nn, Device, Kind, Tensor};

use crate::dataset::KeypointSchema;
use crate::error::{Error, Result};
use crate::imaging::FloatImage;
pub use backbone::{BackboneFeatures, NormMode, ResNet50};
pub use decoder::{upsample_nearest, Decoder, UpsampleBlock};

/// ImageNet channel statistics on the `[0, 1]` scale.
pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

pub const WEIGHTS_FILE: &str = "model.safetensors";
pub const CONFIG_FILE: &str = "config.json";
pub const SCHEMA_FILE: &str = "schema.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Five upsampling levels, heads at 14…224.
    Ihm224,
    /// Three upsampling levels, heads at 14…56.
    Ihm56,
    /// Five levels, final head only.
    Hm,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Ihm224 => "ihm224",
            Variant::Ihm56 => "ihm56",
            Variant::Hm => "hm",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ihm224" => Ok(Variant::Ihm224),
            "ihm56" => Ok(Variant::Ihm56),
            "hm" => Ok(Variant::Hm),
            other => Err(Error::Config(format!("unknown variant `{other}` (expected ihm224, ihm56 or hm)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_size: usize,
    pub num_upsample_levels: usize,
    pub base_filters: usize,
    pub dropout_rate: f64,
    pub num_channels: usize,
    pub intermediate_supervision: bool,
    pub backbone_frozen: bool,
}

impl ModelConfig {
    pub fn for_variant(variant: Variant, num_channels: usize) -> Self {
        let (levels, supervision) = match variant {
            Variant::Ihm224 => (5, true),
            Variant::Ihm56 => (3, true),
            Variant::Hm => (5, false),
        };
        Self {
            input_size: 224,
            num_upsample_levels: levels,
            base_filters: 256,
            dropout_rate: 0.2,
            num_channels,
            intermediate_supervision: supervision,
            backbone_frozen: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(1..=5).contains(&self.num_upsample_levels) {
            return bad(format!("num_upsample_levels {} not in [1, 5]", self.num_upsample_levels));
        }
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return bad(format!("input_size {} must be a positive multiple of the backbone stride 32", self.input_size));
        }
        if !self.base_filters.is_power_of_two() || self.base_filters < (1 << self.num_upsample_levels) {
            return bad(format!(
                "base_filters {} must be a power of two >= {}",
                self.base_filters,
                1 << self.num_upsample_levels
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} not in [0, 1)", self.dropout_rate));
        }
        if self.num_channels == 0 {
            return bad("num_channels must be at least 1".into());
        }
        Ok(())
    }

    /// Filters per upsampling block: halved at every level.
    pub fn filter_schedule(&self) -> Vec<i64> {
        (0..self.num_upsample_levels).map(|k| (self.base_filters >> k) as i64).collect()
    }

    /// Spatial size of the output of every upsampling block.
    pub fn level_sizes(&self) -> Vec<usize> {
        (0..self.num_upsample_levels).map(|k| (self.input_size / 16) << k).collect()
    }

    /// Sizes of the heads that exist, smallest first.
    pub fn head_sizes(&self) -> Vec<usize> {
        let sizes = self.level_sizes();
        if self.intermediate_supervision {
            sizes
        } else {
            vec![*sizes.last().expect("at least one level")]
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: ModelConfig = serde_json::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }
}

/// Where the backbone weights come from.
#[derive(Debug, Clone)]
pub enum BackboneSource {
    /// torchvision-named ResNet-50 weights (`.safetensors`, or `.ot` /
    /// `.pt` tensor archives).
    Pretrained(PathBuf),
    /// Randomly initialised backbone; only for tests and offline smoke runs.
    /// Call [`Model::calibrate_backbone`] before use so activations are
    /// normalised.
    RandomInit { seed: i64 },
}

pub struct Model {
    pub config: ModelConfig,
    backbone_vs: nn::VarStore,
    decoder_vs: nn::VarStore,
    backbone: ResNet50,
    decoder: Decoder,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model").field("config", &self.config).finish_non_exhaustive()
    }
}

fn read_tensor_archive(path: &Path) -> Result<Vec<(String, Tensor)>> {
    if !path.exists() {
        return Err(Error::MissingWeights(path.display().to_string()));
    }
    let named = match path.extension().and_then(|e| e.to_str()) {
        Some("safetensors") => Tensor::read_safetensors(path)?,
        _ => Tensor::load_multi(path)?,
    };
    Ok(named)
}

/// Copies `named` tensors into the variables of `vs`, stripping `prefix`
/// from the archive keys. Extra archive entries are ignored.
fn copy_into(vs: &nn::VarStore, named: &[(String, Tensor)], prefix: &str) -> Result<()> {
    let lookup: std::collections::HashMap<&str, &Tensor> = named
        .iter()
        .filter_map(|(k, t)| k.strip_prefix(prefix).map(|k| (k, t)))
        .collect();
    let mut vars = vs.variables();
    let mut names: Vec<String> = vars.keys().cloned().collect();
    names.sort();
    tch::no_grad(|| -> Result<()> {
        for name in names {
            let var = vars.get_mut(&name).expect("key from map");
            let src = lookup
                .get(name.as_str())
                .ok_or_else(|| Error::MissingWeights(format!("tensor `{prefix}{name}` not found")))?;
            if src.size() != var.size() {
                return Err(Error::Shape(format!(
                    "`{prefix}{name}`: checkpoint {:?} vs model {:?}",
                    src.size(),
                    var.size()
                )));
            }
            var.copy_(&src.to_kind(var.kind()));
        }
        Ok(())
    })
}

/// Builds the network. Pretrained weights are required unless the source is
/// explicitly [`BackboneSource::RandomInit`].
pub fn build_model(config: &ModelConfig, source: &BackboneSource) -> Result<Model> {
    config.validate()?;
    if let BackboneSource::RandomInit { seed } = source {
        tch::manual_seed(*seed);
    }
    let mut backbone_vs = nn::VarStore::new(Device::Cpu);
    let backbone = ResNet50::new(&backbone_vs.root());
    if let BackboneSource::Pretrained(path) = source {
        let named = read_tensor_archive(path)?;
        copy_into(&backbone_vs, &named, "")?;
    }
    if config.backbone_frozen {
        backbone_vs.freeze();
    }
    let decoder_vs = nn::VarStore::new(Device::Cpu);
    let decoder = Decoder::new(&decoder_vs.root(), config);
    Ok(Model {
        config: config.clone(),
        backbone_vs,
        decoder_vs,
        backbone,
        decoder,
    })
}

/// Converts an RGB image (0..=255) into a normalised `[3, H, W]` tensor.
pub fn image_to_tensor(img: &FloatImage) -> Tensor {
    let (w, h) = img.dims();
    let mut planar = vec![0f32; 3 * w * h];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = img.get(x, y, c.min(img.channels - 1)) / 255.0;
                planar[(c * h + y) * w + x] = (v - IMAGENET_MEAN[c]) / IMAGENET_STD[c];
            }
        }
    }
    Tensor::from_slice(&planar).view([3, h as i64, w as i64])
}

/// FNV-1a over the raw bytes of every variable, in name order.
pub fn parameter_checksum(vs: &nn::VarStore) -> u64 {
    let vars = vs.variables();
    let mut names: Vec<&String> = vars.keys().collect();
    names.sort();
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for name in names {
        for b in name.bytes() {
            hash = (hash ^ b as u64).wrapping_mul(0x100_0000_01b3);
        }
        let t = vars[name].to_kind(Kind::Float).flatten(0, -1);
        let values: Vec<f32> = Vec::try_from(&t).expect("float tensor");
        for v in values {
            for b in v.to_le_bytes() {
                hash = (hash ^ b as u64).wrapping_mul(0x100_0000_01b3);
            }
        }
    }
    hash
}

fn count_trainable(vs: &nn::VarStore) -> i64 {
    vs.trainable_variables().iter().map(|t| t.numel() as i64).sum()
}

impl Model {
    pub fn backbone_store(&self) -> &nn::VarStore {
        &self.backbone_vs
    }

    pub fn decoder_store(&self) -> &nn::VarStore {
        &self.decoder_vs
    }

    /// Stores whose trainable variables the optimizer should update.
    pub fn trainable_stores(&self) -> Vec<&nn::VarStore> {
        if self.config.backbone_frozen {
            vec![&self.decoder_vs]
        } else {
            vec![&self.backbone_vs, &self.decoder_vs]
        }
    }

    pub fn trainable_parameter_count(&self) -> i64 {
        self.trainable_stores().into_iter().map(count_trainable).sum()
    }

    pub fn backbone_checksum(&self) -> u64 {
        parameter_checksum(&self.backbone_vs)
    }

    pub fn decoder_checksum(&self) -> u64 {
        parameter_checksum(&self.decoder_vs)
    }

    fn check_input(&self, images: &Tensor) -> Result<()> {
        let s = images.size();
        let n = self.config.input_size as i64;
        if s.len() != 4 || s[1] != 3 || s[2] != n || s[3] != n {
            return Err(Error::Shape(format!("expected images [B, 3, {n}, {n}], got {s:?}")));
        }
        Ok(())
    }

    /// Backbone activations needed by the decoder. Gradients are not tracked
    /// through a frozen backbone.
    pub fn backbone_features(&self, images: &Tensor, train: bool) -> Result<BackboneFeatures> {
        self.check_input(images)?;
        let keep = Decoder::required_features(self.config.num_upsample_levels);
        let deepest = 4;
        let features = if self.config.backbone_frozen {
            tch::no_grad(|| self.backbone.features(images, NormMode::Frozen, deepest))
        } else {
            let mode = if train { NormMode::Train } else { NormMode::Frozen };
            self.backbone.features(images, mode, deepest)
        };
        Ok(features.retain(&keep))
    }

    /// Runs the upsampling chain and heads on precomputed features.
    pub fn decode(&self, features: &BackboneFeatures, train: bool) -> Result<Vec<Tensor>> {
        self.decoder.forward_t(features, train)
    }

    /// Full forward pass. Outputs are `[B, N, s, s]` heatmaps for every head,
    /// smallest first. With `train == false` the pass is deterministic.
    pub fn forward(&self, images: &Tensor, train: bool) -> Result<Vec<Tensor>> {
        let features = self.backbone_features(images, train)?;
        self.decode(&features, train)
    }

    /// Replaces backbone batch-norm statistics with those measured on
    /// `images`. Meant for randomly initialised backbones.
    pub fn calibrate_backbone(&self, images: &Tensor) -> Result<()> {
        self.check_input(images)?;
        tch::no_grad(|| self.backbone.features(images, NormMode::Calibrate, 4));
        Ok(())
    }

    /// Writes `model.safetensors`, `config.json` and `schema.json` into `dir`.
    pub fn save_checkpoint(&self, dir: &Path, schema: &KeypointSchema) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut named: Vec<(String, Tensor)> = Vec::new();
        for (prefix, vs) in [("backbone.", &self.backbone_vs), ("decoder.", &self.decoder_vs)] {
            let mut vars: Vec<(String, Tensor)> = vs.variables().into_iter().collect();
            vars.sort_by(|a, b| a.0.cmp(&b.0));
            named.extend(vars.into_iter().map(|(k, t)| (format!("{prefix}{k}"), t)));
        }
        Tensor::write_safetensors(&named, dir.join(WEIGHTS_FILE))?;
        let cfg_path = dir.join(CONFIG_FILE);
        fs::write(&cfg_path, serde_json::to_string_pretty(&self.config)?).map_err(|e| Error::io(&cfg_path, e))?;
        schema.save(&dir.join(SCHEMA_FILE))
    }

    /// Reloads only the weights from a checkpoint directory into this model.
    pub fn load_weights(&self, dir: &Path) -> Result<()> {
        let named = read_tensor_archive(&dir.join(WEIGHTS_FILE))?;
        copy_into(&self.backbone_vs, &named, "backbone.")?;
        copy_into(&self.decoder_vs, &named, "decoder.")
    }
}

/// Loads a checkpoint directory written by [`Model::save_checkpoint`].
pub fn load_checkpoint(dir: &Path) -> Result<(Model, KeypointSchema)> {
    if !dir.is_dir() {
        return Err(Error::io(dir, std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint directory not found")));
    }
    let config = ModelConfig::load(&dir.join(CONFIG_FILE))?;
    let schema = KeypointSchema::load(&dir.join(SCHEMA_FILE))?;
    if schema.num_channels() != config.num_channels {
        return Err(Error::Config(format!(
            "schema has {} channels but config expects {}",
            schema.num_channels(),
            config.num_channels
        )));
    }
    let model = build_model(&config, &BackboneSource::RandomInit { seed: 0 })?;
    model.load_weights(dir)?;
    Ok((model, schema))
}
