//! The optimisation loop: Adam over the trainable stores, epoch-level
//! validation, learning-rate decay on plateaus, early stopping and
//! best-checkpoint retention.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tch::{nn, nn::OptimizerConfig, Kind, Tensor};

use super::augment::{augment, AugmentationConfig};
use super::loss::multiscale_loss;
use crate::compositor::sample_seed;
use crate::dataset::{DatasetManifest, KeypointSchema, SampleAnnotation};
use crate::error::{Error, Result};
use crate::heatmap::render_pyramid;
use crate::imaging::FloatImage;
use crate::model::backbone::FEATURE_CHANNELS;
use crate::model::{image_to_tensor, BackboneFeatures, Decoder, Model};

/// Absolute decrease of the validation loss that counts as an improvement.
pub const IMPROVEMENT_EPSILON: f64 = 1e-7;
/// Upper bound on memory spent caching frozen-backbone activations.
pub const FEATURE_CACHE_BYTES: usize = 1 << 30;
pub const LOG_FILE: &str = "training_log.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub augmentation: AugmentationConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1.5e-5,
            batch_size: 16,
            max_epochs: 200,
            early_stop_patience: 20,
            plateau_patience: 10,
            plateau_factor: 0.1,
            augmentation: AugmentationConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: TrainConfig = serde_json::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.early_stop_patience == 0 || self.plateau_patience == 0 {
            return bad("batch_size, max_epochs and patiences must be positive");
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad("plateau_factor must lie in (0, 1)");
        }
        if self.plateau_patience >= self.early_stop_patience {
            return bad("plateau_patience must be smaller than early_stop_patience");
        }
        self.augmentation.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MonitorDecision {
    Improved,
    Stagnant,
    Stop,
}

/// Plateau and early-stopping bookkeeping on the validation loss.
#[derive(Debug, Clone)]
pub struct ValidationMonitor {
    pub best: f64,
    pub lr: f64,
    since_best: usize,
    since_reduction: usize,
    plateau_patience: usize,
    plateau_factor: f64,
    early_stop_patience: usize,
}

impl ValidationMonitor {
    pub fn new(config: &TrainConfig) -> Self {
        Self {
            best: f64::INFINITY,
            lr: config.learning_rate,
            since_best: 0,
            since_reduction: 0,
            plateau_patience: config.plateau_patience,
            plateau_factor: config.plateau_factor,
            early_stop_patience: config.early_stop_patience,
        }
    }

    pub fn epochs_without_improvement(&self) -> usize {
        self.since_best
    }

    pub fn observe(&mut self, val_loss: f64) -> MonitorDecision {
        if val_loss < self.best - IMPROVEMENT_EPSILON {
            self.best = val_loss;
            self.since_best = 0;
            self.since_reduction = 0;
            return MonitorDecision::Improved;
        }
        self.since_best += 1;
        self.since_reduction += 1;
        if self.since_reduction >= self.plateau_patience {
            self.lr *= self.plateau_factor;
            self.since_reduction = 0;
        }
        if self.since_best >= self.early_stop_patience {
            MonitorDecision::Stop
        } else {
            MonitorDecision::Stagnant
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub best_checkpoint: Option<PathBuf>,
    pub log: Vec<EpochLog>,
    pub stopped_early: bool,
}

/// An image resized to the network input together with its annotation in
/// the same pixel frame.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub image: FloatImage,
    pub annotation: SampleAnnotation,
}

impl TrainingSample {
    pub fn new(image: &FloatImage, annotation: &SampleAnnotation, input_size: usize) -> Self {
        let image = if image.dims() == (input_size, input_size) {
            image.clone()
        } else {
            image.resize(input_size, input_size)
        };
        let annotation = annotation.rescaled(input_size as u32, input_size as u32);
        Self { image, annotation }
    }
}

pub fn load_samples(manifest: &DatasetManifest, input_size: usize) -> Result<Vec<TrainingSample>> {
    manifest
        .samples
        .par_iter()
        .map(|ann| {
            let image = FloatImage::load_rgb(&manifest.image_path(ann))?;
            if image.dims() != (ann.width as usize, ann.height as usize) {
                return Err(Error::Shape(format!(
                    "{}: image is {}x{} but annotation says {}x{}",
                    ann.image_path, image.width, image.height, ann.width, ann.height
                )));
            }
            Ok(TrainingSample::new(&image, ann, input_size))
        })
        .collect()
}

/// Stacks images into a normalised `[B, 3, H, W]` batch.
pub fn images_to_batch(images: &[&FloatImage]) -> Tensor {
    let ts: Vec<Tensor> = images.iter().map(|i| image_to_tensor(i)).collect();
    Tensor::stack(&ts, 0)
}

/// Per-level `[1, C, s, s]` target tensors for one annotation.
pub fn sample_targets(annotation: &SampleAnnotation, schema: &KeypointSchema, head_sizes: &[usize]) -> Result<Vec<Tensor>> {
    let pyramid = render_pyramid(annotation, schema, head_sizes)?;
    Ok(pyramid
        .levels
        .iter()
        .map(|s| Tensor::from_slice(&s.values).view([1, s.channels() as i64, s.height as i64, s.width as i64]))
        .collect())
}

fn cat_levels(per_sample: &[&Vec<Tensor>]) -> Vec<Tensor> {
    let levels = per_sample.first().map_or(0, |t| t.len());
    (0..levels)
        .map(|k| {
            let parts: Vec<&Tensor> = per_sample.iter().map(|t| &t[k]).collect();
            Tensor::cat(&parts, 0)
        })
        .collect()
}

fn feature_bytes_per_sample(input_size: usize, levels: usize) -> usize {
    Decoder::required_features(levels)
        .into_iter()
        .map(|i| {
            let side = input_size.div_ceil(2 << i);
            FEATURE_CHANNELS[i] as usize * side * side * 4
        })
        .sum()
}

fn compute_features(model: &Model, samples: &[TrainingSample], batch_size: usize) -> Result<Vec<BackboneFeatures>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size) {
        let images: Vec<&FloatImage> = chunk.iter().map(|s| &s.image).collect();
        let f = model.backbone_features(&images_to_batch(&images), false)?;
        out.extend(f.split());
    }
    Ok(out)
}

/// Mean multiscale loss over `samples` in inference mode, computed with a
/// full forward pass.
pub fn evaluate_loss(model: &Model, samples: &[TrainingSample], schema: &KeypointSchema, batch_size: usize) -> Result<f64> {
    let heads = model.config.head_sizes();
    let mut total = 0.0;
    for chunk in samples.chunks(batch_size.max(1)) {
        let images: Vec<&FloatImage> = chunk.iter().map(|s| &s.image).collect();
        let targets = chunk
            .iter()
            .map(|s| sample_targets(&s.annotation, schema, &heads))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Vec<Tensor>> = targets.iter().collect();
        let loss = tch::no_grad(|| -> Result<f64> {
            let preds = model.forward(&images_to_batch(&images), false)?;
            Ok(multiscale_loss(&preds, &cat_levels(&refs))?.double_value(&[]))
        })?;
        total += loss * chunk.len() as f64;
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Called after every epoch; returning `false` stops training.
pub type EpochHook<'a> = dyn FnMut(&Model, &EpochLog) -> bool + 'a;

fn snapshot(stores: &[&nn::VarStore]) -> Vec<Vec<(String, Tensor)>> {
    stores
        .iter()
        .map(|vs| vs.variables().into_iter().map(|(k, v)| (k, v.detach().copy())).collect())
        .collect()
}

fn restore(stores: &[&nn::VarStore], snap: &[Vec<(String, Tensor)>]) {
    tch::no_grad(|| {
        for (vs, saved) in stores.iter().zip(snap) {
            let mut vars = vs.variables();
            for (name, value) in saved {
                if let Some(v) = vars.get_mut(name) {
                    v.copy_(value);
                }
            }
        }
    });
}

fn write_log_row(path: &Path, row: &EpochLog) -> Result<()> {
    let mut f = fs::OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "{},{},{},{}", row.epoch, row.train_loss, row.val_loss, row.lr).map_err(|e| Error::io(path, e))
}

/// Trains the decoder (and the backbone when it is not frozen) and leaves
/// the model holding the weights of the best validation epoch, which are
/// also written to `out_dir` together with `training_log.csv`.
pub fn train(
    model: &mut Model,
    schema: &KeypointSchema,
    train_set: &[TrainingSample],
    val_set: &[TrainingSample],
    config: &TrainConfig,
    out_dir: &Path,
    mut hook: Option<&mut EpochHook<'_>>,
) -> Result<TrainState> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Config("training and validation sets must be non-empty".into()));
    }
    let train_paths: std::collections::HashSet<&str> = train_set.iter().map(|s| s.annotation.image_path.as_str()).collect();
    if let Some(s) = val_set.iter().find(|s| train_paths.contains(s.annotation.image_path.as_str())) {
        return Err(Error::Config(format!("`{}` is in both training and validation sets", s.annotation.image_path)));
    }
    if schema.num_channels() != model.config.num_channels {
        return Err(Error::Config(format!(
            "schema has {} channels, model expects {}",
            schema.num_channels(),
            model.config.num_channels
        )));
    }
    let input = model.config.input_size;
    if let Some(s) = train_set.iter().chain(val_set).find(|s| s.image.dims() != (input, input)) {
        return Err(Error::Shape(format!("`{}` is not {input}x{input}", s.annotation.image_path)));
    }

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join(LOG_FILE);
    fs::write(&log_path, "epoch,train_loss,val_loss,lr\n").map_err(|e| Error::io(&log_path, e))?;

    tch::manual_seed(config.seed as i64);
    let heads = model.config.head_sizes();
    let augmenting = config.augmentation.any_enabled();
    let cache_ok = model.config.backbone_frozen
        && feature_bytes_per_sample(input, model.config.num_upsample_levels) * (train_set.len() + val_set.len())
            <= FEATURE_CACHE_BYTES;
    let train_features = if cache_ok && !augmenting {
        Some(compute_features(model, train_set, config.batch_size)?)
    } else {
        None
    };
    let val_features = if cache_ok { Some(compute_features(model, val_set, config.batch_size)?) } else { None };
    let render_all = |set: &[TrainingSample]| -> Result<Vec<Vec<Tensor>>> {
        set.iter().map(|s| sample_targets(&s.annotation, schema, &heads)).collect()
    };
    let train_targets = if augmenting { None } else { Some(render_all(train_set)?) };
    let val_targets = render_all(val_set)?;

    let stores = model.trainable_stores();
    let mut optimizers = stores
        .iter()
        .map(|vs| nn::Adam::default().build(vs, config.learning_rate))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    drop(stores);

    let mut monitor = ValidationMonitor::new(config);
    let mut state = TrainState {
        epoch: 0,
        best_val_loss: f64::INFINITY,
        best_epoch: 0,
        best_checkpoint: None,
        log: Vec::new(),
        stopped_early: false,
    };
    let mut best_snapshot = None;
    let mut batch_id = 0usize;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=config.max_epochs {
        let lr = monitor.lr;
        for opt in &mut optimizers {
            opt.set_lr(lr);
        }
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(sample_seed(config.seed, epoch as u64)));

        let mut train_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let (preds, targets) = if augmenting {
                let augmented = batch
                    .par_iter()
                    .map(|&i| {
                        let s = &train_set[i];
                        let seed = sample_seed(sample_seed(config.seed, epoch as u64), i as u64);
                        let (img, ann) = augment(&s.image, &s.annotation, &config.augmentation, seed)?;
                        let t = sample_targets(&ann, schema, &heads)?;
                        Ok((img, t))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let images: Vec<&FloatImage> = augmented.iter().map(|(i, _)| i).collect();
                let targets: Vec<&Vec<Tensor>> = augmented.iter().map(|(_, t)| t).collect();
                (model.forward(&images_to_batch(&images), true)?, cat_levels(&targets))
            } else {
                let targets: Vec<&Vec<Tensor>> = batch.iter().map(|&i| &train_targets.as_ref().expect("rendered")[i]).collect();
                let preds = match &train_features {
                    Some(cache) => {
                        let parts: Vec<&BackboneFeatures> = batch.iter().map(|&i| &cache[i]).collect();
                        model.decode(&BackboneFeatures::cat(&parts), true)?
                    }
                    None => {
                        let images: Vec<&FloatImage> = batch.iter().map(|&i| &train_set[i].image).collect();
                        model.forward(&images_to_batch(&images), true)?
                    }
                };
                (preds, cat_levels(&targets))
            };
            let loss = multiscale_loss(&preds, &targets)?;
            let value = loss.double_value(&[]);
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { batch: batch_id, lr });
            }
            for opt in &mut optimizers {
                opt.zero_grad();
            }
            loss.backward();
            for opt in &mut optimizers {
                opt.step();
            }
            train_sum += value * batch.len() as f64;
            batch_id += 1;
        }
        let train_loss = train_sum / train_set.len() as f64;

        let mut val_sum = 0.0;
        for (b, chunk) in (0..val_set.len()).collect::<Vec<_>>().chunks(config.batch_size).enumerate() {
            let targets: Vec<&Vec<Tensor>> = chunk.iter().map(|&i| &val_targets[i]).collect();
            let value = tch::no_grad(|| -> Result<f64> {
                let preds = match &val_features {
                    Some(cache) => {
                        let parts: Vec<&BackboneFeatures> = chunk.iter().map(|&i| &cache[i]).collect();
                        model.decode(&BackboneFeatures::cat(&parts), false)?
                    }
                    None => {
                        let images: Vec<&FloatImage> = chunk.iter().map(|&i| &val_set[i].image).collect();
                        model.forward(&images_to_batch(&images), false)?
                    }
                };
                Ok(multiscale_loss(&preds, &cat_levels(&targets))?.to_kind(Kind::Double).double_value(&[]))
            })?;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { batch: b, lr });
            }
            val_sum += value * chunk.len() as f64;
        }
        let val_loss = val_sum / val_set.len() as f64;

        let row = EpochLog {
            epoch,
            train_loss,
            val_loss,
            lr,
        };
        write_log_row(&log_path, &row)?;
        state.log.push(row.clone());
        state.epoch = epoch;
        let decision = monitor.observe(val_loss);
        if decision == MonitorDecision::Improved {
            state.best_val_loss = val_loss;
            state.best_epoch = epoch;
            best_snapshot = Some(snapshot(&model.trainable_stores()));
        }
        log::info!("epoch {epoch}: train {train_loss:.6} val {val_loss:.6} lr {lr:e}");
        if decision == MonitorDecision::Stop {
            state.stopped_early = epoch < config.max_epochs;
            break;
        }
        if let Some(h) = hook.as_mut() {
            if !h(model, &row) {
                break;
            }
        }
    }

    if let Some(snap) = &best_snapshot {
        restore(&model.trainable_stores(), snap);
    }
    model.save_checkpoint(out_dir, schema)?;
    state.best_checkpoint = Some(out_dir.to_path_buf());
    Ok(state)
}
