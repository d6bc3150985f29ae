//! Upsampling chain with skip concatenation and per-level heatmap heads.

use tch::nn::{self, ModuleT};
use tch::Tensor;

use super::backbone::{batch_norm, BackboneFeatures, FEATURE_CHANNELS};
use super::ModelConfig;
use crate::error::{Error, Result};

/// Nearest-neighbour 2× upsampling.
pub fn upsample_nearest(x: &Tensor) -> Tensor {
    let s = x.size();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    x.upsample_nearest2d([2 * h, 2 * w], None, None)
}

/// Index into [`BackboneFeatures::maps`] of the skip used by block `level`,
/// or `None` at full resolution where the backbone has no activation.
pub fn skip_source(level: usize) -> Option<usize> {
    (level < 4).then(|| 3 - level)
}

#[derive(Debug)]
struct ConvBlock {
    conv: nn::Conv2D,
    bn: nn::BatchNorm,
}

impl ConvBlock {
    fn new(p: nn::Path, c_in: i64, c_out: i64) -> Self {
        let cfg = nn::ConvConfig {
            padding: 1,
            bias: false,
            ..Default::default()
        };
        Self {
            conv: nn::conv2d(&p / "conv", c_in, c_out, 3, cfg),
            bn: batch_norm(&p / "bn", c_out),
        }
    }

    fn forward_t(&self, x: &Tensor, dropout: f64, train: bool) -> Tensor {
        self.bn.forward_t(&x.apply(&self.conv), train).leaky_relu().dropout(dropout, train)
    }
}

/// Doubles the spatial size, concatenates the skip activation, then applies
/// two conv → batch-norm → leaky-ReLU → dropout blocks.
#[derive(Debug)]
pub struct UpsampleBlock {
    first: ConvBlock,
    second: ConvBlock,
    pub in_channels: i64,
    pub skip_channels: i64,
    pub filters: i64,
    pub dropout: f64,
}

impl UpsampleBlock {
    pub fn new(p: nn::Path, in_channels: i64, skip_channels: i64, filters: i64, dropout: f64) -> Self {
        Self {
            first: ConvBlock::new(&p / "block1", in_channels + skip_channels, filters),
            second: ConvBlock::new(&p / "block2", filters, filters),
            in_channels,
            skip_channels,
            filters,
            dropout,
        }
    }

    pub fn forward_t(&self, features: &Tensor, skip: Option<&Tensor>, train: bool) -> Result<Tensor> {
        let up = upsample_nearest(features);
        let x = match skip {
            Some(s) => {
                let (us, ss) = (up.size(), s.size());
                if us[0] != ss[0] || us[2..] != ss[2..] || ss[1] != self.skip_channels {
                    return Err(Error::Shape(format!(
                        "skip {ss:?} does not match upsampled features {us:?} (expected {} skip channels)",
                        self.skip_channels
                    )));
                }
                Tensor::cat(&[&up, s], 1)
            }
            None if self.skip_channels != 0 => {
                return Err(Error::Shape("block expects a skip connection".into()));
            }
            None => up,
        };
        let x = self.first.forward_t(&x, self.dropout, train);
        Ok(self.second.forward_t(&x, self.dropout, train))
    }
}

/// The full upsampling chain plus its sigmoid heads.
#[derive(Debug)]
pub struct Decoder {
    blocks: Vec<UpsampleBlock>,
    /// `(level, head)` pairs; only the last level has a head without
    /// intermediate supervision.
    heads: Vec<(usize, nn::Conv2D)>,
}

impl Decoder {
    pub fn new(p: &nn::Path, config: &ModelConfig) -> Self {
        let filters = config.filter_schedule();
        let mut in_channels = FEATURE_CHANNELS[4];
        let mut blocks = Vec::with_capacity(filters.len());
        for (level, &f) in filters.iter().enumerate() {
            let skip = skip_source(level).map_or(0, |i| FEATURE_CHANNELS[i]);
            blocks.push(UpsampleBlock::new(p / format!("up{level}"), in_channels, skip, f, config.dropout_rate));
            in_channels = f;
        }
        let levels = config.num_upsample_levels;
        let head_levels: Vec<usize> = if config.intermediate_supervision {
            (0..levels).collect()
        } else {
            vec![levels - 1]
        };
        let heads = head_levels
            .into_iter()
            .map(|level| {
                let head = nn::conv2d(p / format!("head{level}"), filters[level], config.num_channels as i64, 1, Default::default());
                (level, head)
            })
            .collect();
        Self { blocks, heads }
    }

    /// Backbone maps needed by a chain of `levels` blocks.
    pub fn required_features(levels: usize) -> Vec<usize> {
        let mut keep = vec![4];
        keep.extend((0..levels).filter_map(skip_source));
        keep
    }

    pub fn forward_t(&self, features: &BackboneFeatures, train: bool) -> Result<Vec<Tensor>> {
        let mut x = features
            .get(4)
            .ok_or_else(|| Error::Shape("missing coarsest backbone map".into()))?
            .shallow_clone();
        let mut outputs = Vec::with_capacity(self.heads.len());
        let mut heads = self.heads.iter().peekable();
        for (level, block) in self.blocks.iter().enumerate() {
            let skip = match skip_source(level) {
                Some(i) => Some(features.get(i).ok_or_else(|| Error::Shape(format!("missing backbone map {i}")))?),
                None => None,
            };
            x = block.forward_t(&x, skip, train)?;
            if let Some((_, head)) = heads.next_if(|(l, _)| *l == level) {
                outputs.push(x.apply(head).sigmoid());
            }
        }
        Ok(outputs)
    }
}
