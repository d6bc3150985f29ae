//! ResNet-50 feature extractor exposing the last activation of every stage.
//!
//! Variable names follow the torchvision layout (`conv1`, `bn1`,
//! `layer1.0.conv1`, `layer1.0.downsample.0`, ...) so ImageNet checkpoints
//! exported from torchvision load without renaming.

use tch::nn::{self, ModuleT};
use tch::{Kind, Tensor};

const STAGES: [(usize, i64, i64); 4] = [(3, 64, 1), (4, 128, 2), (6, 256, 2), (3, 512, 2)];
const EXPANSION: i64 = 4;

/// Output channels of the stem and of each stage, finest first.
pub const FEATURE_CHANNELS: [i64; 5] = [64, 256, 512, 1024, 2048];

/// Backbone activations, finest (stride 2) to coarsest (stride 32).
#[derive(Debug)]
pub struct BackboneFeatures {
    /// `maps[0]` is the stride-2 stem activation, `maps[4]` the stride-32
    /// output of the last stage. Unused maps may be dropped to save memory.
    pub maps: Vec<Option<Tensor>>,
}

impl BackboneFeatures {
    pub fn get(&self, i: usize) -> Option<&Tensor> {
        self.maps.get(i).and_then(Option::as_ref)
    }

    /// Keeps only the maps in `keep`.
    pub fn retain(mut self, keep: &[usize]) -> Self {
        for (i, m) in self.maps.iter_mut().enumerate() {
            if !keep.contains(&i) {
                *m = None;
            }
        }
        self
    }

    /// Concatenates per-sample features along the batch axis.
    pub fn cat(parts: &[&BackboneFeatures]) -> Self {
        let n = parts.first().map_or(0, |p| p.maps.len());
        let maps = (0..n)
            .map(|i| {
                let ts: Option<Vec<&Tensor>> = parts.iter().map(|p| p.get(i)).collect();
                ts.map(|ts| Tensor::cat(&ts, 0))
            })
            .collect();
        Self { maps }
    }

    /// Splits a batch into per-sample features.
    pub fn split(&self) -> Vec<BackboneFeatures> {
        let batch = self.maps.iter().flatten().next().map_or(0, |t| t.size()[0]);
        (0..batch)
            .map(|b| BackboneFeatures {
                maps: self.maps.iter().map(|m| m.as_ref().map(|t| t.narrow(0, b, 1).copy())).collect(),
            })
            .collect()
    }
}

#[derive(Debug)]
struct Bottleneck {
    conv1: nn::Conv2D,
    bn1: nn::BatchNorm,
    conv2: nn::Conv2D,
    bn2: nn::BatchNorm,
    conv3: nn::Conv2D,
    bn3: nn::BatchNorm,
    downsample: Option<(nn::Conv2D, nn::BatchNorm)>,
}

fn conv(p: nn::Path, c_in: i64, c_out: i64, k: i64, stride: i64, padding: i64) -> nn::Conv2D {
    let cfg = nn::ConvConfig {
        stride,
        padding,
        bias: false,
        ..Default::default()
    };
    nn::conv2d(p, c_in, c_out, k, cfg)
}

/// Unit scale and zero shift, as in torchvision; tch defaults to a uniform
/// random scale.
pub(crate) fn batch_norm<'a>(p: impl std::borrow::Borrow<nn::Path<'a>>, c: i64) -> nn::BatchNorm {
    let cfg = nn::BatchNormConfig {
        ws_init: nn::Init::Const(1.0),
        bs_init: nn::Init::Const(0.0),
        ..Default::default()
    };
    nn::batch_norm2d(p, c, cfg)
}

/// How batch normalisation layers treat their statistics during a pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Use the stored running statistics.
    Frozen,
    /// Use batch statistics and update running statistics.
    Train,
    /// Overwrite the running statistics with the statistics of this batch.
    Calibrate,
}

fn norm(bn: &nn::BatchNorm, x: &Tensor, mode: NormMode) -> Tensor {
    match mode {
        NormMode::Frozen => bn.forward_t(x, false),
        NormMode::Train => bn.forward_t(x, true),
        NormMode::Calibrate => {
            tch::no_grad(|| {
                let dims = [0i64, 2, 3];
                let mean = x.mean_dim(&dims[..], false, Kind::Float);
                let var = x.var_dim(&dims[..], false, false);
                let mut rm = bn.running_mean.shallow_clone();
                let mut rv = bn.running_var.shallow_clone();
                rm.copy_(&mean);
                rv.copy_(&var);
            });
            bn.forward_t(x, false)
        }
    }
}

impl Bottleneck {
    fn new(p: nn::Path, c_in: i64, width: i64, stride: i64) -> Self {
        let c_out = width * EXPANSION;
        let downsample = (stride != 1 || c_in != c_out).then(|| {
            let d = &p / "downsample";
            (
                conv(&d / "0", c_in, c_out, 1, stride, 0),
                batch_norm(&d / "1", c_out),
            )
        });
        Self {
            conv1: conv(&p / "conv1", c_in, width, 1, 1, 0),
            bn1: batch_norm(&p / "bn1", width),
            conv2: conv(&p / "conv2", width, width, 3, stride, 1),
            bn2: batch_norm(&p / "bn2", width),
            conv3: conv(&p / "conv3", width, c_out, 1, 1, 0),
            bn3: batch_norm(&p / "bn3", c_out),
            downsample,
        }
    }

    fn forward(&self, x: &Tensor, mode: NormMode) -> Tensor {
        let y = norm(&self.bn1, &x.apply(&self.conv1), mode).relu();
        let y = norm(&self.bn2, &y.apply(&self.conv2), mode).relu();
        let y = norm(&self.bn3, &y.apply(&self.conv3), mode);
        let shortcut = match &self.downsample {
            Some((c, bn)) => norm(bn, &x.apply(c), mode),
            None => x.shallow_clone(),
        };
        (y + shortcut).relu()
    }
}

#[derive(Debug)]
pub struct ResNet50 {
    conv1: nn::Conv2D,
    bn1: nn::BatchNorm,
    stages: Vec<Vec<Bottleneck>>,
}

impl ResNet50 {
    pub fn new(p: &nn::Path) -> Self {
        let mut c_in = 64;
        let stages = STAGES
            .iter()
            .enumerate()
            .map(|(s, &(blocks, width, stride))| {
                let lp = p / format!("layer{}", s + 1);
                (0..blocks)
                    .map(|b| {
                        let block = Bottleneck::new(&lp / b, c_in, width, if b == 0 { stride } else { 1 });
                        c_in = width * EXPANSION;
                        block
                    })
                    .collect()
            })
            .collect();
        Self {
            conv1: conv(p / "conv1", 3, 64, 7, 2, 3),
            bn1: batch_norm(p / "bn1", 64),
            stages,
        }
    }

    /// Runs the network up to stage `deepest` (0 = stem only, 4 = all
    /// stages) and returns every intermediate activation.
    pub fn features(&self, x: &Tensor, mode: NormMode, deepest: usize) -> BackboneFeatures {
        let stem = norm(&self.bn1, &x.apply(&self.conv1), mode).relu();
        let mut maps = vec![Some(stem.shallow_clone())];
        let mut y = stem.max_pool2d([3, 3], [2, 2], [1, 1], [1, 1], false);
        for stage in self.stages.iter().take(deepest) {
            for block in stage {
                y = block.forward(&y, mode);
            }
            maps.push(Some(y.shallow_clone()));
        }
        maps.resize_with(5, || None);
        BackboneFeatures { maps }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tch::Device;

    #[test]
    fn stage_shapes_at_64px() {
        let vs = nn::VarStore::new(Device::Cpu);
        let net = ResNet50::new(&vs.root());
        let x = Tensor::zeros([1, 3, 64, 64], (Kind::Float, Device::Cpu));
        let f = tch::no_grad(|| net.features(&x, NormMode::Frozen, 4));
        let sizes: Vec<Vec<i64>> = f.maps.iter().map(|m| m.as_ref().unwrap().size()).collect();
        assert_eq!(
            sizes,
            vec![vec![1, 64, 32, 32], vec![1, 256, 16, 16], vec![1, 512, 8, 8], vec![1, 1024, 4, 4], vec![1, 2048, 2, 2]]
        );
        assert!(vs.variables().contains_key("layer1.0.downsample.0.weight"));
        assert!(vs.variables().contains_key("layer4.2.bn3.running_var"));
    }

    #[test]
    fn calibration_normalises_stem() {
        let vs = nn::VarStore::new(Device::Cpu);
        let net = ResNet50::new(&vs.root());
        let x = Tensor::randn([2, 3, 32, 32], (Kind::Float, Device::Cpu)) * 5.0 + 3.0;
        tch::no_grad(|| net.features(&x, NormMode::Calibrate, 1));
        let pre = x.apply(&net.conv1);
        let y = tch::no_grad(|| net.bn1.forward_t(&pre, false));
        let mean = y.mean(Kind::Float).double_value(&[]);
        let std = y.std(false).double_value(&[]);
        assert!(mean.abs() < 1e-3, "{mean}");
        assert!((std - 1.0).abs() < 1e-2, "{std}");
    }
}
