//! Multiscale loss, label-consistent augmentation and the training loop.

pub mod augment;
pub mod loss;
pub mod trainer;

pub use augment::{augment, AugmentationConfig};
pub use loss::{multiscale_loss, multiscale_loss_pyramids};
pub use trainer::{
    evaluate_loss, images_to_batch, load_samples, sample_targets, train, EpochHook, EpochLog, MonitorDecision, TrainConfig,
    TrainState, TrainingSample, ValidationMonitor,
};
