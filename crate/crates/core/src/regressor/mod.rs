//! Learned RPE predictor: a small convolutional regression network trained
//! from scratch on simulated motion-artifact slices.

mod dataset;
pub mod layers;
mod model;
mod train;

pub use dataset::{generate_dataset, DatasetSpec, TrainingSample, ZERO_MOTION_PERIOD};
pub use model::{
    load_model, save_model, standardize, Architecture, ForwardPass, RegressorModel, DEFAULT_CHANNELS,
    DEFAULT_INPUT_SIZE, FORMAT_VERSION,
};
pub use train::{train, train_split, EpochRecord, TrainConfig, TrainingHistory};
