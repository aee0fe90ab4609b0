//! Convolutional prior over action frequencies, trained by plain SGD.

pub mod cnn;
mod scalar;
pub mod train;
pub mod weights;

pub use cnn::{CnnParams, ConvSpec, CONV1, CONV2, CONV3, DEFAULT_ALPHA_FLOOR, FLAT, HIDDEN, INPUT_LEN};
pub use scalar::Scalar;
pub use train::{build_dataset, dataset_loss, sgd_fit, Dataset, TrainConfig, TrainOutcome, TrainingExample};
pub use weights::{decode_params, encode_params, load_params, save_params};
