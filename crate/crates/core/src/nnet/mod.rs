//! Small CPU neural-network engine: NCHW tensors in `f64`, a fixed set of
//! layers with hand-written backward passes, SGD with momentum, and the two
//! models used by the pipeline (mask segmenter and thickness regressor).

pub mod gradcheck;
pub mod layers;
pub mod models;
pub mod network;
pub mod tensor;
pub mod train;
pub mod weights;

pub use layers::{BatchNorm, Conv2d, Dense, Layer, Mode, ParamGrad};
pub use models::{
    crop_mask, predict_mask_padded, reflect_pad, resample_nearest, vertical_factor, RcnnModel, SegModel, NUM_CLASSES,
    RCNN_INPUT,
};
pub use network::{Gradients, Network, Sgd, Tape};
pub use tensor::Tensor;
pub use train::{cross_entropy, mse_loss, train_rcnn, train_segmenter, TrainConfig};
