//! Learnable channel-wise fractional dilated convolutions.
//!
//! The crate provides a dense NCHW tensor, a convolution layer whose dilation
//! is a positive real per input channel (evaluated with bilinear sampling),
//! exact analytic gradients for every parameter including the dilations, a
//! small segmentation network built from such layers, SGD with momentum and a
//! poly learning-rate schedule, segmentation metrics, a synthetic multi-scale
//! scene generator and a finite-difference gradient oracle.

pub mod conv;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod net;
pub mod optim;
pub mod rng;
pub mod scenes;
pub mod tensor;

pub use conv::{
    backward, forward, forward_integer, init_dilations, project_dilations, sample_bilinear,
    BilinearStencil, ConvLayerState, DilationInit, DilationVector, LayerGradients,
};
pub use error::{Error, Result};
pub use metrics::{ConfusionMatrix, Metrics};
pub use net::{
    predict_labels, softmax_xent, DilationMode, InitMode, LabelMap, Net, NetSpec,
    DEFAULT_IGNORE_LABEL,
};
pub use optim::{poly_lr, sgd_step, MomentumState, TrainConfig};
pub use rng::Stream;
pub use scenes::{LabeledScene, SceneSpec};
pub use tensor::{Shape4, Tensor4};
