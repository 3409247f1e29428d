//! Cylindrical convolutional head for joint category and azimuth estimation,
//! with the small autodiff engine, synthetic data generator and training loop
//! it runs on.

pub mod autograd;
pub mod cylinder;
pub mod error;
pub mod gradcheck;
pub mod head;
pub mod synthcam;
pub mod tensor;
pub mod trainer;

pub use autograd::{Graph, Var};
pub use cylinder::{CylinderGeometry, CylinderParams, PadMode};
pub use error::{Error, Result};
pub use gradcheck::GradReport;
pub use head::{BBox, LossConfig, Prediction, Target, ViewScores};
pub use synthcam::{Dataset, GenConfig, Sample, WireShape};
pub use tensor::Tensor;
pub use trainer::{Architecture, HeadMode, MetricReport, Model, NamedTensor, TrainConfig};
