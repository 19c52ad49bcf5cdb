//! Baseline video deblurring CNN together with the training and evaluation
//! details that govern how well it does.

pub mod colorspace;
pub mod config;
pub mod datapipe;
pub mod error;
pub mod evaluator;
pub mod flowwarp;
pub mod image;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use colorspace::{ColorMode, YcbcrRange};
pub use config::RunConfig;
pub use datapipe::{AugmentationPolicy, ClipSource, VideoClip};
pub use error::{Error, Result};
pub use evaluator::{GradientHistogram, MetricReport};
pub use flowwarp::{AssemblyMode, FlowField, FlowProvider, InputSpec};
pub use image::Image;
pub use model::{Backbone, FanMode, HeadKind, LayerShape, ModelConfig};
pub use tensor::{Scalar, Tensor};
pub use trainer::{Checkpoint, ScheduleSpec, Trainer};
