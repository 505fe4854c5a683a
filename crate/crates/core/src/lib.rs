//! Order-stable co-saliency detection at desk scale.
//!
//! The crate is generic over the floating-point type ([`Scalar`]); the
//! aliases at the bottom of this file fix it to `f32` for training and
//! inference and to `f64` for gradient checks.

pub mod autodiff;
pub mod data;
pub mod encoder;
pub mod error;
pub mod heads;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod msru;
pub mod nn;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use autodiff::{Gradients, Tape, Unary, Var};
pub use data::ImageGroup;
pub use encoder::{ChannelReducer, Encoder, EncoderConfig};
pub use error::{Error, Result};
pub use heads::SaliencyMap;
pub use metrics::{BinaryMask, EvaluationReport, MetricRow};
pub use model::{CoSalNet, LossConfig, Model, NetConfig};
pub use optim::Adam;
pub use params::{Ctx, ParamBuilder, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
