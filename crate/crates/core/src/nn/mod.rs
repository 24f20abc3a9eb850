//! A small deterministic neural-network engine: dense, convolution, batch
//! norm, ReLU, average pooling and flatten layers with hand-written backward
//! passes, softmax cross-entropy and momentum SGD.

pub mod checkpoint;
pub mod kernels;
mod layer;
mod loss;
mod model;
mod optim;
mod text;

pub use layer::{Layer, LayerSpec, ParamKind};
pub use loss::cross_entropy;
pub use model::{ForwardCache, Mode, ModelGraph, ParamGrads};
pub use optim::{OptimizerConfig, OptimizerState};
pub use text::ModelDescription;
