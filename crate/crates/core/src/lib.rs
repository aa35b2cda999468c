pub mod data;
pub mod depth;
pub mod error;
pub mod eval;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod search;
pub mod shape;
pub mod smol;
pub mod tensor;
pub mod train;
pub mod width;

pub use error::{Error, Result};
pub use model::{ElasticModel, ModelConfig, TokenBatch};
pub use rng::Rng;
pub use scalar::Scalar;
pub use shape::{ExecShape, LayerMask, ShapeGrid, SubnetShape};
pub use smol::{SmolBank, SmolConfig};
pub use tensor::{Gradients, Graph, Tensor, Var};
pub use width::WidthPlan;

pub type TensorF32 = Tensor<f32>;
pub type TensorF64 = Tensor<f64>;
pub type ModelF32 = ElasticModel<f32>;
pub type ModelF64 = ElasticModel<f64>;
pub type SmolBankF32 = SmolBank<f32>;
pub type SmolBankF64 = SmolBank<f64>;
