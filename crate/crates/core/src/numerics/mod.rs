//! Minimal deterministic tensor and layer stack: conv, ReLU, 2×2 max-pool,
//! global average pool and linear layers with hand-written backward passes,
//! softmax cross-entropy, and momentum SGD.

mod conv;
mod layers;
mod loss;
mod params;
mod tensor;

pub use conv::{conv2d_forward, ConvGeometry};
pub use layers::{Cache, Layer, Sequential};
pub use loss::softmax_cross_entropy;
pub use params::{sgd_step, ParamId, ParamSet, CHECKPOINT_MAGIC};
pub use tensor::{l2_norm, l2_normalize, Tensor};

pub(crate) use conv::gemm;
pub(crate) use tensor::L2_EPS;
