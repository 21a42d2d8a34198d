//! Tensors, kernels, and reverse-mode differentiation.

pub mod conv;
pub mod gradcheck;
mod graph;
mod ops;
mod params;
pub mod rng;
mod scalar;
mod tensor;

pub use conv::ConvSpec;
pub use gradcheck::{grad_check, grad_check_model, CheckOptions, GradCheckReport, Scheme};
pub use graph::{Graph, Mode, Var};
pub use ops::{sigmoid, Activation, LAYER_NORM_EPSILON};
pub use params::{Init, NormId, NormState, ParamId, ParamKind, ParamStore, Parameter, BN_EPSILON, BN_MOMENTUM};
pub use rng::CounterRng;
pub use scalar::Scalar;
pub use tensor::Tensor;
