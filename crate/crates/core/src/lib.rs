//! MACMD segmentation decoder: a small autodiff tensor engine, the decoder
//! blocks (HDConv, MCAG, APM, MSCCM, MEAB), a full encoder-decoder model with
//! an analytic cost profiler, segmentation losses and evaluation metrics.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the common instantiations.

pub mod apm;
mod error;
pub mod hdconv;
pub mod layers;
pub mod mcag;
pub mod meab;
pub mod metrics;
pub mod model;
pub mod msccm;
pub mod numerics;
pub mod objective;

pub use error::{Error, Result};
pub use numerics::{Graph, Mode, ParamStore, Scalar, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
