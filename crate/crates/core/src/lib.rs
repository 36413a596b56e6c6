//! Feature-pyramid neck comparison on a small detection stack: a tape-based
//! autograd core, a toy backbone, four necks (FPN, PANET, HRFPN, MHFPN), an
//! anchor-free head, detection metrics and a synthetic lesion dataset.

pub mod backbone;
pub mod boxes;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod harness;
pub mod head;
pub mod metrics;
pub mod model;
pub mod neck;
pub mod nn;
pub mod ops;
pub mod param;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use param::{ParamId, ParamStore, Parameter};
pub use scalar::Scalar;
pub use tape::{OpKind, Tape, Var};
pub use tensor::{Shape, Tensor};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tape64 = Tape<f64>;
pub type Tape32 = Tape<f32>;
pub type ParamStore64 = ParamStore<f64>;
pub type ParamStore32 = ParamStore<f32>;
