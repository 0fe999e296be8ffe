//! Unitary-gradient neural networks.
//!
//! Every layer of a [`UgnnModel`] has a Jacobian with orthonormal rows and the
//! output head has unit-norm pairwise row differences, so each logit
//! difference `f_i − f_j` has unit gradient almost everywhere. The top-two
//! margin is then a lower bound on the distance to the decision boundary.

// `!(x > 0)` style checks deliberately reject NaN alongside non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cmat;
pub mod data;
pub mod error;
pub mod fft;
pub mod layers;
pub mod model;
pub mod scalar;
pub mod spectral;
pub mod tape;
pub mod tensor;
pub mod training;
pub mod upd;
pub mod verification;

pub use data::{Dataset, DatasetSpec};
pub use error::{Result, UgnnError};
pub use model::{
    margin, Architecture, CertificationReport, Classifier, Margin, MlpConfig, Normalization,
    UgnnConfig, UgnnModel,
};
pub use scalar::{DType, Scalar};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{seeded_rng, SeededRng, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Ugnn32 = UgnnModel<f32>;
pub type Ugnn64 = UgnnModel<f64>;
