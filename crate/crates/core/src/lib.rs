//! MixStyle feature-statistics augmentation on a small define-by-run CNN
//! stack: autodiff, the MixStyle layer, FixMatch-style semi-supervision, a
//! procedural multi-domain benchmark and the training/ablation harness.

pub mod backbone;
pub mod datagen;
pub mod error;
pub mod graph;
pub mod mixstyle;
pub mod optim;
pub mod projection;
pub mod scalar;
pub mod semisup;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph32 = graph::Graph<f32>;
pub type Graph64 = graph::Graph<f64>;
pub type Backbone32 = backbone::Backbone<f32>;
pub type Backbone64 = backbone::Backbone<f64>;
