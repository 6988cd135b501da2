//! Radiance-field training accelerated by visual-hull sample rejection.

pub mod bench;
pub mod camera;
pub mod error;
pub mod eval;
pub mod hull;
pub mod nerf;
pub mod sampling;
pub mod scalar;
pub mod scene;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type MlpParams32 = nerf::MlpParams<f32>;
pub type MlpParams64 = nerf::MlpParams<f64>;
pub type AdamState32 = nerf::AdamState<f32>;
pub type AdamState64 = nerf::AdamState<f64>;
pub type Model32 = training::Model<f32>;
pub type Model64 = training::Model<f64>;
pub type Trainer32 = training::Trainer<f32>;
pub type Trainer64 = training::Trainer<f64>;
