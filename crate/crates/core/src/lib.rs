//! Rigid 2D/3D registration of a binary vessel volume to a single angiogram.

pub mod agents;
pub mod case;
pub mod env;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod phantom;
pub mod preprocess;
pub mod reward;
pub mod scalar;

pub use case::{PoseBounds, RegistrationCase};
pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Pose64 = geometry::Pose<f64>;
pub type Pose32 = geometry::Pose<f32>;
pub type Volume64 = geometry::BinaryVolume<f64>;
pub type Volume32 = geometry::BinaryVolume<f32>;
pub type Image64 = geometry::GrayImage<f64>;
pub type Image32 = geometry::GrayImage<f32>;
pub type Reward64 = reward::RewardValue<f64>;
