//! Pose-search strategies over a registration case.

pub mod nn;
pub mod ppo;
mod screen;
pub mod search;

pub use search::{cem_search, grid_oracle, random_search, CemConfig, GridConfig, SearchResult};
pub use nn::{Architecture, HeadKind, PolicyNetwork};
pub use ppo::{pretrain, register_online, register_pretrained, train, Checkpoint, CurvePoint, TrainConfig, TrainReport};
