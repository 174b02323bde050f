pub mod cart;
pub mod config;
pub mod corpus;
pub mod error;
pub mod evalharness;
pub mod hashembed;
pub mod imgcore;
pub mod keypoints;
pub mod panelseg;
pub mod pipeline;
pub mod preprocess;
pub mod scalar;
pub mod simfeat;

pub use error::{Error, Result};

/// Concrete double-precision aliases.
pub type Gray = imgcore::GrayImage<f64>;
pub type Tree = cart::DecisionTree<f64>;
