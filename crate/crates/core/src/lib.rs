//! Deep mixture-of-experts classifiers trained with a balancing constraint on
//! gate assignments, plus the data pipeline and gating analyses around them.

pub mod analysis;
pub mod balance;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod model;
pub mod numeric;
pub mod train;

pub use balance::AssignmentTracker;
pub use checkpoint::{Checkpoint, Container};
pub use error::{Error, Result};
pub use model::{Architecture, LayerSpec, Model, ModelKind};
pub use numeric::{Matrix, Rng};
pub use train::{evaluate, train, TrainConfig, Trainer};
