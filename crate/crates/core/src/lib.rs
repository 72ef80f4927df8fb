//! TACO: task-aware selection and ordering of in-context demonstrations.
//!
//! The crate holds the numeric substrate, the (image, query, response) data
//! model, the fusion front end and task-aware decoder, training, the oracle
//! and baseline sequence producers, and the synthetic evaluation harness.

pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod search;
pub mod training;

pub use data::{Demonstration, DemoLibrary, IclSequence, QuerySample, SequenceDataset};
pub use error::{Error, Result};
pub use model::{Checkpoint, ModelConfig, TacoModel};
pub use numerics::{Graph, NodeId, ParamId, ParamStore, Rng, Tensor};
pub use training::{train, LossBreakdown, TrainConfig};
