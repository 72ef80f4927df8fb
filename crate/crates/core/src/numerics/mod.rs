//! Dense tensors, a reverse-mode tape, seeded randomness and gradient checking.

mod graph;
mod gradcheck;
pub mod ops;
mod params;
mod rng;
mod tensor;

pub use graph::{Grads, Graph, MaskLayout, NodeId};
pub use gradcheck::{grad_check, rel_err, GradCheckOptions, GradCheckReport, ParamCheck};
pub use ops::{cosine_sim, kl_uniform, layer_norm, masked_softmax};
pub use params::{ParamEntry, ParamId, ParamStore};
pub use rng::{derive_seed, Rng};
pub use tensor::{dot, norm, Tensor};
