//! Synthetic task-mapping world, its scorer, perturbations, cohesion
//! metrics, experiment drivers and the external-scorer bridge.

pub mod experiments;
pub mod external;
mod metrics;
mod perturb;
mod scorer;
mod world;

pub use experiments::*;
pub use external::{ExternalConfig, ExternalScorer};
pub use metrics::{
    cohesion, disruption_gap, evaluate_accuracy, evaluate_prompts, mean_std, order_sensitivity, CohesionReport,
    DeltaReport, GapMetric, Prompt, SigmaReport,
};
pub use perturb::{default_blur_std, perturb_demos, perturb_query, PerturbKind, PerturbTarget, PerturbationOp};
pub use scorer::{ScorerMode, ScorerParams, SyntheticScorer};
pub use world::{generate_world, is_semantic, SyntheticWorld, WorldSpec, NON_SEMANTIC_LABELS};
