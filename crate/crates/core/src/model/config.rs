use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Per-coordinate gate between image and Q+R embeddings.
    #[default]
    Binary,
    /// Separate image/query/response weights on a norm-capped simplex.
    Ternary,
    /// Plain sum of the three embeddings plus a learned per-demo residual.
    Concat,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateKind {
    #[default]
    Vector,
    Scalar,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskCombine {
    /// [TASK] embedding added to the fused query.
    #[default]
    Sum,
    /// [TASK] and fused query concatenated, then projected back to d.
    ConcatProject,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Scores are dot products with the library's fused embeddings.
    #[default]
    Tied,
    /// Free output matrix over a fixed library.
    Free,
}

/// Switches for the component ablations.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub no_task_token: bool,
    pub no_tg_updates: bool,
    pub random_tg_init: bool,
    pub drop_image: bool,
    pub drop_query: bool,
    pub drop_inst: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    /// Input embedding widths; a width different from `d` needs `project_inputs`.
    pub d_img: usize,
    pub d_txt: usize,
    pub project_inputs: bool,
    pub depth: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    /// 1-based indices of the layers using task-aware attention.
    pub ta_layers: Vec<usize>,
    pub alpha_init: f64,
    pub fusion: FusionMode,
    pub gate: GateKind,
    /// Norm cap for ternary fusion weights, in [1/3, 1].
    pub theta: f64,
    pub task_combine: TaskCombine,
    pub head: HeadKind,
    /// Library size; only used by the free head and the concat residual.
    pub vocab: usize,
    pub literal_query_branch: bool,
    pub neg_log_cap: f64,
    pub ln_eps: f64,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            d_img: 64,
            d_txt: 64,
            project_inputs: false,
            depth: 4,
            heads: 4,
            ffn_mult: 4,
            ta_layers: vec![2, 4],
            alpha_init: 1.0,
            fusion: FusionMode::Binary,
            gate: GateKind::Vector,
            theta: 0.5,
            task_combine: TaskCombine::Sum,
            head: HeadKind::Tied,
            vocab: 0,
            literal_query_branch: false,
            neg_log_cap: 20.0,
            ln_eps: 1e-5,
            ablation: Ablation::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.depth == 0 || self.heads == 0 || self.ffn_mult == 0 {
            return bad("d, depth, heads and ffn_mult must be positive".into());
        }
        if self.d % self.heads != 0 {
            return bad(format!("d = {} is not divisible by heads = {}", self.d, self.heads));
        }
        if let Some(&l) = self.ta_layers.iter().find(|&&l| l == 0 || l > self.depth) {
            return bad(format!("task-aware layer {l} outside 1..={}", self.depth));
        }
        let mut sorted = self.ta_layers.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted != self.ta_layers {
            return bad("ta_layers must be strictly ascending".into());
        }
        if (self.d_img != self.d || self.d_txt != self.d) && !self.project_inputs {
            return bad(format!(
                "input widths ({}, {}) differ from d = {} and project_inputs is off",
                self.d_img, self.d_txt, self.d
            ));
        }
        if self.fusion == FusionMode::Ternary && !(1.0 / 3.0..=1.0).contains(&self.theta) {
            return bad(format!("ternary theta {} outside [1/3, 1]", self.theta));
        }
        if (self.head == HeadKind::Free || self.fusion == FusionMode::Concat) && self.vocab == 0 {
            return bad("free head and concat fusion need `vocab` (library size)".into());
        }
        if self.neg_log_cap <= 0.0 || self.ln_eps < 0.0 {
            return bad("neg_log_cap must be positive and ln_eps non-negative".into());
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d / self.heads
    }

    pub fn is_task_aware(&self, layer: usize) -> bool {
        self.ta_layers.contains(&layer)
    }
}
