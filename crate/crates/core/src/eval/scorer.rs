use serde::{Deserialize, Serialize};

use super::world::is_semantic;
use crate::data::{Demonstration, Meta, QuerySample};
use crate::error::{Error, Result};
use crate::search::{Capabilities, ScoreContext, Scorer};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerMode {
    OrderInvariant,
    /// Linearly decaying position weights 2(n - i + 1)/(n + 1).
    #[default]
    PositionWeighted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScorerParams {
    /// Alignment weight a.
    pub alignment: f64,
    /// Cohesion weight gamma.
    pub cohesion: f64,
    /// Penalty p per label mismatch.
    pub penalty: f64,
    /// Accuracy threshold theta_acc added to the true label's logit.
    pub theta: f64,
    /// Bonus per fraction of ICDs with semantic labels.
    pub beta_sem: f64,
    /// Weight of the ICD label-frequency prior.
    pub kappa: f64,
}

impl Default for ScorerParams {
    fn default() -> Self {
        Self { alignment: 0.125, cohesion: 1.0 / 32.0, penalty: 0.5, theta: 1.0, beta_sem: 0.5, kappa: 0.5 }
    }
}

/// Closed-form stand-in for the LVLM over the synthetic world's metadata.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticScorer {
    pub mode: ScorerMode,
    pub params: ScorerParams,
}

pub(crate) fn meta_vec(meta: &Meta, key: &str) -> Option<Vec<f64>> {
    meta.get(key)?.as_array()?.iter().map(|v| v.as_f64()).collect()
}

pub(crate) fn meta_str<'m>(meta: &'m Meta, key: &str) -> Option<&'m str> {
    meta.get(key)?.as_str()
}

pub(crate) fn meta_usize(meta: &Meta, key: &str) -> Option<usize> {
    meta.get(key)?.as_u64().map(|v| v as usize)
}

pub(crate) fn meta_labels(meta: &Meta) -> Option<Vec<String>> {
    meta.get("labels")?.as_array()?.iter().map(|v| v.as_str().map(str::to_string)).collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// True label of a demonstration: meta `label`, else its displayed response.
fn true_label(d: &Demonstration) -> &str {
    meta_str(&d.meta, "label").unwrap_or(&d.text_r)
}

fn query_label(q: &QuerySample) -> Option<&str> {
    meta_str(&q.meta, "label").or(q.ground_truth_r.as_deref())
}

impl SyntheticScorer {
    pub fn new(mode: ScorerMode) -> Self {
        Self { mode, params: ScorerParams::default() }
    }

    pub fn position_weights(&self, n: usize) -> Vec<f64> {
        match self.mode {
            ScorerMode::OrderInvariant => vec![1.0; n],
            ScorerMode::PositionWeighted => (0..n).map(|i| 2.0 * (n - i) as f64 / (n + 1) as f64).collect(),
        }
    }

    /// -a * sum w_i |tau_i - tau_q|^2 - gamma * sum |tau_i - mean tau|^2 - p * #mismatches.
    pub fn mapping(&self, icds: &[&Demonstration], query: &QuerySample) -> Result<f64> {
        let n = icds.len();
        if n == 0 {
            return Ok(0.0);
        }
        let tq = meta_vec(&query.meta, "tau")
            .ok_or_else(|| Error::Capability(format!("query `{}` carries no tau metadata", query.id)))?;
        let taus: Vec<Vec<f64>> = icds
            .iter()
            .map(|d| meta_vec(&d.meta, "tau").ok_or_else(|| Error::Capability(format!("demo `{}` carries no tau metadata", d.id))))
            .collect::<Result<_>>()?;
        let w = self.position_weights(n);
        let c = tq.len();
        let mut mean = vec![0.0; c];
        for t in &taus {
            if t.len() != c {
                return Err(Error::Dimension("tau widths differ between ICDs and query".into()));
            }
            mean.iter_mut().zip(t).for_each(|(m, x)| *m += x / n as f64);
        }
        let p = &self.params;
        let align: f64 = taus.iter().zip(&w).map(|(t, wi)| wi * sq_dist(t, &tq)).sum();
        let coh: f64 = taus.iter().map(|t| sq_dist(t, &mean)).sum();
        let mismatches = icds.iter().filter(|d| d.text_r != true_label(d)).count() as f64;
        Ok(-p.alignment * align - p.cohesion * coh - p.penalty * mismatches)
    }

    /// Label logits over the query's label set.
    pub fn label_logits(&self, icds: &[&Demonstration], query: &QuerySample) -> Result<Vec<(String, f64)>> {
        let labels = meta_labels(&query.meta)
            .ok_or_else(|| Error::Capability(format!("query `{}` has no label set", query.id)))?;
        let n = icds.len();
        let w = self.position_weights(n);
        let wsum: f64 = w.iter().sum();
        let p = &self.params;
        let sem = if n == 0 { 0.0 } else { icds.iter().filter(|d| is_semantic(&d.text_r)).count() as f64 / n as f64 };
        let truth = if meta_vec(&query.meta, "tau").is_some() { query_label(query) } else { None };
        let bonus = match truth {
            Some(_) => {
                let difficulty = query.meta.get("difficulty").and_then(|v| v.as_f64()).unwrap_or(0.0);
                self.mapping(icds, query)? / n.max(1) as f64 + p.theta + p.beta_sem * sem - difficulty
            }
            None => 0.0,
        };
        Ok(labels
            .into_iter()
            .map(|y| {
                let freq = if n == 0 {
                    0.0
                } else {
                    icds.iter().zip(&w).filter(|(d, _)| d.text_r == y && is_semantic(&d.text_r)).map(|(_, wi)| wi).sum::<f64>()
                        / wsum
                };
                let mut v = p.kappa * freq;
                if truth == Some(y.as_str()) {
                    v += bonus;
                }
                (y, v)
            })
            .collect())
    }
}

impl Scorer for SyntheticScorer {
    fn capabilities(&self) -> Capabilities {
        Capabilities { loglik: true, label_probs: true }
    }

    fn loglik(&self, ctx: &ScoreContext<'_>, response: &str) -> Result<f64> {
        let m = self.mapping(ctx.icds, ctx.query)?;
        let truth = query_label(ctx.query)
            .ok_or_else(|| Error::Capability(format!("query `{}` has no label", ctx.query.id)))?;
        Ok(if response == truth { m } else { m - self.params.penalty })
    }

    fn label_probs(&self, ctx: &ScoreContext<'_>) -> Result<Vec<(String, f64)>> {
        let logits = self.label_logits(ctx.icds, ctx.query)?;
        let vals: Vec<f64> = logits.iter().map(|l| l.1).collect();
        let mut p = vec![0.0; vals.len()];
        crate::numerics::ops::softmax_row(&vals, &mut p)?;
        Ok(logits.into_iter().zip(p).map(|((y, _), p)| (y, p)).collect())
    }
}
