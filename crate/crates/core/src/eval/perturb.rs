use serde::{Deserialize, Serialize};
use serde_json::json;

use super::scorer::{meta_labels, meta_str, meta_usize, meta_vec};
use super::world::{SyntheticWorld, NON_SEMANTIC_LABELS};
use crate::data::{Demonstration, QuerySample};
use crate::error::{Error, Result};
use crate::numerics::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbKind {
    /// Easier mapping: pull latents and question embeddings toward the centroid.
    Em,
    /// Harder mapping: rename labels to non-semantic words.
    Hm,
    /// Wrong labels: flip a fraction of ICD responses.
    Wl,
    /// Blurred images: additive Gaussian noise on image embeddings.
    Bi,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbTarget {
    #[default]
    AllIcds,
    QueryOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationOp {
    pub kind: PerturbKind,
    #[serde(default)]
    pub target: PerturbTarget,
    /// EM pull factor in [0, 1].
    #[serde(default = "default_em")]
    pub em_factor: f64,
    /// WL fraction of ICDs whose label flips.
    #[serde(default = "default_flip")]
    pub flip_fraction: f64,
    /// BI noise std; `None` uses half the std of the given image embeddings.
    #[serde(default)]
    pub noise_std: Option<f64>,
}

fn default_em() -> f64 {
    0.5
}

fn default_flip() -> f64 {
    0.75
}

impl PerturbationOp {
    pub fn new(kind: PerturbKind) -> Self {
        Self { kind, target: PerturbTarget::AllIcds, em_factor: default_em(), flip_fraction: default_flip(), noise_std: None }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_fraction) {
            return Err(Error::Config(format!("flip fraction {} outside [0, 1]", self.flip_fraction)));
        }
        if !(0.0..=1.0).contains(&self.em_factor) {
            return Err(Error::Config(format!("EM factor {} outside [0, 1]", self.em_factor)));
        }
        if self.noise_std.is_some_and(|s| !(s >= 0.0 && s.is_finite())) {
            return Err(Error::Config("BI noise std must be finite and non-negative".into()));
        }
        Ok(())
    }
}

fn lerp(a: &[f64], b: &[f64], f: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + f * (y - x)).collect()
}

fn cluster_of(meta: &crate::data::Meta, id: &str) -> Result<usize> {
    meta_usize(meta, "cluster").ok_or_else(|| Error::Capability(format!("`{id}` carries no cluster metadata")))
}

fn tau_of(meta: &crate::data::Meta, id: &str) -> Result<Vec<f64>> {
    meta_vec(meta, "tau").ok_or_else(|| Error::Capability(format!("`{id}` carries no tau metadata")))
}

/// Half the population std of all image embedding entries.
pub fn default_blur_std(demos: &[Demonstration]) -> f64 {
    let vals: Vec<f64> = demos.iter().flat_map(|d| d.image_emb.iter().copied()).collect();
    if vals.is_empty() {
        return 0.0;
    }
    let m = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64;
    0.5 * var.sqrt()
}

fn em_demo(world: &SyntheticWorld, d: &Demonstration, f: f64) -> Result<Demonstration> {
    let k = cluster_of(&d.meta, &d.id)?;
    let tau = tau_of(&d.meta, &d.id)?;
    let new_tau = lerp(&tau, &world.centroids[k], f);
    let mut out = d.clone();
    out.q_emb = lerp(&d.q_emb, &world.centroid_text(k), f);
    // Move only the B*tau part of qr_emb.
    let shift = world.text_of(&new_tau.iter().zip(&tau).map(|(a, b)| a - b).collect::<Vec<_>>());
    out.qr_emb = d.qr_emb.iter().zip(&shift).map(|(x, s)| x + s).collect();
    out.meta.insert("tau".into(), json!(new_tau));
    Ok(out)
}

fn hm_label(labels: &[String], label: &str) -> String {
    match labels.iter().position(|l| l == label) {
        Some(j) => NON_SEMANTIC_LABELS[j % NON_SEMANTIC_LABELS.len()].to_string(),
        None => label.to_string(),
    }
}

/// Apply `op` to ICDs (a whole library or one sequence's demonstrations).
/// Returns modified copies; inputs are untouched.
pub fn perturb_demos(op: &PerturbationOp, world: &SyntheticWorld, demos: &[Demonstration], rng: &mut Rng) -> Result<Vec<Demonstration>> {
    op.validate()?;
    if op.target == PerturbTarget::QueryOnly {
        return Err(Error::Unsupported("query_only target applies to queries, not ICDs".into()));
    }
    match op.kind {
        PerturbKind::Em => demos.iter().map(|d| em_demo(world, d, op.em_factor)).collect(),
        PerturbKind::Hm => demos
            .iter()
            .map(|d| {
                let labels = meta_labels(&d.meta).ok_or_else(|| Error::Capability(format!("`{}` has no label set", d.id)))?;
                let mut out = d.clone();
                out.text_r = hm_label(&labels, &d.text_r);
                if let Some(l) = meta_str(&d.meta, "label") {
                    out.meta.insert("label".into(), json!(hm_label(&labels, l)));
                }
                let mapped: Vec<String> = labels.iter().map(|l| hm_label(&labels, l)).collect();
                out.meta.insert("labels".into(), json!(mapped));
                Ok(out)
            })
            .collect(),
        PerturbKind::Wl => {
            let n = demos.len();
            let flips = (op.flip_fraction * n as f64 - 1e-9).ceil().max(0.0) as usize;
            let chosen = rng.sample_distinct(n, flips.min(n));
            let mut out = demos.to_vec();
            for i in chosen {
                let d = &mut out[i];
                let labels = meta_labels(&d.meta).ok_or_else(|| Error::Capability(format!("`{}` has no label set", d.id)))?;
                let j = labels.iter().position(|l| *l == d.text_r).unwrap_or(0);
                d.text_r = labels[(j + 1) % labels.len()].clone();
            }
            Ok(out)
        }
        PerturbKind::Bi => {
            let std = op.noise_std.unwrap_or_else(|| default_blur_std(demos));
            Ok(demos
                .iter()
                .map(|d| {
                    let mut out = d.clone();
                    let noise = rng.normal_vec(d.image_emb.len(), std);
                    out.image_emb.iter_mut().zip(noise).for_each(|(x, e)| *x += e);
                    out
                })
                .collect())
        }
    }
}

/// Apply `op` to a query. WL and HM have no query-side meaning.
pub fn perturb_query(op: &PerturbationOp, world: &SyntheticWorld, q: &QuerySample, rng: &mut Rng) -> Result<QuerySample> {
    op.validate()?;
    let mut out = q.clone();
    match op.kind {
        PerturbKind::Em => {
            let k = cluster_of(&q.meta, &q.id)?;
            let tau = tau_of(&q.meta, &q.id)?;
            out.q_emb = lerp(&q.q_emb, &world.centroid_text(k), op.em_factor);
            out.meta.insert("tau".into(), json!(lerp(&tau, &world.centroids[k], op.em_factor)));
        }
        PerturbKind::Bi => {
            let std = op.noise_std.ok_or_else(|| Error::Config("BI on a single query needs an explicit noise_std".into()))?;
            let noise = rng.normal_vec(q.image_emb.len(), std);
            out.image_emb.iter_mut().zip(noise).for_each(|(x, e)| *x += e);
        }
        PerturbKind::Wl | PerturbKind::Hm => {
            return Err(Error::Unsupported(format!("{:?} cannot target a query (queries carry no displayed label)", op.kind)));
        }
    }
    Ok(out)
}
