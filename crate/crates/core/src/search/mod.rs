//! ICL sequence producers: Oracle data construction, beam inference,
//! k-means query selection and the retrieval baselines.

mod baselines;
mod beam;
mod kmeans;
mod oracle;

pub use baselines::{
    baseline_demo, baseline_i2i, baseline_iq2iq, baseline_iqpr, baseline_rs, demo_order, iq_vector, DemoConfig,
};
pub use beam::{beam_infer, sequence_log_prob, BeamConfig, BeamResult};
pub use kmeans::{kmeans, select_query_set, QuerySplit};
pub use oracle::{build_training_set, oracle_greedy, oracle_sequences, OracleConfig};

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Demonstration, DemoLibrary, IclSequence, QuerySample};
use crate::error::{Error, Result};

/// What a scorer can compute.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub loglik: bool,
    pub label_probs: bool,
}

/// One prompt to score: instruction, ICDs in order, and the query.
#[derive(Clone, Copy, Debug)]
pub struct ScoreContext<'a> {
    pub instruction: &'a str,
    pub icds: &'a [&'a Demonstration],
    pub query: &'a QuerySample,
}

impl<'a> ScoreContext<'a> {
    pub fn new(instruction: &'a str, icds: &'a [&'a Demonstration], query: &'a QuerySample) -> Self {
        Self { instruction, icds, query }
    }

    /// Stable key identifying the request by ids and texts.
    pub fn cache_key(&self, what: &str) -> String {
        let mut h = Sha256::new();
        for part in [what, self.instruction, &self.query.id, &self.query.text_q] {
            h.update(part.as_bytes());
            h.update([0u8]);
        }
        for d in self.icds {
            for part in [&d.id, &d.text_q, &d.text_r] {
                h.update(part.as_bytes());
                h.update([0u8]);
            }
            h.update([1u8]);
        }
        hex::encode(h.finalize())
    }
}

/// The stand-in for the LVLM: log-likelihood of a response and/or a
/// distribution over the query's label set. Must be safe to share across threads.
pub trait Scorer: Send + Sync {
    fn capabilities(&self) -> Capabilities;

    fn loglik(&self, ctx: &ScoreContext<'_>, response: &str) -> Result<f64>;

    /// (label, probability) pairs in a fixed label order.
    fn label_probs(&self, ctx: &ScoreContext<'_>) -> Result<Vec<(String, f64)>>;
}

/// Highest-probability label; ties go to the first label.
pub fn predict_label(probs: &[(String, f64)]) -> Result<&str> {
    let mut best: Option<&(String, f64)> = None;
    for p in probs {
        if best.is_none_or(|b| p.1 > b.1) {
            best = Some(p);
        }
    }
    best.map(|b| b.0.as_str()).ok_or_else(|| Error::Capability("scorer returned an empty label set".into()))
}

/// Response the Oracle scores against: the query's ground truth.
pub(crate) fn ground_truth(q: &QuerySample) -> Result<&str> {
    q.ground_truth_r
        .as_deref()
        .ok_or_else(|| Error::Validation(format!("query `{}` has no ground-truth response", q.id)))
}

/// Memoizing wrapper that counts calls reaching the inner scorer.
pub struct CachedScorer<'s> {
    inner: &'s dyn Scorer,
    cache: Mutex<HashMap<String, CachedValue>>,
    calls: AtomicU64,
    hits: AtomicU64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum CachedValue {
    Loglik(f64),
    Probs(Vec<(String, f64)>),
}

impl<'s> CachedScorer<'s> {
    pub fn new(inner: &'s dyn Scorer) -> Self {
        Self { inner, cache: Mutex::new(HashMap::new()), calls: AtomicU64::new(0), hits: AtomicU64::new(0) }
    }

    /// Wrap `inner`, preloading entries saved by [`CachedScorer::save`].
    pub fn with_file(inner: &'s dyn Scorer, path: impl AsRef<Path>) -> Result<Self> {
        let s = Self::new(inner);
        if path.as_ref().exists() {
            let map: HashMap<String, CachedValue> = serde_json::from_slice(&std::fs::read(path)?)?;
            *s.cache.lock().unwrap() = map;
        }
        Ok(s)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let map = self.cache.lock().unwrap();
        let sorted: std::collections::BTreeMap<_, _> = map.iter().collect();
        std::fs::write(path, serde_json::to_vec(&sorted)?)?;
        Ok(())
    }

    /// Calls forwarded to the wrapped scorer.
    pub fn inner_calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn len(&self) -> usize {
        self.cache.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn lookup(&self, key: &str) -> Option<CachedValue> {
        let v = self.cache.lock().unwrap().get(key).cloned();
        if v.is_some() {
            self.hits.fetch_add(1, Ordering::Relaxed);
        }
        v
    }
}

impl Scorer for CachedScorer<'_> {
    fn capabilities(&self) -> Capabilities {
        self.inner.capabilities()
    }

    fn loglik(&self, ctx: &ScoreContext<'_>, response: &str) -> Result<f64> {
        let key = ctx.cache_key(&format!("loglik:{response}"));
        if let Some(CachedValue::Loglik(v)) = self.lookup(&key) {
            return Ok(v);
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        let v = self.inner.loglik(ctx, response)?;
        self.cache.lock().unwrap().insert(key, CachedValue::Loglik(v));
        Ok(v)
    }

    fn label_probs(&self, ctx: &ScoreContext<'_>) -> Result<Vec<(String, f64)>> {
        let key = ctx.cache_key("label_probs");
        if let Some(CachedValue::Probs(v)) = self.lookup(&key) {
            return Ok(v);
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        let v = self.inner.label_probs(ctx)?;
        self.cache.lock().unwrap().insert(key, CachedValue::Probs(v.clone()));
        Ok(v)
    }
}

/// Build an [`IclSequence`] from library positions.
pub fn make_sequence(lib: &DemoLibrary, positions: &[usize], query: &QuerySample) -> IclSequence {
    IclSequence {
        instruction: lib.instruction().to_string(),
        icd_ids: positions.iter().map(|&p| lib.demos()[p].id.clone()).collect(),
        query: query.clone(),
    }
}

/// Log-likelihood of the query's ground truth with ICDs at `positions`.
pub fn score_positions(scorer: &dyn Scorer, lib: &DemoLibrary, positions: &[usize], query: &QuerySample) -> Result<f64> {
    let icds: Vec<&Demonstration> = positions.iter().map(|&p| &lib.demos()[p]).collect();
    let ctx = ScoreContext::new(lib.instruction(), &icds, query);
    scorer.loglik(&ctx, ground_truth(query)?)
}

/// Cosine-similarity ranking: indices of `rows` by descending similarity to
/// `target`, ties in index order. Zero-norm rows rank last.
pub(crate) fn rank_by_cosine(rows: &[Vec<f64>], target: &[f64]) -> Vec<usize> {
    let tn = crate::numerics::norm(target);
    let sims: Vec<f64> = rows
        .iter()
        .map(|r| {
            let rn = crate::numerics::norm(r);
            if rn == 0.0 || tn == 0.0 {
                f64::NEG_INFINITY
            } else {
                crate::numerics::dot(r, target) / (rn * tn)
            }
        })
        .collect();
    let mut idx: Vec<usize> = (0..rows.len()).collect();
    idx.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    idx
}
