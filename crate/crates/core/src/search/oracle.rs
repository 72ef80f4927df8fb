use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::{ground_truth, make_sequence, ScoreContext, Scorer};
use crate::data::{Demonstration, DemoLibrary, IclSequence, QuerySample, SequenceDataset};
use crate::error::{Error, Result};
use crate::numerics::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    /// Shots N per training sequence.
    pub shots: usize,
    /// Candidate pool per query is `pool_per_shot * N`, clamped to the library.
    pub pool_per_shot: usize,
    /// Beam width; `None` means 2N.
    pub beam: Option<usize>,
    /// Sequences kept per query; `None` means 2N.
    pub keep: Option<usize>,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { shots: 4, pool_per_shot: 64, beam: None, keep: None, seed: 0 }
    }
}

impl OracleConfig {
    pub fn beam_width(&self) -> usize {
        self.beam.unwrap_or(2 * self.shots)
    }

    pub fn keep_count(&self) -> usize {
        self.keep.unwrap_or(2 * self.shots)
    }

    pub fn validate(&self) -> Result<()> {
        if self.shots == 0 || self.pool_per_shot == 0 || self.beam_width() == 0 || self.keep_count() == 0 {
            return Err(Error::Config("oracle shots, pool, beam and keep must be positive".into()));
        }
        Ok(())
    }
}

struct Scoring<'a> {
    lib: &'a DemoLibrary,
    scorer: &'a dyn Scorer,
    query: &'a QuerySample,
    response: &'a str,
}

impl Scoring<'_> {
    fn score(&self, positions: &[usize]) -> Result<f64> {
        let icds: Vec<&Demonstration> = positions.iter().map(|&p| &self.lib.demos()[p]).collect();
        let v = self.scorer.loglik(&ScoreContext::new(self.lib.instruction(), &icds, self.query), self.response)?;
        if !v.is_finite() {
            return Err(Error::Search(format!("scorer returned non-finite loglik for query `{}`", self.query.id)));
        }
        Ok(v)
    }

    /// Higher score first; equal scores by lexicographic id sequence.
    fn order(&self, a: &(Vec<usize>, f64), b: &(Vec<usize>, f64)) -> Ordering {
        b.1.total_cmp(&a.1).then_with(|| {
            let ids = |s: &[usize]| s.iter().map(|&p| self.lib.demos()[p].id.as_str()).collect::<Vec<_>>();
            ids(&a.0).cmp(&ids(&b.0))
        })
    }
}

/// Greedy Oracle: repeatedly append the candidate with the largest gain
/// C(S + x) - C(S). Ties go to the lowest demonstration id.
pub fn oracle_greedy(
    query: &QuerySample,
    candidates: &[usize],
    lib: &DemoLibrary,
    scorer: &dyn Scorer,
    n: usize,
) -> Result<Vec<usize>> {
    if !scorer.capabilities().loglik {
        return Err(Error::Capability("Oracle needs a scorer with loglik".into()));
    }
    if candidates.len() < n {
        return Err(Error::Search(format!("{} candidates cannot fill {n} shots", candidates.len())));
    }
    let response = ground_truth(query)?;
    let sc = Scoring { lib, scorer, query, response };
    let mut seq: Vec<usize> = Vec::with_capacity(n);
    let mut base = sc.score(&seq)?;
    for _ in 0..n {
        let mut best: Option<(usize, f64)> = None;
        for &c in candidates {
            if seq.contains(&c) {
                continue;
            }
            seq.push(c);
            let gain = sc.score(&seq)? - base;
            seq.pop();
            let better = match best {
                None => true,
                Some((b, g)) => gain > g || (gain == g && lib.demos()[c].id < lib.demos()[b].id),
            };
            if better {
                best = Some((c, gain));
            }
        }
        let (c, g) = best.unwrap();
        seq.push(c);
        base += g;
    }
    Ok(seq)
}

/// Beam search of width `beam` over greedy expansions scored by C_M; returns
/// the best `keep` complete sequences with their scores, best first.
pub(crate) fn beam_oracle(
    query: &QuerySample,
    candidates: &[usize],
    lib: &DemoLibrary,
    scorer: &dyn Scorer,
    n: usize,
    beam: usize,
    keep: usize,
) -> Result<Vec<(Vec<usize>, f64)>> {
    if !scorer.capabilities().loglik {
        return Err(Error::Capability("Oracle needs a scorer with loglik".into()));
    }
    if candidates.len() < n {
        return Err(Error::Search(format!("{} candidates cannot fill {n} shots", candidates.len())));
    }
    let response = ground_truth(query)?;
    let sc = Scoring { lib, scorer, query, response };
    let mut beams: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    for step in 0..n {
        let mut next = Vec::new();
        for (prefix, _) in &beams {
            for &c in candidates {
                if prefix.contains(&c) {
                    continue;
                }
                let mut s = prefix.clone();
                s.push(c);
                let v = sc.score(&s)?;
                next.push((s, v));
            }
        }
        next.sort_by(|a, b| sc.order(a, b));
        next.truncate(if step + 1 == n { keep } else { beam });
        beams = next;
    }
    Ok(beams)
}

fn candidate_pool(lib: &DemoLibrary, query: &QuerySample, cfg: &OracleConfig) -> Vec<usize> {
    let want = cfg.pool_per_shot * cfg.shots;
    if want >= lib.len() {
        if want > lib.len() {
            log::warn!("candidate pool {want} exceeds library size {}; using the whole library", lib.len());
        }
        return (0..lib.len()).collect();
    }
    let mut pool = Rng::derive(cfg.seed, &format!("pool/{}", query.id)).sample_distinct(lib.len(), want);
    pool.sort_unstable();
    pool
}

/// Training data: for each query, the top 2N sequences of a width-2N beam
/// over its candidate pool.
pub fn build_training_set(
    lib: &DemoLibrary,
    queries: &[QuerySample],
    scorer: &dyn Scorer,
    cfg: &OracleConfig,
) -> Result<SequenceDataset> {
    cfg.validate()?;
    lib.ensure_non_empty()?;
    let mut out = Vec::with_capacity(queries.len() * cfg.keep_count());
    for (i, q) in queries.iter().enumerate() {
        let pool = candidate_pool(lib, q, cfg);
        let top = beam_oracle(q, &pool, lib, scorer, cfg.shots, cfg.beam_width(), cfg.keep_count())?;
        if top.len() < cfg.keep_count() {
            return Err(Error::Search(format!(
                "query `{}`: only {} distinct sequences, {} requested",
                q.id,
                top.len(),
                cfg.keep_count()
            )));
        }
        out.extend(top.iter().map(|(s, _)| make_sequence(lib, s, q)));
        if (i + 1) % 10 == 0 {
            log::info!("oracle data: {}/{} queries", i + 1, queries.len());
        }
    }
    SequenceDataset::new(cfg.shots, out)
}

/// Greedy Oracle sequence over the whole library for each query.
pub fn oracle_sequences(lib: &DemoLibrary, queries: &[QuerySample], scorer: &dyn Scorer, n: usize) -> Result<Vec<IclSequence>> {
    let all: Vec<usize> = (0..lib.len()).collect();
    queries
        .iter()
        .map(|q| Ok(make_sequence(lib, &oracle_greedy(q, &all, lib, scorer, n)?, q)))
        .collect()
}
