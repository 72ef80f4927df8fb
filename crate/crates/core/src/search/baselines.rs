use serde::{Deserialize, Serialize};

use super::{make_sequence, predict_label, rank_by_cosine, ScoreContext, Scorer};
use crate::data::{Demonstration, DemoLibrary, IclSequence, Meta, QuerySample};
use crate::error::{Error, Result};
use crate::numerics::{norm, Rng};

fn check_size(lib: &DemoLibrary, n: usize) -> Result<()> {
    lib.ensure_non_empty()?;
    if lib.len() < n {
        return Err(Error::Search(format!("library of {} cannot fill {n} shots", lib.len())));
    }
    Ok(())
}

/// Uniform sample of `n` distinct demos.
pub fn baseline_rs(query: &QuerySample, lib: &DemoLibrary, n: usize, rng: &mut Rng) -> Result<IclSequence> {
    check_size(lib, n)?;
    Ok(make_sequence(lib, &rng.sample_distinct(lib.len(), n), query))
}

/// Top-n demos by image cosine similarity.
pub fn baseline_i2i(query: &QuerySample, lib: &DemoLibrary, n: usize) -> Result<IclSequence> {
    check_size(lib, n)?;
    let rows: Vec<Vec<f64>> = lib.demos().iter().map(|d| d.image_emb.clone()).collect();
    Ok(make_sequence(lib, &rank_by_cosine(&rows, &query.image_emb)[..n], query))
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = norm(v);
    if n == 0.0 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / n).collect()
    }
}

/// Concatenation of the L2-normalized image and question embeddings.
pub fn iq_vector(image_emb: &[f64], q_emb: &[f64]) -> Vec<f64> {
    let mut v = unit(image_emb);
    v.extend(unit(q_emb));
    v
}

fn iq_ranking(query: &QuerySample, lib: &DemoLibrary) -> Vec<usize> {
    let rows: Vec<Vec<f64>> = lib.demos().iter().map(|d| iq_vector(&d.image_emb, &d.q_emb)).collect();
    rank_by_cosine(&rows, &iq_vector(&query.image_emb, &query.q_emb))
}

/// Top-n demos by joint image+question similarity.
pub fn baseline_iq2iq(query: &QuerySample, lib: &DemoLibrary, n: usize) -> Result<IclSequence> {
    check_size(lib, n)?;
    Ok(make_sequence(lib, &iq_ranking(query, lib)[..n], query))
}

/// Pseudo-response retrieval: predict a response with random ICDs, take
/// the 4n nearest demos by joint similarity, then keep the n whose response
/// embedding is closest to the pseudo response's.
pub fn baseline_iqpr(
    query: &QuerySample,
    lib: &DemoLibrary,
    n: usize,
    scorer: &dyn Scorer,
    rng: &mut Rng,
) -> Result<IclSequence> {
    check_size(lib, n)?;
    if !scorer.capabilities().label_probs {
        return Err(Error::Capability("IQPR needs a scorer that predicts responses".into()));
    }
    let rs: Vec<&Demonstration> = rng.sample_distinct(lib.len(), n).into_iter().map(|p| &lib.demos()[p]).collect();
    let probs = scorer.label_probs(&ScoreContext::new(lib.instruction(), &rs, query))?;
    let pseudo = predict_label(&probs)?.to_string();

    let cands: Vec<usize> = iq_ranking(query, lib).into_iter().take((4 * n).min(lib.len())).collect();
    let matching: Vec<&Demonstration> = lib.demos().iter().filter(|d| d.text_r == pseudo).collect();
    if matching.is_empty() {
        return Ok(make_sequence(lib, &cands[..n], query));
    }
    let dim = matching[0].r_emb.len();
    let mut pr = vec![0.0; dim];
    for d in &matching {
        for (a, b) in pr.iter_mut().zip(&d.r_emb) {
            *a += b / matching.len() as f64;
        }
    }
    let rows: Vec<Vec<f64>> = cands.iter().map(|&c| lib.demos()[c].r_emb.clone()).collect();
    let order = rank_by_cosine(&rows, &pr);
    let picked: Vec<usize> = order[..n].iter().map(|&i| cands[i]).collect();
    Ok(make_sequence(lib, &picked, query))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemoConfig {
    /// Permutations considered in stage 1 (all of them when n! is smaller).
    pub n_perm: usize,
    /// Permutations kept by content-free entropy.
    pub k_top: usize,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self { n_perm: 24, k_top: 4 }
    }
}

/// Query with zero embeddings carrying only the real query's label set.
pub(crate) fn content_free_query(query: &QuerySample) -> QuerySample {
    let mut meta = Meta::new();
    if let Some(l) = query.meta.get("labels") {
        meta.insert("labels".into(), l.clone());
    }
    QuerySample {
        id: format!("{}#content-free", query.id),
        image_emb: vec![0.0; query.image_emb.len()],
        text_q: String::new(),
        q_emb: vec![0.0; query.q_emb.len()],
        ground_truth_r: None,
        meta,
    }
}

fn entropy(probs: &[(String, f64)]) -> f64 {
    -probs.iter().filter(|p| p.1 > 0.0).map(|p| p.1 * p.1.ln()).sum::<f64>()
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for rest in permutations(n - 1) {
        for i in 0..=rest.len() {
            let mut p = rest.clone();
            p.insert(i, n - 1);
            out.push(p);
        }
    }
    out.sort();
    out
}

/// Ordering by content-free entropy then influence, over a random demo set.
///
/// Stage 1 keeps the `k_top` permutations whose content-free label
/// distribution has the highest entropy; stage 2 returns the one maximizing
/// P(y*|x, C_pi) - P(y*|C_pi), with y* the label predicted for the query.
/// Ties go to the lexicographically smaller permutation.
pub fn baseline_demo(
    query: &QuerySample,
    lib: &DemoLibrary,
    n: usize,
    scorer: &dyn Scorer,
    cfg: &DemoConfig,
    rng: &mut Rng,
) -> Result<IclSequence> {
    check_size(lib, n)?;
    if !scorer.capabilities().label_probs {
        return Err(Error::Capability("DEmO needs label probabilities".into()));
    }
    let set = rng.sample_distinct(lib.len(), n);
    demo_order(query, lib, &set, scorer, cfg, rng)
}

/// DEmO's two stages over a fixed demo set `set` (library positions).
pub fn demo_order(
    query: &QuerySample,
    lib: &DemoLibrary,
    set: &[usize],
    scorer: &dyn Scorer,
    cfg: &DemoConfig,
    rng: &mut Rng,
) -> Result<IclSequence> {
    let n = set.len();
    let mut perms = if n <= 8 { permutations(n) } else { Vec::new() };
    if perms.is_empty() || perms.len() > cfg.n_perm.max(1) {
        let mut seen = std::collections::BTreeSet::new();
        seen.insert((0..n).collect::<Vec<_>>());
        let mut tries = 0;
        while seen.len() < cfg.n_perm.max(1) && tries < 100 * cfg.n_perm.max(1) {
            seen.insert(rng.permutation(n));
            tries += 1;
        }
        perms = seen.into_iter().collect();
    }
    let cf = content_free_query(query);
    let instr = lib.instruction();
    let icds_of = |p: &[usize]| -> Vec<&Demonstration> { p.iter().map(|&i| &lib.demos()[set[i]]).collect() };

    let mut scored = Vec::with_capacity(perms.len());
    for p in &perms {
        let icds = icds_of(p);
        let probs = scorer.label_probs(&ScoreContext::new(instr, &icds, &cf))?;
        scored.push((entropy(&probs), probs, p));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.2.cmp(b.2)));
    scored.truncate(cfg.k_top.max(1));

    let mut best: Option<(f64, &Vec<usize>)> = None;
    for (_, cf_probs, p) in &scored {
        let icds = icds_of(p);
        let probs = scorer.label_probs(&ScoreContext::new(instr, &icds, query))?;
        let y = predict_label(&probs)?;
        let p_y = probs.iter().find(|l| l.0 == y).map_or(0.0, |l| l.1);
        let p_cf = cf_probs.iter().find(|l| l.0 == y).map_or(0.0, |l| l.1);
        let infl = p_y - p_cf;
        if best.as_ref().is_none_or(|(b, bp)| infl > *b || (infl == *b && p < bp)) {
            best = Some((infl, p));
        }
    }
    let order: Vec<usize> = best.unwrap().1.iter().map(|&i| set[i]).collect();
    Ok(make_sequence(lib, &order, query))
}
