use serde::{Deserialize, Serialize};

use crate::data::{Demonstration, DemoLibrary, IclSequence, QuerySample};
use crate::error::{Error, Result};
use crate::numerics::{dot, Rng};
use crate::search::{iq_vector, predict_label, ScoreContext, Scorer};

/// A materialized prompt: ICD contents rather than ids, so perturbed copies
/// can be scored without touching the library.
#[derive(Clone, Debug, PartialEq)]
pub struct Prompt {
    pub instruction: String,
    pub icds: Vec<Demonstration>,
    pub query: QuerySample,
}

impl Prompt {
    pub fn from_sequence(seq: &IclSequence, lib: &DemoLibrary) -> Result<Self> {
        Ok(Self {
            instruction: seq.instruction.clone(),
            icds: seq.icds(lib)?.into_iter().cloned().collect(),
            query: seq.query.clone(),
        })
    }
}

fn is_correct(scorer: &dyn Scorer, instruction: &str, icds: &[&Demonstration], q: &QuerySample) -> Result<bool> {
    let truth = q
        .ground_truth_r
        .as_deref()
        .ok_or_else(|| Error::Validation(format!("query `{}` has no ground truth", q.id)))?;
    let probs = scorer.label_probs(&ScoreContext::new(instruction, icds, q))?;
    Ok(predict_label(&probs)? == truth)
}

/// Fraction of sequences whose predicted label equals the ground truth.
pub fn evaluate_accuracy(seqs: &[IclSequence], lib: &DemoLibrary, scorer: &dyn Scorer) -> Result<f64> {
    if seqs.is_empty() {
        return Err(Error::Validation("accuracy over an empty sequence set".into()));
    }
    let mut hits = 0usize;
    for s in seqs {
        let icds = s.icds(lib)?;
        hits += is_correct(scorer, &s.instruction, &icds, &s.query)? as usize;
    }
    Ok(hits as f64 / seqs.len() as f64)
}

pub fn evaluate_prompts(prompts: &[Prompt], scorer: &dyn Scorer) -> Result<f64> {
    if prompts.is_empty() {
        return Err(Error::Validation("accuracy over an empty prompt set".into()));
    }
    let mut hits = 0usize;
    for p in prompts {
        let icds: Vec<&Demonstration> = p.icds.iter().collect();
        hits += is_correct(scorer, &p.instruction, &icds, &p.query)? as usize;
    }
    Ok(hits as f64 / prompts.len() as f64)
}

/// Performance functional inside the disruption gap.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GapMetric {
    /// Mean log-likelihood of the ground truth.
    #[default]
    Loglik,
    Accuracy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    pub delta: f64,
    /// Delta_i for each ICD position.
    pub per_position: Vec<f64>,
    pub repeats: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaReport {
    pub sigma: f64,
    pub mean: f64,
    /// Accuracy of each permutation round.
    pub accuracies: Vec<f64>,
}

/// Population mean and standard deviation. Deviations are taken from the
/// first value, so constant input gives exactly zero spread.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let d: Vec<f64> = xs.iter().map(|x| x - xs[0]).collect();
    let dm = d.iter().sum::<f64>() / n;
    let v = d.iter().map(|x| (x - dm) * (x - dm)).sum::<f64>() / n;
    (xs[0] + dm, v.sqrt())
}

fn performance(
    seqs: &[(String, Vec<usize>, &QuerySample)],
    lib: &DemoLibrary,
    scorer: &dyn Scorer,
    metric: GapMetric,
) -> Result<f64> {
    let mut total = 0.0;
    for (instr, pos, q) in seqs {
        let icds: Vec<&Demonstration> = pos.iter().map(|&p| &lib.demos()[p]).collect();
        total += match metric {
            GapMetric::Loglik => {
                let truth = q
                    .ground_truth_r
                    .as_deref()
                    .ok_or_else(|| Error::Validation(format!("query `{}` has no ground truth", q.id)))?;
                scorer.loglik(&ScoreContext::new(instr, &icds, q), truth)?
            }
            GapMetric::Accuracy => is_correct(scorer, instr, &icds, q)? as u8 as f64,
        };
    }
    Ok(total / seqs.len() as f64)
}

/// Disruption gap: for each position i, replace that ICD in every sequence
/// by its nearest neighbour under joint image+question similarity (not
/// already in the sequence) and take |L(S) - L(S_i)| over the set; Delta is
/// the mean over positions.
pub fn disruption_gap(
    seqs: &[IclSequence],
    lib: &DemoLibrary,
    scorer: &dyn Scorer,
    metric: GapMetric,
    repeats: usize,
) -> Result<DeltaReport> {
    if seqs.is_empty() {
        return Err(Error::Validation("disruption gap over an empty sequence set".into()));
    }
    let n = seqs[0].shot();
    if seqs.iter().any(|s| s.shot() != n) {
        return Err(Error::Validation("disruption gap needs sequences of equal shot".into()));
    }
    if n == 0 {
        return Ok(DeltaReport { delta: 0.0, per_position: Vec::new(), repeats });
    }
    if lib.len() <= n {
        return Err(Error::Validation(format!("library of {} leaves no replacement for {n}-shot sequences", lib.len())));
    }
    let iq: Vec<Vec<f64>> = lib.demos().iter().map(|d| iq_vector(&d.image_emb, &d.q_emb)).collect();
    let base_set: Vec<(String, Vec<usize>, &QuerySample)> = seqs
        .iter()
        .map(|s| {
            let pos = s.icd_ids.iter().map(|id| lib.position(id).ok_or_else(|| Error::Reference(id.clone()))).collect::<Result<_>>()?;
            Ok((s.instruction.clone(), pos, &s.query))
        })
        .collect::<Result<_>>()?;
    let neighbour = |x: usize, seq: &[usize]| -> usize {
        let mut best = None;
        let mut bv = f64::NEG_INFINITY;
        for j in 0..lib.len() {
            if seq.contains(&j) {
                continue;
            }
            let v = dot(&iq[x], &iq[j]);
            if v > bv {
                bv = v;
                best = Some(j);
            }
        }
        best.unwrap()
    };
    let reps = repeats.max(1);
    let mut per_position = vec![0.0; n];
    for _ in 0..reps {
        let base = performance(&base_set, lib, scorer, metric)?;
        for (i, slot) in per_position.iter_mut().enumerate() {
            let replaced: Vec<(String, Vec<usize>, &QuerySample)> = base_set
                .iter()
                .map(|(instr, pos, q)| {
                    let mut p = pos.clone();
                    p[i] = neighbour(pos[i], pos);
                    (instr.clone(), p, *q)
                })
                .collect();
            *slot += (base - performance(&replaced, lib, scorer, metric)?).abs() / reps as f64;
        }
    }
    let delta = per_position.iter().sum::<f64>() / n as f64;
    Ok(DeltaReport { delta, per_position, repeats: reps })
}

/// Order sensitivity: K rounds, each applying one uniform permutation to
/// every sequence; sigma is the population std of the round accuracies.
pub fn order_sensitivity(
    seqs: &[IclSequence],
    lib: &DemoLibrary,
    scorer: &dyn Scorer,
    k: usize,
    rng: &mut Rng,
) -> Result<SigmaReport> {
    if seqs.is_empty() {
        return Err(Error::Validation("order sensitivity over an empty sequence set".into()));
    }
    let mut accs = Vec::with_capacity(k);
    for _ in 0..k {
        let permuted: Vec<IclSequence> = seqs
            .iter()
            .map(|s| crate::data::permute_sequence(s, &rng.permutation(s.shot())))
            .collect::<Result<_>>()?;
        accs.push(evaluate_accuracy(&permuted, lib, scorer)?);
    }
    let (mean, sigma) = mean_std(&accs);
    Ok(SigmaReport { sigma, mean, accuracies: accs })
}

/// Delta and sigma together.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohesionReport {
    pub delta: f64,
    pub sigma: f64,
    pub per_shot: Vec<f64>,
    pub k_perms: usize,
    pub repeats: usize,
}

pub fn cohesion(
    seqs: &[IclSequence],
    lib: &DemoLibrary,
    scorer: &dyn Scorer,
    metric: GapMetric,
    k_perms: usize,
    repeats: usize,
    rng: &mut Rng,
) -> Result<CohesionReport> {
    let d = disruption_gap(seqs, lib, scorer, metric, repeats)?;
    let s = order_sensitivity(seqs, lib, scorer, k_perms, rng)?;
    Ok(CohesionReport { delta: d.delta, sigma: s.sigma, per_shot: d.per_position, k_perms, repeats: d.repeats })
}
