use serde::{Deserialize, Serialize};

use super::make_sequence;
use crate::data::{DemoLibrary, IclSequence, QuerySample};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, TacoModel};
use crate::numerics::ops::log_softmax_masked;
use crate::numerics::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BeamConfig {
    pub beam_width: usize,
    /// Shots n to generate; may differ from the training N.
    pub shots: usize,
    pub no_repeat: bool,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self { beam_width: 3, shots: 4, no_repeat: true }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamResult {
    /// Library positions in prompt order.
    pub positions: Vec<usize>,
    pub log_prob: f64,
    pub sequence: IclSequence,
}

fn step_log_probs(
    model: &TacoModel,
    lib_fused: &Tensor,
    inst: &[f64],
    query: &QuerySample,
    prefix: &[usize],
    no_repeat: bool,
) -> Result<Vec<f64>> {
    if no_repeat {
        model.next_log_probs(lib_fused, query, inst, prefix, false)
    } else {
        full_step(model, lib_fused, inst, query, prefix)
    }
}

/// Log-softmax over the library only (EOS masked), prefix not masked.
fn full_step(model: &TacoModel, lib_fused: &Tensor, inst: &[f64], query: &QuerySample, prefix: &[usize]) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let lf = g.constant(lib_fused.clone());
    let fwd = model.forward(&mut g, lf, query, inst, prefix, false, ForwardOptions::default())?;
    let l = model.logits(&mut g, fwd.hidden, lf, 1 + prefix.len(), 1)?;
    log_softmax_masked(g.value(l).data(), &[lib_fused.rows()])
}

/// Model log-probability of choosing `positions` in order, with EOS masked
/// at every step and (with `no_repeat`) earlier choices masked.
pub fn sequence_log_prob(
    model: &TacoModel,
    lib_fused: &Tensor,
    inst: &[f64],
    query: &QuerySample,
    positions: &[usize],
    no_repeat: bool,
) -> Result<f64> {
    let mut total = 0.0;
    for k in 0..positions.len() {
        let lp = step_log_probs(model, lib_fused, inst, query, &positions[..k], no_repeat)?;
        total += lp[positions[k]];
    }
    Ok(total)
}

/// Width-limited beam search over next-ICD distributions. Returns the
/// highest log-probability complete sequence; ties prefer lower positions.
pub fn beam_infer(
    model: &TacoModel,
    lib: &DemoLibrary,
    lib_fused: &Tensor,
    query: &QuerySample,
    cfg: &BeamConfig,
) -> Result<BeamResult> {
    if cfg.beam_width == 0 {
        return Err(Error::Config("beam_width must be at least 1".into()));
    }
    if cfg.no_repeat && lib.len() < cfg.shots {
        return Err(Error::Search(format!("library of {} cannot fill {} shots without repeats", lib.len(), cfg.shots)));
    }
    if lib_fused.rows() != lib.len() {
        return Err(Error::Dimension("encoded library does not match the library".into()));
    }
    let inst = model.inst_emb_for(lib);
    let mut beams: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    for _ in 0..cfg.shots {
        let mut next = Vec::new();
        for (prefix, score) in &beams {
            let lp = step_log_probs(model, lib_fused, &inst, query, prefix, cfg.no_repeat)?;
            for (j, &v) in lp.iter().enumerate().take(lib.len()) {
                if v.is_finite() {
                    let mut s = prefix.clone();
                    s.push(j);
                    next.push((s, score + v));
                }
            }
        }
        next.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        next.truncate(cfg.beam_width);
        beams = next;
    }
    let (positions, log_prob) = beams.swap_remove(0);
    let sequence = make_sequence(lib, &positions, query);
    Ok(BeamResult { positions, log_prob, sequence })
}
