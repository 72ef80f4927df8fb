use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::data::QuerySample;
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, ForwardOutput, TacoModel};
use crate::numerics::ops::log_softmax_masked;
use crate::numerics::{Graph, NodeId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SparsityDirection {
    /// Minimize KL(softmax(M_i) || U).
    #[default]
    Verbatim,
    /// Minimize -KL, pushing mask rows away from uniform.
    Reverse,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub sparse: f64,
    pub l2_tg: f64,
    pub total: f64,
}

/// One teacher-forced training sequence: library positions in order.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub query: QuerySample,
    pub positions: Vec<usize>,
}

/// Targets x_1..x_N then EOS (`n_lib`), and per step the ids already chosen.
fn targets(positions: &[usize], n_lib: usize) -> (Vec<usize>, Vec<Vec<usize>>) {
    let mut t = positions.to_vec();
    t.push(n_lib);
    let excluded = (0..=positions.len()).map(|k| positions[..k].to_vec()).collect();
    (t, excluded)
}

/// Mean cross-entropy of `targets` over logit rows, computed on values.
pub fn ce_loss_values(logits: &Tensor, targets: &[usize], excluded: &[Vec<usize>]) -> Result<f64> {
    if targets.len() != logits.rows() || excluded.len() != logits.rows() {
        return Err(Error::Dimension("need one target and one exclusion list per logit row".into()));
    }
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        if t >= logits.cols() {
            return Err(Error::Validation(format!("target {t} outside a vocabulary of {}", logits.cols())));
        }
        let lp = log_softmax_masked(logits.row_slice(r), &excluded[r])?;
        if !lp[t].is_finite() {
            return Err(Error::Validation(format!("target {t} is masked at step {r}")));
        }
        total -= lp[t];
    }
    Ok(total / targets.len() as f64)
}

/// (1/N) * sum over task-aware masks and ICD rows of KL(softmax(M_i) || U),
/// negated for the reverse direction.
pub fn sparsity_loss(g: &mut Graph, fwd: &ForwardOutput, shot: usize, dir: SparsityDirection) -> Result<Option<NodeId>> {
    if fwd.masks.is_empty() || shot == 0 {
        return Ok(None);
    }
    let rows = fwd.layout.icd_positions.clone();
    let mut acc: Option<NodeId> = None;
    for &m in &fwd.masks {
        let kl = g.kl_uniform_rows(m, &rows)?;
        acc = Some(match acc {
            None => kl,
            Some(a) => g.add(a, kl)?,
        });
    }
    let sign = match dir {
        SparsityDirection::Verbatim => 1.0,
        SparsityDirection::Reverse => -1.0,
    };
    Ok(Some(g.scale(acc.unwrap(), sign / shot as f64)))
}

/// (ce, sparse) nodes for one sequence.
fn item_loss(
    model: &TacoModel,
    g: &mut Graph,
    lib_fused: NodeId,
    inst: &[f64],
    item: &TrainItem,
    dir: SparsityDirection,
) -> Result<(NodeId, Option<NodeId>)> {
    let n_lib = g.value(lib_fused).rows();
    let fwd = model.forward(g, lib_fused, &item.query, inst, &item.positions, false, ForwardOptions::default())?;
    let logits = model.logits(g, fwd.hidden, lib_fused, 1, item.positions.len() + 1)?;
    let (t, ex) = targets(&item.positions, n_lib);
    let ce = g.cross_entropy(logits, &t, &ex)?;
    let sp = sparsity_loss(g, &fwd, item.positions.len(), dir)?;
    Ok((ce, sp))
}

/// Batch loss on one tape: mean over items of ce + lambda1 * sparse, plus
/// lambda2 * ||W_TG||^2.
pub fn batch_loss(
    model: &TacoModel,
    g: &mut Graph,
    lib_fused: NodeId,
    inst: &[f64],
    batch: &[&TrainItem],
    cfg: &TrainConfig,
) -> Result<(NodeId, LossBreakdown)> {
    if batch.is_empty() {
        return Err(Error::Validation("empty batch".into()));
    }
    let mut ce_acc: Option<NodeId> = None;
    let mut sp_acc: Option<NodeId> = None;
    for item in batch {
        let (ce, sp) = item_loss(model, g, lib_fused, inst, item, cfg.sparsity_direction)?;
        ce_acc = Some(match ce_acc {
            None => ce,
            Some(a) => g.add(a, ce)?,
        });
        if let Some(sp) = sp {
            sp_acc = Some(match sp_acc {
                None => sp,
                Some(a) => g.add(a, sp)?,
            });
        }
    }
    let inv = 1.0 / batch.len() as f64;
    let ce = g.scale(ce_acc.unwrap(), inv);
    let w = g.param(&model.params, model.tg_weight());
    let l2 = g.sq_norm(w);
    let mut total = ce;
    let sparse_v = match sp_acc {
        Some(s) => {
            let s = g.scale(s, inv);
            let v = g.scalar(s);
            let t = g.scale(s, cfg.lambda1);
            total = g.add(total, t)?;
            v
        }
        None => 0.0,
    };
    let l2t = g.scale(l2, cfg.lambda2);
    total = g.add(total, l2t)?;
    let br = LossBreakdown { ce: g.scalar(ce), sparse: sparse_v, l2_tg: g.scalar(l2), total: g.scalar(total) };
    Ok((total, br))
}

/// Gradient of the batch loss for every parameter, with items evaluated on
/// separate tapes across threads. The library is encoded once; each item
/// returns its gradient with respect to the fused library, and those are
/// pushed back through the encoder in one pass.
pub fn batch_gradients(
    model: &TacoModel,
    lib: &crate::data::DemoLibrary,
    inst: &[f64],
    batch: &[&TrainItem],
    cfg: &TrainConfig,
) -> Result<(Vec<Tensor>, LossBreakdown)> {
    if batch.is_empty() {
        return Err(Error::Validation("empty batch".into()));
    }
    let mut lg = Graph::new();
    let lf_node = model.encode_library(&mut lg, lib)?;
    let lf = lg.value(lf_node).clone();
    let inv = 1.0 / batch.len() as f64;

    let run = |item: &TrainItem| -> Result<(f64, f64, Vec<Tensor>, Tensor)> {
        let mut g = Graph::new();
        let lfv = g.variable(lf.clone());
        let (ce, sp) = item_loss(model, &mut g, lfv, inst, item, cfg.sparsity_direction)?;
        let ce_v = g.scalar(ce);
        let (loss, sp_v) = match sp {
            Some(s) => {
                let v = g.scalar(s);
                let t = g.scale(s, cfg.lambda1);
                (g.add(ce, t)?, v)
            }
            None => (ce, 0.0),
        };
        let loss = g.scale(loss, inv);
        let grads = g.backward(loss)?;
        let pg = g.param_grads(&grads, &model.params);
        let glf = grads.get(lfv).cloned().unwrap_or_else(|| Tensor::zeros(lf.rows(), lf.cols()));
        Ok((ce_v, sp_v, pg, glf))
    };

    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let threads = if cfg.threads == 0 { cores } else { cfg.threads }.min(batch.len());
    let results: Vec<Result<(f64, f64, Vec<Tensor>, Tensor)>> = if threads <= 1 {
        batch.iter().map(|it| run(it)).collect()
    } else {
        let chunk = batch.len().div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = batch
                .chunks(chunk)
                .map(|c| s.spawn(|| c.iter().map(|it| run(it)).collect::<Vec<_>>()))
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("training worker panicked")).collect()
        })
    };

    let mut grads: Vec<Tensor> = model.params.entries().iter().map(|e| Tensor::zeros(e.value.rows(), e.value.cols())).collect();
    let mut glf = Tensor::zeros(lf.rows(), lf.cols());
    let (mut ce, mut sparse) = (0.0, 0.0);
    for r in results {
        let (c, s, pg, gl) = r?;
        ce += c * inv;
        sparse += s * inv;
        for (acc, g) in grads.iter_mut().zip(&pg) {
            add_into(acc, g);
        }
        add_into(&mut glf, &gl);
    }

    // Encoder pass: d/dparams of <lib_fused, glf>, plus the W_TG penalty.
    let seed = lg.constant(glf);
    let prod = lg.mul(lf_node, seed)?;
    let mut obj = lg.sum(prod);
    let w = lg.param(&model.params, model.tg_weight());
    let l2 = lg.sq_norm(w);
    let l2_v = lg.scalar(l2);
    let l2t = lg.scale(l2, cfg.lambda2);
    obj = lg.add(obj, l2t)?;
    let eg = lg.backward(obj)?;
    for (acc, g) in grads.iter_mut().zip(&lg.param_grads(&eg, &model.params)) {
        add_into(acc, g);
    }
    let total = ce + cfg.lambda1 * sparse + cfg.lambda2 * l2_v;
    Ok((grads, LossBreakdown { ce, sparse, l2_tg: l2_v, total }))
}

fn add_into(acc: &mut Tensor, g: &Tensor) {
    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
        *a += b;
    }
}

/// Total loss on one tape for gradient checks: the model is rebuilt from `store`.
pub fn loss_for_params(
    model: &TacoModel,
    store: &ParamStore,
    g: &mut Graph,
    lib: &crate::data::DemoLibrary,
    batch: &[&TrainItem],
    cfg: &TrainConfig,
) -> Result<NodeId> {
    let m = TacoModel::from_params(model.cfg.clone(), store.clone())?;
    let inst = m.inst_emb_for(lib);
    let lf = m.encode_library(g, lib)?;
    Ok(batch_loss(&m, g, lf, &inst, batch, cfg)?.0)
}
