//! Losses, AdamW with cosine warm restarts, and the training loop.

mod loss;
mod optim;

pub use loss::{
    batch_gradients, batch_loss, ce_loss_values, loss_for_params, sparsity_loss, LossBreakdown, SparsityDirection,
    TrainItem,
};
pub use optim::{adamw_step, lr_at, AdamState};

use serde::{Deserialize, Serialize};

use crate::data::{DemoLibrary, SequenceDataset};
use crate::error::{Error, Result};
use crate::model::{config_hash, Checkpoint, TacoModel, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
use crate::numerics::{Graph, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_min: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub sparsity_direction: SparsityDirection,
    /// First restart period, in epochs.
    pub t0: f64,
    /// Period multiplier after each restart.
    pub t_mult: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    /// Fraction of distinct queries held out to pick the best epoch.
    pub val_fraction: f64,
    pub seed: u64,
    /// Worker threads for per-item gradients; 0 uses every core. Results do
    /// not depend on it.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            lr_min: 0.0,
            batch_size: 16,
            epochs: 20,
            lambda1: 0.01,
            lambda2: 1e-4,
            sparsity_direction: SparsityDirection::Verbatim,
            t0: 10.0,
            t_mult: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 0.0,
            val_fraction: 0.0,
            threads: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.lr_min < 0.0 || self.lr_min > self.lr {
            return Err(Error::Config("need 0 <= lr_min <= lr and lr > 0".into()));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::Config("lambda1 and lambda2 must be non-negative".into()));
        }
        if self.batch_size == 0 || !(self.t0 > 0.0) || !(self.t_mult >= 1.0) {
            return Err(Error::Config("batch_size, t0 must be positive and t_mult >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub ce: f64,
    pub sparse: f64,
    pub l2: f64,
    pub total: f64,
    pub lr: f64,
    pub val_ce: Option<f64>,
}

pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation loss (the last
    /// epoch when nothing is held out).
    pub best: Checkpoint,
    /// State after the last epoch, including optimizer moments.
    pub last: Checkpoint,
    pub log: Vec<EpochLog>,
}

/// Split sequence indices into (train, validation) by query id.
pub fn split_by_query(ds: &SequenceDataset, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut qids: Vec<&str> = ds.sequences.iter().map(|s| s.query.id.as_str()).collect();
    qids.sort_unstable();
    qids.dedup();
    let n_val = ((qids.len() as f64) * val_fraction).floor() as usize;
    let mut rng = Rng::derive(seed, "validation-split");
    let pick = rng.sample_distinct(qids.len(), n_val);
    let val: std::collections::HashSet<&str> = pick.iter().map(|&i| qids[i]).collect();
    let (mut tr, mut va) = (Vec::new(), Vec::new());
    for (i, s) in ds.sequences.iter().enumerate() {
        if val.contains(s.query.id.as_str()) {
            va.push(i);
        } else {
            tr.push(i);
        }
    }
    (tr, va)
}

fn items(ds: &SequenceDataset, lib: &DemoLibrary, idx: &[usize]) -> Result<Vec<TrainItem>> {
    idx.iter()
        .map(|&i| {
            let s = &ds.sequences[i];
            s.validate(lib)?;
            if s.query.ground_truth_r.is_none() {
                return Err(Error::Validation(format!("sequence {i} has no ground-truth response")));
            }
            Ok(TrainItem { query: s.query.clone(), positions: s.icd_ids.iter().map(|id| lib.position(id).unwrap()).collect() })
        })
        .collect()
}

/// Mean teacher-forced loss over `items`, in batches, without gradients.
pub fn evaluate_loss(model: &TacoModel, lib: &DemoLibrary, items: &[TrainItem], cfg: &TrainConfig) -> Result<LossBreakdown> {
    let inst = model.inst_emb_for(lib);
    let mut acc = LossBreakdown::default();
    let mut n = 0usize;
    for chunk in items.chunks(cfg.batch_size.max(1)) {
        let mut g = Graph::new();
        let lf = model.encode_library(&mut g, lib)?;
        let refs: Vec<&TrainItem> = chunk.iter().collect();
        let (_, b) = batch_loss(model, &mut g, lf, &inst, &refs, cfg)?;
        acc.ce += b.ce * chunk.len() as f64;
        acc.sparse += b.sparse * chunk.len() as f64;
        acc.l2_tg = b.l2_tg;
        n += chunk.len();
    }
    if n > 0 {
        acc.ce /= n as f64;
        acc.sparse /= n as f64;
    }
    acc.total = acc.ce + cfg.lambda1 * acc.sparse + cfg.lambda2 * acc.l2_tg;
    Ok(acc)
}

/// Train `model` on `ds`. With `resume`, continue from that checkpoint's
/// epoch and optimizer state; the trajectory equals an uninterrupted run.
pub fn train(
    ds: &SequenceDataset,
    lib: &DemoLibrary,
    model: TacoModel,
    cfg: &TrainConfig,
    resume: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    train_until(ds, lib, model, cfg, resume, cfg.epochs)
}

/// As [`train`], but stop after epoch `stop` (clamped to `cfg.epochs`).
pub fn train_until(
    ds: &SequenceDataset,
    lib: &DemoLibrary,
    model: TacoModel,
    cfg: &TrainConfig,
    resume: Option<&Checkpoint>,
    stop: usize,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let stop = stop.min(cfg.epochs);
    if ds.shot == 0 || ds.is_empty() {
        return Err(Error::Validation("training needs a non-empty dataset with shot >= 1".into()));
    }
    let mut model = model;
    let (tr_idx, va_idx) = split_by_query(ds, cfg.val_fraction, cfg.seed);
    let train_items = items(ds, lib, &tr_idx)?;
    let val_items = items(ds, lib, &va_idx)?;
    let inst = model.inst_emb_for(lib);
    let steps_per_epoch = train_items.len().div_ceil(cfg.batch_size);
    let train_hash = config_hash(&TrainConfig { threads: 0, ..cfg.clone() });

    let mut state = AdamState::new(&model.params);
    let mut start_epoch = 0;
    let mut best: Option<(f64, Checkpoint)> = None;
    if let Some(ck) = resume {
        if ck.config_hash != model.config_hash() {
            return Err(Error::Checkpoint("resume checkpoint was trained with a different model config".into()));
        }
        if ck.train_hash.as_deref() != Some(train_hash.as_str()) {
            return Err(Error::Checkpoint("resume checkpoint was trained with a different training config".into()));
        }
        model = ck.model()?;
        state = ck.optimizer.clone().ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?;
        start_epoch = ck.epoch;
        if let Some(v) = ck.best_val {
            let mut b = ck.clone();
            b.optimizer = None;
            best = Some((v, b));
        }
    }
    let no_decay = [model.tg_weight()];
    let snapshot = |model: &TacoModel, epoch: usize, best_val: Option<f64>, opt: Option<AdamState>| Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: model.cfg.clone(),
        config_hash: model.config_hash(),
        params: model.params.clone(),
        optimizer: opt,
        epoch,
        best_val,
        train_hash: Some(train_hash.clone()),
    };

    let mut log = Vec::new();
    for epoch in start_epoch..stop {
        let mut order: Vec<usize> = (0..train_items.len()).collect();
        Rng::derive(cfg.seed, &format!("epoch-{epoch}")).shuffle(&mut order);
        let mut sum = LossBreakdown::default();
        let lr_epoch = lr_at(cfg, (epoch * steps_per_epoch) as u64, steps_per_epoch);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let step = (epoch * steps_per_epoch + b) as u64;
            let batch: Vec<&TrainItem> = chunk.iter().map(|&i| &train_items[i]).collect();
            let (pg, br) = batch_gradients(&model, lib, &inst, &batch, cfg)?;
            if !br.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    batch: step as usize,
                    detail: format!("epoch {epoch} batch {b}: ce={} sparse={} l2={}", br.ce, br.sparse, br.l2_tg),
                });
            }
            let lr = lr_at(cfg, step, steps_per_epoch);
            adamw_step(&mut model.params, &pg, &mut state, lr, cfg, &no_decay);
            let w = chunk.len() as f64;
            sum.ce += br.ce * w;
            sum.sparse += br.sparse * w;
            sum.l2_tg += br.l2_tg * w;
            sum.total += br.total * w;
        }
        let n = train_items.len() as f64;
        let val_ce = if val_items.is_empty() { None } else { Some(evaluate_loss(&model, lib, &val_items, cfg)?.ce) };
        log.push(EpochLog {
            epoch: epoch + 1,
            ce: sum.ce / n,
            sparse: sum.sparse / n,
            l2: sum.l2_tg / n,
            total: sum.total / n,
            lr: lr_epoch,
            val_ce,
        });
        let score = val_ce.unwrap_or(f64::NEG_INFINITY);
        let improves = match &best {
            None => true,
            Some((b, _)) => val_ce.is_none() || score < *b,
        };
        if improves {
            best = Some((score, snapshot(&model, epoch + 1, val_ce, None)));
        }
    }
    let best_val = best.as_ref().and_then(|(v, _)| v.is_finite().then_some(*v));
    let last = snapshot(&model, stop.max(start_epoch), best_val, Some(state));
    let best = match best {
        Some((_, ck)) => ck,
        None => {
            let mut ck = last.clone();
            ck.optimizer = None;
            ck
        }
    };
    Ok(TrainOutcome { best, last, log })
}
