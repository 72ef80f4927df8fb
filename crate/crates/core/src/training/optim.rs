use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::numerics::{ParamId, ParamStore, Tensor};

/// AdamW first and second moments, one buffer per parameter in store order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.entries().iter().map(|e| vec![0.0; e.value.len()]).collect();
        Self { step: 0, m: zeros.clone(), v: zeros }
    }
}

/// Learning rate at optimizer step `step` under cosine annealing with warm
/// restarts. Periods are measured in (fractional) epochs.
pub fn lr_at(cfg: &TrainConfig, step: u64, steps_per_epoch: usize) -> f64 {
    let mut t = step as f64 / steps_per_epoch.max(1) as f64;
    let mut period = cfg.t0;
    while t >= period {
        t -= period;
        period *= cfg.t_mult;
    }
    cfg.lr_min + 0.5 * (cfg.lr - cfg.lr_min) * (1.0 + (std::f64::consts::PI * t / period).cos())
}

/// One AdamW update. Decoupled weight decay skips the ids in `no_decay`.
pub fn adamw_step(params: &mut ParamStore, grads: &[Tensor], st: &mut AdamState, lr: f64, cfg: &TrainConfig, no_decay: &[ParamId]) {
    let scale = if cfg.clip_norm > 0.0 {
        let norm = grads.iter().map(|g| g.sq_norm()).sum::<f64>().sqrt();
        if norm > cfg.clip_norm { cfg.clip_norm / norm } else { 1.0 }
    } else {
        1.0
    };
    st.step += 1;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let bc1 = 1.0 - b1.powi(st.step as i32);
    let bc2 = 1.0 - b2.powi(st.step as i32);
    let ids: Vec<ParamId> = params.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let decay = if no_decay.contains(&id) { 0.0 } else { cfg.weight_decay };
        let (m, v) = (&mut st.m[k], &mut st.v[k]);
        let p = params.get_mut(id).data_mut();
        for (i, &g) in grads[k].data().iter().enumerate() {
            let g = g * scale;
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            p[i] -= lr * (mh / (vh.sqrt() + cfg.adam_eps) + decay * p[i]);
        }
    }
}
