//! Parameter names, shapes and initial values.

use super::config::{FusionMode, GateKind, HeadKind, ModelConfig, TaskCombine};
use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Rng, Tensor};

#[derive(Clone, Copy, Debug)]
pub(crate) enum Init {
    Zeros,
    Ones,
    Const(f64),
    /// N(0, std^2)
    Normal(f64),
}

#[derive(Clone, Debug)]
pub(crate) struct RelIds {
    pub w_tg: ParamId,
    pub w_tok: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct LayerIds {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub rel: Option<RelIds>,
}

#[derive(Clone, Debug)]
pub(crate) struct GuiderIds {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln_g: ParamId,
    pub ln_b: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct Ids {
    pub proj_img: Option<ParamId>,
    pub proj_txt: Option<ParamId>,
    pub fusion_w: Option<ParamId>,
    pub fusion_b: Option<ParamId>,
    pub tern_w: Option<ParamId>,
    pub tern_b: Option<ParamId>,
    pub residual: Option<ParamId>,
    pub bos: ParamId,
    pub eos: ParamId,
    pub task: Option<ParamId>,
    pub task_proj: Option<ParamId>,
    pub tg_w: ParamId,
    pub tg_random: Option<ParamId>,
    pub alpha: ParamId,
    pub layers: Vec<LayerIds>,
    /// One update between each consecutive pair of task-aware layers.
    pub guiders: Vec<GuiderIds>,
    pub out_ln_g: ParamId,
    pub out_ln_b: ParamId,
    pub out_w: ParamId,
    pub out_free: Option<ParamId>,
}

/// Walk the parameter layout, asking `get` for each (name, shape, init).
pub(crate) fn build_ids(
    cfg: &ModelConfig,
    get: &mut dyn FnMut(&str, usize, usize, Init) -> Result<ParamId>,
) -> Result<Ids> {
    let d = cfg.d;
    let lin = |fan_in: usize| Init::Normal(1.0 / (fan_in as f64).sqrt());
    let proj_img = if cfg.d_img != d { Some(get("proj.img", cfg.d_img, d, lin(cfg.d_img))?) } else { None };
    let proj_txt = if cfg.d_txt != d { Some(get("proj.txt", cfg.d_txt, d, lin(cfg.d_txt))?) } else { None };

    let (mut fusion_w, mut fusion_b, mut tern_w, mut tern_b, mut residual) = (None, None, None, None, None);
    match cfg.fusion {
        FusionMode::Binary => {
            let width = if cfg.gate == GateKind::Vector { d } else { 1 };
            fusion_w = Some(get("fusion.w", 2 * d, width, lin(2 * d))?);
            fusion_b = Some(get("fusion.b", 1, width, Init::Zeros)?);
        }
        FusionMode::Ternary => {
            tern_w = Some(get("fusion.ternary_w", 3 * d, 3, lin(3 * d))?);
            tern_b = Some(get("fusion.ternary_b", 1, 3, Init::Zeros)?);
        }
        FusionMode::Concat => {
            residual = Some(get("fusion.residual", cfg.vocab, d, Init::Normal(0.02))?);
        }
    }

    let bos = get("tok.bos", 1, d, Init::Normal(1.0))?;
    let eos = get("tok.eos", 1, d, Init::Normal(1.0))?;
    let task = if cfg.ablation.no_task_token { None } else { Some(get("tok.task", 1, d, Init::Normal(0.1))?) };
    let task_proj = if !cfg.ablation.no_task_token && cfg.task_combine == TaskCombine::ConcatProject {
        Some(get("tok.task_proj", 2 * d, d, lin(2 * d))?)
    } else {
        None
    };
    let tg_w = get("tg.w", 3 * d, d, lin(3 * d))?;
    let tg_random = if cfg.ablation.random_tg_init { Some(get("tg.random", 1, d, Init::Normal(1.0))?) } else { None };
    let alpha = get("alpha", 1, 1, Init::Const(cfg.alpha_init))?;

    let fd = d * cfg.ffn_mult;
    let mut layers = Vec::new();
    for l in 1..=cfg.depth {
        let p = |s: &str| format!("layer{l}.{s}");
        let rel = if cfg.is_task_aware(l) {
            Some(RelIds {
                w_tg: get(&p("rel.w_tg"), d, d, lin(2 * d))?,
                w_tok: get(&p("rel.w_tok"), d, d, lin(2 * d))?,
                b1: get(&p("rel.b1"), 1, d, Init::Zeros)?,
                w2: get(&p("rel.w2"), d, 1, Init::Normal(0.1 / (d as f64).sqrt()))?,
                b2: get(&p("rel.b2"), 1, 1, Init::Zeros)?,
            })
        } else {
            None
        };
        layers.push(LayerIds {
            ln1_g: get(&p("ln1.g"), 1, d, Init::Ones)?,
            ln1_b: get(&p("ln1.b"), 1, d, Init::Zeros)?,
            wq: get(&p("attn.wq"), d, d, lin(d))?,
            wk: get(&p("attn.wk"), d, d, lin(d))?,
            wv: get(&p("attn.wv"), d, d, lin(d))?,
            wo: get(&p("attn.wo"), d, d, Init::Normal(1.0 / (d as f64 * 2.0 * cfg.depth as f64).sqrt()))?,
            ln2_g: get(&p("ln2.g"), 1, d, Init::Ones)?,
            ln2_b: get(&p("ln2.b"), 1, d, Init::Zeros)?,
            w1: get(&p("ffn.w1"), d, fd, lin(d))?,
            b1: get(&p("ffn.b1"), 1, fd, Init::Zeros)?,
            w2: get(&p("ffn.w2"), fd, d, Init::Normal(1.0 / (fd as f64 * 2.0 * cfg.depth as f64).sqrt()))?,
            b2: get(&p("ffn.b2"), 1, d, Init::Zeros)?,
            rel,
        });
    }

    let mut guiders = Vec::new();
    for k in 1..cfg.ta_layers.len() {
        let p = |s: &str| format!("guider{k}.{s}");
        guiders.push(GuiderIds {
            wq: get(&p("wq"), d, d, lin(d))?,
            wk: get(&p("wk"), d, d, lin(d))?,
            wv: get(&p("wv"), d, d, lin(d))?,
            wo: get(&p("wo"), d, d, lin(d))?,
            ln_g: get(&p("ln.g"), 1, d, Init::Ones)?,
            ln_b: get(&p("ln.b"), 1, d, Init::Zeros)?,
        });
    }

    let out_ln_g = get("out.ln.g", 1, d, Init::Ones)?;
    let out_ln_b = get("out.ln.b", 1, d, Init::Zeros)?;
    let out_w = get("out.w", d, d, lin(d))?;
    let out_free = if cfg.head == HeadKind::Free { Some(get("out.free", d, cfg.vocab + 1, lin(d))?) } else { None };

    Ok(Ids {
        proj_img,
        proj_txt,
        fusion_w,
        fusion_b,
        tern_w,
        tern_b,
        residual,
        bos,
        eos,
        task,
        task_proj,
        tg_w,
        tg_random,
        alpha,
        layers,
        guiders,
        out_ln_g,
        out_ln_b,
        out_w,
        out_free,
    })
}

/// Each tensor draws from its own stream keyed by name, so configurations
/// that add or drop a parameter leave every shared one unchanged.
pub(crate) fn init_params(cfg: &ModelConfig, rng: &mut Rng) -> Result<(ParamStore, Ids)> {
    let base = rng.next_u64();
    let mut store = ParamStore::new();
    let ids = build_ids(cfg, &mut |name, r, c, init| {
        let data = match init {
            Init::Zeros => vec![0.0; r * c],
            Init::Ones => vec![1.0; r * c],
            Init::Const(v) => vec![v; r * c],
            Init::Normal(s) => Rng::derive(base, name).normal_vec(r * c, s),
        };
        store.add(name, Tensor::matrix(r, c, data)?)
    })?;
    Ok((store, ids))
}

pub(crate) fn bind_params(cfg: &ModelConfig, store: &ParamStore) -> Result<Ids> {
    let mut used = 0;
    let ids = build_ids(cfg, &mut |name, r, c, _| {
        let id = store.id(name).ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
        let t = store.get(id);
        if t.rows() != r || t.cols() != c {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` is {}x{}, expected {r}x{c}",
                t.rows(),
                t.cols()
            )));
        }
        used += 1;
        Ok(id)
    })?;
    if used != store.len() {
        return Err(Error::Checkpoint(format!("{} parameters not used by this config", store.len() - used)));
    }
    Ok(ids)
}
