//! Fusion front end, task-aware decoder and output head.

mod checkpoint;
mod config;
mod layout;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use config::{Ablation, FusionMode, GateKind, HeadKind, ModelConfig, TaskCombine};

use crate::data::{DemoLibrary, IclSequence, QuerySample};
use crate::error::{Error, Result};
use crate::numerics::ops::log_softmax_masked;
use crate::numerics::{Graph, MaskLayout, NodeId, ParamId, ParamStore, Rng, Tensor};
use layout::{GuiderIds, Ids, LayerIds, RelIds};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Bos,
    TaskQuery,
    Icd,
    Eos,
}

/// Decoder input: embeddings with their roles.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub embeddings: Tensor,
    pub roles: Vec<Role>,
    pub icd_positions: Vec<usize>,
    pub query_position: usize,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Pin every relevance weight to 1, which zeroes the task-aware mask.
    pub force_relevance_one: bool,
}

/// Tape handles produced by one forward pass.
pub struct ForwardOutput {
    pub tokens: NodeId,
    pub hidden: NodeId,
    /// One additive mask per task-aware layer, ascending.
    pub masks: Vec<NodeId>,
    /// Relevance weights (T x 1) per task-aware layer.
    pub relevance: Vec<NodeId>,
    /// Guider state used by each task-aware layer.
    pub guider: Vec<NodeId>,
    pub layout: MaskLayout,
}

pub struct TacoModel {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    ids: Ids,
}

impl Clone for TacoModel {
    fn clone(&self) -> Self {
        Self { cfg: self.cfg.clone(), params: self.params.clone(), ids: self.ids.clone() }
    }
}

pub fn causal_mask(n: usize) -> Tensor {
    let mut m = Tensor::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            m.set(i, j, f64::NEG_INFINITY);
        }
    }
    m
}

fn row_input(v: &[f64], what: &str, want: usize) -> Result<Tensor> {
    if v.len() != want {
        return Err(Error::Config(format!("{what} has {} dims, model expects {want}", v.len())));
    }
    Ok(Tensor::row(v))
}

impl TacoModel {
    pub fn new(cfg: ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let (params, ids) = layout::init_params(&cfg, rng)?;
        Ok(Self { cfg, params, ids })
    }

    pub fn from_params(cfg: ModelConfig, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let ids = layout::bind_params(&cfg, &params)?;
        Ok(Self { cfg, params, ids })
    }

    /// SHA-256 of the canonical JSON form of the config.
    pub fn config_hash(&self) -> String {
        config_hash(&self.cfg)
    }

    pub fn tg_weight(&self) -> ParamId {
        self.ids.tg_w
    }

    pub fn alpha(&self) -> ParamId {
        self.ids.alpha
    }

    fn p(&self, g: &mut Graph, id: ParamId) -> NodeId {
        g.param(&self.params, id)
    }

    fn project(&self, g: &mut Graph, x: NodeId, proj: Option<ParamId>) -> Result<NodeId> {
        match proj {
            Some(p) => {
                let w = self.p(g, p);
                g.matmul(x, w)
            }
            None => Ok(x),
        }
    }

    fn img_input(&self, g: &mut Graph, t: Tensor) -> Result<NodeId> {
        let n = g.constant(t);
        self.project(g, n, self.ids.proj_img)
    }

    fn txt_input(&self, g: &mut Graph, t: Tensor) -> Result<NodeId> {
        let n = g.constant(t);
        self.project(g, n, self.ids.proj_txt)
    }

    /// Fuse rows of (image, text) embeddings. `qr` feeds the binary gate;
    /// `q` and `r` feed ternary and concat modes.
    fn fuse(&self, g: &mut Graph, img: NodeId, qr: NodeId, q: NodeId, r: Option<NodeId>) -> Result<NodeId> {
        match self.cfg.fusion {
            FusionMode::Binary => {
                let x = g.concat_cols(&[img, qr])?;
                let w = self.p(g, self.ids.fusion_w.unwrap());
                let b = self.p(g, self.ids.fusion_b.unwrap());
                let pre = g.matmul(x, w)?;
                let pre = g.add_row(pre, b)?;
                let gate = g.sigmoid(pre);
                let diff = g.sub(img, qr)?;
                let gated = match self.cfg.gate {
                    GateKind::Vector => g.mul(gate, diff)?,
                    GateKind::Scalar => g.mul_col(diff, gate)?,
                };
                g.add(qr, gated)
            }
            FusionMode::Ternary => {
                let r = match r {
                    Some(r) => r,
                    None => {
                        let rows = g.value(q).rows();
                        g.constant(Tensor::zeros(rows, self.cfg.d))
                    }
                };
                let x = g.concat_cols(&[img, q, r])?;
                let w = self.p(g, self.ids.tern_w.unwrap());
                let b = self.p(g, self.ids.tern_b.unwrap());
                let pre = g.matmul(x, w)?;
                let pre = g.add_row(pre, b)?;
                let f = g.softmax(pre)?;
                let f = g.simplex_cap(f, self.cfg.theta);
                let mut acc = None;
                for (k, part) in [img, q, r].into_iter().enumerate() {
                    let fk = g.slice_cols(f, k, 1)?;
                    let term = g.mul_col(part, fk)?;
                    acc = Some(match acc {
                        None => term,
                        Some(a) => g.add(a, term)?,
                    });
                }
                Ok(acc.unwrap())
            }
            FusionMode::Concat => {
                let s = g.add(img, q)?;
                match r {
                    Some(r) => g.add(s, r),
                    None => Ok(s),
                }
            }
        }
    }

    /// Fused embedding of every library demonstration (n x d), in library order.
    pub fn encode_library(&self, g: &mut Graph, lib: &DemoLibrary) -> Result<NodeId> {
        lib.ensure_non_empty()?;
        let (di, dt) = lib.dims();
        if di != self.cfg.d_img || dt != self.cfg.d_txt {
            return Err(Error::Dimension(format!(
                "library dims ({di}, {dt}) differ from model input dims ({}, {})",
                self.cfg.d_img, self.cfg.d_txt
            )));
        }
        let n = lib.len();
        let demos = lib.demos();
        let stack = |f: fn(&crate::data::Demonstration) -> &[f64], w: usize| {
            let mut data = Vec::with_capacity(n * w);
            for d in demos {
                data.extend_from_slice(f(d));
            }
            Tensor::matrix(n, w, data)
        };
        let img = self.img_input(g, stack(|d| &d.image_emb, di)?)?;
        let qr = self.txt_input(g, stack(|d| &d.qr_emb, dt)?)?;
        let (q, r) = if self.cfg.fusion == FusionMode::Binary {
            (qr, None)
        } else {
            let q = self.txt_input(g, stack(|d| &d.q_emb, dt)?)?;
            let r = self.txt_input(g, stack(|d| &d.r_emb, dt)?)?;
            (q, Some(r))
        };
        let fused = self.fuse(g, img, qr, q, r)?;
        match self.ids.residual {
            Some(res) => {
                if n != self.cfg.vocab {
                    return Err(Error::Config(format!("concat fusion trained for {} demos, library has {n}", self.cfg.vocab)));
                }
                let r = self.p(g, res);
                g.add(fused, r)
            }
            None => Ok(fused),
        }
    }

    /// Value-level library encoding for inference.
    pub fn library_embeddings(&self, lib: &DemoLibrary) -> Result<Tensor> {
        let mut g = Graph::new();
        let n = self.encode_library(&mut g, lib)?;
        Ok(g.value(n).clone())
    }

    /// Fused query (image, question) with the response slot empty.
    pub fn fuse_query(&self, g: &mut Graph, q: &QuerySample) -> Result<NodeId> {
        let img = self.img_input(g, row_input(&q.image_emb, "query image_emb", self.cfg.d_img)?)?;
        let qe = self.txt_input(g, row_input(&q.q_emb, "query q_emb", self.cfg.d_txt)?)?;
        self.fuse(g, img, qe, qe, None)
    }

    /// Query token: the [TASK] embedding combined with the fused query.
    pub fn encode_query(&self, g: &mut Graph, q: &QuerySample) -> Result<NodeId> {
        let fused = self.fuse_query(g, q)?;
        let Some(task) = self.ids.task else { return Ok(fused) };
        let t = self.p(g, task);
        match self.ids.task_proj {
            None => g.add(t, fused),
            Some(pid) => {
                let x = g.concat_cols(&[t, fused])?;
                let w = self.p(g, pid);
                g.matmul(x, w)
            }
        }
    }

    /// Initial guider state from image, question and instruction embeddings.
    pub fn guider_init(&self, g: &mut Graph, q: &QuerySample, inst_emb: &[f64]) -> Result<NodeId> {
        if let Some(r) = self.ids.tg_random {
            return Ok(self.p(g, r));
        }
        let ab = &self.cfg.ablation;
        let zero_if = |drop: bool, v: &[f64]| if drop { vec![0.0; v.len()] } else { v.to_vec() };
        let img = self.img_input(g, row_input(&zero_if(ab.drop_image, &q.image_emb), "query image_emb", self.cfg.d_img)?)?;
        let qe = self.txt_input(g, row_input(&zero_if(ab.drop_query, &q.q_emb), "query q_emb", self.cfg.d_txt)?)?;
        let inst = self.txt_input(g, row_input(&zero_if(ab.drop_inst, inst_emb), "instruction embedding", self.cfg.d_txt)?)?;
        let x = g.concat_cols(&[img, qe, inst])?;
        let w = self.p(g, self.ids.tg_w);
        g.matmul(x, w)
    }

    /// Per-position relevance weights t_i = sigmoid(MLP(e_TG + e_i)).
    fn relevance(&self, g: &mut Graph, rel: &RelIds, tg: NodeId, tokens: NodeId) -> Result<NodeId> {
        let wt = self.p(g, rel.w_tok);
        let wg = self.p(g, rel.w_tg);
        let a = g.matmul(tokens, wt)?;
        let b = g.matmul(tg, wg)?;
        let pre = if g.value(b).rows() == 1 { g.add_row(a, b)? } else { g.add(a, b)? };
        let b1 = self.p(g, rel.b1);
        let pre = g.add_row(pre, b1)?;
        let hid = g.gelu(pre);
        let w2 = self.p(g, rel.w2);
        let b2 = self.p(g, rel.b2);
        let o = g.matmul(hid, w2)?;
        let o = g.add_row(o, b2)?;
        Ok(g.sigmoid(o))
    }

    fn block(&self, g: &mut Graph, l: &LayerIds, h: NodeId, mask: NodeId) -> Result<NodeId> {
        let eps = self.cfg.ln_eps;
        let (g1, b1) = (self.p(g, l.ln1_g), self.p(g, l.ln1_b));
        let x = g.layer_norm(h, g1, b1, eps)?;
        let att = self.attention(g, l, x, mask)?;
        let h = g.add(h, att)?;
        let (g2, b2) = (self.p(g, l.ln2_g), self.p(g, l.ln2_b));
        let x = g.layer_norm(h, g2, b2, eps)?;
        let (w1, fb1, w2, fb2) = (self.p(g, l.w1), self.p(g, l.b1), self.p(g, l.w2), self.p(g, l.b2));
        let f = g.matmul(x, w1)?;
        let f = g.add_row(f, fb1)?;
        let f = g.gelu(f);
        let f = g.matmul(f, w2)?;
        let f = g.add_row(f, fb2)?;
        g.add(h, f)
    }

    /// Multi-head self-attention with one additive mask shared by all heads.
    fn attention(&self, g: &mut Graph, l: &LayerIds, x: NodeId, mask: NodeId) -> Result<NodeId> {
        let dh = self.cfg.d_head();
        let (wq, wk, wv, wo) = (self.p(g, l.wq), self.p(g, l.wk), self.p(g, l.wv), self.p(g, l.wo));
        let q = g.matmul(x, wq)?;
        let k = g.matmul(x, wk)?;
        let v = g.matmul(x, wv)?;
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let s = g.matmul_t(qh, kh)?;
            let s = g.scale(s, 1.0 / (dh as f64).sqrt());
            let s = g.add(s, mask)?;
            let p = g.softmax(s)?;
            heads.push(g.matmul(p, vh)?);
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        g.matmul(cat, wo)
    }

    /// Guider update: cross-attention of the guider over hidden states,
    /// residual, layer norm. Row i only sees positions <= i, so the result is
    /// one guider state per position and causality is preserved.
    fn update_guider(&self, g: &mut Graph, gi: &GuiderIds, tg: NodeId, h: NodeId, causal: NodeId) -> Result<NodeId> {
        let n = g.value(h).rows();
        let (wq, wk, wv, wo) = (self.p(g, gi.wq), self.p(g, gi.wk), self.p(g, gi.wv), self.p(g, gi.wo));
        let q = g.matmul(tg, wq)?;
        let k = g.matmul(h, wk)?;
        let v = g.matmul(h, wv)?;
        let s = g.matmul_t(q, k)?;
        let s = g.scale(s, 1.0 / (self.cfg.d as f64).sqrt());
        let s = if g.value(s).rows() == 1 {
            let ones = g.constant(Tensor::filled(n, 1, 1.0));
            g.matmul(ones, s)?
        } else {
            s
        };
        let s = g.add(s, causal)?;
        let a = g.softmax(s)?;
        let o = g.matmul(a, v)?;
        let o = g.matmul(o, wo)?;
        let res = if g.value(tg).rows() == 1 { g.add_row(o, tg)? } else { g.add(o, tg)? };
        let (lg, lb) = (self.p(g, gi.ln_g), self.p(g, gi.ln_b));
        g.layer_norm(res, lg, lb, self.cfg.ln_eps)
    }

    /// Token embeddings [BOS, query, ICD..., (EOS)] as a tape node.
    pub fn token_embeddings(
        &self,
        g: &mut Graph,
        lib_fused: NodeId,
        q: &QuerySample,
        icds: &[usize],
        with_eos: bool,
    ) -> Result<NodeId> {
        let e_hat = self.encode_query(g, q)?;
        let mut parts = vec![self.p(g, self.ids.bos), e_hat];
        if !icds.is_empty() {
            parts.push(g.gather_rows(lib_fused, icds)?);
        }
        if with_eos {
            parts.push(self.p(g, self.ids.eos));
        }
        g.concat_rows(&parts)
    }

    /// Run the decoder over [BOS, query, ICDs (library positions), (EOS)].
    pub fn forward(
        &self,
        g: &mut Graph,
        lib_fused: NodeId,
        q: &QuerySample,
        inst_emb: &[f64],
        icds: &[usize],
        with_eos: bool,
        opts: ForwardOptions,
    ) -> Result<ForwardOutput> {
        let tokens = self.token_embeddings(g, lib_fused, q, icds, with_eos)?;
        self.forward_tokens(g, tokens, q, inst_emb, icds.len(), opts)
    }

    /// Decoder over precomputed token embeddings laid out as
    /// [BOS, query, `n_icd` ICDs, optional EOS].
    pub fn forward_tokens(
        &self,
        g: &mut Graph,
        tokens: NodeId,
        q: &QuerySample,
        inst_emb: &[f64],
        n_icd: usize,
        opts: ForwardOptions,
    ) -> Result<ForwardOutput> {
        let len = g.value(tokens).rows();
        if len < 2 + n_icd {
            return Err(Error::Dimension(format!("{len} tokens cannot hold {n_icd} ICDs")));
        }
        let layout = MaskLayout {
            len,
            query_pos: 1,
            icd_positions: (2..2 + n_icd).collect(),
            scale: 1.0 / (self.cfg.d as f64).sqrt(),
            literal_query_branch: self.cfg.literal_query_branch,
        };
        let causal = g.constant(causal_mask(len));
        let any_ta = !self.cfg.ta_layers.is_empty();
        let cos = if any_ta { Some(g.cosine(tokens, tokens)?) } else { None };
        let mut tg = if any_ta { Some(self.guider_init(g, q, inst_emb)?) } else { None };
        let (mut masks, mut relevance, mut guider) = (Vec::new(), Vec::new(), Vec::new());
        let mut h = tokens;
        let mut ta_seen = 0;
        let n_ta = self.cfg.ta_layers.len();
        for l in &self.ids.layers {
            let mask = match &l.rel {
                Some(rel) => {
                    let e_tg = tg.unwrap();
                    let t = if opts.force_relevance_one {
                        g.constant(Tensor::filled(len, 1, 1.0))
                    } else {
                        self.relevance(g, rel, e_tg, tokens)?
                    };
                    let nlt = g.neg_log_capped(t, self.cfg.neg_log_cap);
                    let alpha = self.p(g, self.ids.alpha);
                    let m = g.task_mask(cos.unwrap(), nlt, alpha, layout.clone())?;
                    masks.push(m);
                    relevance.push(t);
                    guider.push(e_tg);
                    m
                }
                None => causal,
            };
            h = self.block(g, l, h, mask)?;
            if l.rel.is_some() {
                ta_seen += 1;
                if ta_seen < n_ta && !self.cfg.ablation.no_tg_updates {
                    let gi = &self.ids.guiders[ta_seen - 1];
                    tg = Some(self.update_guider(g, gi, tg.unwrap(), h, causal)?);
                }
            }
        }
        Ok(ForwardOutput { tokens, hidden: h, masks, relevance, guider, layout })
    }

    /// Next-token scores for `count` hidden rows starting at `first`:
    /// one column per library demo plus a final EOS column.
    pub fn logits(&self, g: &mut Graph, hidden: NodeId, lib_fused: NodeId, first: usize, count: usize) -> Result<NodeId> {
        let hs = g.slice_rows(hidden, first, count)?;
        let (lg, lb) = (self.p(g, self.ids.out_ln_g), self.p(g, self.ids.out_ln_b));
        let x = g.layer_norm(hs, lg, lb, self.cfg.ln_eps)?;
        if let Some(free) = self.ids.out_free {
            let w = self.p(g, free);
            return g.matmul(x, w);
        }
        let w = self.p(g, self.ids.out_w);
        let proj = g.matmul(x, w)?;
        let demos = g.matmul_t(proj, lib_fused)?;
        let eos = self.p(g, self.ids.eos);
        let eos_s = g.matmul_t(proj, eos)?;
        let all = g.concat_cols(&[demos, eos_s])?;
        Ok(g.scale(all, 1.0 / (self.cfg.d as f64).sqrt()))
    }

    /// Scores for one hidden vector against encoded library embeddings,
    /// with `excluded` positions set to -inf.
    pub fn next_token_logits(&self, h: &[f64], lib_fused: &Tensor, excluded: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let hn = g.constant(row_input(h, "hidden state", self.cfg.d)?);
        let lf = g.constant(lib_fused.clone());
        let l = self.logits(&mut g, hn, lf, 0, 1)?;
        let mut out = g.value(l).data().to_vec();
        for &j in excluded {
            out[j] = f64::NEG_INFINITY;
        }
        Ok(out)
    }

    /// Log-probabilities of the next token after `prefix`, over the library
    /// plus EOS (last entry). Prefix ids are masked; EOS too if `allow_eos` is off.
    pub fn next_log_probs(
        &self,
        lib_fused: &Tensor,
        q: &QuerySample,
        inst_emb: &[f64],
        prefix: &[usize],
        allow_eos: bool,
    ) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let lf = g.constant(lib_fused.clone());
        let fwd = self.forward(&mut g, lf, q, inst_emb, prefix, false, ForwardOptions::default())?;
        let last = 1 + prefix.len();
        let l = self.logits(&mut g, fwd.hidden, lf, last, 1)?;
        let mut excluded = prefix.to_vec();
        let n = lib_fused.rows();
        if !allow_eos {
            excluded.push(n);
        }
        log_softmax_masked(g.value(l).data(), &excluded)
    }

    /// Token sequence for a stored ICL sequence.
    pub fn build_token_sequence(&self, seq: &IclSequence, lib: &DemoLibrary, with_eos: bool) -> Result<TokenSequence> {
        seq.validate(lib)?;
        let icds: Vec<usize> = seq.icd_ids.iter().map(|id| lib.position(id).unwrap()).collect();
        let mut g = Graph::new();
        let lf = self.encode_library(&mut g, lib)?;
        let t = self.token_embeddings(&mut g, lf, &seq.query, &icds, with_eos)?;
        let mut roles = vec![Role::Bos, Role::TaskQuery];
        roles.extend(std::iter::repeat_n(Role::Icd, icds.len()));
        if with_eos {
            roles.push(Role::Eos);
        }
        Ok(TokenSequence {
            embeddings: g.value(t).clone(),
            roles,
            icd_positions: (2..2 + icds.len()).collect(),
            query_position: 1,
        })
    }

    /// Value of the initial guider state.
    pub fn init_task_guider(&self, q: &QuerySample, inst_emb: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let n = self.guider_init(&mut g, q, inst_emb)?;
        Ok(g.value(n).data().to_vec())
    }

    /// The instruction embedding the model uses for a library: the header's
    /// `inst_emb`, or zeros.
    pub fn inst_emb_for(&self, lib: &DemoLibrary) -> Vec<f64> {
        lib.inst_emb().unwrap_or_else(|| vec![0.0; self.cfg.d_txt])
    }
}

pub fn config_hash<T: Serialize>(cfg: &T) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    hex::encode(Sha256::digest(json.as_bytes()))
}
