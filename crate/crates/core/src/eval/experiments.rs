//! Seeded experiment drivers shared by the CLI and the acceptance suite.

use serde::{Deserialize, Serialize};

use super::metrics::{disruption_gap, evaluate_accuracy, evaluate_prompts, order_sensitivity, GapMetric, Prompt};
use super::perturb::{perturb_demos, PerturbKind, PerturbationOp};
use super::scorer::SyntheticScorer;
use super::world::{generate_world, WorldSpec};
use crate::data::{DemoLibrary, IclSequence, QuerySample, SequenceDataset};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TacoModel};
use crate::numerics::Rng;
use crate::search::{
    baseline_demo, baseline_i2i, baseline_iq2iq, baseline_iqpr, baseline_rs, beam_infer, build_training_set,
    oracle_sequences, score_positions, select_query_set, BeamConfig, DemoConfig, OracleConfig, Scorer,
};
use crate::training::{train, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Oracle,
    Rs,
    I2i,
    Iq2iq,
    Iqpr,
    Demo,
}

impl Method {
    pub const ALL: [Method; 6] = [Method::Oracle, Method::Rs, Method::I2i, Method::Iq2iq, Method::Iqpr, Method::Demo];

    pub fn name(self) -> &'static str {
        match self {
            Method::Oracle => "oracle",
            Method::Rs => "rs",
            Method::I2i => "i2i",
            Method::Iq2iq => "iq2iq",
            Method::Iqpr => "iqpr",
            Method::Demo => "demo",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

/// Sequences from a non-learned producer, one per query.
pub fn method_sequences(
    method: Method,
    lib: &DemoLibrary,
    queries: &[QuerySample],
    scorer: &dyn Scorer,
    n: usize,
    rng: &mut Rng,
) -> Result<Vec<IclSequence>> {
    match method {
        Method::Oracle => oracle_sequences(lib, queries, scorer, n),
        Method::Rs => queries.iter().map(|q| baseline_rs(q, lib, n, rng)).collect(),
        Method::I2i => queries.iter().map(|q| baseline_i2i(q, lib, n)).collect(),
        Method::Iq2iq => queries.iter().map(|q| baseline_iq2iq(q, lib, n)).collect(),
        Method::Iqpr => queries.iter().map(|q| baseline_iqpr(q, lib, n, scorer, rng)).collect(),
        Method::Demo => queries.iter().map(|q| baseline_demo(q, lib, n, scorer, &DemoConfig::default(), rng)).collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub method: String,
    pub accuracy: f64,
    pub delta: f64,
    pub sigma: f64,
    pub mean_loglik: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    pub k_perms: usize,
    pub repeats: usize,
    pub gap_metric: GapMetric,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self { k_perms: 10, repeats: 5, gap_metric: GapMetric::Loglik }
    }
}

/// Accuracy, Delta, sigma and mean ground-truth log-likelihood of a sequence set.
pub fn score_sequences(
    name: &str,
    seqs: &[IclSequence],
    lib: &DemoLibrary,
    scorer: &dyn Scorer,
    mc: &MetricConfig,
    rng: &mut Rng,
) -> Result<MethodMetrics> {
    let accuracy = evaluate_accuracy(seqs, lib, scorer)?;
    let delta = disruption_gap(seqs, lib, scorer, mc.gap_metric, mc.repeats)?.delta;
    let sigma = order_sensitivity(seqs, lib, scorer, mc.k_perms, rng)?.sigma;
    let mut ll = 0.0;
    for s in seqs {
        let pos: Vec<usize> = s.icd_ids.iter().map(|id| lib.position(id).unwrap()).collect();
        ll += score_positions(scorer, lib, &pos, &s.query)?;
    }
    Ok(MethodMetrics { method: name.into(), accuracy, delta, sigma, mean_loglik: ll / seqs.len() as f64 })
}

/// Retrieval comparison on a freshly generated world.
pub fn retrieval_experiment(
    spec: &WorldSpec,
    scorer: &SyntheticScorer,
    methods: &[Method],
    n: usize,
    mc: &MetricConfig,
    seed: u64,
) -> Result<Vec<MethodMetrics>> {
    let (_, lib, queries) = generate_world(spec, &mut Rng::derive(seed, "world"))?;
    methods
        .iter()
        .map(|&m| {
            let seqs = method_sequences(m, &lib, &queries, scorer, n, &mut Rng::derive(seed, m.name()))?;
            score_sequences(m.name(), &seqs, &lib, scorer, mc, &mut Rng::derive(seed, &format!("sigma/{}", m.name())))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationAccuracy {
    pub standard: f64,
    pub em: f64,
    pub hm: f64,
    pub wl: f64,
    pub wl_em: f64,
}

/// Accuracy of random n-shot prompts under Standard, EM, HM, WL and WL+EM.
pub fn perturbation_experiment(
    spec: &WorldSpec,
    scorer: &SyntheticScorer,
    n: usize,
    em_factor: f64,
    seed: u64,
) -> Result<PerturbationAccuracy> {
    let (world, lib, queries) = generate_world(spec, &mut Rng::derive(seed, "world"))?;
    let mut rng = Rng::derive(seed, "rs");
    let base: Vec<Prompt> = queries
        .iter()
        .map(|q| Prompt::from_sequence(&baseline_rs(q, &lib, n, &mut rng)?, &lib))
        .collect::<Result<_>>()?;
    let em = PerturbationOp { em_factor, ..PerturbationOp::new(PerturbKind::Em) };
    let hm = PerturbationOp::new(PerturbKind::Hm);
    let wl = PerturbationOp::new(PerturbKind::Wl);
    let mut prng = Rng::derive(seed, "perturb");
    let mut apply = |op: &PerturbationOp, ps: &[Prompt]| -> Result<Vec<Prompt>> {
        ps.iter()
            .map(|p| Ok(Prompt { icds: perturb_demos(op, &world, &p.icds, &mut prng)?, ..p.clone() }))
            .collect()
    };
    let em_p = apply(&em, &base)?;
    let hm_p = apply(&hm, &base)?;
    let wl_p = apply(&wl, &base)?;
    let wl_em_p = apply(&em, &wl_p)?;
    Ok(PerturbationAccuracy {
        standard: evaluate_prompts(&base, scorer)?,
        em: evaluate_prompts(&em_p, scorer)?,
        hm: evaluate_prompts(&hm_p, scorer)?,
        wl: evaluate_prompts(&wl_p, scorer)?,
        wl_em: evaluate_prompts(&wl_em_p, scorer)?,
    })
}

/// Settings for the learn-then-infer pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub world: WorldSpec,
    pub scorer: SyntheticScorer,
    /// k-means clusters for query selection.
    pub query_clusters: usize,
    /// Queries per cluster.
    pub per_cluster: usize,
    pub oracle: OracleConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub beam: BeamConfig,
    /// Held-out evaluation queries used (drawn from the world's query set).
    pub eval_queries: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            world: WorldSpec { n_demos: 340, n_queries: 100, ..WorldSpec::generalized() },
            scorer: SyntheticScorer::default(),
            query_clusters: 10,
            per_cluster: 4,
            oracle: OracleConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            beam: BeamConfig::default(),
            eval_queries: 100,
        }
    }
}

/// Library, Oracle training set and held-out queries for one seed.
pub struct PipelineData {
    pub library: DemoLibrary,
    pub dataset: SequenceDataset,
    pub eval_queries: Vec<QuerySample>,
}

pub fn pipeline_data(cfg: &PipelineConfig, seed: u64) -> Result<PipelineData> {
    let (_, full, queries) = generate_world(&cfg.world, &mut Rng::derive(seed, "world"))?;
    let split = select_query_set(&full, cfg.query_clusters, cfg.per_cluster, &mut Rng::derive(seed, "kmeans"))?;
    let oracle = OracleConfig { seed: crate::numerics::derive_seed(seed, "oracle"), ..cfg.oracle.clone() };
    let dataset = build_training_set(&split.library, &split.queries, &cfg.scorer, &oracle)?;
    let eval_queries = queries.into_iter().take(cfg.eval_queries).collect();
    Ok(PipelineData { library: split.library, dataset, eval_queries })
}

/// Train a model with `model_cfg` on the pipeline data.
pub fn train_model(data: &PipelineData, model_cfg: &ModelConfig, train_cfg: &TrainConfig, seed: u64) -> Result<TacoModel> {
    let model = TacoModel::new(model_cfg.clone(), &mut Rng::derive(seed, "init"))?;
    let tc = TrainConfig { seed: crate::numerics::derive_seed(seed, "train"), ..train_cfg.clone() };
    let out = train(&data.dataset, &data.library, model, &tc, None)?;
    out.best.model()
}

/// Beam-inferred sequences for the held-out queries.
pub fn model_sequences(model: &TacoModel, lib: &DemoLibrary, queries: &[QuerySample], beam: &BeamConfig) -> Result<Vec<IclSequence>> {
    let lf = model.library_embeddings(lib)?;
    queries.iter().map(|q| Ok(beam_infer(model, lib, &lf, q, beam)?.sequence)).collect()
}

/// Component ablations (a)-(h).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    NoTaskToken,
    NoTgUpdates,
    NoSparsity,
    NoL2,
    RandomTgInit,
    DropImage,
    DropQuery,
    DropInst,
}

impl AblationKind {
    pub const ALL: [AblationKind; 8] = [
        AblationKind::NoTaskToken,
        AblationKind::NoTgUpdates,
        AblationKind::NoSparsity,
        AblationKind::NoL2,
        AblationKind::RandomTgInit,
        AblationKind::DropImage,
        AblationKind::DropQuery,
        AblationKind::DropInst,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AblationKind::NoTaskToken => "(a) w/o [TASK] token",
            AblationKind::NoTgUpdates => "(b) w/o TG updates",
            AblationKind::NoSparsity => "(c) w/o sparsity loss",
            AblationKind::NoL2 => "(d) w/o ||W_TG||^2",
            AblationKind::RandomTgInit => "(e) random TG init",
            AblationKind::DropImage => "(f) w/o image in TG init",
            AblationKind::DropQuery => "(g) w/o question in TG init",
            AblationKind::DropInst => "(h) w/o instruction in TG init",
        }
    }

    /// Model and training configs with this component removed.
    pub fn apply(self, model: &ModelConfig, train: &TrainConfig) -> (ModelConfig, TrainConfig) {
        let (mut m, mut t) = (model.clone(), train.clone());
        match self {
            AblationKind::NoTaskToken => m.ablation.no_task_token = true,
            AblationKind::NoTgUpdates => m.ablation.no_tg_updates = true,
            AblationKind::NoSparsity => t.lambda1 = 0.0,
            AblationKind::NoL2 => t.lambda2 = 0.0,
            AblationKind::RandomTgInit => m.ablation.random_tg_init = true,
            AblationKind::DropImage => m.ablation.drop_image = true,
            AblationKind::DropQuery => m.ablation.drop_query = true,
            AblationKind::DropInst => m.ablation.drop_inst = true,
        }
        (m, t)
    }
}

/// One trained variant: the full model (`ablation == None`) or an ablation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub ablation: Option<AblationKind>,
    pub seed: u64,
    pub metrics: MethodMetrics,
}

/// Train and evaluate the full model and the given ablations on one seed,
/// all on the same library, training set and held-out queries.
pub fn ablation_seed(
    cfg: &PipelineConfig,
    ablations: &[AblationKind],
    mc: &MetricConfig,
    seed: u64,
) -> Result<Vec<VariantResult>> {
    let data = pipeline_data(cfg, seed)?;
    let mut variants: Vec<Option<AblationKind>> = vec![None];
    variants.extend(ablations.iter().copied().map(Some));
    variants
        .into_iter()
        .map(|ab| {
            let (m, t) = match ab {
                None => (cfg.model.clone(), cfg.train.clone()),
                Some(a) => a.apply(&cfg.model, &cfg.train),
            };
            let model = train_model(&data, &m, &t, seed)?;
            let seqs = model_sequences(&model, &data.library, &data.eval_queries, &cfg.beam)?;
            let name = ab.map_or("taco", AblationKind::label);
            let metrics = score_sequences(name, &seqs, &data.library, &cfg.scorer, mc, &mut Rng::derive(seed, "sigma/taco"))?;
            Ok(VariantResult { ablation: ab, seed, metrics })
        })
        .collect()
}
