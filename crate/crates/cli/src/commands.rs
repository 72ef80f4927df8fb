use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::info;
use serde::Serialize;
use taco_core::data::{load_dataset, load_library, load_queries, save_dataset, save_library, save_queries};
use taco_core::eval::{
    ablation_seed, generate_world, method_sequences, model_sequences, perturbation_experiment, score_sequences,
    ExternalScorer, Method, VariantResult,
};
use taco_core::model::{load_checkpoint, save_checkpoint};
use taco_core::numerics::derive_seed;
use taco_core::search::{build_training_set, select_query_set, BeamConfig, CachedScorer, OracleConfig, Scorer};
use taco_core::training::{train_until, EpochLog};
use taco_core::{Error, Rng, SequenceDataset, TacoModel, TrainConfig};

use crate::config::{RunConfig, ScorerKind};
use crate::report::{Provenance, Report, Row};

pub const LIBRARY: &str = "library.jsonl";
pub const TRAIN_QUERIES: &str = "train_queries.jsonl";
pub const EVAL_QUERIES: &str = "eval_queries.jsonl";
pub const DATASET: &str = "dataset.jsonl";
pub const SCORER_CACHE: &str = "scorer_cache.json";
pub const CHECKPOINT: &str = "checkpoint.json";
pub const LAST: &str = "last.json";
pub const METRICS: &str = "metrics.csv";
pub const SEQUENCES: &str = "sequences.jsonl";

fn make_scorer(cfg: &RunConfig) -> Box<dyn Scorer> {
    match cfg.scorer {
        ScorerKind::Synthetic => Box::new(cfg.synthetic.clone()),
        ScorerKind::External => Box::new(ExternalScorer::new(cfg.external.clone())),
    }
}

fn require_synthetic(cfg: &RunConfig, what: &str) -> Result<()> {
    if cfg.scorer != ScorerKind::Synthetic {
        return Err(Error::Unsupported(format!("{what} needs the synthetic scorer")).into());
    }
    Ok(())
}

fn read<T>(path: PathBuf, f: impl FnOnce(PathBuf) -> taco_core::Result<T>) -> Result<T> {
    let shown = path.display().to_string();
    f(path).with_context(|| format!("reading {shown}"))
}

pub fn gen_world(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    let (_, full, queries) = generate_world(&cfg.world, &mut Rng::derive(cfg.seed, "world"))?;
    let split = select_query_set(&full, cfg.query_clusters, cfg.per_cluster, &mut Rng::derive(cfg.seed, "kmeans"))?;
    let eval: Vec<_> = queries.into_iter().take(cfg.eval_queries).collect();
    save_library(cfg.path(LIBRARY), &split.library)?;
    save_queries(cfg.path(TRAIN_QUERIES), &split.queries)?;
    save_queries(cfg.path(EVAL_QUERIES), &eval)?;
    println!(
        "library {} demos, {} training queries, {} evaluation queries -> {}",
        split.library.len(),
        split.queries.len(),
        eval.len(),
        cfg.out_dir.display()
    );
    Ok(())
}

pub fn build_data(cfg: &RunConfig) -> Result<()> {
    let lib = read(cfg.path(LIBRARY), load_library)?;
    let queries = read(cfg.path(TRAIN_QUERIES), load_queries)?;
    let scorer = make_scorer(cfg);
    let cache_path = cfg.path(SCORER_CACHE);
    let cached = CachedScorer::with_file(scorer.as_ref(), &cache_path)?;
    let oracle = OracleConfig { seed: derive_seed(cfg.seed, "oracle"), ..cfg.oracle.clone() };
    info!("building {} sequences for {} queries", oracle.keep_count() * queries.len(), queries.len());
    let ds = build_training_set(&lib, &queries, &cached, &oracle)?;
    save_dataset(cfg.path(DATASET), &ds)?;
    cached.save(&cache_path)?;
    println!(
        "{} sequences of {} shots; scorer calls {}, cache hits {}",
        ds.len(),
        ds.shot,
        cached.inner_calls(),
        cached.hits()
    );
    Ok(())
}

#[derive(Serialize)]
struct MetricsRow {
    epoch: usize,
    ce: f64,
    sparse: f64,
    l2: f64,
    total: f64,
    lr: f64,
}

/// Append epoch rows; the header is written only to a new or empty file.
fn append_metrics(path: &Path, log: &[EpochLog], fresh: bool) -> Result<()> {
    if fresh && path.exists() {
        std::fs::remove_file(path)?;
    }
    let empty = std::fs::metadata(path).map_or(true, |m| m.len() == 0);
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(empty).from_writer(file);
    for e in log {
        w.serialize(MetricsRow { epoch: e.epoch, ce: e.ce, sparse: e.sparse, l2: e.l2, total: e.total, lr: e.lr })?;
    }
    w.flush()?;
    Ok(())
}

pub struct TrainArgs {
    pub resume: Option<PathBuf>,
    pub stop_after: Option<usize>,
    pub sweep: bool,
}

fn train_once(cfg: &RunConfig, tc: &TrainConfig, args: &TrainArgs, stem: &str) -> Result<()> {
    let lib = read(cfg.path(LIBRARY), load_library)?;
    let ds = read(cfg.path(DATASET), load_dataset)?;
    let model = TacoModel::new(cfg.model.clone(), &mut Rng::derive(cfg.seed, "init"))?;
    let resume = match &args.resume {
        Some(p) => Some(load_checkpoint(p, Some(&model.config_hash())).with_context(|| format!("reading {}", p.display()))?),
        None => None,
    };
    let stop = args.stop_after.unwrap_or(tc.epochs);
    let out = train_until(&ds, &lib, model, tc, resume.as_ref(), stop)?;
    let name = |base: &str| if stem.is_empty() { base.to_string() } else { base.replace('.', &format!("_{stem}.")) };
    save_checkpoint(cfg.path(&name(CHECKPOINT)), &out.best)?;
    save_checkpoint(cfg.path(&name(LAST)), &out.last)?;
    append_metrics(&cfg.path(&name(METRICS)), &out.log, resume.is_none())?;
    if let (Some(first), Some(last)) = (out.log.first(), out.log.last()) {
        println!(
            "{} epochs {}..{}: total loss {:.4} -> {:.4}",
            if stem.is_empty() { "trained" } else { stem },
            first.epoch,
            last.epoch,
            first.total,
            last.total
        );
    }
    Ok(())
}

pub fn train(cfg: &RunConfig, args: &TrainArgs) -> Result<()> {
    let tc = TrainConfig { seed: derive_seed(cfg.seed, "train"), ..cfg.train.clone() };
    if !args.sweep {
        return train_once(cfg, &tc, args, "");
    }
    for &l1 in &cfg.sweep.lambda1 {
        for &l2 in &cfg.sweep.lambda2 {
            let t = TrainConfig { lambda1: l1, lambda2: l2, ..tc.clone() };
            train_once(cfg, &t, args, &format!("l1_{l1}_l2_{l2}"))?;
        }
    }
    Ok(())
}

pub struct GenerateArgs {
    pub checkpoint: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    pub shots: Option<usize>,
    pub output: Option<PathBuf>,
}

pub fn generate(cfg: &RunConfig, args: &GenerateArgs) -> Result<()> {
    let lib = read(cfg.path(LIBRARY), load_library)?;
    let queries = read(args.queries.clone().unwrap_or_else(|| cfg.path(EVAL_QUERIES)), load_queries)?;
    let ck_path = args.checkpoint.clone().unwrap_or_else(|| cfg.path(CHECKPOINT));
    let model = read(ck_path, |p| load_checkpoint(p, None))?.model()?;
    let beam = BeamConfig { shots: args.shots.unwrap_or(cfg.beam.shots), ..cfg.beam.clone() };
    if beam.shots == 0 {
        return Err(Error::Config("shots must be positive".into()).into());
    }
    let seqs = model_sequences(&model, &lib, &queries, &beam)?;
    let out = args.output.clone().unwrap_or_else(|| cfg.path(SEQUENCES));
    save_dataset(&out, &SequenceDataset::new(beam.shots, seqs)?)?;
    println!("{} sequences of {} shots -> {}", queries.len(), beam.shots, out.display());
    Ok(())
}

pub fn evaluate(cfg: &RunConfig, checkpoint: Option<PathBuf>) -> Result<Report> {
    let lib = read(cfg.path(LIBRARY), load_library)?;
    let queries = read(cfg.path(EVAL_QUERIES), load_queries)?;
    let scorer = make_scorer(cfg);
    let mut rows = Vec::new();
    for name in &cfg.methods {
        info!("evaluating {name}");
        let seqs = if name == "taco" {
            let ck_path = checkpoint.clone().unwrap_or_else(|| cfg.path(CHECKPOINT));
            let model = read(ck_path, |p| load_checkpoint(p, None))?.model()?;
            model_sequences(&model, &lib, &queries, &cfg.beam)?
        } else {
            let m = Method::parse(name)?;
            method_sequences(m, &lib, &queries, scorer.as_ref(), cfg.beam.shots, &mut Rng::derive(cfg.seed, m.name()))?
        };
        let mut rng = Rng::derive(cfg.seed, &format!("sigma/{name}"));
        let m = score_sequences(name, &seqs, &lib, scorer.as_ref(), &cfg.metrics, &mut rng)?;
        rows.push(Row::from_metrics(&m));
    }
    if cfg.perturbation.enabled {
        require_synthetic(cfg, "the perturbation grid")?;
        let p = &cfg.perturbation;
        let acc = perturbation_experiment(&cfg.world, &cfg.synthetic, p.shots, p.em_factor, cfg.seed)?;
        for (name, a) in [("standard", acc.standard), ("em", acc.em), ("hm", acc.hm), ("wl", acc.wl), ("wl+em", acc.wl_em)] {
            rows.push(Row::accuracy_only(name, a));
        }
    }
    let report = Report { provenance: Provenance::new("evaluate", cfg.hash(), cfg.seed), rows };
    std::fs::create_dir_all(&cfg.out_dir)?;
    report.write(&cfg.out_dir, "report")?;
    Ok(report)
}

#[derive(Serialize)]
struct SeedRow<'a> {
    seed: u64,
    method: &'a str,
    accuracy: f64,
    delta: f64,
    sigma: f64,
    mean_loglik: f64,
}

pub fn ablate(cfg: &RunConfig) -> Result<Report> {
    require_synthetic(cfg, "ablate")?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let pipeline = cfg.pipeline();
    let mut runs: Vec<VariantResult> = Vec::new();
    for s in 0..cfg.ablate.seeds {
        let seed = cfg.seed + s;
        info!("ablation seed {seed}");
        runs.extend(ablation_seed(&pipeline, &cfg.ablate.kinds, &cfg.metrics, seed)?);
    }
    let mut w = csv::Writer::from_path(cfg.path("ablation_runs.csv"))?;
    for r in &runs {
        let m = &r.metrics;
        w.serialize(SeedRow {
            seed: r.seed,
            method: &m.method,
            accuracy: m.accuracy,
            delta: m.delta,
            sigma: m.sigma,
            mean_loglik: m.mean_loglik,
        })?;
    }
    w.flush()?;
    let mut variants = vec![None];
    variants.extend(cfg.ablate.kinds.iter().copied().map(Some));
    let rows = variants
        .into_iter()
        .map(|v| {
            let ms: Vec<_> = runs.iter().filter(|r| r.ablation == v).map(|r| &r.metrics).collect();
            let mut row = Row::mean(&ms[0].method, &ms);
            row.reference = v.is_none();
            row
        })
        .collect();
    let report = Report { provenance: Provenance::new("ablate", cfg.hash(), cfg.seed), rows };
    report.write(&cfg.out_dir, "ablation")?;
    Ok(report)
}
