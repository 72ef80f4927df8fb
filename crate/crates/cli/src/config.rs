use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use taco_core::eval::{AblationKind, ExternalConfig, Method, MetricConfig, PipelineConfig, SyntheticScorer, WorldSpec};
use taco_core::model::{config_hash, ModelConfig};
use taco_core::search::{BeamConfig, OracleConfig};
use taco_core::{Error, Result, TrainConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    #[default]
    Synthetic,
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbSettings {
    pub enabled: bool,
    pub shots: usize,
    pub em_factor: f64,
}

impl Default for PerturbSettings {
    fn default() -> Self {
        Self { enabled: false, shots: 4, em_factor: 0.5 }
    }
}

/// Lambda pairs for `train --sweep`: every combination of the two lists.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSettings {
    pub lambda1: Vec<f64>,
    pub lambda2: Vec<f64>,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self { lambda1: vec![0.0, 0.01, 0.1], lambda2: vec![0.0, 1e-4, 1e-2] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSettings {
    /// Seeds `seed .. seed + seeds` are run.
    pub seeds: u64,
    pub kinds: Vec<AblationKind>,
}

impl Default for AblateSettings {
    fn default() -> Self {
        Self { seeds: 10, kinds: AblationKind::ALL.to_vec() }
    }
}

/// Everything a command needs. Loaded from TOML; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub scorer: ScorerKind,
    pub synthetic: SyntheticScorer,
    /// Used when `scorer = "external"`; `TACO_SCORER_ENDPOINT` overrides the endpoint.
    pub external: ExternalConfig,
    pub world: WorldSpec,
    pub query_clusters: usize,
    pub per_cluster: usize,
    pub eval_queries: usize,
    pub oracle: OracleConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub beam: BeamConfig,
    pub metrics: MetricConfig,
    /// Methods for `evaluate`: any of oracle, rs, i2i, iq2iq, iqpr, demo, taco.
    pub methods: Vec<String>,
    pub perturbation: PerturbSettings,
    pub sweep: SweepSettings,
    pub ablate: AblateSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        let p = PipelineConfig::default();
        Self {
            seed: 0,
            out_dir: PathBuf::from("run"),
            scorer: ScorerKind::Synthetic,
            synthetic: p.scorer,
            external: ExternalConfig::default(),
            world: p.world,
            query_clusters: p.query_clusters,
            per_cluster: p.per_cluster,
            eval_queries: p.eval_queries,
            oracle: p.oracle,
            model: p.model,
            train: p.train,
            beam: p.beam,
            metrics: MetricConfig::default(),
            methods: ["oracle", "rs", "i2i", "iq2iq", "taco"].map(String::from).to_vec(),
            perturbation: PerturbSettings::default(),
            sweep: SweepSettings::default(),
            ablate: AblateSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Apply the endpoint variable, then check every section.
    pub fn resolve(mut self) -> Result<Self> {
        if let Ok(ep) = std::env::var(taco_core::eval::external::ENDPOINT_ENV) {
            self.external.endpoint = ep;
        }
        self.world.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.oracle.validate()?;
        if !self.model.project_inputs && (self.model.d_img != self.world.dim || self.model.d_txt != self.world.dim) {
            return Err(Error::Config(format!(
                "model input widths ({}, {}) differ from world dim {}; set model.project_inputs",
                self.model.d_img, self.model.d_txt, self.world.dim
            )));
        }
        if self.beam.beam_width == 0 || self.beam.shots == 0 {
            return Err(Error::Config("beam width and shots must be positive".into()));
        }
        if self.query_clusters == 0 || self.per_cluster == 0 {
            return Err(Error::Config("query_clusters and per_cluster must be positive".into()));
        }
        if self.query_clusters * self.per_cluster >= self.world.n_demos {
            return Err(Error::Spec(format!(
                "query_clusters * per_cluster = {} leaves no library out of {} demos",
                self.query_clusters * self.per_cluster,
                self.world.n_demos
            )));
        }
        for m in &self.methods {
            if m != "taco" {
                Method::parse(m)?;
            }
        }
        if self.sweep.lambda1.iter().chain(&self.sweep.lambda2).any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("sweep lambdas must be finite and non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.perturbation.em_factor) {
            return Err(Error::Config("perturbation.em_factor must be in [0, 1]".into()));
        }
        if self.ablate.seeds == 0 {
            return Err(Error::Config("ablate.seeds must be positive".into()));
        }
        Ok(self)
    }

    /// Hash of every setting that can change a number; the output directory is left out.
    pub fn hash(&self) -> String {
        config_hash(&Self { out_dir: PathBuf::new(), ..self.clone() })
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            world: self.world.clone(),
            scorer: self.synthetic.clone(),
            query_clusters: self.query_clusters,
            per_cluster: self.per_cluster,
            oracle: self.oracle.clone(),
            model: self.model.clone(),
            train: self.train.clone(),
            beam: self.beam.clone(),
            eval_queries: self.eval_queries,
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}
