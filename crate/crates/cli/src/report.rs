use std::path::Path;

use anyhow::Result;
use serde::{Deserialize, Serialize};
use taco_core::eval::MethodMetrics;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
}

impl Provenance {
    pub fn new(command: &str, config_hash: String, seed: u64) -> Self {
        Self { command: command.into(), config_hash, seed, version: env!("CARGO_PKG_VERSION").into() }
    }
}

/// One method's numbers. Perturbation rows carry accuracy only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub method: String,
    pub accuracy: f64,
    pub delta: Option<f64>,
    pub sigma: Option<f64>,
    pub mean_loglik: Option<f64>,
    /// Seeds averaged into this row.
    pub seeds: usize,
    pub reference: bool,
}

impl Row {
    pub fn from_metrics(m: &MethodMetrics) -> Self {
        Self {
            method: m.method.clone(),
            accuracy: m.accuracy,
            delta: Some(m.delta),
            sigma: Some(m.sigma),
            mean_loglik: Some(m.mean_loglik),
            seeds: 1,
            reference: false,
        }
    }

    pub fn accuracy_only(method: &str, accuracy: f64) -> Self {
        Self { method: method.into(), accuracy, delta: None, sigma: None, mean_loglik: None, seeds: 1, reference: false }
    }

    /// Field-wise mean of per-seed metrics.
    pub fn mean(method: &str, ms: &[&MethodMetrics]) -> Self {
        let n = ms.len() as f64;
        let avg = |f: fn(&MethodMetrics) -> f64| ms.iter().map(|m| f(m)).sum::<f64>() / n;
        Self {
            method: method.into(),
            accuracy: avg(|m| m.accuracy),
            delta: Some(avg(|m| m.delta)),
            sigma: Some(avg(|m| m.sigma)),
            mean_loglik: Some(avg(|m| m.mean_loglik)),
            seeds: ms.len(),
            reference: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub provenance: Provenance,
    pub rows: Vec<Row>,
}

impl Report {
    /// Writes `<stem>.json` and `<stem>.csv` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        std::fs::write(dir.join(format!("{stem}.json")), json)?;
        let mut w = csv::Writer::from_path(dir.join(format!("{stem}.csv")))?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn print(&self) {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        println!("config {} seed {}", self.provenance.config_hash, self.provenance.seed);
        println!("{:<34} {:>8} {:>8} {:>8} {:>10}", "method", "acc", "delta", "sigma", "loglik");
        for r in &self.rows {
            let name = if r.reference { format!("{} (reference)", r.method) } else { r.method.clone() };
            println!(
                "{:<34} {:>8.4} {:>8} {:>8} {:>10}",
                name,
                r.accuracy,
                opt(r.delta),
                opt(r.sigma),
                opt(r.mean_loglik)
            );
        }
    }
}
