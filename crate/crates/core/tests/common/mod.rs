#![allow(dead_code)]

use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use taco_core::data::{Demonstration, DemoLibrary, IclSequence, Meta, QuerySample, SequenceDataset};
use taco_core::eval::{generate_world, ScorerMode, SyntheticScorer, WorldSpec};
use taco_core::model::ModelConfig;
use taco_core::search::{score_positions, Scorer};
use taco_core::Rng;

/// Random library of `n` demos with `d`-wide embeddings and labels "a".."c".
pub fn toy_library(n: usize, d: usize, seed: u64) -> DemoLibrary {
    let mut rng = Rng::new(seed);
    let demos = (0..n)
        .map(|i| Demonstration {
            id: format!("d{i}"),
            image_emb: rng.normal_vec(d, 1.0),
            text_q: format!("q{i}"),
            text_r: ["a", "b", "c"][i % 3].to_string(),
            q_emb: rng.normal_vec(d, 1.0),
            r_emb: rng.normal_vec(d, 1.0),
            qr_emb: rng.normal_vec(d, 1.0),
            meta: Meta::new(),
        })
        .collect();
    DemoLibrary::new(demos, Meta::new()).unwrap()
}

pub fn toy_query(d: usize, seed: u64) -> QuerySample {
    let mut rng = Rng::new(seed);
    QuerySample {
        id: format!("q{seed}"),
        image_emb: rng.normal_vec(d, 1.0),
        text_q: "what?".into(),
        q_emb: rng.normal_vec(d, 1.0),
        ground_truth_r: Some("a".into()),
        meta: Meta::new(),
    }
}

/// `count` sequences of `shot` distinct random ICDs.
pub fn toy_dataset(lib: &DemoLibrary, d: usize, shot: usize, count: usize, seed: u64) -> SequenceDataset {
    let mut rng = Rng::new(seed ^ 0x5eed);
    let seqs = (0..count)
        .map(|i| {
            let pick = rng.sample_distinct(lib.len(), shot);
            IclSequence {
                instruction: String::new(),
                icd_ids: pick.iter().map(|&p| lib.demos()[p].id.clone()).collect(),
                query: toy_query(d, seed * 1000 + i as u64),
            }
        })
        .collect();
    SequenceDataset::new(shot, seqs).unwrap()
}

pub fn tiny_config(d: usize) -> ModelConfig {
    ModelConfig {
        d,
        d_img: d,
        d_txt: d,
        depth: 2,
        heads: 2,
        ffn_mult: 2,
        ta_layers: vec![1, 2],
        ..ModelConfig::default()
    }
}

/// Small random synthetic instance: a library of `lib_size` demos, one
/// query, and a scorer in a random mode. Some demo labels are flipped so
/// the mismatch penalty takes part.
pub fn search_instance(seed: u64, lib_size: usize) -> (DemoLibrary, QuerySample, SyntheticScorer) {
    let mut rng = Rng::new(seed);
    let spec = WorldSpec {
        clusters: 2,
        latent_dim: 4,
        dim: 6,
        n_demos: lib_size,
        n_queries: 1,
        labels_per_cluster: 2,
        ..WorldSpec::generalized()
    };
    let (_, lib, queries) = generate_world(&spec, &mut rng).unwrap();
    let flips: Vec<bool> = (0..lib_size).map(|_| rng.uniform() < 0.3).collect();
    let mut i = 0;
    let lib = lib
        .map_demos(|d| {
            let mut d = d.clone();
            if flips[i] {
                d.text_r = format!("{}!", d.text_r);
            }
            i += 1;
            d
        })
        .unwrap();
    let mode = if rng.uniform() < 0.5 { ScorerMode::OrderInvariant } else { ScorerMode::PositionWeighted };
    (lib, queries[0].clone(), SyntheticScorer::new(mode))
}

/// Greedy by brute force: score every extension and keep the largest
/// log-likelihood, lowest id on ties.
pub fn exhaustive_greedy(lib: &DemoLibrary, q: &QuerySample, scorer: &dyn Scorer, n: usize) -> Vec<usize> {
    let mut seq: Vec<usize> = Vec::new();
    for _ in 0..n {
        let mut best: Option<(f64, &str, usize)> = None;
        for c in (0..lib.len()).filter(|c| !seq.contains(c)) {
            let mut s = seq.clone();
            s.push(c);
            let v = score_positions(scorer, lib, &s, q).unwrap();
            let id = lib.demos()[c].id.as_str();
            if best.is_none_or(|(bv, bid, _)| v > bv || (v == bv && id < bid)) {
                best = Some((v, id, c));
            }
        }
        seq.push(best.unwrap().2);
    }
    seq
}

/// Every ordered `n`-tuple of distinct positions from `0..len`.
pub fn ordered_tuples(len: usize, n: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..n {
        let mut next = Vec::new();
        for p in &out {
            for c in (0..len).filter(|c| !p.contains(c)) {
                let mut s: Vec<usize> = p.clone();
                s.push(c);
                next.push(s);
            }
        }
        out = next;
    }
    out
}

/// Top `keep` ordered sequences by log-likelihood over full enumeration,
/// as id lists. Ties go to the lexicographically smaller id sequence.
pub fn exhaustive_top(lib: &DemoLibrary, q: &QuerySample, scorer: &dyn Scorer, n: usize, keep: usize) -> Vec<Vec<String>> {
    let ids = |s: &[usize]| s.iter().map(|&p| lib.demos()[p].id.clone()).collect::<Vec<_>>();
    let mut all: Vec<(f64, Vec<String>)> =
        ordered_tuples(lib.len(), n).into_iter().map(|s| (score_positions(scorer, lib, &s, q).unwrap(), ids(&s))).collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
    all.into_iter().take(keep).map(|(_, s)| s).collect()
}

/// How the stub scorer server answers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StubMode {
    /// loglik = -(number of ICDs); label_probs favour the first label.
    Echo,
    /// Sleep before answering.
    Slow(u64),
    Malformed,
    WrongId,
    Error,
}

/// Newline-delimited JSON scorer on an ephemeral port. Returns the address
/// and a counter of requests received.
pub fn stub_server(mode: StubMode) -> (String, Arc<AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let served = Arc::new(AtomicUsize::new(0));
    let count = served.clone();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(stream) = stream else { continue };
            let count = count.clone();
            std::thread::spawn(move || {
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 {
                    return;
                }
                count.fetch_add(1, Ordering::SeqCst);
                let req: serde_json::Value = serde_json::from_str(&line).unwrap();
                let id = req["req_id"].clone();
                let reply = match mode {
                    StubMode::Malformed => "{not json".to_string(),
                    StubMode::WrongId => serde_json::json!({"version": 1, "req_id": "other", "loglik": 0.0}).to_string(),
                    StubMode::Error => serde_json::json!({"version": 1, "req_id": id, "error": "boom"}).to_string(),
                    StubMode::Echo | StubMode::Slow(_) => {
                        if let StubMode::Slow(ms) = mode {
                            std::thread::sleep(std::time::Duration::from_millis(ms));
                        }
                        let n = req["icd"].as_array().map_or(0, |a| a.len());
                        if req["kind"] == "loglik" {
                            serde_json::json!({"version": 1, "req_id": id, "loglik": -(n as f64)}).to_string()
                        } else {
                            let labels: Vec<String> = serde_json::from_value(req["labels"].clone()).unwrap_or_default();
                            let probs: serde_json::Map<String, serde_json::Value> = labels
                                .iter()
                                .enumerate()
                                .map(|(i, l)| (l.clone(), serde_json::json!(if i == 0 { 0.7 } else { 0.3 / (labels.len() - 1) as f64 })))
                                .collect();
                            serde_json::json!({"version": 1, "req_id": id, "label_probs": probs}).to_string()
                        }
                    }
                };
                let mut w = stream;
                let _ = w.write_all(format!("{reply}\n").as_bytes());
            });
        }
    });
    (addr, served)
}
