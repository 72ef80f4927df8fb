//! Client for an out-of-process scorer speaking newline-delimited JSON over TCP.
//!
//! Each call opens a connection, writes one request line and reads one reply
//! line. Requests:
//! `{"version":1,"req_id":..,"kind":"loglik"|"label_probs","instruction":..,
//!   "icd":[{"text_q":..,"text_r":..}],"query_text":..,"response_text":..,"labels":[..]}`.
//! Replies: `{"version":1,"req_id":..,"loglik":x}`, `{"version":1,"req_id":..,
//! "label_probs":{label:p}}` or `{"version":1,"req_id":..,"error":".."}`.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::scorer::meta_labels;
use crate::error::{Error, Result};
use crate::search::{Capabilities, ScoreContext, Scorer};

pub const PROTOCOL_VERSION: u32 = 1;
/// Environment variable naming the scorer endpoint (`host:port`).
pub const ENDPOINT_ENV: &str = "TACO_SCORER_ENDPOINT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExternalConfig {
    pub endpoint: String,
    pub timeout_ms: u64,
    /// Largest accepted reply line, in bytes.
    pub max_payload: usize,
    /// Extra attempts after a transport failure or timeout.
    pub retries: u32,
    /// First backoff delay; doubles on each retry.
    pub backoff_ms: u64,
    pub capabilities: Capabilities,
}

impl Default for ExternalConfig {
    fn default() -> Self {
        Self {
            endpoint: "127.0.0.1:7878".into(),
            timeout_ms: 10_000,
            max_payload: 1 << 20,
            retries: 3,
            backoff_ms: 50,
            capabilities: Capabilities { loglik: true, label_probs: true },
        }
    }
}

impl ExternalConfig {
    /// Default config with the endpoint taken from `TACO_SCORER_ENDPOINT`.
    pub fn from_env() -> Result<Self> {
        let endpoint = std::env::var(ENDPOINT_ENV).map_err(|_| Error::Config(format!("{ENDPOINT_ENV} is not set")))?;
        Ok(Self { endpoint, ..Self::default() })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct WireIcd {
    pub text_q: String,
    pub text_r: String,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct WireRequest {
    pub version: u32,
    pub req_id: String,
    pub kind: String,
    pub instruction: String,
    pub icd: Vec<WireIcd>,
    pub query_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response_text: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub labels: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct WireReply {
    pub version: Option<u32>,
    pub req_id: String,
    #[serde(default)]
    pub loglik: Option<f64>,
    #[serde(default)]
    pub label_probs: Option<BTreeMap<String, f64>>,
    #[serde(default)]
    pub error: Option<String>,
}

#[derive(Clone, Debug)]
enum Answer {
    Loglik(f64),
    Probs(Vec<(String, f64)>),
}

pub struct ExternalScorer {
    cfg: ExternalConfig,
    cache: Mutex<HashMap<String, Answer>>,
    next_id: AtomicU64,
    network_calls: AtomicU64,
    cache_hits: AtomicU64,
}

impl ExternalScorer {
    pub fn new(cfg: ExternalConfig) -> Self {
        Self {
            cfg,
            cache: Mutex::new(HashMap::new()),
            next_id: AtomicU64::new(0),
            network_calls: AtomicU64::new(0),
            cache_hits: AtomicU64::new(0),
        }
    }

    /// Requests that went over the wire (retries count once).
    pub fn network_calls(&self) -> u64 {
        self.network_calls.load(Ordering::Relaxed)
    }

    pub fn cache_hits(&self) -> u64 {
        self.cache_hits.load(Ordering::Relaxed)
    }

    fn request(&self, ctx: &ScoreContext<'_>, kind: &str, response: Option<&str>) -> WireRequest {
        WireRequest {
            version: PROTOCOL_VERSION,
            req_id: String::new(),
            kind: kind.into(),
            instruction: ctx.instruction.into(),
            icd: ctx.icds.iter().map(|d| WireIcd { text_q: d.text_q.clone(), text_r: d.text_r.clone() }).collect(),
            query_text: ctx.query.text_q.clone(),
            response_text: response.map(str::to_string),
            labels: meta_labels(&ctx.query.meta).unwrap_or_default(),
        }
    }

    fn call(&self, mut req: WireRequest) -> Result<Answer> {
        let key = hex::encode(Sha256::digest(serde_json::to_vec(&req)?));
        if let Some(a) = self.cache.lock().unwrap().get(&key).cloned() {
            self.cache_hits.fetch_add(1, Ordering::Relaxed);
            return Ok(a);
        }
        req.req_id = format!("req-{}", self.next_id.fetch_add(1, Ordering::Relaxed));
        self.network_calls.fetch_add(1, Ordering::Relaxed);
        let mut delay = Duration::from_millis(self.cfg.backoff_ms);
        let mut attempt = 0;
        let reply = loop {
            match self.exchange(&req) {
                Ok(r) => break r,
                Err(e @ (Error::Transport { .. } | Error::Timeout { .. })) if attempt < self.cfg.retries => {
                    log::warn!("scorer request {} failed ({e}); retrying in {delay:?}", req.req_id);
                    std::thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        };
        let answer = self.interpret(&req, reply)?;
        self.cache.lock().unwrap().insert(key, answer.clone());
        Ok(answer)
    }

    fn exchange(&self, req: &WireRequest) -> Result<WireReply> {
        let id = req.req_id.clone();
        let transport = |msg: String| Error::Transport { req_id: id.clone(), msg };
        let timeout = Duration::from_millis(self.cfg.timeout_ms.max(1));
        let addr = self
            .cfg
            .endpoint
            .to_socket_addrs()
            .map_err(|e| transport(format!("cannot resolve {}: {e}", self.cfg.endpoint)))?
            .next()
            .ok_or_else(|| transport(format!("{} resolves to no address", self.cfg.endpoint)))?;
        let mut stream = TcpStream::connect_timeout(&addr, timeout).map_err(|e| classify(&id, e))?;
        stream.set_read_timeout(Some(timeout)).map_err(|e| transport(e.to_string()))?;
        stream.set_write_timeout(Some(timeout)).map_err(|e| transport(e.to_string()))?;
        let mut line = serde_json::to_vec(req)?;
        if line.len() > self.cfg.max_payload {
            return Err(Error::Protocol { req_id: id.clone(), msg: format!("request of {} bytes exceeds max payload", line.len()) });
        }
        line.push(b'\n');
        stream.write_all(&line).map_err(|e| classify(&id, e))?;
        let mut reader = BufReader::new(stream.take(self.cfg.max_payload as u64 + 1));
        let mut buf = Vec::new();
        reader.read_until(b'\n', &mut buf).map_err(|e| classify(&id, e))?;
        if buf.len() > self.cfg.max_payload {
            return Err(Error::Protocol { req_id: id.clone(), msg: format!("reply exceeds max payload of {} bytes", self.cfg.max_payload) });
        }
        if buf.is_empty() {
            return Err(transport("connection closed without a reply".into()));
        }
        serde_json::from_slice(&buf).map_err(|e| Error::Protocol { req_id: id.clone(), msg: format!("malformed reply: {e}") })
    }

    fn interpret(&self, req: &WireRequest, reply: WireReply) -> Result<Answer> {
        let proto = |msg: String| Error::Protocol { req_id: req.req_id.clone(), msg };
        if reply.req_id != req.req_id {
            return Err(proto(format!("reply is for request {}", reply.req_id)));
        }
        if reply.version != Some(PROTOCOL_VERSION) {
            return Err(proto(format!("unsupported protocol version {:?}", reply.version)));
        }
        if let Some(e) = reply.error {
            return Err(proto(format!("scorer error: {e}")));
        }
        match req.kind.as_str() {
            "loglik" => match reply.loglik {
                Some(v) if v.is_finite() => Ok(Answer::Loglik(v)),
                Some(v) => Err(proto(format!("non-finite loglik {v}"))),
                None => Err(proto("reply has no loglik".into())),
            },
            _ => {
                let map = reply.label_probs.ok_or_else(|| proto("reply has no label_probs".into()))?;
                if map.values().any(|p| !p.is_finite()) {
                    return Err(proto("non-finite label probability".into()));
                }
                let pairs = if req.labels.is_empty() {
                    map.into_iter().collect()
                } else {
                    req.labels
                        .iter()
                        .map(|l| map.get(l).map(|p| (l.clone(), *p)).ok_or_else(|| proto(format!("label `{l}` missing from reply"))))
                        .collect::<Result<Vec<_>>>()?
                };
                Ok(Answer::Probs(pairs))
            }
        }
    }
}

fn classify(req_id: &str, e: std::io::Error) -> Error {
    match e.kind() {
        std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock => Error::Timeout { req_id: req_id.into() },
        _ => Error::Transport { req_id: req_id.into(), msg: e.to_string() },
    }
}

impl Scorer for ExternalScorer {
    fn capabilities(&self) -> Capabilities {
        self.cfg.capabilities
    }

    fn loglik(&self, ctx: &ScoreContext<'_>, response: &str) -> Result<f64> {
        if !self.cfg.capabilities.loglik {
            return Err(Error::Capability("endpoint does not provide loglik".into()));
        }
        match self.call(self.request(ctx, "loglik", Some(response)))? {
            Answer::Loglik(v) => Ok(v),
            Answer::Probs(_) => unreachable!("loglik request answered with probabilities"),
        }
    }

    fn label_probs(&self, ctx: &ScoreContext<'_>) -> Result<Vec<(String, f64)>> {
        if !self.cfg.capabilities.label_probs {
            return Err(Error::Capability("endpoint does not provide label_probs".into()));
        }
        match self.call(self.request(ctx, "label_probs", None))? {
            Answer::Probs(p) => Ok(p),
            Answer::Loglik(_) => unreachable!("label_probs request answered with a loglik"),
        }
    }
}
