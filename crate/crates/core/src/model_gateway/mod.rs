//! Role-based access to every model the pipeline uses.
//!
//! Each call names a [`ModelRole`]; the gateway routes it to the backend bound
//! to that role, retries transient failures with exponential backoff, bounds the
//! number of in-flight calls, and appends one [`InvocationRecord`] per call.

mod http;
pub mod offline;
pub mod prompt;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::text::estimate_tokens;

pub use http::{HttpChatBackend, HttpEmbeddingBackend, ReqwestTransport, Transport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelRole {
    Cheap,
    Powerful,
    Tagging,
    Reasoning,
    Generation,
    Embedding,
}

impl ModelRole {
    pub const ALL: [ModelRole; 6] = [
        ModelRole::Cheap,
        ModelRole::Powerful,
        ModelRole::Tagging,
        ModelRole::Reasoning,
        ModelRole::Generation,
        ModelRole::Embedding,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelRole::Cheap => "cheap",
            ModelRole::Powerful => "powerful",
            ModelRole::Tagging => "tagging",
            ModelRole::Reasoning => "reasoning",
            ModelRole::Generation => "generation",
            ModelRole::Embedding => "embedding",
        }
    }
}

impl fmt::Display for ModelRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Ok,
    Retried,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvocationRecord {
    pub role: ModelRole,
    pub input_digest: String,
    pub tokens_in: usize,
    pub tokens_out: usize,
    pub cost_units: f64,
    pub latency_ms: f64,
    pub attempts: u32,
    pub outcome: Outcome,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendError {
    /// Worth retrying: timeouts, rate limits, 5xx.
    Transient(String),
    Permanent(String),
}

impl fmt::Display for BackendError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackendError::Transient(m) => write!(f, "transient: {m}"),
            BackendError::Permanent(m) => write!(f, "permanent: {m}"),
        }
    }
}

pub trait CompletionBackend: Send + Sync {
    fn complete(&self, prompt: &str) -> std::result::Result<String, BackendError>;
}

pub trait EmbeddingBackend: Send + Sync {
    fn embed(&self, text: &str, dim: usize) -> std::result::Result<Vec<f32>, BackendError>;
}

/// Anything that can turn text into a query vector.
pub trait Embedder: Send + Sync {
    fn embed(&self, text: &str) -> Result<Vec<f32>>;
    fn dim(&self) -> usize;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Offline,
    Http,
}

#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoleConfig {
    pub backend: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_name: Option<String>,
    pub unit_cost: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    /// Environment variable holding the API credential for HTTP backends.
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
}

fn default_max_tokens() -> u32 {
    1024
}

fn default_api_key_env() -> String {
    "QM_API_KEY".into()
}

impl fmt::Debug for RoleConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RoleConfig")
            .field("backend", &self.backend)
            .field("endpoint", &self.endpoint)
            .field("model_name", &self.model_name)
            .field("unit_cost", &self.unit_cost)
            .field("max_tokens", &self.max_tokens)
            .finish_non_exhaustive()
    }
}

impl RoleConfig {
    pub fn offline(unit_cost: f64) -> Self {
        Self {
            backend: BackendKind::Offline,
            endpoint: None,
            model_name: None,
            unit_cost,
            max_tokens: default_max_tokens(),
            api_key_env: default_api_key_env(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay_ms: u64,
    pub jitter: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay_ms: 100,
            jitter: 0.2,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `k` (0-based): base × 2^k, scaled by a
    /// uniform factor in [1 − jitter, 1 + jitter].
    pub fn delay(&self, k: u32) -> Duration {
        let base = self.base_delay_ms as f64 * 2f64.powi(k as i32);
        let factor = if self.jitter > 0.0 {
            rand::thread_rng().gen_range(1.0 - self.jitter..=1.0 + self.jitter)
        } else {
            1.0
        };
        Duration::from_secs_f64((base * factor).max(0.0) / 1000.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatewayConfig {
    pub max_concurrent: usize,
    pub retry: RetryPolicy,
    pub roles: BTreeMap<ModelRole, RoleConfig>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        let costs = [
            (ModelRole::Cheap, 1.0),
            (ModelRole::Powerful, 10.0),
            (ModelRole::Tagging, 1.0),
            (ModelRole::Reasoning, 5.0),
            (ModelRole::Generation, 10.0),
            (ModelRole::Embedding, 0.1),
        ];
        Self {
            max_concurrent: 4,
            retry: RetryPolicy::default(),
            roles: costs
                .into_iter()
                .map(|(r, c)| (r, RoleConfig::offline(c)))
                .collect(),
        }
    }
}

struct Binding<B: ?Sized> {
    backend: Arc<B>,
    unit_cost: f64,
}

impl<B: ?Sized> Clone for Binding<B> {
    fn clone(&self) -> Self {
        Self {
            backend: Arc::clone(&self.backend),
            unit_cost: self.unit_cost,
        }
    }
}

/// Counting semaphore that also tracks the highest concurrency it has seen.
struct Limiter {
    max: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
    high_water: AtomicUsize,
}

impl Limiter {
    fn new(max: usize) -> Self {
        Self {
            max: max.max(1),
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
            high_water: AtomicUsize::new(0),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_flight.lock();
        while *n >= self.max {
            self.freed.wait(&mut n);
        }
        *n += 1;
        self.high_water.fetch_max(*n, Ordering::SeqCst);
        Permit(self)
    }
}

struct Permit<'a>(&'a Limiter);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.in_flight.lock() -= 1;
        self.0.freed.notify_one();
    }
}

pub struct Gateway {
    dim: usize,
    completions: HashMap<ModelRole, Binding<dyn CompletionBackend>>,
    embedding: Option<Binding<dyn EmbeddingBackend>>,
    retry: RetryPolicy,
    limiter: Limiter,
    records: Mutex<Vec<InvocationRecord>>,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut roles: Vec<_> = self.completions.keys().collect();
        roles.sort();
        f.debug_struct("Gateway")
            .field("dim", &self.dim)
            .field("roles", &roles)
            .field("embedding", &self.embedding.is_some())
            .finish_non_exhaustive()
    }
}

impl Gateway {
    /// A gateway with no roles bound. Use the `with_*` methods to bind them.
    pub fn new(dim: usize, max_concurrent: usize, retry: RetryPolicy) -> Self {
        Self {
            dim,
            completions: HashMap::new(),
            embedding: None,
            retry,
            limiter: Limiter::new(max_concurrent),
            records: Mutex::new(Vec::new()),
        }
    }

    /// Every role bound to its deterministic offline stub, with default costs.
    pub fn offline(dim: usize) -> Self {
        Self::from_config(&GatewayConfig::default(), dim, Arc::new(NoNetwork))
            .expect("default offline configuration is valid")
    }

    pub fn from_config(
        config: &GatewayConfig,
        dim: usize,
        transport: Arc<dyn Transport>,
    ) -> Result<Self> {
        let mut gw = Self::new(dim, config.max_concurrent, config.retry);
        for (role, rc) in &config.roles {
            if rc.unit_cost < 0.0 || !rc.unit_cost.is_finite() {
                return Err(Error::config(
                    format!("gateway.roles.{role}.unit_cost"),
                    "must be a finite number ≥ 0",
                ));
            }
            match (rc.backend, role) {
                (BackendKind::Offline, ModelRole::Embedding) => {
                    gw = gw.with_embedder(Arc::new(offline::HashEmbedder), rc.unit_cost);
                }
                (BackendKind::Offline, r) => {
                    gw = gw.with_backend(*r, offline::stub_for(*r), rc.unit_cost);
                }
                (BackendKind::Http, r) => {
                    let key = format!("gateway.roles.{role}");
                    let endpoint = rc.endpoint.clone().ok_or_else(|| {
                        Error::config(format!("{key}.endpoint"), "required for http backend")
                    })?;
                    let model = rc.model_name.clone().ok_or_else(|| {
                        Error::config(format!("{key}.model_name"), "required for http backend")
                    })?;
                    let api_key = std::env::var(&rc.api_key_env).ok();
                    if *r == ModelRole::Embedding {
                        let b = HttpEmbeddingBackend::new(
                            endpoint,
                            model,
                            api_key,
                            Arc::clone(&transport),
                        );
                        gw = gw.with_embedder(Arc::new(b), rc.unit_cost);
                    } else {
                        let b = HttpChatBackend::new(
                            endpoint,
                            model,
                            rc.max_tokens,
                            api_key,
                            Arc::clone(&transport),
                        );
                        gw = gw.with_backend(*r, Arc::new(b), rc.unit_cost);
                    }
                }
            }
        }
        Ok(gw)
    }

    pub fn with_backend(
        mut self,
        role: ModelRole,
        backend: Arc<dyn CompletionBackend>,
        unit_cost: f64,
    ) -> Self {
        self.completions
            .insert(role, Binding { backend, unit_cost });
        self
    }

    pub fn with_embedder(mut self, backend: Arc<dyn EmbeddingBackend>, unit_cost: f64) -> Self {
        self.embedding = Some(Binding { backend, unit_cost });
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn unit_cost(&self, role: ModelRole) -> Option<f64> {
        if role == ModelRole::Embedding {
            return self.embedding.as_ref().map(|b| b.unit_cost);
        }
        self.completions.get(&role).map(|b| b.unit_cost)
    }

    pub fn complete(&self, role: ModelRole, prompt: &str) -> Result<String> {
        let binding = self.completions.get(&role).cloned().ok_or_else(|| {
            Error::config(format!("gateway.roles.{role}"), "role is not configured")
        })?;
        let (result, attempts, latency) = self.with_retries(|| binding.backend.complete(prompt));
        let tokens_out = result.as_ref().map(|s| estimate_tokens(s)).unwrap_or(0);
        self.record(
            role,
            prompt,
            tokens_out,
            binding.unit_cost,
            attempts,
            latency,
            result.is_ok(),
            Vec::new(),
        );
        result.map_err(|e| Error::Upstream {
            role: role.to_string(),
            message: e.to_string(),
            segment_id: None,
        })
    }

    /// Unit-norm embedding of `text`. Empty text maps to the reserved axis-0
    /// unit vector, and the record is flagged `empty_input`.
    pub fn embed(&self, text: &str) -> Result<Vec<f32>> {
        let binding = self
            .embedding
            .clone()
            .ok_or_else(|| Error::config("gateway.roles.embedding", "role is not configured"))?;
        if text.trim().is_empty() {
            let mut v = vec![0.0; self.dim];
            if let Some(first) = v.first_mut() {
                *first = 1.0;
            }
            self.record(
                ModelRole::Embedding,
                text,
                0,
                binding.unit_cost,
                1,
                Duration::ZERO,
                true,
                vec!["empty_input".into()],
            );
            return Ok(v);
        }
        let dim = self.dim;
        let (result, attempts, latency) = self.with_retries(|| {
            let v = binding.backend.embed(text, dim)?;
            if v.len() != dim {
                return Err(BackendError::Permanent(format!(
                    "embedding has dimension {} (expected {dim})",
                    v.len()
                )));
            }
            Ok(normalize(v))
        });
        self.record(
            ModelRole::Embedding,
            text,
            0,
            binding.unit_cost,
            attempts,
            latency,
            result.is_ok(),
            Vec::new(),
        );
        result.map_err(|e| Error::Upstream {
            role: ModelRole::Embedding.to_string(),
            message: e.to_string(),
            segment_id: None,
        })
    }

    fn with_retries<T>(
        &self,
        mut call: impl FnMut() -> std::result::Result<T, BackendError>,
    ) -> (std::result::Result<T, BackendError>, u32, Duration) {
        let _permit = self.limiter.acquire();
        let started = Instant::now();
        let max = self.retry.attempts.max(1);
        let mut attempt = 0;
        loop {
            attempt += 1;
            match call() {
                Ok(v) => return (Ok(v), attempt, started.elapsed()),
                Err(BackendError::Transient(msg)) if attempt < max => {
                    tracing::warn!(attempt, error = %msg, "transient model failure, retrying");
                    std::thread::sleep(self.retry.delay(attempt - 1));
                }
                Err(e) => return (Err(e), attempt, started.elapsed()),
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn record(
        &self,
        role: ModelRole,
        input: &str,
        tokens_out: usize,
        unit_cost: f64,
        attempts: u32,
        latency: Duration,
        ok: bool,
        flags: Vec<String>,
    ) {
        let outcome = match (ok, attempts) {
            (false, _) => Outcome::Failed,
            (true, 1) => Outcome::Ok,
            (true, _) => Outcome::Retried,
        };
        let digest = Sha256::digest(input.as_bytes());
        let rec = InvocationRecord {
            role,
            input_digest: hex::encode(&digest[..8]),
            tokens_in: estimate_tokens(input),
            tokens_out,
            cost_units: if ok { unit_cost } else { 0.0 },
            latency_ms: latency.as_secs_f64() * 1000.0,
            attempts,
            outcome,
            flags,
        };
        self.records.lock().push(rec);
    }

    pub fn records(&self) -> Vec<InvocationRecord> {
        self.records.lock().clone()
    }

    pub fn record_count(&self) -> usize {
        self.records.lock().len()
    }

    /// Highest number of simultaneously in-flight calls observed so far.
    pub fn high_water_mark(&self) -> usize {
        self.limiter.high_water.load(Ordering::SeqCst)
    }
}

impl Embedder for Gateway {
    fn embed(&self, text: &str) -> Result<Vec<f32>> {
        Gateway::embed(self, text)
    }

    fn dim(&self) -> usize {
        self.dim
    }
}

pub fn normalize(mut v: Vec<f32>) -> Vec<f32> {
    let norm = v.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in &mut v {
            *x = (f64::from(*x) / norm) as f32;
        }
    }
    v
}

/// Transport that refuses every request. Offline gateways are built with it.
#[derive(Debug, Default)]
pub struct NoNetwork;

impl Transport for NoNetwork {
    fn post_json(
        &self,
        url: &str,
        _bearer: Option<&str>,
        _body: &serde_json::Value,
    ) -> std::result::Result<(u16, serde_json::Value), String> {
        Err(format!("network access disabled (attempted POST {url})"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicU32;

    fn fast_retry() -> RetryPolicy {
        RetryPolicy {
            attempts: 3,
            base_delay_ms: 0,
            jitter: 0.0,
        }
    }

    struct Flaky {
        failures: AtomicU32,
        transient: bool,
    }

    impl CompletionBackend for Flaky {
        fn complete(&self, prompt: &str) -> std::result::Result<String, BackendError> {
            if self.failures.load(Ordering::SeqCst) > 0 {
                self.failures.fetch_sub(1, Ordering::SeqCst);
                return Err(if self.transient {
                    BackendError::Transient("503".into())
                } else {
                    BackendError::Permanent("400".into())
                });
            }
            Ok(prompt.to_uppercase())
        }
    }

    #[test]
    fn retries_transient_failures() {
        let gw = Gateway::new(8, 2, fast_retry()).with_backend(
            ModelRole::Cheap,
            Arc::new(Flaky {
                failures: AtomicU32::new(2),
                transient: true,
            }),
            1.0,
        );
        assert_eq!(gw.complete(ModelRole::Cheap, "hi").unwrap(), "HI");
        let recs = gw.records();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].outcome, Outcome::Retried);
        assert_eq!(recs[0].attempts, 3);
    }

    #[test]
    fn exhausted_retries_are_upstream_failures() {
        let gw = Gateway::new(8, 2, fast_retry()).with_backend(
            ModelRole::Cheap,
            Arc::new(Flaky {
                failures: AtomicU32::new(5),
                transient: true,
            }),
            1.0,
        );
        assert!(matches!(
            gw.complete(ModelRole::Cheap, "hi"),
            Err(Error::Upstream { .. })
        ));
        let recs = gw.records();
        assert_eq!(recs[0].outcome, Outcome::Failed);
        assert_eq!(recs[0].cost_units, 0.0);
    }

    #[test]
    fn permanent_failures_are_not_retried() {
        let gw = Gateway::new(8, 2, fast_retry()).with_backend(
            ModelRole::Cheap,
            Arc::new(Flaky {
                failures: AtomicU32::new(1),
                transient: false,
            }),
            1.0,
        );
        assert!(gw.complete(ModelRole::Cheap, "x").is_err());
        assert_eq!(gw.records()[0].attempts, 1);
    }

    #[test]
    fn unconfigured_role_is_config_error() {
        let gw = Gateway::new(8, 1, fast_retry());
        assert!(matches!(
            gw.complete(ModelRole::Powerful, "x"),
            Err(Error::Config { .. })
        ));
        assert!(matches!(gw.embed("x"), Err(Error::Config { .. })));
    }

    #[test]
    fn backoff_grows_exponentially_with_bounded_jitter() {
        let p = RetryPolicy::default();
        for k in 0..4 {
            let d = p.delay(k).as_secs_f64() * 1000.0;
            let base = 100.0 * 2f64.powi(k as i32);
            assert!(
                d >= base * 0.8 - 1e-9 && d <= base * 1.2 + 1e-9,
                "{d} vs {base}"
            );
        }
    }

    #[test]
    fn offline_stubs_are_deterministic_and_costed() {
        let gw = Gateway::offline(64);
        let p = prompt::wrap("Summarize.", "One. Two. Three.");
        let a = gw.complete(ModelRole::Cheap, &p).unwrap();
        let b = gw.complete(ModelRole::Cheap, &p).unwrap();
        assert_eq!(a, "One. Two.");
        assert_eq!(a, b);
        let recs = gw.records();
        assert_eq!(recs[0].cost_units, recs[1].cost_units);
        assert_eq!(recs[0].input_digest, recs[1].input_digest);
    }

    #[test]
    fn empty_embedding_is_axis_zero_and_flagged() {
        let gw = Gateway::offline(16);
        let v = gw.embed("   ").unwrap();
        assert_eq!(v[0], 1.0);
        assert!(v[1..].iter().all(|x| *x == 0.0));
        assert_eq!(gw.records()[0].flags, vec!["empty_input".to_string()]);
    }

    #[test]
    fn concurrency_is_bounded() {
        struct Slow;
        impl CompletionBackend for Slow {
            fn complete(&self, p: &str) -> std::result::Result<String, BackendError> {
                std::thread::sleep(Duration::from_millis(15));
                Ok(p.into())
            }
        }
        let gw =
            Gateway::new(8, 3, fast_retry()).with_backend(ModelRole::Cheap, Arc::new(Slow), 1.0);
        std::thread::scope(|s| {
            for i in 0..12 {
                let gw = &gw;
                s.spawn(move || gw.complete(ModelRole::Cheap, &i.to_string()).unwrap());
            }
        });
        assert_eq!(gw.record_count(), 12);
        assert!(gw.high_water_mark() <= 3);
        assert!(gw.high_water_mark() >= 2);
    }

    #[test]
    fn http_role_requires_endpoint() {
        let mut cfg = GatewayConfig::default();
        cfg.roles.insert(
            ModelRole::Generation,
            RoleConfig {
                backend: BackendKind::Http,
                ..RoleConfig::offline(1.0)
            },
        );
        let err = Gateway::from_config(&cfg, 8, Arc::new(NoNetwork)).unwrap_err();
        match err {
            Error::Config { key, .. } => assert_eq!(key, "gateway.roles.generation.endpoint"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn role_config_debug_hides_credentials() {
        let rc = RoleConfig {
            api_key_env: "SECRET_ENV".into(),
            ..RoleConfig::offline(1.0)
        };
        assert!(!format!("{rc:?}").contains("SECRET_ENV"));
    }
}
