//! Text-generation clients: a JSON-over-HTTP implementation and a deterministic
//! fixture-backed mock, both behind [`TextClient`].

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const ENDPOINT_ENV: &str = "CAPCUR_CLIENT_ENDPOINT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenRequest {
    pub prompt: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: Option<u64>,
}

impl GenRequest {
    pub fn new(prompt: impl Into<String>) -> Self {
        GenRequest {
            prompt: prompt.into(),
            temperature: 0.0,
            max_tokens: 512,
            seed: None,
        }
    }

    pub fn with_temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn with_max_tokens(mut self, n: u32) -> Self {
        self.max_tokens = n;
        self
    }

    pub fn validate(&self) -> Result<(), ClientError> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(ClientError::InvalidRequest(format!(
                "temperature {} must be finite and >= 0",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(ClientError::InvalidRequest("max_tokens must be >= 1".into()));
        }
        Ok(())
    }

    /// Stable fixture key for this request.
    pub fn fixture_key(&self) -> String {
        fixture_key(&self.prompt, self.temperature, self.seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenResponse {
    pub text: String,
    pub finish_reason: FinishReason,
}

impl GenResponse {
    pub fn stop(text: impl Into<String>) -> Self {
        GenResponse {
            text: text.into(),
            finish_reason: FinishReason::Stop,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ClientError {
    #[error("transport failure (status {status:?}): {message}")]
    Transport { status: Option<u16>, message: String },
    #[error("no fixture for request hash {0}")]
    MissingFixture(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("malformed response: {0}")]
    Decode(String),
    #[error("fixture file: {0}")]
    Fixtures(String),
}

/// Any model that maps a prompt to text.
pub trait TextClient: Send + Sync {
    fn generate(&self, request: &GenRequest) -> Result<GenResponse, ClientError>;
}

impl<T: TextClient + ?Sized> TextClient for std::sync::Arc<T> {
    fn generate(&self, request: &GenRequest) -> Result<GenResponse, ClientError> {
        (**self).generate(request)
    }
}

impl<T: TextClient + ?Sized> TextClient for &T {
    fn generate(&self, request: &GenRequest) -> Result<GenResponse, ClientError> {
        (**self).generate(request)
    }
}

/// SHA-256 over the canonical JSON of `(prompt, temperature, seed)`, hex encoded.
pub fn fixture_key(prompt: &str, temperature: f64, seed: Option<u64>) -> String {
    // serde_json maps are key-sorted, so this rendering is canonical.
    let canonical = serde_json::json!({
        "prompt": prompt,
        "seed": seed,
        "temperature": temperature,
    })
    .to_string();
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

/// One line of a fixture file. Either `key` or `prompt` must be present.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixtureRecord {
    #[serde(default)]
    pub key: Option<String>,
    #[serde(default)]
    pub prompt: Option<String>,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default)]
    pub seed: Option<u64>,
    pub text: String,
    #[serde(default = "default_finish")]
    pub finish_reason: FinishReason,
}

fn default_finish() -> FinishReason {
    FinishReason::Stop
}

impl FixtureRecord {
    pub fn resolved_key(&self) -> Result<String, ClientError> {
        match (&self.key, &self.prompt) {
            (Some(k), _) => Ok(k.clone()),
            (None, Some(p)) => Ok(fixture_key(p, self.temperature, self.seed)),
            (None, None) => Err(ClientError::Fixtures(
                "fixture record needs `key` or `prompt`".into(),
            )),
        }
    }
}

type Latency = Box<dyn Fn(&GenRequest) -> Duration + Send + Sync>;

/// Deterministic client answering from a fixture table.
///
/// Also records how many calls were in flight at once, so batch concurrency
/// bounds can be checked.
#[derive(Default)]
pub struct MockClient {
    fixtures: HashMap<String, GenResponse>,
    latency: Option<Latency>,
    in_flight: AtomicUsize,
    peak_in_flight: AtomicUsize,
    calls: AtomicUsize,
}

impl std::fmt::Debug for MockClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MockClient")
            .field("fixtures", &self.fixtures.len())
            .field("calls", &self.calls.load(Ordering::SeqCst))
            .finish()
    }
}

impl MockClient {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, prompt: &str, temperature: f64, seed: Option<u64>, text: &str) {
        self.fixtures.insert(
            fixture_key(prompt, temperature, seed),
            GenResponse::stop(text),
        );
    }

    pub fn insert_response(&mut self, key: String, response: GenResponse) {
        self.fixtures.insert(key, response);
    }

    /// Adds an artificial per-request delay, used to shuffle completion order in tests.
    pub fn with_latency(
        mut self,
        latency: impl Fn(&GenRequest) -> Duration + Send + Sync + 'static,
    ) -> Self {
        self.latency = Some(Box::new(latency));
        self
    }

    pub fn from_records(records: &[FixtureRecord]) -> Result<Self, ClientError> {
        let mut mock = MockClient::new();
        for r in records {
            mock.insert_response(
                r.resolved_key()?,
                GenResponse {
                    text: r.text.clone(),
                    finish_reason: r.finish_reason,
                },
            );
        }
        Ok(mock)
    }

    /// Loads a line-delimited fixture file of [`FixtureRecord`]s.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ClientError> {
        let path = path.as_ref();
        let file = std::fs::File::open(path)
            .map_err(|e| ClientError::Fixtures(format!("{}: {e}", path.display())))?;
        let mut records = Vec::new();
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| ClientError::Fixtures(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: FixtureRecord = serde_json::from_str(&line).map_err(|e| {
                ClientError::Fixtures(format!("{} line {}: {e}", path.display(), i + 1))
            })?;
            records.push(rec);
        }
        Self::from_records(&records)
    }

    pub fn len(&self) -> usize {
        self.fixtures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fixtures.is_empty()
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn peak_in_flight(&self) -> usize {
        self.peak_in_flight.load(Ordering::SeqCst)
    }
}

impl TextClient for MockClient {
    fn generate(&self, request: &GenRequest) -> Result<GenResponse, ClientError> {
        request.validate()?;
        self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak_in_flight.fetch_max(now, Ordering::SeqCst);
        if let Some(latency) = &self.latency {
            std::thread::sleep(latency(request));
        }
        let key = request.fixture_key();
        let out = self
            .fixtures
            .get(&key)
            .cloned()
            .ok_or(ClientError::MissingFixture(key));
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        out
    }
}

/// Blocking JSON-over-HTTP client: `POST {endpoint}/generate`.
#[derive(Debug, Clone)]
pub struct HttpClient {
    endpoint: String,
    http: reqwest::blocking::Client,
}

#[derive(Deserialize)]
struct WireResponse {
    text: String,
    finish_reason: FinishReason,
}

impl HttpClient {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Result<Self, ClientError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ClientError::Transport {
                status: None,
                message: e.to_string(),
            })?;
        Ok(HttpClient {
            endpoint: endpoint.into().trim_end_matches('/').to_string(),
            http,
        })
    }

    /// Uses `CAPCUR_CLIENT_ENDPOINT` when set, else `configured`.
    pub fn from_env_or(configured: &str, timeout: Duration) -> Result<Self, ClientError> {
        let endpoint = std::env::var(ENDPOINT_ENV).unwrap_or_else(|_| configured.to_string());
        Self::new(endpoint, timeout)
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }
}

impl TextClient for HttpClient {
    fn generate(&self, request: &GenRequest) -> Result<GenResponse, ClientError> {
        request.validate()?;
        let url = format!("{}/generate", self.endpoint);
        let resp = self
            .http
            .post(&url)
            .json(request)
            .send()
            .map_err(|e| ClientError::Transport {
                status: e.status().map(|s| s.as_u16()),
                message: e.to_string(),
            })?;
        let status = resp.status();
        if !status.is_success() {
            return Err(ClientError::Transport {
                status: Some(status.as_u16()),
                message: format!("{url} returned {status}"),
            });
        }
        let wire: WireResponse = resp.json().map_err(|e| ClientError::Decode(e.to_string()))?;
        if wire.text.is_empty() && wire.finish_reason != FinishReason::Error {
            return Err(ClientError::Decode("empty text without error finish".into()));
        }
        Ok(GenResponse {
            text: wire.text,
            finish_reason: wire.finish_reason,
        })
    }
}

/// Runs `requests` with at most `max_in_flight` outstanding calls.
///
/// Results are index-aligned with `requests`; a failing item does not abort the batch.
pub fn generate_batch(
    client: &dyn TextClient,
    requests: &[GenRequest],
    max_in_flight: usize,
) -> Result<Vec<Result<GenResponse, ClientError>>, ClientError> {
    if max_in_flight == 0 {
        return Err(ClientError::InvalidRequest("max_in_flight must be >= 1".into()));
    }
    let n = requests.len();
    let slots: Mutex<Vec<Option<Result<GenResponse, ClientError>>>> =
        Mutex::new((0..n).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..max_in_flight.min(n) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let out = client.generate(&requests[i]);
                slots.lock().expect("batch slots poisoned")[i] = Some(out);
            });
        }
    });
    Ok(slots
        .into_inner()
        .expect("batch slots poisoned")
        .into_iter()
        .map(|r| r.expect("every index is claimed exactly once"))
        .collect())
}
