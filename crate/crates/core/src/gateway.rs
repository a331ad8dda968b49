//! Multimodal model gateway.
//!
//! Every model call in the pipeline goes through [`Gateway::complete`]. The
//! gateway routes a [`ModelRole`] to a provider, enforces the inline image
//! policy, retries transient failures and either talks to a live
//! [`Transport`] or serves canned responses from a [`FixtureSet`].
//!
//! Replay lookups are keyed by `(fingerprint, ordinal)`: the fingerprint is a
//! SHA-256 over the canonical JSON form of the request (including the target
//! provider), the ordinal counts repeated identical requests in arrival order.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use base64::Engine as _;
use parking_lot::{Condvar, Mutex};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::blob::{BlobRef, BlobStore};

/// Encoded size above which images must travel by reference (4 MB).
pub const DEFAULT_INLINE_THRESHOLD: u64 = 4 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelRole {
    Extractor,
    StructuralDetector,
    ContextualDetector,
    Localizer,
    CodeGenerator,
    ChatAssistant,
}

impl ModelRole {
    pub const ALL: [ModelRole; 6] = [
        ModelRole::Extractor,
        ModelRole::StructuralDetector,
        ModelRole::ContextualDetector,
        ModelRole::Localizer,
        ModelRole::CodeGenerator,
        ModelRole::ChatAssistant,
    ];

    pub fn default_temperature(self) -> f64 {
        match self {
            ModelRole::ChatAssistant => 0.3,
            _ => 0.0,
        }
    }

    fn default_family(self) -> ProviderFamily {
        match self {
            ModelRole::StructuralDetector | ModelRole::CodeGenerator => ProviderFamily::Gpt,
            ModelRole::Extractor
            | ModelRole::ContextualDetector
            | ModelRole::Localizer
            | ModelRole::ChatAssistant => ProviderFamily::Claude,
        }
    }
}

impl fmt::Display for ModelRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok();
        f.write_str(s.as_ref().and_then(Value::as_str).unwrap_or("?"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderFamily {
    Claude,
    Gpt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub id: String,
    pub family: ProviderFamily,
    pub model: String,
    /// Environment variable holding the credential.
    pub api_key_env: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
}

fn default_in_flight() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
    /// Multiplicative jitter in `[0, 1]`; delay n is `base * 2^n * (1 + jitter * u)`.
    pub jitter: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            base_delay_ms: 250,
            max_delay_ms: 8_000,
            jitter: 0.5,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (0-based). Never smaller than the
    /// previous delay given `jitter <= 1`.
    pub fn delay(&self, retry: u32, previous: Duration, unit: f64) -> Duration {
        let jitter = self.jitter.clamp(0.0, 1.0) * unit.clamp(0.0, 1.0);
        let raw = self.base_delay_ms as f64 * 2f64.powi(retry as i32) * (1.0 + jitter);
        let capped = raw.min(self.max_delay_ms as f64);
        Duration::from_micros((capped * 1000.0) as u64).max(previous)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatewayConfig {
    pub providers: Vec<ProviderConfig>,
    /// Explicit role overrides; roles absent here use the family defaults.
    #[serde(default)]
    pub routes: BTreeMap<ModelRole, String>,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "default_threshold")]
    pub inline_threshold_bytes: u64,
    #[serde(default = "default_timeout")]
    pub request_timeout_s: u64,
}

fn default_threshold() -> u64 {
    DEFAULT_INLINE_THRESHOLD
}

fn default_timeout() -> u64 {
    120
}

impl GatewayConfig {
    /// One claude-class and one gpt-class provider, credentials from
    /// `ANTHROPIC_API_KEY` and `OPENAI_API_KEY`.
    pub fn dual_default() -> Self {
        GatewayConfig {
            providers: vec![
                ProviderConfig {
                    id: "claude".into(),
                    family: ProviderFamily::Claude,
                    model: "claude-3-7-sonnet-latest".into(),
                    api_key_env: "ANTHROPIC_API_KEY".into(),
                    endpoint: None,
                    max_in_flight: 4,
                },
                ProviderConfig {
                    id: "gpt".into(),
                    family: ProviderFamily::Gpt,
                    model: "gpt-4.5-preview".into(),
                    api_key_env: "OPENAI_API_KEY".into(),
                    endpoint: None,
                    max_in_flight: 4,
                },
            ],
            routes: BTreeMap::new(),
            retry: RetryPolicy::default(),
            inline_threshold_bytes: DEFAULT_INLINE_THRESHOLD,
            request_timeout_s: default_timeout(),
        }
    }

    pub fn provider(&self, id: &str) -> Option<&ProviderConfig> {
        self.providers.iter().find(|p| p.id == id)
    }
}

/// Resolves the provider serving `role`.
pub fn route(role: ModelRole, config: &GatewayConfig) -> Result<String, GatewayError> {
    if let Some(id) = config.routes.get(&role) {
        return config
            .provider(id)
            .map(|p| p.id.clone())
            .ok_or(GatewayError::UnconfiguredRole(role));
    }
    let family = role.default_family();
    config
        .providers
        .iter()
        .find(|p| p.family == family)
        .map(|p| p.id.clone())
        .ok_or(GatewayError::UnconfiguredRole(role))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Author {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub author: Author,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ImagePayload {
    Inline {
        media_type: String,
        #[serde(with = "b64")]
        data: Vec<u8>,
    },
    Stored(BlobRef),
}

impl ImagePayload {
    pub fn png(bytes: Vec<u8>) -> Self {
        ImagePayload::Inline {
            media_type: "image/png".into(),
            data: bytes,
        }
    }

    pub fn byte_size(&self) -> u64 {
        match self {
            ImagePayload::Inline { data, .. } => data.len() as u64,
            ImagePayload::Stored(r) => r.byte_size,
        }
    }

    fn fingerprint_value(&self) -> Value {
        match self {
            ImagePayload::Inline { media_type, data } => json!({
                "kind": "inline",
                "media_type": media_type,
                "sha256": hex::encode(Sha256::digest(data)),
            }),
            ImagePayload::Stored(r) => json!({
                "kind": "stored",
                "key": r.key,
                "content_type": r.content_type,
            }),
        }
    }
}

mod b64 {
    use base64::Engine as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&base64::engine::general_purpose::STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let text = String::deserialize(d)?;
        base64::engine::general_purpose::STANDARD
            .decode(text)
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRequest {
    pub role: ModelRole,
    /// Short label of the pipeline step ("detect", "localize", ...).
    pub purpose: String,
    pub messages: Vec<Message>,
    #[serde(default)]
    pub images: Vec<ImagePayload>,
    pub max_output: u32,
    pub temperature: f64,
}

impl ModelRequest {
    pub fn new(role: ModelRole, purpose: &str) -> Self {
        ModelRequest {
            role,
            purpose: purpose.to_string(),
            messages: Vec::new(),
            images: Vec::new(),
            max_output: 2048,
            temperature: role.default_temperature(),
        }
    }

    pub fn system(mut self, text: impl Into<String>) -> Self {
        self.messages.push(Message {
            author: Author::System,
            text: text.into(),
        });
        self
    }

    pub fn user(mut self, text: impl Into<String>) -> Self {
        self.messages.push(Message {
            author: Author::User,
            text: text.into(),
        });
        self
    }

    pub fn assistant(mut self, text: impl Into<String>) -> Self {
        self.messages.push(Message {
            author: Author::Assistant,
            text: text.into(),
        });
        self
    }

    pub fn image(mut self, payload: ImagePayload) -> Self {
        self.images.push(payload);
        self
    }

    pub fn max_output(mut self, tokens: u32) -> Self {
        self.max_output = tokens;
        self
    }

    /// All message texts joined, for logs and transcript assertions.
    pub fn prompt_text(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.text.as_str())
            .collect::<Vec<_>>()
            .join("\n\n")
    }

    /// Content hash of the normalized request as sent to `provider_id`.
    pub fn fingerprint(&self, provider_id: &str) -> String {
        let messages: Vec<Value> = self
            .messages
            .iter()
            .map(|m| json!({"author": m.author, "text": m.text}))
            .collect();
        let images: Vec<Value> = self.images.iter().map(|i| i.fingerprint_value()).collect();
        let value = json!({
            "provider": provider_id,
            "role": self.role,
            "purpose": self.purpose,
            "messages": messages,
            "images": images,
            "max_output": self.max_output,
            "temperature": format!("{:.4}", self.temperature),
        });
        fingerprint_value(&value)
    }

    /// Moves inline images larger than `threshold` into `store`.
    pub fn offload_images(
        mut self,
        store: &dyn BlobStore,
        threshold: u64,
    ) -> Result<Self, GatewayError> {
        for image in &mut self.images {
            if let ImagePayload::Inline { media_type, data } = image {
                if data.len() as u64 > threshold {
                    let r = store
                        .put(data, media_type)
                        .map_err(|e| GatewayError::Storage(e.to_string()))?;
                    *image = ImagePayload::Stored(r);
                }
            }
        }
        Ok(self)
    }

    fn check_image_policy(&self, threshold: u64) -> Result<(), GatewayError> {
        let mut oversized = 0;
        for image in &self.images {
            if image.byte_size() > threshold {
                oversized += 1;
                if matches!(image, ImagePayload::Inline { .. }) {
                    return Err(GatewayError::ImagePolicy(format!(
                        "inline image of {} bytes exceeds the {threshold}-byte threshold",
                        image.byte_size()
                    )));
                }
            }
        }
        if oversized > 1 {
            return Err(GatewayError::ImagePolicy(format!(
                "{oversized} images exceed the inline threshold; at most one may"
            )));
        }
        Ok(())
    }
}

/// SHA-256 over canonical JSON (object keys sorted recursively).
pub fn fingerprint_value(value: &Value) -> String {
    let mut canonical = String::new();
    write_canonical(value, &mut canonical);
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

fn write_canonical(value: &Value, out: &mut String) {
    match value {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&Value::String((*k).clone()).to_string());
                out.push(':');
                write_canonical(&map[*k], out);
            }
            out.push('}');
        }
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(item, out);
            }
            out.push(']');
        }
        other => out.push_str(&other.to_string()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResponse {
    pub text: String,
    pub provider_id: String,
    pub latency_ms: u64,
    pub request_fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TransportError {
    #[error("request timed out")]
    Timeout,
    #[error("rate limited")]
    RateLimited,
    #[error("server error {status}: {message}")]
    Server { status: u16, message: String },
    #[error("rejected: {0}")]
    Rejected(String),
}

impl TransportError {
    pub fn is_transient(&self) -> bool {
        match self {
            TransportError::Timeout | TransportError::RateLimited => true,
            TransportError::Server { status, .. } => *status >= 500,
            TransportError::Rejected(_) => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GatewayError {
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("timed out after {attempts} attempts")]
    Timeout { attempts: u32 },
    #[error("no replay fixture for request {fingerprint} (ordinal {ordinal})")]
    FixtureMiss { fingerprint: String, ordinal: u32 },
    #[error("provider rejected request: {0}")]
    ProviderRejected(String),
    #[error("no provider configured for role {0}")]
    UnconfiguredRole(ModelRole),
    #[error("unknown provider '{0}'")]
    UnknownProvider(String),
    #[error("image policy violation: {0}")]
    ImagePolicy(String),
    #[error("storage failure: {0}")]
    Storage(String),
}

/// Live wire to a provider.
pub trait Transport: Send + Sync {
    fn send(
        &self,
        provider: &ProviderConfig,
        request: &ModelRequest,
    ) -> Result<String, TransportError>;
}

/// Transport backed by a closure; used for simulated providers in tests and
/// for authoring fixture packs.
pub struct FnTransport<F>(pub F);

impl<F> Transport for FnTransport<F>
where
    F: Fn(&ProviderConfig, &ModelRequest) -> Result<String, TransportError> + Send + Sync,
{
    fn send(
        &self,
        provider: &ProviderConfig,
        request: &ModelRequest,
    ) -> Result<String, TransportError> {
        (self.0)(provider, request)
    }
}

pub trait Sleeper: Send + Sync {
    fn sleep(&self, duration: Duration);
}

pub struct ThreadSleeper;

impl Sleeper for ThreadSleeper {
    fn sleep(&self, duration: Duration) {
        std::thread::sleep(duration);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayFixture {
    pub request_fingerprint: String,
    pub ordinal: u32,
    pub canned_response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provider_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub purpose: Option<String>,
    /// Prompt text as sent, kept for human inspection of fixture packs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum FixtureError {
    #[error("duplicate fixture ({0}, {1})")]
    Duplicate(String, u32),
    #[error("fixture io: {0}")]
    Io(String),
    #[error("fixture parse {0}: {1}")]
    Parse(String, String),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FixtureSet {
    entries: BTreeMap<(String, u32), ReplayFixture>,
}

impl FixtureSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, fixture: ReplayFixture) -> Result<(), FixtureError> {
        let key = (fixture.request_fingerprint.clone(), fixture.ordinal);
        if self.entries.contains_key(&key) {
            return Err(FixtureError::Duplicate(key.0, key.1));
        }
        self.entries.insert(key, fixture);
        Ok(())
    }

    pub fn get(&self, fingerprint: &str, ordinal: u32) -> Option<&ReplayFixture> {
        self.entries.get(&(fingerprint.to_string(), ordinal))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ReplayFixture> {
        self.entries.values()
    }

    /// Merges `other` in; identical duplicates are ignored, conflicting
    /// ones are errors.
    pub fn extend(&mut self, other: FixtureSet) -> Result<(), FixtureError> {
        for (key, fixture) in other.entries {
            match self.entries.get(&key) {
                Some(existing) if existing.canned_response == fixture.canned_response => {}
                Some(_) => return Err(FixtureError::Duplicate(key.0, key.1)),
                None => {
                    self.entries.insert(key, fixture);
                }
            }
        }
        Ok(())
    }

    /// Loads every `*.json` record in `dir`.
    pub fn load_dir(dir: &Path) -> Result<FixtureSet, FixtureError> {
        let mut set = FixtureSet::new();
        let entries =
            fs::read_dir(dir).map_err(|e| FixtureError::Io(format!("{}: {e}", dir.display())))?;
        let mut paths: Vec<_> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        for path in paths {
            let text = fs::read_to_string(&path).map_err(|e| FixtureError::Io(e.to_string()))?;
            let fixture: ReplayFixture = serde_json::from_str(&text)
                .map_err(|e| FixtureError::Parse(path.display().to_string(), e.to_string()))?;
            set.insert(fixture)?;
        }
        Ok(set)
    }

    /// Writes one content-addressed record per fixture: `{fingerprint}-{ordinal}.json`.
    pub fn save_dir(&self, dir: &Path) -> Result<(), FixtureError> {
        fs::create_dir_all(dir).map_err(|e| FixtureError::Io(e.to_string()))?;
        for fixture in self.entries.values() {
            let path = dir.join(format!(
                "{}-{}.json",
                fixture.request_fingerprint, fixture.ordinal
            ));
            let text = serde_json::to_string_pretty(fixture)
                .map_err(|e| FixtureError::Io(e.to_string()))?;
            fs::write(path, text + "\n").map_err(|e| FixtureError::Io(e.to_string()))?;
        }
        Ok(())
    }
}

/// One gateway call as observed by the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub role: ModelRole,
    pub purpose: String,
    pub provider_id: String,
    pub fingerprint: String,
    pub ordinal: u32,
    pub attempts: u32,
    pub prompt: String,
    pub response: Option<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GatewayMode {
    Live,
    Record,
    Replay,
}

struct Semaphore {
    permits: Mutex<usize>,
    freed: Condvar,
}

impl Semaphore {
    fn new(permits: usize) -> Self {
        Semaphore {
            permits: Mutex::new(permits.max(1)),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut permits = self.permits.lock();
        while *permits == 0 {
            self.freed.wait(&mut permits);
        }
        *permits -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock() += 1;
        self.0.freed.notify_one();
    }
}

pub struct GatewayBuilder {
    config: GatewayConfig,
    mode: GatewayMode,
    transport: Option<Arc<dyn Transport>>,
    fixtures: FixtureSet,
    sleeper: Arc<dyn Sleeper>,
}

impl GatewayBuilder {
    pub fn mode(mut self, mode: GatewayMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn transport(mut self, transport: Arc<dyn Transport>) -> Self {
        self.transport = Some(transport);
        self
    }

    pub fn fixtures(mut self, fixtures: FixtureSet) -> Self {
        self.fixtures = fixtures;
        self
    }

    pub fn sleeper(mut self, sleeper: Arc<dyn Sleeper>) -> Self {
        self.sleeper = sleeper;
        self
    }

    pub fn build(self) -> Gateway {
        let limiters = self
            .config
            .providers
            .iter()
            .map(|p| (p.id.clone(), Arc::new(Semaphore::new(p.max_in_flight))))
            .collect();
        Gateway {
            config: self.config,
            mode: self.mode,
            transport: self.transport,
            replay: self.fixtures,
            cursors: Mutex::new(HashMap::new()),
            recorded: Mutex::new(FixtureSet::new()),
            transcript: Mutex::new(Vec::new()),
            limiters,
            sleeper: self.sleeper,
        }
    }
}

pub struct Gateway {
    config: GatewayConfig,
    mode: GatewayMode,
    transport: Option<Arc<dyn Transport>>,
    replay: FixtureSet,
    /// Next ordinal per fingerprint. In replay mode this is the lookup
    /// cursor; in record mode it numbers recorded fixtures.
    cursors: Mutex<HashMap<String, u32>>,
    recorded: Mutex<FixtureSet>,
    transcript: Mutex<Vec<CallRecord>>,
    limiters: HashMap<String, Arc<Semaphore>>,
    sleeper: Arc<dyn Sleeper>,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("mode", &self.mode)
            .field("providers", &self.config.providers.len())
            .field("fixtures", &self.replay.len())
            .finish()
    }
}

impl Gateway {
    pub fn builder(config: GatewayConfig) -> GatewayBuilder {
        GatewayBuilder {
            config,
            mode: GatewayMode::Live,
            transport: None,
            fixtures: FixtureSet::new(),
            sleeper: Arc::new(ThreadSleeper),
        }
    }

    pub fn live(config: GatewayConfig, transport: Arc<dyn Transport>) -> Gateway {
        Gateway::builder(config).transport(transport).build()
    }

    pub fn recording(config: GatewayConfig, transport: Arc<dyn Transport>) -> Gateway {
        Gateway::builder(config)
            .transport(transport)
            .mode(GatewayMode::Record)
            .build()
    }

    pub fn replay(config: GatewayConfig, fixtures: FixtureSet) -> Gateway {
        Gateway::builder(config)
            .fixtures(fixtures)
            .mode(GatewayMode::Replay)
            .build()
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    pub fn mode(&self) -> GatewayMode {
        self.mode
    }

    pub fn is_replay(&self) -> bool {
        self.mode == GatewayMode::Replay
    }

    pub fn route(&self, role: ModelRole) -> Result<String, GatewayError> {
        route(role, &self.config)
    }

    /// Sends `request` to the provider routed for its role.
    pub fn complete(&self, request: &ModelRequest) -> Result<ModelResponse, GatewayError> {
        let provider = self.route(request.role)?;
        self.complete_with(&provider, request)
    }

    /// Sends `request` to an explicit provider (used where both providers
    /// answer the same role, e.g. side-by-side corrections).
    pub fn complete_with(
        &self,
        provider_id: &str,
        request: &ModelRequest,
    ) -> Result<ModelResponse, GatewayError> {
        let provider = self
            .config
            .provider(provider_id)
            .ok_or_else(|| GatewayError::UnknownProvider(provider_id.to_string()))?
            .clone();
        request.check_image_policy(self.config.inline_threshold_bytes)?;
        let fingerprint = request.fingerprint(&provider.id);

        let (outcome, ordinal, attempts, latency_ms) = match self.mode {
            GatewayMode::Replay => {
                let ordinal = self.next_ordinal(&fingerprint);
                let outcome = self
                    .replay
                    .get(&fingerprint, ordinal)
                    .map(|f| f.canned_response.clone())
                    .ok_or_else(|| GatewayError::FixtureMiss {
                        fingerprint: fingerprint.clone(),
                        ordinal,
                    });
                (outcome, ordinal, 0, 0)
            }
            GatewayMode::Live | GatewayMode::Record => {
                let start = Instant::now();
                let (outcome, attempts) = self.send_with_retry(&provider, request);
                let latency = start.elapsed().as_millis() as u64;
                let mut ordinal = 0;
                if let (Ok(text), GatewayMode::Record) = (&outcome, self.mode) {
                    ordinal = self.next_ordinal(&fingerprint);
                    self.recorded
                        .lock()
                        .insert(ReplayFixture {
                            request_fingerprint: fingerprint.clone(),
                            ordinal,
                            canned_response: text.clone(),
                            provider_id: Some(provider.id.clone()),
                            purpose: Some(request.purpose.clone()),
                            prompt: Some(request.prompt_text()),
                        })
                        .expect("ordinals are allocated uniquely");
                }
                (outcome, ordinal, attempts, latency)
            }
        };

        self.transcript.lock().push(CallRecord {
            role: request.role,
            purpose: request.purpose.clone(),
            provider_id: provider.id.clone(),
            fingerprint: fingerprint.clone(),
            ordinal,
            attempts,
            prompt: request.prompt_text(),
            response: outcome.as_ref().ok().cloned(),
            error: outcome.as_ref().err().map(|e| e.to_string()),
        });

        outcome.map(|text| ModelResponse {
            text,
            provider_id: provider.id,
            latency_ms,
            request_fingerprint: fingerprint,
        })
    }

    fn next_ordinal(&self, fingerprint: &str) -> u32 {
        let mut cursors = self.cursors.lock();
        let slot = cursors.entry(fingerprint.to_string()).or_insert(0);
        let ordinal = *slot;
        *slot += 1;
        ordinal
    }

    fn send_with_retry(
        &self,
        provider: &ProviderConfig,
        request: &ModelRequest,
    ) -> (Result<String, GatewayError>, u32) {
        let Some(transport) = self.transport.as_ref() else {
            return (
                Err(GatewayError::ProviderRejected(
                    "no live transport configured".into(),
                )),
                0,
            );
        };
        let limiter = self.limiters.get(&provider.id).cloned();
        let max_attempts = self.config.retry.max_attempts.max(1);
        let mut previous = Duration::ZERO;
        let mut attempt = 0;
        loop {
            attempt += 1;
            let result = {
                let _permit = limiter.as_ref().map(|l| l.acquire());
                transport.send(provider, request)
            };
            match result {
                Ok(text) => return (Ok(text), attempt),
                Err(err) if err.is_transient() && attempt < max_attempts => {
                    let unit: f64 = rand::rng().random();
                    let delay = self.config.retry.delay(attempt - 1, previous, unit);
                    tracing::warn!(
                        provider = %provider.id,
                        attempt,
                        delay_ms = delay.as_millis() as u64,
                        "transient provider failure: {err}"
                    );
                    self.sleeper.sleep(delay);
                    previous = delay;
                }
                Err(err) => {
                    let mapped = match err {
                        TransportError::Timeout => GatewayError::Timeout { attempts: attempt },
                        TransportError::RateLimited => {
                            GatewayError::RateLimited { attempts: attempt }
                        }
                        TransportError::Server { status, message } => {
                            GatewayError::ProviderRejected(format!("status {status}: {message}"))
                        }
                        TransportError::Rejected(message) => {
                            GatewayError::ProviderRejected(message)
                        }
                    };
                    return (Err(mapped), attempt);
                }
            }
        }
    }

    /// Fixtures captured so far in record mode.
    pub fn recorded_fixtures(&self) -> FixtureSet {
        self.recorded.lock().clone()
    }

    pub fn transcript(&self) -> Vec<CallRecord> {
        self.transcript.lock().clone()
    }
}

/// HTTP+JSON transport for Anthropic- and OpenAI-style chat endpoints.
pub struct HttpTransport {
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        HttpTransport { agent }
    }

    fn content_parts(
        request: &ModelRequest,
        family: ProviderFamily,
    ) -> Result<Vec<Value>, TransportError> {
        let mut parts = Vec::new();
        for image in &request.images {
            let part = match (family, image) {
                (ProviderFamily::Claude, ImagePayload::Inline { media_type, data }) => json!({
                    "type": "image",
                    "source": {
                        "type": "base64",
                        "media_type": media_type,
                        "data": base64::engine::general_purpose::STANDARD.encode(data),
                    }
                }),
                (ProviderFamily::Claude, ImagePayload::Stored(r)) => json!({
                    "type": "image",
                    "source": {"type": "url", "url": stored_url(r)?},
                }),
                (ProviderFamily::Gpt, ImagePayload::Inline { media_type, data }) => json!({
                    "type": "image_url",
                    "image_url": {"url": format!(
                        "data:{media_type};base64,{}",
                        base64::engine::general_purpose::STANDARD.encode(data)
                    )},
                }),
                (ProviderFamily::Gpt, ImagePayload::Stored(r)) => json!({
                    "type": "image_url",
                    "image_url": {"url": stored_url(r)?},
                }),
            };
            parts.push(part);
        }
        Ok(parts)
    }

    fn body(request: &ModelRequest, provider: &ProviderConfig) -> Result<Value, TransportError> {
        let images = Self::content_parts(request, provider.family)?;
        let mut images = Some(images);
        let mut system = Vec::new();
        let mut messages = Vec::new();
        for m in &request.messages {
            let role = match m.author {
                Author::System => {
                    system.push(m.text.clone());
                    continue;
                }
                Author::User => "user",
                Author::Assistant => "assistant",
            };
            let mut content = vec![json!({"type": "text", "text": m.text})];
            if role == "user" {
                if let Some(mut parts) = images.take() {
                    parts.extend(content);
                    content = parts;
                }
            }
            messages.push(json!({"role": role, "content": content}));
        }
        Ok(match provider.family {
            ProviderFamily::Claude => json!({
                "model": provider.model,
                "max_tokens": request.max_output,
                "temperature": request.temperature,
                "system": system.join("\n\n"),
                "messages": messages,
            }),
            ProviderFamily::Gpt => {
                let mut all = Vec::new();
                if !system.is_empty() {
                    all.push(json!({"role": "system", "content": system.join("\n\n")}));
                }
                all.extend(messages);
                json!({
                    "model": provider.model,
                    "max_completion_tokens": request.max_output,
                    "temperature": request.temperature,
                    "messages": all,
                })
            }
        })
    }
}

fn stored_url(r: &BlobRef) -> Result<String, TransportError> {
    r.url.clone().ok_or_else(|| {
        TransportError::Rejected(format!("stored image {} has no public url", r.key))
    })
}

impl Transport for HttpTransport {
    fn send(
        &self,
        provider: &ProviderConfig,
        request: &ModelRequest,
    ) -> Result<String, TransportError> {
        let key = std::env::var(&provider.api_key_env).map_err(|_| {
            TransportError::Rejected(format!("credential {} not set", provider.api_key_env))
        })?;
        let body = Self::body(request, provider)?;
        let (url, call) = match provider.family {
            ProviderFamily::Claude => {
                let url = provider
                    .endpoint
                    .clone()
                    .unwrap_or_else(|| "https://api.anthropic.com/v1/messages".into());
                let call = self
                    .agent
                    .post(&url)
                    .header("x-api-key", &key)
                    .header("anthropic-version", "2023-06-01")
                    .send_json(&body);
                (url, call)
            }
            ProviderFamily::Gpt => {
                let url = provider
                    .endpoint
                    .clone()
                    .unwrap_or_else(|| "https://api.openai.com/v1/chat/completions".into());
                let call = self
                    .agent
                    .post(&url)
                    .header("authorization", &format!("Bearer {key}"))
                    .send_json(&body);
                (url, call)
            }
        };
        let mut response = match call {
            Ok(r) => r,
            Err(ureq::Error::Timeout(_)) => return Err(TransportError::Timeout),
            Err(e) => {
                return Err(TransportError::Server {
                    status: 599,
                    message: format!("{url}: {e}"),
                })
            }
        };
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| TransportError::Server {
                status: 599,
                message: e.to_string(),
            })?;
        match status {
            200..=299 => {}
            429 => return Err(TransportError::RateLimited),
            408 => return Err(TransportError::Timeout),
            s if s >= 500 => {
                return Err(TransportError::Server {
                    status: s,
                    message: text,
                })
            }
            s => return Err(TransportError::Rejected(format!("status {s}: {text}"))),
        }
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| TransportError::Rejected(format!("unparseable provider body: {e}")))?;
        let completion = match provider.family {
            ProviderFamily::Claude => value["content"].as_array().map(|parts| {
                parts
                    .iter()
                    .filter_map(|p| p["text"].as_str())
                    .collect::<Vec<_>>()
                    .join("")
            }),
            ProviderFamily::Gpt => value["choices"][0]["message"]["content"]
                .as_str()
                .map(str::to_string),
        };
        completion.ok_or_else(|| TransportError::Rejected("provider body has no text".into()))
    }
}
