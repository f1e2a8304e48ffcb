//! Inference backends behind one contract: a rendered prompt goes in,
//! raw text comes out. The remote backend speaks the JSON
//! chat-completion protocol over HTTP; stubs script outputs for tests;
//! the local micro-transformer backend lives next to the model code.
//! `run_batch` fans a prompt set out with bounded concurrency and
//! returns records in canonical order.

use crate::par;
use crate::prompt::{parse_label, InvalidPolicy, Prompt};
use crate::taxonomy::LabelToken;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::time::{Duration, Instant};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("request timed out after {0} ms")]
    Timeout(u64),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("remote refusal: status {status}: {body}")]
    RemoteRefusal { status: u16, body: String },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("local model failure: {0}")]
    Local(String),
    #[error("scripted stub exhausted after {0} calls")]
    StubExhausted(usize),
}

/// Shared backend settings. `endpoint` is either the literal string
/// "local" or a full chat-completion URL. Credentials are read from the
/// environment variable named by `api_key_env` when present.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub backend_id: String,
    pub endpoint: String,
    /// Model name sent in remote requests.
    pub model: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub timeout_ms: u64,
    pub max_retries: u32,
    /// Base delay for exponential backoff between retries.
    pub backoff_ms: u64,
    pub concurrency_limit: usize,
    pub seed: Option<u64>,
    pub invalid_policy: InvalidPolicy,
    pub api_key_env: String,
    /// Checkpoint path for the local backend.
    pub checkpoint: Option<String>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            backend_id: "local".into(),
            endpoint: "local".into(),
            model: "micro".into(),
            temperature: 0.2,
            max_output_tokens: 4,
            timeout_ms: 30_000,
            max_retries: 3,
            backoff_ms: 250,
            concurrency_limit: 4,
            seed: None,
            invalid_policy: InvalidPolicy::default(),
            api_key_env: "CRASHTEXT_API_KEY".into(),
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawOutput {
    pub text: String,
}

/// Prompt in, raw text out. Implementations must be safe to call from
/// multiple threads at once.
pub trait Backend: Send + Sync {
    fn id(&self) -> &str;
    fn complete(&self, prompt: &Prompt) -> Result<RawOutput, BackendError>;
}

/// A parsed prediction: either one allowed token or a marker that the
/// output failed to parse.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predicted {
    Label(LabelToken),
    Invalid,
}

impl Predicted {
    pub fn label(&self) -> Option<&LabelToken> {
        match self {
            Predicted::Label(t) => Some(t),
            Predicted::Invalid => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub example_id: String,
    pub backend_id: String,
    /// 1-based repetition index within the batch.
    pub run_index: u32,
    pub predicted: Predicted,
    pub gold: LabelToken,
    pub latency_ms: u64,
    /// Set when the invalid-output policy was Drop, so metrics can
    /// exclude the record instead of scoring it wrong.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub dropped: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// One unit of batch work: a rendered prompt with its identity and gold
/// label carried along for the output record.
#[derive(Debug, Clone)]
pub struct BatchItem {
    pub example_id: String,
    pub prompt: Prompt,
    pub gold: LabelToken,
}

// --- remote backend ---

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
    max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Deserialize)]
struct ChatChoiceMessage {
    content: String,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

/// Chat-completion client with exponential-backoff retries on transport
/// failures, timeouts, and retryable statuses (429 and 5xx).
pub struct RemoteBackend {
    config: BackendConfig,
    client: reqwest::blocking::Client,
    api_key: Option<String>,
}

impl RemoteBackend {
    pub fn new(config: BackendConfig) -> Result<RemoteBackend, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let api_key = std::env::var(&config.api_key_env).ok();
        Ok(RemoteBackend {
            config,
            client,
            api_key,
        })
    }

    fn attempt(&self, prompt: &Prompt) -> Result<RawOutput, BackendError> {
        let body = ChatRequest {
            model: &self.config.model,
            messages: vec![ChatMessage {
                role: "user",
                content: &prompt.text,
            }],
            temperature: self.config.temperature,
            max_tokens: self.config.max_output_tokens,
            seed: self.config.seed,
        };
        let mut request = self.client.post(&self.config.endpoint).json(&body);
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = request.send().map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout(self.config.timeout_ms)
            } else {
                BackendError::Transport(e.to_string())
            }
        })?;
        let status = response.status();
        if !status.is_success() {
            let body = response.text().unwrap_or_default();
            return Err(BackendError::RemoteRefusal {
                status: status.as_u16(),
                body: body.chars().take(200).collect(),
            });
        }
        let parsed: ChatResponse = response
            .json()
            .map_err(|e| BackendError::MalformedResponse(e.to_string()))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::MalformedResponse("empty choices array".into()))?;
        Ok(RawOutput {
            text: choice.message.content,
        })
    }
}

fn retryable(err: &BackendError) -> bool {
    match err {
        BackendError::Timeout(_) | BackendError::Transport(_) => true,
        BackendError::RemoteRefusal { status, .. } => *status == 429 || *status >= 500,
        _ => false,
    }
}

impl Backend for RemoteBackend {
    fn id(&self) -> &str {
        &self.config.backend_id
    }

    fn complete(&self, prompt: &Prompt) -> Result<RawOutput, BackendError> {
        let mut delay = Duration::from_millis(self.config.backoff_ms);
        let mut last = None;
        for attempt in 0..=self.config.max_retries {
            match self.attempt(prompt) {
                Ok(out) => return Ok(out),
                Err(err) => {
                    let retry = retryable(&err) && attempt < self.config.max_retries;
                    last = Some(err);
                    if !retry {
                        break;
                    }
                    std::thread::sleep(delay);
                    delay = delay.saturating_mul(2);
                }
            }
        }
        Err(last.expect("at least one attempt ran"))
    }
}

// --- stub backends for tests and dry runs ---

type StubFn = dyn Fn(&Prompt) -> Result<String, BackendError> + Send + Sync;

/// Deterministic scriptable backend. Output is a pure function of the
/// prompt, so batches stay reproducible under any concurrency.
pub struct StubBackend {
    id: String,
    f: Box<StubFn>,
}

impl StubBackend {
    pub fn new<F>(id: impl Into<String>, f: F) -> StubBackend
    where
        F: Fn(&Prompt) -> Result<String, BackendError> + Send + Sync + 'static,
    {
        StubBackend {
            id: id.into(),
            f: Box::new(f),
        }
    }

    /// Always answers with the first allowed token of the prompt.
    pub fn first_allowed(id: impl Into<String>) -> StubBackend {
        StubBackend::new(id, |p: &Prompt| {
            Ok(p.allowed
                .first()
                .map(|t| t.as_str().to_string())
                .unwrap_or_default())
        })
    }

    pub fn constant(id: impl Into<String>, text: impl Into<String>) -> StubBackend {
        let text = text.into();
        StubBackend::new(id, move |_| Ok(text.clone()))
    }
}

impl Backend for StubBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, prompt: &Prompt) -> Result<RawOutput, BackendError> {
        (self.f)(prompt).map(|text| RawOutput { text })
    }
}

// --- batch runner ---

/// Runs every item `runs` times. Individual failures become Invalid
/// records instead of aborting the batch. Output order is canonical:
/// items in input order, run indices ascending within an item, no matter
/// how the work was scheduled.
pub fn run_batch(
    backend: &dyn Backend,
    config: &BackendConfig,
    items: &[BatchItem],
    runs: u32,
) -> Vec<PredictionRecord> {
    let jobs: Vec<(usize, u32)> = (0..items.len())
        .flat_map(|i| (1..=runs).map(move |r| (i, r)))
        .collect();
    par::map_indexed_bounded(&jobs, config.concurrency_limit, |_, &(item_idx, run_index)| {
        let item = &items[item_idx];
        let started = Instant::now();
        let (predicted, dropped, error) = run_one(backend, config, &item.prompt);
        PredictionRecord {
            example_id: item.example_id.clone(),
            backend_id: backend.id().to_string(),
            run_index,
            predicted,
            gold: item.gold.clone(),
            latency_ms: started.elapsed().as_millis() as u64,
            dropped,
            error,
        }
    })
}

fn run_one(
    backend: &dyn Backend,
    config: &BackendConfig,
    prompt: &Prompt,
) -> (Predicted, bool, Option<String>) {
    match backend.complete(prompt) {
        Ok(out) => match parse_label(&out.text, &prompt.allowed) {
            Ok(token) => (Predicted::Label(token), false, None),
            Err(first_err) => match config.invalid_policy {
                InvalidPolicy::TreatAsWrong => (Predicted::Invalid, false, Some(first_err.to_string())),
                InvalidPolicy::Drop => (Predicted::Invalid, true, Some(first_err.to_string())),
                InvalidPolicy::RetryOnce => match backend.complete(prompt) {
                    Ok(second) => match parse_label(&second.text, &prompt.allowed) {
                        Ok(token) => (Predicted::Label(token), false, None),
                        Err(e) => (Predicted::Invalid, false, Some(e.to_string())),
                    },
                    Err(e) => (Predicted::Invalid, false, Some(e.to_string())),
                },
            },
        },
        Err(e) => (Predicted::Invalid, false, Some(e.to_string())),
    }
}

// --- prediction artifacts ---

/// Version and seed stamps carried at the head of every prediction file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub backend_id: String,
    pub template_version: String,
    pub taxonomy_version: String,
    #[serde(default)]
    pub config_digest: String,
    pub temperature: f64,
    pub seed: Option<u64>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum PredLine {
    Meta(RunMeta),
    Prediction(PredictionRecord),
}

pub fn write_predictions(
    path: impl AsRef<Path>,
    meta: &RunMeta,
    records: &[PredictionRecord],
) -> std::io::Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut file, &PredLine::Meta(meta.clone()))?;
    file.write_all(b"\n")?;
    for record in records {
        serde_json::to_writer(&mut file, &PredLine::Prediction(record.clone()))?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_predictions(
    path: impl AsRef<Path>,
) -> std::io::Result<(Option<RunMeta>, Vec<PredictionRecord>)> {
    let file = BufReader::new(std::fs::File::open(path)?);
    let mut meta = None;
    let mut records = Vec::new();
    for line in file.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: PredLine = serde_json::from_str(&line)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        match parsed {
            PredLine::Meta(m) => meta = Some(m),
            PredLine::Prediction(r) => records.push(r),
        }
    }
    Ok((meta, records))
}
