//! Chat-completion backends: an HTTP client for hosted APIs and an offline
//! deterministic mock.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::Dimension;

use super::UNKNOWN_ANSWER;

pub const ENV_URL: &str = "PROCKT_CHAT_URL";
pub const ENV_MODEL: &str = "PROCKT_CHAT_MODEL";
pub const ENV_API_KEY: &str = "PROCKT_API_KEY";
pub const DEFAULT_URL: &str = "https://api.openai.com/v1/chat/completions";
pub const DEFAULT_MODEL: &str = "gpt-5";

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("HTTP status {0}")]
    Status(u16),
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("client configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Rejected(String),
}

impl ClientError {
    /// Configuration problems will not go away on retry.
    pub fn is_retryable(&self) -> bool {
        !matches!(self, ClientError::Config(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChatParams {
    pub temperature: f64,
    /// Attempts per stage before the interaction is flagged.
    pub max_retries: u32,
    pub timeout: Duration,
}

impl Default for ChatParams {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_retries: 3,
            timeout: Duration::from_secs(120),
        }
    }
}

/// One chat completion. Implementations make a single attempt; retrying is
/// the caller's job (see `params.max_retries`).
pub trait ChatClient: Send + Sync {
    fn complete(&self, system: &str, user: &str, params: &ChatParams) -> Result<String, ClientError>;
}

impl<C: ChatClient + ?Sized> ChatClient for &C {
    fn complete(&self, system: &str, user: &str, params: &ChatParams) -> Result<String, ClientError> {
        (**self).complete(system, user, params)
    }
}

/// OpenAI-compatible `chat/completions` endpoint.
#[derive(Debug, Clone)]
pub struct HttpChatClient {
    pub url: String,
    pub model: String,
    pub api_key: Option<String>,
}

impl HttpChatClient {
    pub fn new(url: impl Into<String>, model: impl Into<String>, api_key: Option<String>) -> Self {
        Self {
            url: url.into(),
            model: model.into(),
            api_key,
        }
    }

    /// Reads `PROCKT_CHAT_URL`, `PROCKT_CHAT_MODEL` and `PROCKT_API_KEY`
    /// (falling back to `OPENAI_API_KEY`).
    pub fn from_env() -> Self {
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        Self {
            url: var(ENV_URL).unwrap_or_else(|| DEFAULT_URL.into()),
            model: var(ENV_MODEL).unwrap_or_else(|| DEFAULT_MODEL.into()),
            api_key: var(ENV_API_KEY).or_else(|| var("OPENAI_API_KEY")),
        }
    }

    pub fn request_body(&self, system: &str, user: &str, params: &ChatParams) -> Value {
        let mut messages = Vec::new();
        if !system.is_empty() {
            messages.push(json!({"role": "system", "content": system}));
        }
        messages.push(json!({"role": "user", "content": user}));
        json!({"model": self.model, "messages": messages, "temperature": params.temperature})
    }
}

impl ChatClient for HttpChatClient {
    fn complete(&self, system: &str, user: &str, params: &ChatParams) -> Result<String, ClientError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(params.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let mut req = agent.post(&self.url);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(self.request_body(system, user, params))
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            return Err(match status {
                401 | 403 | 404 => ClientError::Config(format!("HTTP status {status} from {}", self.url)),
                _ => ClientError::Status(status),
            });
        }
        let body: Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| ClientError::Malformed(e.to_string()))?;
        body.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| ClientError::Malformed("missing choices[0].message.content".into()))
    }
}

// ---------------------------------------------------------------------------
// mock
// ---------------------------------------------------------------------------

const MIN_INDICATORS: usize = 8;
const MAX_INDICATORS: usize = 15;

/// Offline stand-in that emits schema-valid completions for all three
/// stages. Output depends only on the prompt text.
#[derive(Debug)]
pub struct MockChatClient {
    calls: AtomicUsize,
    /// Probability that an answered indicator is judged satisfied.
    pub pass_rate: f64,
    /// Probability that the student stage answers "I don't know".
    pub unknown_rate: f64,
}

impl Default for MockChatClient {
    fn default() -> Self {
        Self {
            calls: AtomicUsize::new(0),
            pass_rate: 0.7,
            unknown_rate: 0.15,
        }
    }
}

fn prompt_rng(system: &str, user: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(system.as_bytes());
    h.update([0u8]);
    h.update(user.as_bytes());
    let digest = h.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}

/// Text after the last dashed separator line, i.e. the filled-in part.
fn filled_tail(prompt: &str) -> &str {
    let mut pos = 0;
    let mut offset = 0;
    for line in prompt.split_inclusive('\n') {
        let t = line.trim();
        if t.len() >= 20 && t.bytes().all(|b| b == b'-') {
            pos = offset + line.len();
        }
        offset += line.len();
    }
    &prompt[pos..]
}

fn between<'a>(text: &'a str, start: &str, end: &str) -> Option<&'a str> {
    let from = text.find(start)? + start.len();
    let rest = &text[from..];
    Some(match rest.find(end) {
        Some(i) => &rest[..i],
        None => rest,
    })
}

/// Codes in order of appearance in a JSON object or list of single-key
/// objects.
fn codes_in(json_text: &str) -> Vec<(String, String)> {
    let value: Value = match serde_json::from_str(json_text.trim()) {
        Ok(v) => v,
        Err(_) => return Vec::new(),
    };
    let pair = |(k, v): (&String, &Value)| (k.clone(), v.as_str().unwrap_or_default().to_string());
    match value {
        Value::Object(m) => m.iter().map(pair).collect(),
        Value::Array(items) => items
            .iter()
            .filter_map(Value::as_object)
            .flat_map(|m| m.iter().map(pair).collect::<Vec<_>>())
            .collect(),
        _ => Vec::new(),
    }
}

impl MockChatClient {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn indicators(&self, tail: &str, rng: &mut ChaCha8Rng) -> String {
        let problem = between(tail, "Problem (in Korean): ", "\n").unwrap_or("").trim();
        let short: String = problem.chars().take(40).collect();
        let n = rng.random_range(MIN_INDICATORS..=MAX_INDICATORS);
        let mut per_dim = [1usize; 4];
        for _ in 4..n {
            per_dim[rng.random_range(0..4)] += 1;
        }
        let verbs = ["Identify", "Choose", "Compute", "Justify"];
        let mut entries = Vec::new();
        for d in Dimension::ALL {
            for k in 1..=per_dim[d.index()] {
                let code = format!("{}{}", d.code(), k);
                let text = format!("{} step {} for: {}", verbs[d.index()], k, short);
                entries.push(json!({ code: text }));
            }
        }
        let body = serde_json::to_string_pretty(&json!({"mathematical_proficiency_indicators": entries}))
            .expect("json values serialize");
        if rng.random_bool(0.5) {
            format!("```json\n{body}\n```")
        } else {
            body
        }
    }

    fn responses(&self, tail: &str, rng: &mut ChaCha8Rng) -> String {
        let rubric = between(tail, "Input Indicators: ", "\n\nProblem (in Korean):").unwrap_or("");
        let trace = between(tail, "My solving process (OCR):", "\n\nMy answer:").unwrap_or("");
        let lines: Vec<&str> = trace.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        let mut out = serde_json::Map::new();
        for (i, (code, _)) in codes_in(rubric).into_iter().enumerate() {
            let answer = if lines.is_empty() || rng.random_bool(self.unknown_rate) {
                UNKNOWN_ANSWER.to_string()
            } else {
                lines[i % lines.len()].to_string()
            };
            out.insert(code, Value::String(answer));
        }
        serde_json::to_string_pretty(&Value::Object(out)).expect("json values serialize")
    }

    fn verdicts(&self, tail: &str, rng: &mut ChaCha8Rng) -> String {
        let answers = between(tail, "Answer Indicate: ", "\u{0}").unwrap_or("");
        let mut out = serde_json::Map::new();
        for (code, answer) in codes_in(answers) {
            let pass = answer != UNKNOWN_ANSWER && rng.random_bool(self.pass_rate);
            out.insert(code, json!(pass as u8));
        }
        serde_json::to_string(&Value::Object(out)).expect("json values serialize")
    }
}

impl ChatClient for MockChatClient {
    fn complete(&self, system: &str, user: &str, _params: &ChatParams) -> Result<String, ClientError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let mut rng = prompt_rng(system, user);
        let tail = filled_tail(user);
        if user.starts_with("You are Student GPT") {
            Ok(self.responses(tail, &mut rng))
        } else if user.starts_with("You are Teacher GPT. Your task is to evaluate") {
            Ok(self.verdicts(tail, &mut rng))
        } else if user.starts_with("You are Teacher GPT") {
            Ok(self.indicators(tail, &mut rng))
        } else {
            Err(ClientError::Rejected("mock client does not recognise this prompt".into()))
        }
    }
}
