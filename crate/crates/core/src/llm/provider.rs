use std::collections::HashMap;
use std::path::Path;
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde_json::{json, Value};

use super::eval::read_archive;
use super::{LlmError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProviderKind {
    OpenAi,
    Gemini,
}

impl ProviderKind {
    pub fn id(self) -> &'static str {
        match self {
            ProviderKind::OpenAi => "openai",
            ProviderKind::Gemini => "gemini",
        }
    }

    pub fn key_var(self) -> &'static str {
        match self {
            ProviderKind::OpenAi => "OPENAI_API_KEY",
            ProviderKind::Gemini => "GEMINI_API_KEY",
        }
    }

    pub fn default_base_url(self) -> &'static str {
        match self {
            ProviderKind::OpenAi => "https://api.openai.com",
            ProviderKind::Gemini => "https://generativelanguage.googleapis.com",
        }
    }
}

impl FromStr for ProviderKind {
    type Err = LlmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "openai" => Ok(ProviderKind::OpenAi),
            "gemini" | "google" => Ok(ProviderKind::Gemini),
            _ => Err(LlmError::UnknownProvider(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LlmRequest {
    pub provider: ProviderKind,
    pub model_id: String,
    pub prompt: String,
    pub temperature: f64,
    /// Ask the provider not to block content, where it allows that.
    pub safety_overrides: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

/// Sends a JSON POST. `Err` means no HTTP response was received at all.
pub trait Transport: Send + Sync {
    fn post_json(&self, url: &str, headers: &[(&str, String)], body: &Value) -> Result<HttpResponse, String>;
}

pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new(timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self { agent }
    }
}

impl Default for UreqTransport {
    fn default() -> Self {
        Self::new(Duration::from_secs(120))
    }
}

impl Transport for UreqTransport {
    fn post_json(&self, url: &str, headers: &[(&str, String)], body: &Value) -> Result<HttpResponse, String> {
        let mut request = self.agent.post(url).content_type("application/json");
        for (k, v) in headers {
            request = request.header(*k, v.as_str());
        }
        let mut response = request.send(body.to_string()).map_err(|e| e.to_string())?;
        let status = response.status().as_u16();
        let body = response.body_mut().read_to_string().map_err(|e| e.to_string())?;
        Ok(HttpResponse { status, body })
    }
}

pub type Sleeper = Arc<dyn Fn(Duration) + Send + Sync>;

#[derive(Clone)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    /// Delay before the second attempt; doubled for each further one.
    pub base_delay: Duration,
    pub sleep: Sleeper,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay: Duration::from_millis(500),
            sleep: Arc::new(std::thread::sleep),
        }
    }
}

fn request_parts(request: &LlmRequest, base_url: &str, key: &str) -> (String, Vec<(&'static str, String)>, Value) {
    match request.provider {
        ProviderKind::OpenAi => (
            format!("{base_url}/v1/chat/completions"),
            vec![("Authorization", format!("Bearer {key}"))],
            json!({
                "model": request.model_id,
                "messages": [{"role": "user", "content": request.prompt}],
                "temperature": request.temperature,
            }),
        ),
        ProviderKind::Gemini => {
            let mut body = json!({
                "contents": [{"role": "user", "parts": [{"text": request.prompt}]}],
                "generationConfig": {"temperature": request.temperature},
            });
            if request.safety_overrides {
                let categories = [
                    "HARM_CATEGORY_HARASSMENT",
                    "HARM_CATEGORY_HATE_SPEECH",
                    "HARM_CATEGORY_SEXUALLY_EXPLICIT",
                    "HARM_CATEGORY_DANGEROUS_CONTENT",
                ];
                body["safetySettings"] = categories
                    .iter()
                    .map(|c| json!({"category": c, "threshold": "BLOCK_NONE"}))
                    .collect();
            }
            (
                format!("{base_url}/v1beta/models/{}:generateContent", request.model_id),
                vec![("x-goog-api-key", key.to_string())],
                body,
            )
        }
    }
}

/// Completion text of a successful response. Blocked or empty candidates
/// yield an empty string.
fn extract_text(kind: ProviderKind, body: &str) -> Result<String, String> {
    let v: Value = serde_json::from_str(body).map_err(|e| format!("response is not JSON: {e}"))?;
    Ok(match kind {
        ProviderKind::OpenAi => v["choices"][0]["message"]["content"].as_str().unwrap_or("").to_string(),
        ProviderKind::Gemini => v["candidates"][0]["content"]["parts"]
            .as_array()
            .map(|parts| parts.iter().filter_map(|p| p["text"].as_str()).collect::<String>())
            .unwrap_or_default(),
    })
}

/// One completion, retrying network failures, 429 and 5xx with exponential backoff.
pub fn classify_remote(
    request: &LlmRequest,
    api_key: Option<&str>,
    base_url: &str,
    transport: &dyn Transport,
    retry: &RetryPolicy,
) -> Result<String> {
    let provider = request.provider.id().to_string();
    if request.prompt.trim().is_empty() {
        return Err(LlmError::EmptyText);
    }
    if request.model_id.trim().is_empty() {
        return Err(LlmError::EmptyModel);
    }
    let key = api_key.filter(|k| !k.is_empty()).ok_or_else(|| LlmError::AuthError {
        provider: provider.clone(),
        reason: format!("{} is not set", request.provider.key_var()),
    })?;
    let (url, headers, body) = request_parts(request, base_url.trim_end_matches('/'), key);
    let mut last = None;
    for attempt in 1..=retry.max_attempts.max(1) {
        if attempt > 1 {
            (retry.sleep)(retry.base_delay * 2u32.pow(attempt - 2));
        }
        let failure = match transport.post_json(&url, &headers, &body) {
            Ok(r) if (200..300).contains(&r.status) => {
                return extract_text(request.provider, &r.body).map_err(|message| LlmError::ProviderError {
                    provider,
                    status: Some(r.status),
                    message,
                });
            }
            Ok(r) if r.status == 401 || r.status == 403 => {
                return Err(LlmError::AuthError {
                    provider,
                    reason: format!("HTTP {}: {}", r.status, r.body),
                });
            }
            Ok(r) if r.status == 429 => LlmError::RateLimited {
                provider: provider.clone(),
                attempts: attempt,
            },
            Ok(r) if r.status >= 500 => LlmError::ProviderError {
                provider: provider.clone(),
                status: Some(r.status),
                message: r.body,
            },
            Ok(r) => {
                return Err(LlmError::ProviderError {
                    provider,
                    status: Some(r.status),
                    message: r.body,
                });
            }
            Err(message) => LlmError::ProviderError {
                provider: provider.clone(),
                status: None,
                message,
            },
        };
        last = Some(failure);
    }
    Err(last.expect("at least one attempt"))
}

/// Something that answers prompts.
pub trait Provider: Send + Sync {
    fn id(&self) -> String;
    fn complete(&self, prompt: &str) -> Result<String>;
}

pub struct RemoteProvider {
    pub kind: ProviderKind,
    pub model_id: String,
    pub temperature: f64,
    pub safety_overrides: bool,
    pub api_key: Option<String>,
    pub base_url: String,
    pub transport: Arc<dyn Transport>,
    pub retry: RetryPolicy,
    /// Minimum spacing between request starts.
    pub min_interval: Duration,
    last_start: Mutex<Option<Instant>>,
}

impl RemoteProvider {
    /// Key from the provider's environment variable; `base_url` defaults to the public endpoint.
    pub fn from_env(kind: ProviderKind, model_id: &str) -> Self {
        Self::new(kind, model_id, std::env::var(kind.key_var()).ok(), Arc::new(UreqTransport::default()))
    }

    pub fn new(kind: ProviderKind, model_id: &str, api_key: Option<String>, transport: Arc<dyn Transport>) -> Self {
        Self {
            kind,
            model_id: model_id.to_string(),
            temperature: 0.0,
            safety_overrides: kind == ProviderKind::Gemini,
            api_key,
            base_url: kind.default_base_url().to_string(),
            transport,
            retry: RetryPolicy::default(),
            min_interval: Duration::ZERO,
            last_start: Mutex::new(None),
        }
    }

    fn pace(&self) {
        if self.min_interval.is_zero() {
            return;
        }
        let mut last = self.last_start.lock().expect("pacing lock");
        if let Some(t) = *last {
            let since = t.elapsed();
            if since < self.min_interval {
                (self.retry.sleep)(self.min_interval - since);
            }
        }
        *last = Some(Instant::now());
    }
}

impl Provider for RemoteProvider {
    fn id(&self) -> String {
        format!("{}:{}", self.kind.id(), self.model_id)
    }

    fn complete(&self, prompt: &str) -> Result<String> {
        self.pace();
        let request = LlmRequest {
            provider: self.kind,
            model_id: self.model_id.clone(),
            prompt: prompt.to_string(),
            temperature: self.temperature,
            safety_overrides: self.safety_overrides,
        };
        classify_remote(&request, self.api_key.as_deref(), &self.base_url, self.transport.as_ref(), &self.retry)
    }
}

/// Answers from an earlier verdict archive, keyed by prompt.
pub struct ReplayProvider {
    responses: HashMap<String, String>,
}

impl ReplayProvider {
    pub fn from_archive(path: &Path) -> Result<Self> {
        let responses = read_archive(path)?.into_iter().map(|r| (r.prompt, r.raw)).collect();
        Ok(Self { responses })
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, String)>) -> Self {
        Self {
            responses: pairs.into_iter().collect(),
        }
    }
}

impl Provider for ReplayProvider {
    fn id(&self) -> String {
        "replay".into()
    }

    fn complete(&self, prompt: &str) -> Result<String> {
        self.responses
            .get(prompt)
            .cloned()
            .ok_or_else(|| LlmError::NotInReplay(prompt.chars().take(60).collect()))
    }
}
