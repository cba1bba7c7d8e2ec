//! LLM backends and reply parsing.
//!
//! [`HttpChatBackend`] talks to an OpenAI-compatible chat-completions
//! endpoint. [`ScriptedBackend`] answers from an ordered rule list and is
//! what the offline demos and test suites run against. [`MeteredBackend`]
//! wraps either one with token counters and an optional prompt log.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::LlmError;
use crate::transport::{self, TransportError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub repetition_penalty: Option<f64>,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_tokens: 200,
            repetition_penalty: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmReply {
    pub text: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
}

/// Rough token count for backends that do not report usage.
pub fn estimate_tokens(text: &str) -> u64 {
    (text.chars().count() as u64).div_ceil(4)
}

pub trait LlmBackend: Send + Sync {
    fn generate(&self, prompt: &str, params: &GenerationParams) -> Result<LlmReply, LlmError>;
}

impl<B: LlmBackend + ?Sized> LlmBackend for std::sync::Arc<B> {
    fn generate(&self, prompt: &str, params: &GenerationParams) -> Result<LlmReply, LlmError> {
        (**self).generate(prompt, params)
    }
}

impl<B: LlmBackend + ?Sized> LlmBackend for &B {
    fn generate(&self, prompt: &str, params: &GenerationParams) -> Result<LlmReply, LlmError> {
        (**self).generate(prompt, params)
    }
}

/// How a script rule recognizes a prompt.
#[derive(Debug, Clone)]
pub enum Matcher {
    Contains(String),
    AllOf(Vec<String>),
    Regex(Regex),
}

impl Matcher {
    pub fn regex(pattern: &str) -> Result<Self, regex::Error> {
        Ok(Matcher::Regex(Regex::new(pattern)?))
    }

    pub fn matches(&self, prompt: &str) -> bool {
        match self {
            Matcher::Contains(s) => prompt.contains(s.as_str()),
            Matcher::AllOf(parts) => parts.iter().all(|p| prompt.contains(p.as_str())),
            Matcher::Regex(re) => re.is_match(prompt),
        }
    }
}

/// Serialized form of a rule: exactly one of the matcher fields is set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RuleSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub all_of: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regex: Option<String>,
    pub response: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptSpec {
    pub rules: Vec<RuleSpec>,
    #[serde(default)]
    pub default_response: String,
}

#[derive(Debug, Clone)]
pub struct ScriptRule {
    pub matcher: Matcher,
    pub response: String,
}

/// Deterministic backend: the first rule whose matcher accepts the prompt
/// supplies the reply; otherwise `default_response`.
#[derive(Debug, Clone, Default)]
pub struct ScriptedBackend {
    rules: Vec<ScriptRule>,
    default_response: String,
}

impl ScriptedBackend {
    pub fn new(default_response: impl Into<String>) -> Self {
        Self {
            rules: Vec::new(),
            default_response: default_response.into(),
        }
    }

    pub fn rule(mut self, matcher: Matcher, response: impl Into<String>) -> Self {
        self.push(matcher, response);
        self
    }

    pub fn push(&mut self, matcher: Matcher, response: impl Into<String>) {
        self.rules.push(ScriptRule {
            matcher,
            response: response.into(),
        });
    }

    pub fn rules(&self) -> &[ScriptRule] {
        &self.rules
    }

    pub fn from_spec(spec: &ScriptSpec) -> Result<Self, String> {
        let mut backend = Self::new(spec.default_response.clone());
        for (i, rule) in spec.rules.iter().enumerate() {
            let matcher = match (&rule.contains, &rule.all_of, &rule.regex) {
                (Some(s), None, None) => Matcher::Contains(s.clone()),
                (None, Some(parts), None) => Matcher::AllOf(parts.clone()),
                (None, None, Some(p)) => {
                    Matcher::regex(p).map_err(|e| format!("rule {i}: bad regex: {e}"))?
                }
                _ => return Err(format!("rule {i}: set exactly one of contains, all_of, regex")),
            };
            backend.push(matcher, rule.response.clone());
        }
        Ok(backend)
    }

    pub fn to_spec(&self) -> ScriptSpec {
        let rules = self
            .rules
            .iter()
            .map(|r| {
                let mut spec = RuleSpec {
                    contains: None,
                    all_of: None,
                    regex: None,
                    response: r.response.clone(),
                };
                match &r.matcher {
                    Matcher::Contains(s) => spec.contains = Some(s.clone()),
                    Matcher::AllOf(p) => spec.all_of = Some(p.clone()),
                    Matcher::Regex(re) => spec.regex = Some(re.as_str().to_string()),
                }
                spec
            })
            .collect();
        ScriptSpec {
            rules,
            default_response: self.default_response.clone(),
        }
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, String> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read script {}: {e}", path.display()))?;
        let spec: ScriptSpec = serde_json::from_str(&text)
            .map_err(|e| format!("invalid script {}: {e}", path.display()))?;
        Self::from_spec(&spec)
    }

    fn respond(&self, prompt: &str) -> &str {
        self.rules
            .iter()
            .find(|r| r.matcher.matches(prompt))
            .map_or(self.default_response.as_str(), |r| r.response.as_str())
    }
}

impl LlmBackend for ScriptedBackend {
    fn generate(&self, prompt: &str, _params: &GenerationParams) -> Result<LlmReply, LlmError> {
        if prompt.trim().is_empty() {
            return Err(LlmError::EmptyPrompt);
        }
        let text = self.respond(prompt);
        if text.trim().is_empty() {
            return Err(LlmError::EmptyCompletion);
        }
        Ok(LlmReply {
            text: text.to_string(),
            input_tokens: estimate_tokens(prompt),
            output_tokens: estimate_tokens(text),
        })
    }
}

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
    repetition_penalty: Option<f64>,
}

#[derive(Deserialize)]
struct ChatResponse {
    #[serde(default)]
    choices: Vec<ChatChoice>,
    usage: Option<ChatUsage>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
}

#[derive(Deserialize)]
struct ChatChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChatUsage {
    prompt_tokens: u64,
    completion_tokens: u64,
}

/// OpenAI-compatible chat-completions client. Each prompt is sent as a
/// single user message; the first choice is returned.
pub struct HttpChatBackend {
    url: String,
    model: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpChatBackend {
    pub fn new(
        endpoint: &str,
        model: &str,
        api_key: Option<String>,
        timeout: Duration,
    ) -> Result<Self, LlmError> {
        Ok(Self {
            url: transport::endpoint_url(endpoint, "chat/completions"),
            model: model.to_string(),
            api_key,
            client: transport::client(timeout).map_err(LlmError::BackendUnavailable)?,
        })
    }
}

impl LlmBackend for HttpChatBackend {
    fn generate(&self, prompt: &str, params: &GenerationParams) -> Result<LlmReply, LlmError> {
        if prompt.trim().is_empty() {
            return Err(LlmError::EmptyPrompt);
        }
        let body = ChatRequest {
            model: &self.model,
            messages: vec![ChatMessage {
                role: "user",
                content: prompt,
            }],
            temperature: params.temperature,
            max_tokens: params.max_tokens,
            repetition_penalty: params.repetition_penalty,
        };
        let response: ChatResponse =
            transport::post_json(&self.client, &self.url, self.api_key.as_deref(), &body).map_err(
                |e| match e {
                    // the single retry already happened in the transport layer
                    TransportError::Timeout => LlmError::BackendUnavailable("timed out twice".into()),
                    other => LlmError::BackendUnavailable(other.to_string()),
                },
            )?;
        let text = response
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .filter(|t| !t.trim().is_empty())
            .ok_or(LlmError::EmptyCompletion)?;
        let (input_tokens, output_tokens) = match response.usage {
            Some(u) => (u.prompt_tokens, u.completion_tokens),
            None => (estimate_tokens(prompt), estimate_tokens(&text)),
        };
        Ok(LlmReply {
            text,
            input_tokens,
            output_tokens,
        })
    }
}

/// Session token counters. Only [`UsageCounter::reset`] lowers them.
#[derive(Debug, Default)]
pub struct UsageCounter {
    calls: AtomicU64,
    input_tokens: AtomicU64,
    output_tokens: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub calls: u64,
    pub input_tokens: u64,
    pub output_tokens: u64,
}

impl UsageCounter {
    pub fn record(&self, reply: &LlmReply) {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.input_tokens.fetch_add(reply.input_tokens, Ordering::SeqCst);
        self.output_tokens.fetch_add(reply.output_tokens, Ordering::SeqCst);
    }

    pub fn snapshot(&self) -> Usage {
        Usage {
            calls: self.calls.load(Ordering::SeqCst),
            input_tokens: self.input_tokens.load(Ordering::SeqCst),
            output_tokens: self.output_tokens.load(Ordering::SeqCst),
        }
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::SeqCst);
        self.input_tokens.store(0, Ordering::SeqCst);
        self.output_tokens.store(0, Ordering::SeqCst);
    }
}

/// Wraps a backend with usage counters and, optionally, a log of every
/// prompt sent.
pub struct MeteredBackend<B> {
    inner: B,
    usage: UsageCounter,
    log: Option<Mutex<Vec<String>>>,
}

impl<B: LlmBackend> MeteredBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            usage: UsageCounter::default(),
            log: None,
        }
    }

    pub fn with_log(inner: B) -> Self {
        Self {
            log: Some(Mutex::new(Vec::new())),
            ..Self::new(inner)
        }
    }

    pub fn usage(&self) -> &UsageCounter {
        &self.usage
    }

    pub fn prompts(&self) -> Vec<String> {
        self.log
            .as_ref()
            .map(|l| l.lock().expect("prompt log poisoned").clone())
            .unwrap_or_default()
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }
}

impl<B: LlmBackend> LlmBackend for MeteredBackend<B> {
    fn generate(&self, prompt: &str, params: &GenerationParams) -> Result<LlmReply, LlmError> {
        if let Some(log) = &self.log {
            log.lock().expect("prompt log poisoned").push(prompt.to_string());
        }
        let reply = self.inner.generate(prompt, params)?;
        self.usage.record(&reply);
        Ok(reply)
    }
}

/// Reads the judge reply: the first integer in `text`. `0` or an index
/// outside `1..=candidate_count` means no guidance. Returns the 1-based
/// candidate index.
pub fn parse_judgment(text: &str, candidate_count: usize) -> Result<Option<usize>, LlmError> {
    let digits = text
        .split(|c: char| !c.is_ascii_digit())
        .find(|t| !t.is_empty())
        .ok_or_else(|| LlmError::UnparseableJudgment(text.to_string()))?;
    // values too large for usize are out of range anyway
    let index = digits.parse::<usize>().unwrap_or(usize::MAX);
    Ok((1..=candidate_count).contains(&index).then_some(index))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepOutput {
    Subquestion(String),
    FinalAnswer(String),
}

fn strip_marker<'a>(line: &'a str, marker: &str) -> Option<&'a str> {
    let line = line.trim().trim_start_matches(['*', '-', '#']).trim_start();
    let head = line.get(..marker.len())?;
    if head.eq_ignore_ascii_case(marker) {
        let payload = line[marker.len()..].trim().trim_matches('*').trim();
        (!payload.is_empty()).then_some(payload)
    } else {
        None
    }
}

/// Reads a decomposition reply. A `Final answer:` line wins over a
/// `Subquestion:` line; otherwise the first subquestion is used.
pub fn parse_decomposition(text: &str) -> Result<StepOutput, LlmError> {
    let mut subquestion = None;
    for line in text.lines() {
        if let Some(answer) = strip_marker(line, "final answer:") {
            return Ok(StepOutput::FinalAnswer(answer.to_string()));
        }
        if subquestion.is_none() {
            subquestion = strip_marker(line, "subquestion:");
        }
    }
    subquestion
        .map(|s| StepOutput::Subquestion(s.to_string()))
        .ok_or_else(|| LlmError::UnparseableDecomposition(text.to_string()))
}

/// First non-empty line of a free-form reply, with a leading `A:` or
/// `Answer:` label removed.
pub fn first_line(text: &str) -> Option<String> {
    let line = text.lines().map(str::trim).find(|l| !l.is_empty())?;
    let line = strip_marker(line, "answer:")
        .or_else(|| strip_marker(line, "a:"))
        .or_else(|| strip_marker(line, "rewritten question:"))
        .unwrap_or(line);
    Some(line.to_string())
}
