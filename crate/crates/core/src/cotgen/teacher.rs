//! Remote teacher client: chat-completions POST with exponential
//! backoff. One post never blocks the pipeline; callers convert
//! exhausted budgets into sidecar skip records.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::time::Duration;

#[derive(Debug, thiserror::Error)]
pub enum TeacherError {
    #[error("endpoint returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("request failed: {0}")]
    Transport(String),
    #[error("timed out after {0} ms")]
    Timeout(u128),
    #[error("malformed teacher response: {0}")]
    Malformed(String),
    #[error("retry budget of {budget} attempts exhausted; last error: {last}")]
    BudgetExhausted { budget: usize, last: String },
}

impl TeacherError {
    /// Server-side and transport hiccups are worth retrying; client
    /// errors other than 429 are not.
    fn retryable(&self) -> bool {
        match self {
            TeacherError::Transport(_) | TeacherError::Timeout(_) | TeacherError::Malformed(_) => true,
            TeacherError::Status { status, .. } => *status == 429 || *status >= 500,
            TeacherError::BudgetExhausted { .. } => false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TeacherEndpoint {
    pub url: String,
    pub token: Option<String>,
    pub model: String,
    pub timeout: Duration,
    /// Total attempts per post, including the first.
    pub retry_budget: usize,
    pub backoff_base: Duration,
    /// Bounded in-flight requests for the batch pipeline.
    pub parallel: usize,
}

impl TeacherEndpoint {
    pub fn new(url: impl Into<String>, model: impl Into<String>) -> Self {
        TeacherEndpoint {
            url: url.into(),
            token: None,
            model: model.into(),
            timeout: Duration::from_secs(30),
            retry_budget: 3,
            backoff_base: Duration::from_millis(500),
            parallel: 4,
        }
    }

    /// Credentials come from the environment: TEACHER_URL (required),
    /// TEACHER_TOKEN (optional), TEACHER_MODEL (optional).
    pub fn from_env() -> Result<Self> {
        let url = std::env::var("TEACHER_URL")
            .map_err(|_| Error::Config("TEACHER_URL is not set; required for --teacher remote".into()))?;
        let model = std::env::var("TEACHER_MODEL").unwrap_or_else(|_| "teacher".to_string());
        let mut ep = TeacherEndpoint::new(url, model);
        ep.token = std::env::var("TEACHER_TOKEN").ok();
        Ok(ep)
    }
}

/// One rendered prompt bound for the teacher. Per-request budget and
/// timeout override the endpoint defaults when set.
#[derive(Debug, Clone)]
pub struct TeacherRequest {
    pub post_id: String,
    pub prompt: String,
    pub retry_budget: Option<usize>,
    pub timeout: Option<Duration>,
}

impl TeacherRequest {
    pub fn new(post_id: impl Into<String>, prompt: impl Into<String>) -> Self {
        TeacherRequest {
            post_id: post_id.into(),
            prompt: prompt.into(),
            retry_budget: None,
            timeout: None,
        }
    }
}

#[derive(Debug)]
pub struct TeacherReply {
    pub think: String,
    /// Attempts consumed, including the successful one.
    pub attempts: usize,
}

/// Failure with its attempt accounting, for sidecar records.
#[derive(Debug)]
pub struct TeacherFailure {
    pub error: TeacherError,
    pub attempts: usize,
}

/// One skipped post in the errors sidecar.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipRecord {
    pub post_id: String,
    pub reason: String,
    pub attempts: usize,
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
}

#[derive(Deserialize)]
struct ChatResponseMessage {
    content: String,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatResponseMessage,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

fn truncate(s: &str) -> String {
    const LIMIT: usize = 200;
    if s.len() <= LIMIT {
        s.to_string()
    } else {
        let cut = s
            .char_indices()
            .take_while(|(i, _)| *i < LIMIT)
            .last()
            .map(|(i, c)| i + c.len_utf8())
            .unwrap_or(0);
        format!("{}...", &s[..cut])
    }
}

fn attempt_once(
    client: &reqwest::blocking::Client,
    req: &TeacherRequest,
    ep: &TeacherEndpoint,
    timeout: Duration,
) -> std::result::Result<String, TeacherError> {
    let body = ChatRequest {
        model: &ep.model,
        messages: vec![ChatMessage {
            role: "user",
            content: &req.prompt,
        }],
    };
    let mut builder = client.post(&ep.url).timeout(timeout).json(&body);
    if let Some(token) = &ep.token {
        builder = builder.bearer_auth(token);
    }
    let resp = builder.send().map_err(|e| {
        if e.is_timeout() {
            TeacherError::Timeout(timeout.as_millis())
        } else {
            TeacherError::Transport(e.to_string())
        }
    })?;
    let status = resp.status();
    if !status.is_success() {
        let body = resp.text().unwrap_or_default();
        return Err(TeacherError::Status {
            status: status.as_u16(),
            body: truncate(&body),
        });
    }
    let text = resp.text().map_err(|e| {
        if e.is_timeout() {
            TeacherError::Timeout(timeout.as_millis())
        } else {
            TeacherError::Transport(e.to_string())
        }
    })?;
    let parsed: ChatResponse =
        serde_json::from_str(&text).map_err(|e| TeacherError::Malformed(format!("{e}: {}", truncate(&text))))?;
    let content = parsed
        .choices
        .first()
        .ok_or_else(|| TeacherError::Malformed("response carries no choices".into()))?
        .message
        .content
        .clone();
    if content.trim().is_empty() {
        return Err(TeacherError::Malformed("assistant content is empty".into()));
    }
    Ok(content)
}

/// Requests a reasoning trace, retrying retryable failures with
/// exponential backoff (base, 2x, 4x, ...) up to the attempt budget.
pub fn remote_generate(
    client: &reqwest::blocking::Client,
    req: &TeacherRequest,
    ep: &TeacherEndpoint,
) -> std::result::Result<TeacherReply, TeacherFailure> {
    let budget = req.retry_budget.unwrap_or(ep.retry_budget).max(1);
    let timeout = req.timeout.unwrap_or(ep.timeout);
    let mut last: Option<TeacherError> = None;
    for attempt in 1..=budget {
        if attempt > 1 {
            let delay = ep.backoff_base * (1u32 << (attempt - 2).min(6));
            log::warn!(
                "post {}: teacher attempt {attempt}/{budget} after {} ms backoff (previous: {})",
                req.post_id,
                delay.as_millis(),
                last.as_ref().map(|e| e.to_string()).unwrap_or_default()
            );
            std::thread::sleep(delay);
        }
        match attempt_once(client, req, ep, timeout) {
            Ok(text) => return Ok(TeacherReply { think: text, attempts: attempt }),
            Err(e) if e.retryable() && attempt < budget => last = Some(e),
            Err(e) if e.retryable() => {
                return Err(TeacherFailure {
                    error: TeacherError::BudgetExhausted {
                        budget,
                        last: e.to_string(),
                    },
                    attempts: budget,
                })
            }
            Err(e) => {
                return Err(TeacherFailure {
                    error: e,
                    attempts: attempt,
                })
            }
        }
    }
    unreachable!("loop returns on the final attempt");
}
