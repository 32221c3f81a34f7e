//! Remote chat-completion proposer.
//!
//! One request/response exchange per proposal round: the request carries a
//! model id, a message list and a sampling temperature (diversity mapped
//! affinely onto [0.2, 1.2]); the response text is scanned for fenced blocks
//! of template documents. The credential comes from an environment variable,
//! the endpoint from configuration. Transient failures retry twice with
//! exponential backoff before reporting the proposer unavailable.

use super::{ProposalBatch, ProposalRequest, ProposeError, Proposer};
use serde::{Deserialize, Serialize};

pub const TEMPERATURE_MIN: f64 = 0.2;
pub const TEMPERATURE_MAX: f64 = 1.2;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the bearer credential.
    pub credential_env: String,
    pub max_tokens: u32,
    pub retries: u32,
    /// Base backoff delay in milliseconds, doubled per retry.
    pub backoff_ms: u64,
    /// Per-request timeout in seconds.
    pub request_timeout: f64,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        RemoteConfig {
            endpoint: String::new(),
            model: String::new(),
            credential_env: "ODESCOUT_API_KEY".to_string(),
            max_tokens: 2048,
            retries: 2,
            backoff_ms: 500,
            request_timeout: 60.0,
        }
    }
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<Message<'a>>,
    temperature: f64,
    max_tokens: u32,
}

#[derive(Serialize)]
struct Message<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    content: String,
}

const SYSTEM_TEXT: &str = "You identify governing equations of dynamical systems. \
Reply with candidate equation templates only, each inside its own fenced code block, \
following the OUTPUT FORMAT section of the user message exactly.";

pub struct RemoteProposer {
    cfg: RemoteConfig,
    credential: String,
    client: reqwest::blocking::Client,
}

impl RemoteProposer {
    /// Resolves the credential eagerly so a missing key fails at startup, not
    /// mid-run.
    pub fn new(cfg: RemoteConfig) -> Result<Self, ProposeError> {
        if cfg.endpoint.is_empty() {
            return Err(ProposeError::ProposerUnavailable(
                "remote endpoint not configured".into(),
            ));
        }
        let credential = std::env::var(&cfg.credential_env).map_err(|_| {
            ProposeError::ProposerUnavailable(format!(
                "credential environment variable {} not set",
                cfg.credential_env
            ))
        })?;
        let client = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs_f64(cfg.request_timeout))
            .build()
            .map_err(|e| ProposeError::ProposerUnavailable(e.to_string()))?;
        Ok(RemoteProposer {
            cfg,
            credential,
            client,
        })
    }

    fn exchange(&self, prompt: &str, temperature: f64) -> Result<String, String> {
        let body = ChatRequest {
            model: &self.cfg.model,
            messages: vec![
                Message {
                    role: "system",
                    content: SYSTEM_TEXT,
                },
                Message {
                    role: "user",
                    content: prompt,
                },
            ],
            temperature,
            max_tokens: self.cfg.max_tokens,
        };
        let resp = self
            .client
            .post(&self.cfg.endpoint)
            .bearer_auth(&self.credential)
            .json(&body)
            .send()
            .map_err(|e| e.to_string())?;
        let status = resp.status();
        if !status.is_success() {
            return Err(format!("http {status}"));
        }
        let parsed: ChatResponse = resp.json().map_err(|e| e.to_string())?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| "response carried no choices".to_string())
    }
}

impl Proposer for RemoteProposer {
    fn name(&self) -> &str {
        "remote"
    }

    fn propose(&mut self, request: &ProposalRequest<'_>) -> Result<ProposalBatch, ProposeError> {
        let temperature =
            TEMPERATURE_MIN + request.diversity.clamp(0.0, 1.0) * (TEMPERATURE_MAX - TEMPERATURE_MIN);
        let mut last_err = String::new();
        let mut text = None;
        for attempt in 0..=self.cfg.retries {
            if attempt > 0 {
                let delay = self.cfg.backoff_ms << (attempt - 1);
                std::thread::sleep(std::time::Duration::from_millis(delay));
            }
            match self.exchange(request.prompt, temperature) {
                Ok(t) => {
                    text = Some(t);
                    break;
                }
                Err(e) => last_err = e,
            }
        }
        let text = text.ok_or(ProposeError::ProposerUnavailable(last_err))?;
        let mut candidates = extract_fenced_documents(&text)?;
        candidates.truncate(request.count);
        Ok(ProposalBatch {
            candidates,
            diversity: request.diversity,
            proposer: format!("remote:{}", self.cfg.model),
        })
    }
}

/// Pull template documents out of fenced code blocks. A fenced block holding
/// a JSON array contributes each element as its own candidate.
pub fn extract_fenced_documents(text: &str) -> Result<Vec<String>, ProposeError> {
    let mut candidates = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find("```") {
        let after = &rest[open + 3..];
        // skip an info string like `json`
        let body_start = after.find('\n').map(|i| i + 1).unwrap_or(0);
        let body = &after[body_start..];
        let Some(close) = body.find("```") else {
            break;
        };
        let block = body[..close].trim();
        rest = &body[close + 3..];
        if block.is_empty() {
            continue;
        }
        match serde_json::from_str::<serde_json::Value>(block) {
            Ok(serde_json::Value::Array(items)) => {
                for item in items {
                    candidates.push(serde_json::to_string(&item).expect("json"));
                }
            }
            Ok(value) => candidates.push(serde_json::to_string(&value).expect("json")),
            Err(_) => continue, // prose or non-JSON block
        }
    }
    if candidates.is_empty() {
        return Err(ProposeError::MalformedResponse(
            "no parseable fenced template block".into(),
        ));
    }
    Ok(candidates)
}
