//! OpenAI-style chat-completions backend with logprob support.

use std::time::Duration;

use serde::Deserialize;
use serde_json::{json, Value};

use super::{Alternative, BackendConfig, CompletionRequest, CompletionResult, Gateway, GatewayError, TokenLogprob};

pub struct HttpGateway {
    client: reqwest::blocking::Client,
    endpoint: String,
    model: String,
    token: Option<String>,
    retries: u32,
    backoff: Duration,
}

impl std::fmt::Debug for HttpGateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpGateway")
            .field("endpoint", &self.endpoint)
            .field("model", &self.model)
            .field("token", &self.token.as_ref().map(|_| "[redacted]"))
            .field("retries", &self.retries)
            .finish()
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
    #[serde(default)]
    logprobs: Option<ChoiceLogprobs>,
}

#[derive(Deserialize)]
struct Message {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChoiceLogprobs {
    #[serde(default)]
    content: Option<Vec<WireToken>>,
}

#[derive(Deserialize)]
struct WireToken {
    token: String,
    logprob: f64,
    #[serde(default)]
    top_logprobs: Vec<WireAlternative>,
}

#[derive(Deserialize)]
struct WireAlternative {
    token: String,
    logprob: f64,
}

impl HttpGateway {
    pub fn from_config(cfg: &BackendConfig) -> Result<Self, GatewayError> {
        cfg.validate()?;
        let token = match &cfg.auth_env {
            Some(var) => Some(
                std::env::var(var)
                    .map_err(|_| GatewayError::Config(format!("environment variable {var} is not set")))?,
            ),
            None => None,
        };
        Self::new(
            cfg.endpoint.clone().expect("validated"),
            cfg.model.clone().expect("validated"),
            token,
            Duration::from_secs_f64(cfg.timeout_secs),
            cfg.retries,
        )
    }

    pub fn new(
        endpoint: String,
        model: String,
        token: Option<String>,
        timeout: Duration,
        retries: u32,
    ) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| GatewayError::Config(format!("http client: {e}")))?;
        Ok(Self {
            client,
            endpoint,
            model,
            token,
            retries,
            backoff: Duration::from_millis(250),
        })
    }

    /// Base delay for exponential backoff (doubles per retry).
    pub fn with_backoff(mut self, base: Duration) -> Self {
        self.backoff = base;
        self
    }

    fn body(&self, req: &CompletionRequest) -> Value {
        let mut body = json!({
            "model": self.model,
            "messages": [{"role": "user", "content": req.prompt}],
            "max_tokens": req.max_tokens,
            "temperature": req.temperature,
        });
        if req.want_logprobs {
            body["logprobs"] = json!(true);
            body["top_logprobs"] = json!(req.top_alternatives);
        }
        body
    }

    fn attempt(&self, body: &Value) -> Result<CompletionResult, GatewayError> {
        let mut rb = self.client.post(&self.endpoint).json(body);
        if let Some(t) = &self.token {
            rb = rb.bearer_auth(t);
        }
        let resp = rb.send().map_err(|e| {
            tracing::warn!(endpoint = %self.endpoint, error = %e, "completion request failed");
            GatewayError::Timeout
        })?;
        let status = resp.status().as_u16();
        let text = resp.text().map_err(|_| GatewayError::Timeout)?;
        tracing::debug!(status, response = %text, "completion response");
        match status {
            200..=299 => parse_response(&text),
            401 | 403 => Err(GatewayError::AuthFailure),
            _ => Err(GatewayError::ProviderError { status, body: text }),
        }
    }
}

fn parse_response(text: &str) -> Result<CompletionResult, GatewayError> {
    let parsed: ChatResponse = serde_json::from_str(text).map_err(|e| GatewayError::ProviderError {
        status: 200,
        body: format!("unparseable response ({e}): {text}"),
    })?;
    let choice = parsed.choices.into_iter().next().ok_or_else(|| GatewayError::ProviderError {
        status: 200,
        body: "response has no choices".into(),
    })?;
    let tokens = choice
        .logprobs
        .and_then(|l| l.content)
        .unwrap_or_default()
        .into_iter()
        .map(|t| {
            let mut alternatives: Vec<Alternative> = t
                .top_logprobs
                .into_iter()
                .map(|a| Alternative {
                    token: a.token,
                    logprob: a.logprob,
                })
                .collect();
            alternatives.sort_by(|a, b| b.logprob.total_cmp(&a.logprob));
            TokenLogprob {
                token: t.token,
                logprob: t.logprob,
                alternatives,
            }
        })
        .collect();
    Ok(CompletionResult {
        text: choice.message.content.unwrap_or_default(),
        tokens,
    })
}

impl Gateway for HttpGateway {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, GatewayError> {
        request.validate()?;
        let body = self.body(request);
        // the token travels in a header and is never part of the logged body
        tracing::debug!(endpoint = %self.endpoint, authorization = "[redacted]", request = %body, "completion request");
        let mut attempt = 0;
        loop {
            match self.attempt(&body) {
                Ok(r) => return Ok(r),
                Err(e) if e.is_transient() && attempt < self.retries => {
                    let delay = self.backoff * 2u32.saturating_pow(attempt);
                    tracing::info!(attempt, ?delay, error = %e, "retrying completion");
                    std::thread::sleep(delay);
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}
