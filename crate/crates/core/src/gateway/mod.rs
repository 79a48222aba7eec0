//! Chat-completion access with token log-probabilities.
//!
//! [`Gateway`] is the only seam between strategies and a language model. Two
//! backends exist: [`http::HttpGateway`] for OpenAI-style endpoints and
//! [`mock::MockGateway`] for scripted, deterministic runs.

pub mod extract;
pub mod http;
pub mod mock;

use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use extract::{extract_group_distributions, written_letters, ExtractError, GroupDistribution};

#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "error")]
pub enum GatewayError {
    #[error("request timed out")]
    Timeout,
    #[error("authentication rejected")]
    AuthFailure,
    #[error("provider error {status}: {body}")]
    ProviderError { status: u16, body: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("gateway configuration: {0}")]
    Config(String),
}

impl GatewayError {
    /// Whether a retry could plausibly succeed.
    pub fn is_transient(&self) -> bool {
        match self {
            GatewayError::Timeout => true,
            GatewayError::ProviderError { status, .. } => *status == 408 || *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

/// Which of the two model roles a request serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    ModeSwitch,
    RuleGen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub role: Role,
    pub prompt: String,
    pub max_tokens: u32,
    pub temperature: f64,
    pub want_logprobs: bool,
    pub top_alternatives: u32,
}

impl CompletionRequest {
    pub fn mode_switch(prompt: impl Into<String>) -> Self {
        Self {
            role: Role::ModeSwitch,
            prompt: prompt.into(),
            max_tokens: 100,
            temperature: 0.0,
            want_logprobs: true,
            top_alternatives: 5,
        }
    }

    pub fn rule_gen(prompt: impl Into<String>) -> Self {
        Self {
            role: Role::RuleGen,
            prompt: prompt.into(),
            max_tokens: 2000,
            temperature: 0.0,
            want_logprobs: false,
            top_alternatives: 0,
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.want_logprobs && self.top_alternatives < 4 {
            return Err(GatewayError::InvalidRequest(
                "top_alternatives must be at least 4 to cover letters A-D".into(),
            ));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_tokens must be positive".into()));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(GatewayError::InvalidRequest("temperature must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alternative {
    pub token: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
    /// Sorted by descending logprob.
    #[serde(default)]
    pub alternatives: Vec<Alternative>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    #[serde(default)]
    pub tokens: Vec<TokenLogprob>,
}

impl CompletionResult {
    pub fn text_only(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            tokens: Vec::new(),
        }
    }
}

pub trait Gateway: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, GatewayError>;
}

impl<G: Gateway + ?Sized> Gateway for Arc<G> {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, GatewayError> {
        (**self).complete(request)
    }
}

impl<G: Gateway + ?Sized> Gateway for Box<G> {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, GatewayError> {
        (**self).complete(request)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Real,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub backend: BackendKind,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub model: Option<String>,
    /// Name of the environment variable holding the bearer token.
    #[serde(default)]
    pub auth_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default)]
    pub mock_script: Option<PathBuf>,
}

fn default_timeout() -> f64 {
    30.0
}

fn default_retries() -> u32 {
    3
}

impl BackendConfig {
    pub fn mock(script: impl Into<PathBuf>) -> Self {
        Self {
            backend: BackendKind::Mock,
            endpoint: None,
            model: None,
            auth_env: None,
            timeout_secs: default_timeout(),
            retries: default_retries(),
            mock_script: Some(script.into()),
        }
    }

    pub fn real(endpoint: impl Into<String>, model: impl Into<String>, auth_env: Option<String>) -> Self {
        Self {
            backend: BackendKind::Real,
            endpoint: Some(endpoint.into()),
            model: Some(model.into()),
            auth_env,
            timeout_secs: default_timeout(),
            retries: default_retries(),
            mock_script: None,
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        match self.backend {
            BackendKind::Real => {
                if self.endpoint.as_deref().is_none_or(str::is_empty) {
                    return Err(GatewayError::Config("real backend requires an endpoint".into()));
                }
                if self.model.as_deref().is_none_or(str::is_empty) {
                    return Err(GatewayError::Config("real backend requires a model name".into()));
                }
                if !(self.timeout_secs.is_finite() && self.timeout_secs > 0.0) {
                    return Err(GatewayError::Config("timeout must be positive".into()));
                }
            }
            BackendKind::Mock => {
                if self.mock_script.is_none() {
                    return Err(GatewayError::Config("mock backend requires a script path".into()));
                }
            }
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Arc<dyn Gateway>, GatewayError> {
        self.validate()?;
        match self.backend {
            BackendKind::Real => Ok(Arc::new(http::HttpGateway::from_config(self)?)),
            BackendKind::Mock => {
                let path = self.mock_script.as_ref().expect("validated");
                Ok(Arc::new(mock::MockGateway::from_file(path)?))
            }
        }
    }
}
