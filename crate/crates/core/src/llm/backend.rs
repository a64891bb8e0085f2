use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{BackendError, CompletionRequest, CompletionResult, Role, Usage};

pub trait ChatBackend: Send + Sync {
    fn name(&self) -> &str;

    fn complete(&self, request: &CompletionRequest<'_>) -> Result<CompletionResult, BackendError>;

    /// Whether the client should stamp wall-clock latency on results that
    /// report none. Mocks return false so replayed runs stay byte-stable.
    fn measures_latency(&self) -> bool {
        true
    }
}

/// Per-token prices used to turn usage counts into dollars.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Pricing {
    pub prompt_usd_per_mtok: f64,
    pub completion_usd_per_mtok: f64,
}

impl Default for Pricing {
    fn default() -> Self {
        // gpt-4o list price
        Self {
            prompt_usd_per_mtok: 2.5,
            completion_usd_per_mtok: 10.0,
        }
    }
}

impl Pricing {
    pub fn cost(&self, prompt_tokens: u64, completion_tokens: u64) -> f64 {
        (prompt_tokens as f64 * self.prompt_usd_per_mtok
            + completion_tokens as f64 * self.completion_usd_per_mtok)
            / 1_000_000.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpBackendConfig {
    /// Full chat-completions URL, e.g. `https://api.openai.com/v1/chat/completions`.
    pub endpoint: String,
    #[serde(skip)]
    pub api_key: Option<String>,
    pub timeout_secs: u64,
    pub pricing: Pricing,
}

impl Default for HttpBackendConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/chat/completions".to_string(),
            api_key: None,
            timeout_secs: 120,
            pricing: Pricing::default(),
        }
    }
}

/// JSON-over-HTTP chat-completion client (OpenAI wire format).
pub struct HttpBackend {
    config: HttpBackendConfig,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(config: HttpBackendConfig) -> Self {
        let agent_config = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .build();
        Self {
            agent: ureq::Agent::new_with_config(agent_config),
            config,
        }
    }
}

pub(crate) fn request_body(request: &CompletionRequest<'_>) -> Value {
    let messages: Vec<Value> = request
        .messages
        .iter()
        .map(|m| {
            let role = match m.role {
                Role::System => "system",
                Role::User => "user",
                Role::Assistant => "assistant",
            };
            json!({ "role": role, "content": m.content })
        })
        .collect();
    json!({
        "model": request.params.model_id,
        "messages": messages,
        "temperature": request.params.temperature,
        "max_tokens": request.params.max_tokens,
    })
}

pub(crate) fn parse_response(body: &Value, pricing: &Pricing) -> Result<CompletionResult, BackendError> {
    let text = body
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| BackendError::Protocol("missing choices[0].message.content".into()))?
        .to_string();
    let prompt_tokens = body
        .pointer("/usage/prompt_tokens")
        .and_then(Value::as_u64)
        .unwrap_or(0);
    let completion_tokens = body
        .pointer("/usage/completion_tokens")
        .and_then(Value::as_u64)
        .unwrap_or(0);
    Ok(CompletionResult {
        text,
        usage: Usage {
            prompt_tokens,
            completion_tokens,
            cost_usd: pricing.cost(prompt_tokens, completion_tokens),
            latency_ms: 0,
            retries: 0,
        },
    })
}

impl ChatBackend for HttpBackend {
    fn name(&self) -> &str {
        "http"
    }

    fn complete(&self, request: &CompletionRequest<'_>) -> Result<CompletionResult, BackendError> {
        let mut builder = self
            .agent
            .post(&self.config.endpoint)
            .header("Content-Type", "application/json");
        if let Some(key) = &self.config.api_key {
            builder = builder.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = builder
            .send_json(request_body(request))
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = response.status().as_u16();
        let body = response
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        match status {
            200..=299 => {
                let value: Value = serde_json::from_str(&body)
                    .map_err(|e| BackendError::Protocol(e.to_string()))?;
                parse_response(&value, &self.config.pricing)
            }
            429 => Err(BackendError::RateLimited),
            _ => Err(BackendError::Http { status, body }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{CallLog, CallScope, ChatMessage, CompletionParams, LlmClient, RetryPolicy, TemplateId};
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::Arc;
    use std::thread;

    /// Serves `statuses` in order, one connection each, and returns the
    /// request bodies it saw.
    fn serve(statuses: Vec<u16>) -> (String, thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let handle = thread::spawn(move || {
            let mut bodies = Vec::new();
            for status in statuses {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut length = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        length = v.trim().parse().unwrap();
                    }
                }
                let mut body = vec![0u8; length];
                reader.read_exact(&mut body).unwrap();
                bodies.push(String::from_utf8(body).unwrap());
                let payload = if status == 200 {
                    r#"{"choices":[{"message":{"role":"assistant","content":"[Response_Start]hi[Response_End]"}}],"usage":{"prompt_tokens":1000,"completion_tokens":100}}"#
                } else {
                    r#"{"error":"slow down"}"#
                };
                let reason = if status == 200 { "OK" } else { "Too Many Requests" };
                let mut stream = stream;
                write!(
                    stream,
                    "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                    payload.len()
                )
                .unwrap();
                stream.flush().unwrap();
            }
            bodies
        });
        (url, handle)
    }

    #[test]
    fn wire_format_and_429_retry() {
        let (url, server) = serve(vec![429, 429, 200]);
        let backend = HttpBackend::new(HttpBackendConfig {
            endpoint: url,
            api_key: Some("sk-test".into()),
            timeout_secs: 10,
            pricing: Pricing::default(),
        });
        let client = LlmClient::new(Arc::new(backend))
            .with_retry(RetryPolicy {
                max_attempts: 3,
                base_delay: Duration::from_millis(1),
            })
            .with_params(CompletionParams {
                model_id: "gpt-4o".into(),
                temperature: 0.0,
                max_tokens: 256,
            });
        let scope = CallScope::new(CallLog::new(), "t");
        let out = client
            .complete(
                &scope,
                TemplateId::Outline,
                &[ChatMessage::system("sys"), ChatMessage::user("hello")],
            )
            .unwrap();
        assert_eq!(out.text, "[Response_Start]hi[Response_End]");
        assert_eq!(out.usage.retries, 2);
        assert_eq!(out.usage.prompt_tokens, 1000);
        // 1000 * 2.5e-6 + 100 * 1e-5
        assert!((out.usage.cost_usd - 0.0035).abs() < 1e-12);
        let bodies = server.join().unwrap();
        assert_eq!(bodies.len(), 3);
        let sent: Value = serde_json::from_str(&bodies[2]).unwrap();
        assert_eq!(sent["model"], "gpt-4o");
        assert_eq!(sent["temperature"], 0.0);
        assert_eq!(sent["max_tokens"], 256);
        assert_eq!(sent["messages"][0]["role"], "system");
        assert_eq!(sent["messages"][1]["content"], "hello");
    }

    #[test]
    fn non_retryable_status_fails_fast() {
        let (url, server) = serve(vec![400]);
        let backend = HttpBackend::new(HttpBackendConfig {
            endpoint: url,
            ..HttpBackendConfig::default()
        });
        let client = LlmClient::new(Arc::new(backend));
        let scope = CallScope::new(CallLog::new(), "t");
        let err = client
            .complete(&scope, TemplateId::Outline, &[ChatMessage::user("x")])
            .unwrap_err();
        assert!(err.to_string().contains("HTTP 400"), "{err}");
        server.join().unwrap();
    }

    #[test]
    fn response_without_content_is_protocol_error() {
        let err = parse_response(&json!({"choices": []}), &Pricing::default()).unwrap_err();
        assert!(matches!(err, BackendError::Protocol(_)));
    }
}
