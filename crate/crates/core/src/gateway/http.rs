//! Backend for OpenAI-compatible `/chat/completions` endpoints.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{Backend, BackendError, BackendReply, ModelRequest, Usage};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HttpConfig {
    /// Backend id used in the ledger and price table.
    pub id: String,
    /// Base URL, e.g. `https://api.example.com/v1`.
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_timeout() -> u64 {
    600
}

pub struct HttpBackend {
    config: HttpConfig,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl std::fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpBackend").field("config", &self.config).finish()
    }
}

impl HttpBackend {
    /// Reads the API key from the configured environment variable.
    pub fn new(config: HttpConfig) -> Result<Self, BackendError> {
        let api_key = match &config.api_key_env {
            Some(var) => Some(
                std::env::var(var)
                    .map_err(|_| BackendError::Fatal(format!("environment variable {var} is not set")))?,
            ),
            None => None,
        };
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .build()
            .into();
        Ok(HttpBackend { config, api_key, agent })
    }

    fn url(&self) -> String {
        format!("{}/chat/completions", self.config.endpoint.trim_end_matches('/'))
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<ChatUsage>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChatUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
    #[serde(default)]
    completion_tokens_details: Option<CompletionDetails>,
}

#[derive(Deserialize)]
struct CompletionDetails {
    #[serde(default)]
    reasoning_tokens: u64,
}

/// Maps an HTTP status to an error, or `None` for success.
fn classify_status(status: u16, body: &str) -> Option<BackendError> {
    match status {
        200..=299 => None,
        408 | 409 | 429 | 500..=599 => Some(BackendError::Transient(format!("HTTP {status}: {body}"))),
        _ => Some(BackendError::Fatal(format!("HTTP {status}: {body}"))),
    }
}

fn parse_reply(body: &str) -> Result<BackendReply, BackendError> {
    let parsed: ChatResponse =
        serde_json::from_str(body).map_err(|e| BackendError::Fatal(format!("malformed response: {e}")))?;
    let text = parsed
        .choices
        .into_iter()
        .next()
        .and_then(|c| c.message.content)
        .ok_or_else(|| BackendError::Fatal("response has no message content".into()))?;
    let usage = parsed
        .usage
        .map(|u| {
            let thinking = u.completion_tokens_details.map(|d| d.reasoning_tokens).unwrap_or(0);
            Usage {
                input_tokens: u.prompt_tokens,
                output_tokens: u.completion_tokens.saturating_sub(thinking),
                thinking_tokens: thinking,
            }
        })
        .unwrap_or_default();
    Ok(BackendReply { text, usage })
}

impl Backend for HttpBackend {
    fn id(&self) -> &str {
        &self.config.id
    }

    fn complete(&self, request: &ModelRequest) -> Result<BackendReply, BackendError> {
        let body = json!({
            "model": self.config.model,
            "messages": [{ "role": "user", "content": request.prompt }],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        });
        let mut call = self.agent.post(self.url());
        if let Some(key) = &self.api_key {
            call = call.header("Authorization", format!("Bearer {key}"));
        }
        let mut response = call
            .send_json(&body)
            .map_err(|e| BackendError::Transient(format!("request failed: {e}")))?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transient(format!("reading response: {e}")))?;
        if let Some(err) = classify_status(status, &text) {
            return Err(err);
        }
        parse_reply(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::ModelRole;
    use std::io::{Read, Write};
    use std::net::TcpListener;

    fn serve_once(status: &'static str, body: &'static str) -> (String, std::thread::JoinHandle<String>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let mut buf = Vec::new();
            let mut chunk = [0u8; 4096];
            loop {
                let n = stream.read(&mut chunk).unwrap();
                buf.extend_from_slice(&chunk[..n]);
                let text = String::from_utf8_lossy(&buf);
                if let Some(end) = text.find("\r\n\r\n") {
                    let len = text[..end]
                        .lines()
                        .find_map(|l| {
                            let lower = l.to_ascii_lowercase();
                            lower.strip_prefix("content-length:").map(|v| v.trim().parse::<usize>().unwrap())
                        })
                        .unwrap_or(0);
                    let chunked = text[..end].to_ascii_lowercase().contains("transfer-encoding: chunked");
                    if (chunked && text.ends_with("0\r\n\r\n")) || (!chunked && buf.len() >= end + 4 + len) {
                        break;
                    }
                }
                if n == 0 {
                    break;
                }
            }
            let reply = format!(
                "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(reply.as_bytes()).unwrap();
            String::from_utf8_lossy(&buf).into_owned()
        });
        (format!("http://{addr}/v1"), handle)
    }

    fn request() -> ModelRequest {
        ModelRequest {
            role: ModelRole::Solver,
            prompt: "Prove it.".into(),
            temperature: 0.6,
            max_output_tokens: 64,
            run_id: "r0".into(),
            lane: "t".into(),
        }
    }

    fn backend(endpoint: String) -> HttpBackend {
        HttpBackend::new(HttpConfig {
            id: "local".into(),
            endpoint,
            model: "m".into(),
            api_key_env: None,
            timeout_secs: 10,
        })
        .unwrap()
    }

    #[test]
    fn posts_chat_completion_and_reads_usage() {
        let (endpoint, server) = serve_once(
            "200 OK",
            r#"{"choices":[{"message":{"content":"done"}}],"usage":{"prompt_tokens":12,"completion_tokens":30,"completion_tokens_details":{"reasoning_tokens":20}}}"#,
        );
        let reply = backend(endpoint).complete(&request()).unwrap();
        let seen = server.join().unwrap();
        assert!(seen.starts_with("POST /v1/chat/completions"));
        let (_, sent) = seen.split_once("\r\n\r\n").unwrap();
        let sent: serde_json::Value = serde_json::from_str(sent).unwrap();
        assert_eq!(sent["max_tokens"], 64);
        assert_eq!(sent["messages"][0]["content"], "Prove it.");
        assert_eq!(reply.text, "done");
        assert_eq!(
            reply.usage,
            Usage {
                input_tokens: 12,
                output_tokens: 10,
                thinking_tokens: 20
            }
        );
    }

    #[test]
    fn rate_limits_are_transient() {
        let (endpoint, server) = serve_once("429 Too Many Requests", r#"{"error":"slow down"}"#);
        let err = backend(endpoint).complete(&request()).unwrap_err();
        server.join().unwrap();
        assert!(matches!(err, BackendError::Transient(_)), "{err:?}");
    }

    #[test]
    fn status_classification() {
        assert!(classify_status(200, "").is_none());
        assert!(matches!(classify_status(503, ""), Some(BackendError::Transient(_))));
        assert!(matches!(classify_status(400, ""), Some(BackendError::Fatal(_))));
        assert!(matches!(classify_status(401, ""), Some(BackendError::Fatal(_))));
    }

    #[test]
    fn malformed_bodies_are_fatal() {
        assert!(matches!(parse_reply("{}"), Err(BackendError::Fatal(_))));
        assert!(matches!(parse_reply(r#"{"choices":[]}"#), Err(BackendError::Fatal(_))));
    }

    #[test]
    fn missing_key_variable_is_reported() {
        let err = HttpBackend::new(HttpConfig {
            id: "x".into(),
            endpoint: "http://127.0.0.1:9".into(),
            model: "m".into(),
            api_key_env: Some("PROOFLOOP_TEST_KEY_THAT_IS_NOT_SET".into()),
            timeout_secs: 1,
        })
        .unwrap_err();
        assert!(err.to_string().contains("PROOFLOOP_TEST_KEY_THAT_IS_NOT_SET"));
    }
}
