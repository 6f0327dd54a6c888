use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Backend, BackendError, CompletionRequest, CompletionResult};
use crate::memory::canonical_json;
use crate::text::sha256_hex;

pub const API_KEY_ENV: &str = "CBL_API_KEY";

/// Chat-completion endpoint settings. The API key is never stored here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderConfig {
    /// Full URL of the chat-completions route.
    pub endpoint: String,
    pub model: String,
    #[serde(default)]
    pub temperature: Option<f64>,
}

impl ProviderConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, BackendError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Unavailable(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| BackendError::Unavailable(format!("{}: {e}", path.display())))
    }

    pub fn fingerprint(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        sha256_hex(canonical_json(&value).as_bytes())
    }
}

/// OpenAI-compatible chat-completions client.
pub struct ProviderBackend {
    config: ProviderConfig,
    api_key: Option<String>,
    name: String,
    client: reqwest::blocking::Client,
}

impl ProviderBackend {
    /// Reads the API key from [`API_KEY_ENV`] if set.
    pub fn from_env(config: ProviderConfig) -> Result<Self, BackendError> {
        let key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        Self::new(config, key)
    }

    pub fn new(config: ProviderConfig, api_key: Option<String>) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .build()
            .map_err(|e| BackendError::Unavailable(e.to_string()))?;
        Ok(ProviderBackend {
            name: format!("provider:{}", config.model),
            config,
            api_key,
            client,
        })
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.config
    }

    fn body(&self, request: &CompletionRequest) -> Value {
        let mut body = json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "max_tokens": request.max_tokens,
        });
        if let Some(t) = self.config.temperature {
            body["temperature"] = json!(t);
        }
        body
    }
}

fn failed(message: String, latency_ms: u64) -> CompletionResult {
    CompletionResult {
        latency_ms,
        backend_error: Some(message),
        ..CompletionResult::default()
    }
}

impl Backend for ProviderBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        if request.deadline_ms == 0 {
            return Err(BackendError::InvalidRequest(
                "deadline_ms must be positive".into(),
            ));
        }
        let mut call = self
            .client
            .post(&self.config.endpoint)
            .timeout(Duration::from_millis(request.deadline_ms))
            .json(&self.body(request));
        if let Some(key) = &self.api_key {
            call = call.bearer_auth(key);
        }

        let started = Instant::now();
        let elapsed = |s: Instant| s.elapsed().as_millis() as u64;
        let response = match call.send() {
            Ok(r) => r,
            Err(e) if e.is_timeout() => {
                return Ok(failed(
                    format!("request timed out after {} ms", request.deadline_ms),
                    elapsed(started),
                ))
            }
            Err(e) if e.is_connect() => return Err(BackendError::Unavailable(e.to_string())),
            Err(e) => return Ok(failed(format!("request error: {e}"), elapsed(started))),
        };
        let status = response.status();
        let payload = response.text();
        let latency_ms = elapsed(started);
        let payload = match payload {
            Ok(p) => p,
            Err(e) if e.is_timeout() => {
                return Ok(failed(
                    format!("request timed out after {} ms", request.deadline_ms),
                    latency_ms,
                ))
            }
            Err(e) => return Ok(failed(format!("response error: {e}"), latency_ms)),
        };
        if !status.is_success() {
            let head: String = payload.chars().take(200).collect();
            return Ok(failed(
                format!("provider returned HTTP {status}: {head}"),
                latency_ms,
            ));
        }
        let value: Value = match serde_json::from_str(&payload) {
            Ok(v) => v,
            Err(e) => return Ok(failed(format!("malformed response: {e}"), latency_ms)),
        };
        let text = value["choices"][0]["message"]["content"]
            .as_str()
            .unwrap_or_default()
            .to_string();
        Ok(CompletionResult {
            text,
            tokens_in: value["usage"]["prompt_tokens"].as_u64().unwrap_or(0),
            tokens_out: value["usage"]["completion_tokens"].as_u64().unwrap_or(0),
            latency_ms,
            backend_error: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::thread;

    /// Serves one request, replying `body` after `delay_ms`; returns the
    /// endpoint and a handle yielding the raw request.
    fn serve_once(body: &'static str, delay_ms: u64) -> (String, thread::JoinHandle<String>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!(
            "http://{}/v1/chat/completions",
            listener.local_addr().unwrap()
        );
        let handle = thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream);
            let mut head = String::new();
            let mut length = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap();
                }
                head.push_str(&line);
                if line == "\r\n" {
                    break;
                }
            }
            let mut content = vec![0; length];
            reader.read_exact(&mut content).unwrap();
            thread::sleep(Duration::from_millis(delay_ms));
            let mut stream = reader.into_inner();
            let reply = format!(
                "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            );
            let _ = stream.write_all(reply.as_bytes());
            head + &String::from_utf8(content).unwrap()
        });
        (url, handle)
    }

    fn request(deadline_ms: u64) -> CompletionRequest {
        CompletionRequest {
            prompt: "hello".into(),
            sample_id: "s".into(),
            deadline_ms,
            max_tokens: 64,
        }
    }

    fn backend(url: String) -> ProviderBackend {
        ProviderBackend::new(
            ProviderConfig {
                endpoint: url,
                model: "m".into(),
                temperature: Some(0.0),
            },
            Some("k".into()),
        )
        .unwrap()
    }

    #[test]
    fn parses_chat_completion() {
        let (url, handle) = serve_once(
            r#"{"choices":[{"message":{"role":"assistant","content":"hi"}}],"usage":{"prompt_tokens":7,"completion_tokens":2}}"#,
            0,
        );
        let result = backend(url).complete(&request(5_000)).unwrap();
        assert_eq!(result.text, "hi");
        assert_eq!((result.tokens_in, result.tokens_out), (7, 2));
        assert_eq!(result.backend_error, None);
        let raw = handle.join().unwrap();
        assert!(raw.to_ascii_lowercase().contains("authorization: bearer k"));
        assert!(raw.contains(r#""max_tokens":64"#));
        assert!(raw.contains(r#""content":"hello""#));
    }

    #[test]
    fn deadline_becomes_timeout_error() {
        let (url, _handle) = serve_once("{}", 1_500);
        let result = backend(url).complete(&request(200)).unwrap();
        let err = result.backend_error.unwrap();
        assert!(err.contains("timed out"), "{err}");
    }

    #[test]
    fn unreachable_endpoint_is_unavailable() {
        let port = TcpListener::bind("127.0.0.1:0")
            .unwrap()
            .local_addr()
            .unwrap()
            .port();
        let url = format!("http://127.0.0.1:{port}/v1/chat/completions");
        assert!(matches!(
            backend(url).complete(&request(1_000)),
            Err(BackendError::Unavailable(_))
        ));
    }

    #[test]
    fn zero_deadline_rejected() {
        let b = backend("http://127.0.0.1:9/".into());
        assert!(matches!(
            b.complete(&request(0)),
            Err(BackendError::InvalidRequest(_))
        ));
    }
}
