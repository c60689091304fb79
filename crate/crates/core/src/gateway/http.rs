//! HTTP chat-completion backend (JSON protocol with optional per-token
//! log-probabilities).
//!
//! Speaks the widely implemented `/chat/completions` shape: messages
//! array in, choices with message content and optional `logprobs`
//! blocks out. The credential is read from an environment variable so
//! it never appears in config files or manifests.

use serde::{Deserialize, Serialize};

use super::{Backend, CompletionRequest, CompletionResult, Role, TokenAlternative, TokenScore};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct HttpBackendConfig {
    /// Full URL of the completions endpoint.
    pub url: String,
    pub model: String,
    /// Environment variable holding the bearer token; unset or empty
    /// means no Authorization header.
    pub credential_env: Option<String>,
    pub timeout_secs: u64,
}

impl Default for HttpBackendConfig {
    fn default() -> Self {
        HttpBackendConfig {
            url: String::new(),
            model: String::new(),
            credential_env: Some("REVREC_API_KEY".to_string()),
            timeout_secs: 120,
        }
    }
}

pub struct HttpBackend {
    config: HttpBackendConfig,
    client: reqwest::blocking::Client,
    credential: Option<String>,
    id: String,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: Vec<WireMessage<'a>>,
    temperature: f64,
    max_tokens: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    logprobs: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    top_logprobs: Option<usize>,
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireChoiceMessage,
    #[serde(default)]
    logprobs: Option<WireLogprobs>,
}

#[derive(Deserialize)]
struct WireChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireLogprobs {
    #[serde(default)]
    content: Option<Vec<WireTokenLogprob>>,
}

#[derive(Deserialize)]
struct WireTokenLogprob {
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

impl HttpBackend {
    pub fn new(config: HttpBackendConfig) -> Result<HttpBackend> {
        if config.url.is_empty() {
            return Err(Error::Config("http backend requires a url".to_string()));
        }
        let credential = config
            .credential_env
            .as_deref()
            .filter(|v| !v.is_empty())
            .and_then(|var| std::env::var(var).ok())
            .filter(|v| !v.is_empty());
        let client = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| Error::Config(format!("http client: {}", e)))?;
        let id = format!("http:{}@{}", config.model, config.url);
        Ok(HttpBackend {
            config,
            client,
            credential,
            id,
        })
    }
}

fn role_str(role: Role) -> &'static str {
    match role {
        Role::System => "system",
        Role::User => "user",
        Role::Assistant => "assistant",
    }
}

impl Backend for HttpBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult> {
        let wire = WireRequest {
            model: &self.config.model,
            messages: request
                .messages
                .iter()
                .map(|m| WireMessage {
                    role: role_str(m.role),
                    content: &m.content,
                })
                .collect(),
            temperature: request.temperature,
            max_tokens: request.max_tokens,
            logprobs: request.want_token_scores.then_some(true),
            top_logprobs: request
                .want_token_scores
                .then_some(request.top_alternatives),
        };
        let mut call = self.client.post(&self.config.url).json(&wire);
        if let Some(token) = &self.credential {
            call = call.bearer_auth(token);
        }
        let response = call.send().map_err(|e| Error::Transport {
            attempts: 1,
            message: e.to_string(),
        })?;
        let status = response.status();
        let body = response.text().map_err(|e| Error::Transport {
            attempts: 1,
            message: e.to_string(),
        })?;
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(Error::Transport {
                attempts: 1,
                message: format!("status {}: {}", status, truncate(&body)),
            });
        }
        if !status.is_success() {
            return Err(Error::Config(format!(
                "endpoint rejected request (status {}): {}",
                status,
                truncate(&body)
            )));
        }
        let parsed: WireResponse = serde_json::from_str(&body).map_err(|e| Error::Parse {
            message: format!("completion response: {}", e),
            raw: truncate(&body),
        })?;
        let choice = parsed.choices.into_iter().next().ok_or_else(|| Error::Parse {
            message: "completion response has no choices".to_string(),
            raw: truncate(&body),
        })?;
        let token_scores = choice.logprobs.and_then(|lp| lp.content).map(|items| {
            items
                .into_iter()
                .enumerate()
                .map(|(position, t)| TokenScore {
                    position,
                    token: t.token,
                    logprob: t.logprob,
                    alternatives: t
                        .top_logprobs
                        .into_iter()
                        .map(|a| TokenAlternative {
                            token: a.token,
                            logprob: a.logprob,
                        })
                        .collect(),
                })
                .collect::<Vec<_>>()
        });
        Ok(CompletionResult {
            text: choice.message.content.unwrap_or_default(),
            token_scores,
            backend_id: self.id.clone(),
            cached: false,
        })
    }
}

fn truncate(body: &str) -> String {
    let mut s: String = body.chars().take(200).collect();
    if s.len() < body.len() {
        s.push_str("...");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{Gateway, Message};
    use std::io::{Read, Write};
    use std::net::TcpListener;
    use std::sync::Arc;

    /// Minimal one-thread HTTP server answering scripted responses in
    /// order, then closing.
    fn serve(responses: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/chat/completions", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let mut seen = Vec::new();
            for (status, body) in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut buf = Vec::new();
                let mut chunk = [0u8; 4096];
                let request = loop {
                    let n = stream.read(&mut chunk).unwrap();
                    buf.extend_from_slice(&chunk[..n]);
                    let text = String::from_utf8_lossy(&buf).into_owned();
                    if let Some(head_end) = text.find("\r\n\r\n") {
                        let content_length = text
                            .lines()
                            .find_map(|l| {
                                l.to_ascii_lowercase()
                                    .strip_prefix("content-length:")
                                    .map(|v| v.trim().parse::<usize>().unwrap())
                            })
                            .unwrap_or(0);
                        if buf.len() >= head_end + 4 + content_length {
                            break text;
                        }
                    }
                };
                seen.push(request);
                let reply = format!(
                    "HTTP/1.1 {} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{}",
                    status,
                    body.len(),
                    body
                );
                stream.write_all(reply.as_bytes()).unwrap();
            }
            seen
        });
        (url, handle)
    }

    fn ok_body() -> String {
        serde_json::json!({
            "choices": [{
                "message": {"content": "Reasoning: fine.\nPredicted User Rating: 7"},
                "logprobs": {"content": [
                    {"token": " 7", "logprob": -0.3,
                     "top_logprobs": [
                        {"token": " 7", "logprob": -0.3},
                        {"token": " 8", "logprob": -1.5}
                     ]}
                ]}
            }]
        })
        .to_string()
    }

    #[test]
    fn parses_text_and_token_scores() {
        let (url, handle) = serve(vec![(200, ok_body())]);
        let backend = HttpBackend::new(HttpBackendConfig {
            url,
            model: "test-model".to_string(),
            credential_env: None,
            timeout_secs: 5,
        })
        .unwrap();
        let req = CompletionRequest::new(vec![Message::user("hi")]).with_token_scores(10);
        let out = backend.complete(&req).unwrap();
        assert!(out.text.ends_with("Predicted User Rating: 7"));
        let scores = out.token_scores.unwrap();
        assert_eq!(scores.len(), 1);
        assert_eq!(scores[0].alternatives.len(), 2);
        let seen = handle.join().unwrap();
        // logprobs requested on the wire; intent never sent.
        assert!(seen[0].contains("\"top_logprobs\":10"));
        assert!(!seen[0].contains("intent"));
    }

    #[test]
    fn server_error_retried_by_gateway() {
        let (url, handle) = serve(vec![
            (500, "{\"error\":\"boom\"}".to_string()),
            (200, ok_body()),
        ]);
        let backend = HttpBackend::new(HttpBackendConfig {
            url,
            model: "m".to_string(),
            credential_env: None,
            timeout_secs: 5,
        })
        .unwrap();
        let gw = Gateway::new(Arc::new(backend))
            .with_retries(3, std::time::Duration::from_millis(0));
        let out = gw
            .complete(&CompletionRequest::new(vec![Message::user("hi")]))
            .unwrap();
        assert!(!out.text.is_empty());
        assert_eq!(handle.join().unwrap().len(), 2);
    }

    #[test]
    fn client_error_is_not_retryable() {
        let (url, handle) = serve(vec![(400, "{\"error\":\"bad\"}".to_string())]);
        let backend = HttpBackend::new(HttpBackendConfig {
            url,
            model: "m".to_string(),
            credential_env: None,
            timeout_secs: 5,
        })
        .unwrap();
        let err = backend
            .complete(&CompletionRequest::new(vec![Message::user("hi")]))
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        handle.join().unwrap();
    }

    #[test]
    fn credential_header_sent_when_env_set() {
        let var = "REVREC_TEST_CREDENTIAL";
        std::env::set_var(var, "sekrit");
        let (url, handle) = serve(vec![(200, ok_body())]);
        let backend = HttpBackend::new(HttpBackendConfig {
            url,
            model: "m".to_string(),
            credential_env: Some(var.to_string()),
            timeout_secs: 5,
        })
        .unwrap();
        backend
            .complete(&CompletionRequest::new(vec![Message::user("hi")]))
            .unwrap();
        let seen = handle.join().unwrap();
        assert!(seen[0].to_ascii_lowercase().contains("authorization: bearer sekrit"));
        std::env::remove_var(var);
    }
}
