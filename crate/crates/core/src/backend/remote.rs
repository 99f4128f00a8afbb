use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Backend, BackendError, BackendRequest, API_KEY_ENV};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RemoteConfig {
    /// Base URL; requests go to `{base_url}/chat/completions`.
    pub base_url: String,
    pub model: String,
    pub timeout_secs: u64,
    pub max_in_flight: usize,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            base_url: "http://localhost:8000/v1".into(),
            model: "gpt-4".into(),
            timeout_secs: 60,
            max_in_flight: 4,
        }
    }
}

/// Counting gate for concurrent requests.
#[derive(Debug)]
struct InFlight {
    cap: usize,
    used: Mutex<usize>,
    freed: Condvar,
}

impl InFlight {
    fn acquire(&self) -> Permit<'_> {
        let mut used = self.used.lock().unwrap();
        while *used >= self.cap {
            used = self.freed.wait(used).unwrap();
        }
        *used += 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a InFlight);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.used.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

/// Chat-completions client. Temperature is always 0 and the answer is
/// requested as a JSON object matching the role's schema.
pub struct RemoteBackend {
    config: RemoteConfig,
    api_key: Option<String>,
    agent: ureq::Agent,
    gate: InFlight,
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Self {
        let api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        Self::with_key(config, api_key)
    }

    pub fn with_key(config: RemoteConfig, api_key: Option<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs.max(1))))
            .http_status_as_error(false)
            .build()
            .into();
        let gate = InFlight { cap: config.max_in_flight.max(1), used: Mutex::new(0), freed: Condvar::new() };
        Self { config, api_key, agent, gate }
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    /// The exact JSON body sent for `req`.
    pub fn request_body(&self, req: &BackendRequest) -> Value {
        let system = format!(
            "{}\nRespond with a single JSON object that validates against this schema:\n{}",
            req.role.system_prompt(),
            req.role.response_schema()
        );
        json!({
            "model": self.config.model,
            "temperature": 0,
            "response_format": { "type": "json_object" },
            "messages": [
                { "role": "system", "content": system },
                { "role": "user", "content": req.payload.to_string() }
            ]
        })
    }
}

impl Backend for RemoteBackend {
    fn complete(&self, req: &BackendRequest) -> Result<String, BackendError> {
        let _permit = self.gate.acquire();
        let url = format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'));
        let mut call = self.agent.post(&url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = call
            .send(self.request_body(req).to_string())
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let code = resp.status().as_u16();
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        if code >= 400 {
            return Err(BackendError::Status { code, body });
        }
        let envelope: Value =
            serde_json::from_str(&body).map_err(|e| BackendError::Malformed(e.to_string()))?;
        envelope["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| BackendError::Malformed("missing choices[0].message.content".into()))
    }
}

#[cfg(test)]
mod tests {
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::thread;

    use super::super::schema::*;
    use super::super::{call_structured, RequestRole};
    use super::*;

    /// Serves `replies` in order, one connection each, and returns the
    /// captured request bodies.
    fn mock(replies: Vec<(u16, String)>) -> (String, thread::JoinHandle<Vec<(String, String)>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = thread::spawn(move || {
            let mut seen = Vec::new();
            for (code, body) in replies {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut headers = String::new();
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                    headers.push_str(&line);
                }
                let mut buf = vec![0u8; len];
                reader.read_exact(&mut buf).unwrap();
                seen.push((headers, String::from_utf8(buf).unwrap()));
                let mut out = stream;
                write!(
                    out,
                    "HTTP/1.1 {code} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
            seen
        });
        (format!("http://{addr}/v1"), handle)
    }

    fn chat(content: &str) -> String {
        json!({ "choices": [{ "message": { "role": "assistant", "content": content } }] }).to_string()
    }

    fn state_req() -> BackendRequest {
        BackendRequest::new(RequestRole::AbstractState, &AbstractStatePayload { observation_summary: "s".into() })
    }

    #[test]
    fn sends_chat_request_and_parses_content() {
        let (base, handle) = mock(vec![(200, chat(r#"{"state":"ok"}"#))]);
        let backend = RemoteBackend::with_key(RemoteConfig { base_url: base, ..Default::default() }, Some("k1".into()));
        let out = backend.complete(&state_req()).unwrap();
        assert_eq!(out, r#"{"state":"ok"}"#);
        let seen = handle.join().unwrap();
        let (headers, body) = &seen[0];
        assert!(headers.starts_with("POST /v1/chat/completions"));
        assert!(headers.to_ascii_lowercase().contains("authorization: bearer k1"));
        let body: Value = serde_json::from_str(body).unwrap();
        assert_eq!(body["temperature"], 0);
        assert_eq!(body["response_format"]["type"], "json_object");
        assert!(body["messages"][0]["content"].as_str().unwrap().contains("\"required\""));
    }

    #[test]
    fn server_errors_are_retried_client_errors_are_not() {
        let (base, handle) = mock(vec![(503, "busy".into()), (200, chat(r#"{"state":"x"}"#))]);
        let backend = RemoteBackend::with_key(RemoteConfig { base_url: base, ..Default::default() }, None);
        let v: AbstractStateResponse = call_structured(&backend, &state_req(), 2, |_| Ok(())).unwrap();
        assert_eq!(v.state, "x");
        handle.join().unwrap();

        let (base, handle) = mock(vec![(400, "bad".into())]);
        let backend = RemoteBackend::with_key(RemoteConfig { base_url: base, ..Default::default() }, None);
        let err = call_structured::<AbstractStateResponse, _>(&backend, &state_req(), 2, |_| Ok(())).unwrap_err();
        assert_eq!(err.attempts, 1);
        handle.join().unwrap();
    }

    #[test]
    fn unreachable_host_is_a_retryable_error() {
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let backend = RemoteBackend::with_key(
            RemoteConfig { base_url: format!("http://127.0.0.1:{port}"), timeout_secs: 2, ..Default::default() },
            None,
        );
        let err = backend.complete(&state_req()).unwrap_err();
        assert!(err.is_retryable(), "{err}");
    }
}
