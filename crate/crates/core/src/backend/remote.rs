//! OpenAI-style HTTP chat-completion backend.

use std::time::Duration;

use serde_json::{json, Value};

use super::{
    with_retry, AttemptFailure, Backend, BackendDescriptor, BackendError, FairLimiter, SamplingConfig, ScoredToken,
};
use crate::prompts::RenderedPrompt;

/// Environment variable holding the bearer token for remote endpoints.
pub const TOKEN_ENV: &str = "MANNER_ALIGN_BACKEND_TOKEN";

pub struct RemoteChatBackend {
    descriptor: BackendDescriptor,
    endpoint: String,
    agent: ureq::Agent,
    token: Option<String>,
    limiter: FairLimiter,
    send_top_k: bool,
    sleep: fn(Duration),
}

impl std::fmt::Debug for RemoteChatBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        // the token is deliberately left out
        f.debug_struct("RemoteChatBackend")
            .field("descriptor", &self.descriptor)
            .field("has_token", &self.token.is_some())
            .finish()
    }
}

impl RemoteChatBackend {
    pub fn new(descriptor: BackendDescriptor) -> Result<Self, String> {
        descriptor.validate()?;
        let endpoint = descriptor.endpoint.clone().expect("validated").trim_end_matches('/').to_string();
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(descriptor.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            limiter: FairLimiter::new(descriptor.max_in_flight),
            endpoint,
            agent,
            token: std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty()),
            send_top_k: true,
            sleep: std::thread::sleep,
            descriptor,
        })
    }

    pub fn with_token(mut self, token: Option<String>) -> Self {
        self.token = token;
        self
    }

    /// Some servers reject the non-standard `top_k` field.
    pub fn with_top_k(mut self, send: bool) -> Self {
        self.send_top_k = send;
        self
    }

    pub fn with_sleep(mut self, sleep: fn(Duration)) -> Self {
        self.sleep = sleep;
        self
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value, AttemptFailure> {
        let url = format!("{}/{}", self.endpoint, path);
        let mut req = self.agent.post(&url);
        if let Some(token) = &self.token {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let _permit = self.limiter.acquire();
        let mut resp = req.send_json(body).map_err(|e| AttemptFailure::Transient(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| AttemptFailure::Transient(format!("reading body: {e}")))?;
        classify_response(status, &text)
    }

    fn request_body(&self, prompt: &RenderedPrompt, config: &SamplingConfig) -> Value {
        let cfg = config.effective();
        let mut body = json!({
            "model": self.descriptor.model_name,
            "messages": [{"role": "user", "content": prompt.text}],
            "temperature": cfg.temperature,
            "top_p": cfg.top_p,
            "max_tokens": cfg.max_length,
        });
        if self.send_top_k {
            if let Some(k) = cfg.top_k {
                body["top_k"] = json!(k);
            }
        }
        body
    }
}

fn error_message(text: &str) -> String {
    serde_json::from_str::<Value>(text)
        .ok()
        .and_then(|v| v.pointer("/error/message").and_then(Value::as_str).map(str::to_string))
        .unwrap_or_else(|| text.chars().take(200).collect())
}

fn classify_response(status: u16, text: &str) -> Result<Value, AttemptFailure> {
    match status {
        200..=299 => serde_json::from_str(text)
            .map_err(|e| AttemptFailure::Refusal { status, message: format!("invalid JSON body: {e}") }),
        408 | 429 | 500..=599 => Err(AttemptFailure::Transient(format!("HTTP {status}: {}", error_message(text)))),
        _ => {
            let message = error_message(text);
            let lower = message.to_lowercase();
            if lower.contains("context length") || lower.contains("context_length") || lower.contains("maximum context")
            {
                Err(AttemptFailure::Overflow { prompt_tokens: 0, limit: 0 })
            } else {
                Err(AttemptFailure::Refusal { status, message })
            }
        }
    }
}

impl Backend for RemoteChatBackend {
    fn name(&self) -> &str {
        &self.descriptor.model_name
    }

    fn complete(&self, prompt: &RenderedPrompt, config: &SamplingConfig) -> Result<String, BackendError> {
        let body = self.request_body(prompt, config);
        with_retry(&self.descriptor.retry_policy, self.sleep, |_| {
            let v = self.post("chat/completions", &body)?;
            v.pointer("/choices/0/message/content")
                .and_then(Value::as_str)
                .map(str::to_string)
                .ok_or_else(|| AttemptFailure::Refusal { status: 200, message: "response has no message content".into() })
        })
    }

    fn score_tokens(&self, context: &str, continuation: &str) -> Result<Vec<ScoredToken>, BackendError> {
        let body = json!({
            "model": self.descriptor.model_name,
            "prompt": format!("{context}{continuation}"),
            "max_tokens": 0,
            "echo": true,
            "logprobs": 1,
            "temperature": 0.0,
        });
        let v = with_retry(&self.descriptor.retry_policy, self.sleep, |_| {
            self.post("completions", &body).map_err(|e| match e {
                AttemptFailure::Refusal { status: 404 | 405 | 501, message } => AttemptFailure::Unsupported(message),
                other => other,
            })
        })?;
        echoed_continuation(&v, context, continuation)
    }
}

/// Extracts the continuation's tokens from an echoed completion response.
/// `text_offset` is taken as a character offset into the echoed prompt.
fn echoed_continuation(v: &Value, context: &str, continuation: &str) -> Result<Vec<ScoredToken>, BackendError> {
    let lp = v
        .pointer("/choices/0/logprobs")
        .filter(|l| !l.is_null())
        .ok_or_else(|| BackendError::ScoringUnsupported("response carries no logprobs".into()))?;
    let field = |name: &str| {
        lp.get(name)
            .and_then(Value::as_array)
            .ok_or_else(|| BackendError::ScoringUnsupported(format!("logprobs.{name} missing")))
    };
    let tokens = field("tokens")?;
    let logprobs = field("token_logprobs")?;
    let offsets = field("text_offset")?;
    if tokens.len() != logprobs.len() || tokens.len() != offsets.len() {
        return Err(BackendError::TokenizationMismatch("logprob arrays differ in length".into()));
    }
    let context_chars = context.chars().count();
    let mut out = Vec::new();
    for ((tok, lp), off) in tokens.iter().zip(logprobs).zip(offsets) {
        let off = off.as_u64().ok_or_else(|| BackendError::TokenizationMismatch("bad text_offset".into()))? as usize;
        let text = tok.as_str().ok_or_else(|| BackendError::TokenizationMismatch("bad token".into()))?;
        if off + text.chars().count() <= context_chars {
            continue;
        }
        if off < context_chars {
            return Err(BackendError::TokenizationMismatch(format!("token `{text}` straddles the context boundary")));
        }
        let logprob = lp
            .as_f64()
            .ok_or_else(|| BackendError::ScoringUnsupported(format!("no logprob for token `{text}`")))?;
        if !logprob.is_finite() || logprob > 0.0 {
            return Err(BackendError::TokenizationMismatch(format!("invalid logprob {logprob} for `{text}`")));
        }
        out.push(ScoredToken { token_text: text.to_string(), logprob });
    }
    let joined: String = out.iter().map(|t| t.token_text.as_str()).collect();
    if joined != continuation || out.is_empty() {
        return Err(BackendError::TokenizationMismatch(format!(
            "echoed tokens `{joined}` do not tile the continuation"
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::RetryPolicy;
    use crate::prompts::render_rewrite_prompt;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    /// Serves scripted (status, body) responses in order, repeating the last.
    fn scripted_server(script: Vec<(u16, String)>) -> (String, Arc<AtomicUsize>, std::sync::mpsc::Receiver<String>) {
        let server = tiny_http::Server::http("127.0.0.1:0").unwrap();
        let addr = server.server_addr().to_ip().unwrap();
        let hits = Arc::new(AtomicUsize::new(0));
        let (tx, rx) = std::sync::mpsc::channel();
        let counter = hits.clone();
        std::thread::spawn(move || {
            for mut req in server.incoming_requests() {
                let n = counter.fetch_add(1, Ordering::SeqCst);
                let mut body = String::new();
                req.as_reader().read_to_string(&mut body).unwrap();
                let _ = tx.send(body);
                let (status, text) = script[n.min(script.len() - 1)].clone();
                let _ = req.respond(tiny_http::Response::from_string(text).with_status_code(status));
            }
        });
        (format!("http://{addr}/v1"), hits, rx)
    }

    fn backend(url: &str, attempts: u32) -> RemoteChatBackend {
        let mut d = BackendDescriptor::remote("m", url);
        d.retry_policy = RetryPolicy { max_attempts: attempts, base_backoff: Duration::ZERO };
        d.timeout = Duration::from_secs(5);
        RemoteChatBackend::new(d).unwrap().with_token(None).with_sleep(|_| {})
    }

    fn ok_body(content: &str) -> String {
        json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string()
    }

    #[test]
    fn request_shape_and_reply() {
        let (url, _, rx) = scripted_server(vec![(200, ok_body("Revised Answer: x\nExplanation: y"))]);
        let b = backend(&url, 3);
        let p = render_rewrite_prompt(crate::prompts::RewriteVariant::No1, "q", "a").unwrap();
        assert_eq!(b.complete(&p, &SamplingConfig::REVIEW).unwrap(), "Revised Answer: x\nExplanation: y");
        let sent: Value = serde_json::from_str(&rx.recv().unwrap()).unwrap();
        assert_eq!(sent["model"], "m");
        assert_eq!(sent["messages"].as_array().unwrap().len(), 1);
        assert_eq!(sent["messages"][0]["role"], "user");
        assert_eq!(sent["temperature"], 0.0);
        assert_eq!(sent["top_k"], 1);
        assert_eq!(sent["max_tokens"], 2048);
    }

    #[test]
    fn retries_then_succeeds() {
        let (url, hits, _rx) =
            scripted_server(vec![(503, "busy".into()), (503, "busy".into()), (200, ok_body("done"))]);
        let b = backend(&url, 3);
        let p = render_rewrite_prompt(crate::prompts::RewriteVariant::No1, "q", "a").unwrap();
        assert_eq!(b.complete(&p, &SamplingConfig::REVIEW).unwrap(), "done");
        assert_eq!(hits.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn exhausts_retries() {
        let (url, hits, _rx) = scripted_server(vec![(500, "{\"error\":{\"message\":\"down\"}}".into())]);
        let b = backend(&url, 2);
        let p = render_rewrite_prompt(crate::prompts::RewriteVariant::No1, "q", "a").unwrap();
        let err = b.complete(&p, &SamplingConfig::REVIEW).unwrap_err();
        assert_eq!(err, BackendError::Transport { attempts: 2, message: "HTTP 500: down".into() });
        assert_eq!(hits.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn unreachable_endpoint() {
        // bind then drop to get a port nobody listens on
        let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let b = backend(&format!("http://127.0.0.1:{port}/v1"), 3);
        let p = render_rewrite_prompt(crate::prompts::RewriteVariant::No1, "q", "a").unwrap();
        assert!(matches!(b.complete(&p, &SamplingConfig::REVIEW), Err(BackendError::Transport { attempts: 3, .. })));
    }

    #[test]
    fn refusal_and_overflow() {
        let (url, hits, _rx) = scripted_server(vec![
            (401, "{\"error\":{\"message\":\"bad key\"}}".into()),
            (400, "{\"error\":{\"message\":\"This model's maximum context length is 2048 tokens\"}}".into()),
        ]);
        let b = backend(&url, 3);
        let p = render_rewrite_prompt(crate::prompts::RewriteVariant::No1, "q", "a").unwrap();
        assert_eq!(
            b.complete(&p, &SamplingConfig::REVIEW),
            Err(BackendError::Refusal { attempts: 1, status: 401, message: "bad key".into() })
        );
        assert!(matches!(b.complete(&p, &SamplingConfig::REVIEW), Err(BackendError::ContextOverflow { .. })));
        assert_eq!(hits.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn echoed_scoring() {
        let body = json!({"choices": [{"logprobs": {
            "tokens": ["Q", ":", " is", " red"],
            "token_logprobs": [null, -0.1, -0.2, -0.7],
            "text_offset": [0, 1, 2, 5],
        }}]})
        .to_string();
        let (url, _, rx) = scripted_server(vec![(200, body), (200, ok_body("no logprobs")), (404, "nope".into())]);
        let b = backend(&url, 1);
        let toks = b.score_tokens("Q:", " is red").unwrap();
        assert_eq!(toks, vec![
            ScoredToken { token_text: " is".into(), logprob: -0.2 },
            ScoredToken { token_text: " red".into(), logprob: -0.7 },
        ]);
        let sent: Value = serde_json::from_str(&rx.recv().unwrap()).unwrap();
        assert_eq!(sent["echo"], true);
        assert_eq!(sent["prompt"], "Q: is red");
        assert!(matches!(b.score_tokens("Q:", " is red"), Err(BackendError::ScoringUnsupported(_))));
        assert!(matches!(b.score_tokens("Q:", " is red"), Err(BackendError::ScoringUnsupported(_))));
    }

    #[test]
    fn straddling_token_is_a_mismatch() {
        let v = json!({"choices": [{"logprobs": {
            "tokens": ["Q:", " is"], "token_logprobs": [null, -0.2], "text_offset": [0, 2],
        }}]});
        assert!(matches!(echoed_continuation(&v, "Q: i", "s"), Err(BackendError::TokenizationMismatch(_))));
    }
}
