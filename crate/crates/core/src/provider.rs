//! Language-model providers.
//!
//! Everything in the pipeline talks to a model through [`LlmProvider`]. Two
//! implementations ship here: [`ScriptedProvider`] replays replies from a
//! script (keyed by prompt hash, call ordinal or prompt substring) and
//! [`RemoteProvider`] calls an OpenAI-compatible chat-completions endpoint.
//! [`crate::simulator::SimulatedProvider`] is a rule-based stand-in used as
//! the scripted fallback.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// Default sampling temperature for every stage.
pub const DEFAULT_TEMPERATURE: f64 = 0.7;

pub trait LlmProvider: Send + Sync {
    fn complete(&self, prompt: &str, temperature: f64, seed: Option<u64>) -> Result<String>;
}

impl<P: LlmProvider + ?Sized> LlmProvider for &P {
    fn complete(&self, prompt: &str, temperature: f64, seed: Option<u64>) -> Result<String> {
        (**self).complete(prompt, temperature, seed)
    }
}

impl<P: LlmProvider + ?Sized> LlmProvider for Box<P> {
    fn complete(&self, prompt: &str, temperature: f64, seed: Option<u64>) -> Result<String> {
        (**self).complete(prompt, temperature, seed)
    }
}

impl<P: LlmProvider + ?Sized> LlmProvider for std::sync::Arc<P> {
    fn complete(&self, prompt: &str, temperature: f64, seed: Option<u64>) -> Result<String> {
        (**self).complete(prompt, temperature, seed)
    }
}

/// Hex SHA-256 of a prompt, the key used by hash-addressed script entries.
pub fn prompt_hash(prompt: &str) -> String {
    let digest = Sha256::digest(prompt.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// One line of a script file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ordinal: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub reply: String,
}

impl ScriptEntry {
    fn matches(&self, prompt: &str, hash: &str, ordinal: u64, seed: Option<u64>) -> bool {
        if self.seed.is_some() && self.seed != seed {
            return false;
        }
        if let Some(o) = self.ordinal {
            return o == ordinal;
        }
        if let Some(h) = &self.hash {
            return h == hash;
        }
        if let Some(c) = &self.contains {
            return prompt.contains(c.as_str());
        }
        false
    }

    fn rank(&self) -> u8 {
        match (self.ordinal, &self.hash, self.seed) {
            (Some(_), _, _) => 0,
            (None, Some(_), Some(_)) => 1,
            (None, Some(_), None) => 2,
            _ => 3,
        }
    }
}

/// Replays scripted replies.
///
/// Lookup order for a call: an ordinal entry for this call's index, then a
/// hash entry pinned to the call's seed, then any hash entry, then the first
/// `contains` entry in file order, then the fallback provider. Ordinal
/// entries are only reproducible when calls are made sequentially.
pub struct ScriptedProvider {
    entries: Vec<ScriptEntry>,
    calls: AtomicU64,
    fallback: Option<Box<dyn LlmProvider>>,
}

impl Default for ScriptedProvider {
    fn default() -> Self {
        Self::new(Vec::new())
    }
}

impl ScriptedProvider {
    pub fn new(mut entries: Vec<ScriptEntry>) -> Self {
        // Stable sort keeps file order within a rank.
        entries.sort_by_key(ScriptEntry::rank);
        Self {
            entries,
            calls: AtomicU64::new(0),
            fallback: None,
        }
    }

    /// Replies returned in call order.
    pub fn sequence<I, S>(replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::new(
            replies
                .into_iter()
                .enumerate()
                .map(|(i, r)| ScriptEntry {
                    hash: None,
                    ordinal: Some(i as u64),
                    contains: None,
                    seed: None,
                    reply: r.into(),
                })
                .collect(),
        )
    }

    /// Reads a JSON-lines script file.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: ScriptEntry = serde_json::from_str(line).map_err(|e| Error::Schema {
                line: i + 1,
                detail: e.to_string(),
            })?;
            entries.push(entry);
        }
        Ok(Self::new(entries))
    }

    pub fn with_fallback(mut self, fallback: impl LlmProvider + 'static) -> Self {
        self.fallback = Some(Box::new(fallback));
        self
    }

    pub fn push(&mut self, entry: ScriptEntry) {
        self.entries.push(entry);
        self.entries.sort_by_key(ScriptEntry::rank);
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

impl LlmProvider for ScriptedProvider {
    fn complete(&self, prompt: &str, temperature: f64, seed: Option<u64>) -> Result<String> {
        let ordinal = self.calls.fetch_add(1, Ordering::SeqCst);
        let hash = prompt_hash(prompt);
        if let Some(e) = self
            .entries
            .iter()
            .find(|e| e.matches(prompt, &hash, ordinal, seed))
        {
            return Ok(e.reply.clone());
        }
        match &self.fallback {
            Some(f) => f.complete(prompt, temperature, seed),
            None => Err(Error::Provider(format!(
                "no scripted reply for call {ordinal} (prompt hash {hash})"
            ))),
        }
    }
}

/// Settings for [`RemoteProvider`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub max_concurrent_requests: usize,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub backoff_millis: u64,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-4".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            max_concurrent_requests: 8,
            timeout_secs: 120,
            max_retries: 3,
            backoff_millis: 500,
        }
    }
}

/// Counting semaphore bounding in-flight requests.
struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Gate {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn enter(&self) -> GateGuard<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        GateGuard(self)
    }
}

struct GateGuard<'a>(&'a Gate);

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

/// OpenAI-compatible chat-completions client with a concurrency cap and
/// retry-with-backoff.
pub struct RemoteProvider {
    config: RemoteConfig,
    api_key: Option<String>,
    agent: ureq::Agent,
    gate: Gate,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: Option<String>,
}

impl RemoteProvider {
    pub fn new(config: RemoteConfig) -> Result<Self> {
        if config.endpoint.is_empty() {
            return Err(Error::Config("remote provider endpoint is empty".into()));
        }
        let api_key = std::env::var(&config.api_key_env).ok();
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .build()
            .into();
        let gate = Gate::new(config.max_concurrent_requests);
        Ok(Self {
            config,
            api_key,
            agent,
            gate,
        })
    }

    fn attempt(&self, body: &serde_json::Value) -> std::result::Result<String, (bool, String)> {
        let mut req = self.agent.post(&self.config.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(|e| {
            let retryable = match &e {
                ureq::Error::StatusCode(code) => *code == 429 || *code >= 500,
                _ => true,
            };
            (retryable, e.to_string())
        })?;
        let parsed: ChatResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| (false, format!("malformed response: {e}")))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| (false, "response has no content".to_string()))
    }
}

impl LlmProvider for RemoteProvider {
    fn complete(&self, prompt: &str, temperature: f64, seed: Option<u64>) -> Result<String> {
        let mut body = serde_json::json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": temperature,
        });
        if let Some(seed) = seed {
            body["seed"] = seed.into();
        }
        let _permit = self.gate.enter();
        let mut delay = Duration::from_millis(self.config.backoff_millis);
        let mut attempt = 0;
        loop {
            match self.attempt(&body) {
                Ok(text) => return Ok(text),
                Err((retryable, msg)) => {
                    if !retryable || attempt >= self.config.max_retries {
                        return Err(Error::Provider(msg));
                    }
                    log::warn!("provider call failed ({msg}); retrying in {delay:?}");
                    std::thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
            }
        }
    }
}

/// Runs `f` up to `1 + retries` times, retrying on errors `retryable` accepts.
pub fn with_retries<T>(
    retries: u32,
    retryable: impl Fn(&Error) -> bool,
    mut f: impl FnMut(u32) -> Result<T>,
) -> Result<T> {
    let mut attempt = 0;
    loop {
        match f(attempt) {
            Ok(v) => return Ok(v),
            Err(e) if attempt < retries && retryable(&e) => {
                log::debug!("attempt {attempt} failed: {e}");
                attempt += 1;
            }
            Err(e) => return Err(e),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    #[test]
    fn sequence_replays_in_order() {
        let p = ScriptedProvider::sequence(["a", "b"]);
        assert_eq!(p.complete("x", 0.7, None).unwrap(), "a");
        assert_eq!(p.complete("x", 0.7, None).unwrap(), "b");
        assert!(matches!(p.complete("x", 0.7, None), Err(Error::Provider(_))));
    }

    #[test]
    fn hash_entries_are_deterministic_and_seed_aware() {
        let prompt = "hello";
        let mut p = ScriptedProvider::default();
        p.push(ScriptEntry {
            hash: Some(prompt_hash(prompt)),
            ordinal: None,
            contains: None,
            seed: None,
            reply: "any".into(),
        });
        p.push(ScriptEntry {
            hash: Some(prompt_hash(prompt)),
            ordinal: None,
            contains: None,
            seed: Some(7),
            reply: "seven".into(),
        });
        assert_eq!(p.complete(prompt, 0.7, Some(7)).unwrap(), "seven");
        assert_eq!(p.complete(prompt, 0.7, Some(1)).unwrap(), "any");
        assert_eq!(p.complete(prompt, 0.7, None).unwrap(), "any");
    }

    #[test]
    fn contains_entries_and_fallback() {
        let p = ScriptedProvider::new(vec![ScriptEntry {
            hash: None,
            ordinal: None,
            contains: Some("hotel".into()),
            seed: None,
            reply: "H".into(),
        }])
        .with_fallback(ScriptedProvider::sequence(["fb"]));
        assert_eq!(p.complete("book a hotel", 0.7, None).unwrap(), "H");
        assert_eq!(p.complete("book a flight", 0.7, None).unwrap(), "fb");
    }

    #[test]
    fn script_file_reports_bad_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        std::fs::write(&path, "{\"ordinal\": 0, \"reply\": \"ok\"}\n\nnot json\n").unwrap();
        match ScriptedProvider::from_file(&path) {
            Err(Error::Schema { line, .. }) => assert_eq!(line, 3),
            Err(e) => panic!("{e}"),
            Ok(_) => panic!("expected error"),
        }
    }

    #[test]
    fn retries_stop_at_budget() {
        let mut calls = 0;
        let r: Result<()> = with_retries(2, |_| true, |_| {
            calls += 1;
            Err(Error::parse("nope"))
        });
        assert!(r.is_err());
        assert_eq!(calls, 3);
    }

    fn serve(responses: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = std::thread::spawn(move || {
            let mut bodies = Vec::new();
            for (status, body) in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                bodies.push(String::from_utf8(buf).unwrap());
                let reply = format!(
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(reply.as_bytes()).unwrap();
            }
            bodies
        });
        (format!("http://{addr}/v1/chat/completions"), handle)
    }

    #[test]
    fn remote_provider_posts_chat_completion_and_retries() {
        let ok = r#"{"choices":[{"message":{"role":"assistant","content":"INTENT: x"}}]}"#;
        let (url, handle) = serve(vec![(503, "{}".into()), (200, ok.into())]);
        let provider = RemoteProvider::new(RemoteConfig {
            endpoint: url,
            model: "m".into(),
            api_key_env: "DIALOGEN_TEST_KEY_UNSET".into(),
            max_concurrent_requests: 2,
            timeout_secs: 10,
            max_retries: 2,
            backoff_millis: 1,
        })
        .unwrap();
        let reply = provider.complete("prompt text", 0.7, Some(3)).unwrap();
        assert_eq!(reply, "INTENT: x");
        let bodies = handle.join().unwrap();
        let sent: serde_json::Value = serde_json::from_str(&bodies[1]).unwrap();
        assert_eq!(sent["model"], "m");
        assert_eq!(sent["messages"][0]["content"], "prompt text");
        assert_eq!(sent["seed"], 3);
        assert!((sent["temperature"].as_f64().unwrap() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn remote_provider_gives_up_on_client_errors() {
        let (url, handle) = serve(vec![(400, "{}".into())]);
        let provider = RemoteProvider::new(RemoteConfig {
            endpoint: url,
            backoff_millis: 1,
            ..RemoteConfig::default()
        })
        .unwrap();
        assert!(matches!(provider.complete("p", 0.7, None), Err(Error::Provider(_))));
        handle.join().unwrap();
    }
}
