use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::error::{Result, SugarError};

/// Text-generation backend used to build the knowledge bank.
pub trait GeneratorClient {
    /// Stable identifier, part of every cache key.
    fn id(&self) -> String;
    fn generate(&mut self, prompt: &str) -> Result<String>;
    /// Number of raw generations this client has performed.
    fn calls(&self) -> u64;
}

impl GeneratorClient for Box<dyn GeneratorClient> {
    fn id(&self) -> String {
        (**self).id()
    }

    fn generate(&mut self, prompt: &str) -> Result<String> {
        (**self).generate(prompt)
    }

    fn calls(&self) -> u64 {
        (**self).calls()
    }
}

#[derive(Debug, Deserialize)]
struct FixtureAction {
    motion: BTreeMap<String, String>,
    visual: Vec<String>,
    brief: String,
}

#[derive(Debug, Deserialize)]
struct FixtureFile {
    version: u32,
    actions: BTreeMap<String, FixtureAction>,
}

/// Offline generator backed by the bundled versioned corpus.
pub struct FixtureGenerator {
    corpus: FixtureFile,
    calls: u64,
}

impl FixtureGenerator {
    pub fn from_json(json: &str) -> Result<Self> {
        let corpus: FixtureFile = serde_json::from_str(json)?;
        Ok(Self { corpus, calls: 0 })
    }

    pub fn bundled() -> Self {
        Self::from_json(crate::toy::FIXTURE_CORPUS_JSON).expect("bundled corpus parses")
    }

    pub fn brief(&self, action: &str) -> Option<&str> {
        self.corpus
            .actions
            .get(action)
            .map(|a| a.brief.as_str())
    }

    pub fn action_names(&self) -> Vec<String> {
        self.corpus.actions.keys().cloned().collect()
    }

    /// All corpus sentences, for vocabulary construction.
    pub fn all_sentences(&self) -> Vec<String> {
        let mut out = Vec::new();
        for action in self.corpus.actions.values() {
            out.extend(action.motion.values().cloned());
            out.extend(action.visual.iter().cloned());
            out.push(action.brief.clone());
        }
        out
    }
}

fn prompt_field(prompt: &str, field: &str) -> Option<String> {
    prompt.lines().find_map(|line| {
        let (key, value) = line.split_once(':')?;
        (key.trim() == field).then(|| value.trim().to_string())
    })
}

impl GeneratorClient for FixtureGenerator {
    fn id(&self) -> String {
        format!("fixture-v{}", self.corpus.version)
    }

    fn generate(&mut self, prompt: &str) -> Result<String> {
        self.calls += 1;
        let action = prompt_field(prompt, "Action").ok_or_else(|| {
            SugarError::Generator("prompt has no Action field".into())
        })?;
        let entry = self.corpus.actions.get(&action).ok_or_else(|| {
            SugarError::Generator(format!("fixture corpus has no action {action:?}"))
        })?;
        match prompt_field(prompt, "Frame") {
            Some(frame) => {
                let idx: usize = frame.parse().map_err(|_| {
                    SugarError::Generator(format!("bad frame id {frame:?}"))
                })?;
                Ok(entry.visual[idx % entry.visual.len()].clone())
            }
            None => {
                let mut lines = Vec::with_capacity(entry.motion.len());
                for part in crate::knowledge::BODY_PARTS {
                    let sentence = entry.motion.get(part).ok_or_else(|| {
                        SugarError::Generator(format!(
                            "fixture corpus for {action:?} is missing part {part}"
                        ))
                    })?;
                    lines.push(format!("{part} : {sentence}"));
                }
                Ok(lines.join("\n"))
            }
        }
    }

    fn calls(&self) -> u64 {
        self.calls
    }
}

/// Disk cache keyed by (prompt hash, generator id). Writes are atomic
/// (temp file + rename), so concurrent writers of the same key settle on
/// identical content last-writer-wins.
pub struct CachingGenerator<G> {
    inner: G,
    dir: PathBuf,
}

impl<G: GeneratorClient> CachingGenerator<G> {
    pub fn new(inner: G, dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            inner,
            dir: dir.to_path_buf(),
        })
    }

    pub fn inner(&self) -> &G {
        &self.inner
    }

    fn key(&self, prompt: &str) -> String {
        let mut hasher = Sha256::new();
        hasher.update(prompt.as_bytes());
        let digest = hasher.finalize();
        let id: String = self
            .inner
            .id()
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() { c } else { '-' })
            .collect();
        format!("{}-{id}.txt", hex_prefix(&digest, 16))
    }
}

fn hex_prefix(bytes: &[u8], n: usize) -> String {
    bytes[..n].iter().map(|b| format!("{b:02x}")).collect()
}

impl<G: GeneratorClient> GeneratorClient for CachingGenerator<G> {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn generate(&mut self, prompt: &str) -> Result<String> {
        let path = self.dir.join(self.key(prompt));
        if path.exists() {
            return Ok(std::fs::read_to_string(&path)?);
        }
        let response = self.inner.generate(prompt)?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, &response)?;
        std::fs::rename(&tmp, &path)?;
        Ok(response)
    }

    fn calls(&self) -> u64 {
        self.inner.calls()
    }
}

pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

/// POST transport, mockable in tests.
pub trait HttpTransport {
    fn post(&mut self, url: &str, auth: Option<&str>, body: &str) -> Result<HttpResponse>;
}

/// Blocking transport over ureq.
pub struct UreqTransport;

impl HttpTransport for UreqTransport {
    fn post(&mut self, url: &str, auth: Option<&str>, body: &str) -> Result<HttpResponse> {
        let mut request = ureq::post(url).header("content-type", "application/json");
        if let Some(token) = auth {
            request = request.header("authorization", &format!("Bearer {token}"));
        }
        match request.send(body) {
            Ok(mut response) => Ok(HttpResponse {
                status: response.status().as_u16(),
                body: response
                    .body_mut()
                    .read_to_string()
                    .map_err(|e| SugarError::Generator(format!("read body: {e}")))?,
            }),
            Err(ureq::Error::StatusCode(code)) => Ok(HttpResponse {
                status: code,
                body: String::new(),
            }),
            Err(e) => Err(SugarError::Generator(format!("transport: {e}"))),
        }
    }
}

/// External HTTP generator: JSON {"prompt": ...} in, {"text": ...} out.
/// Retries transport failures and 5xx responses with exponential backoff.
pub struct HttpGenerator {
    endpoint: String,
    auth_token: Option<String>,
    max_retries: u32,
    base_backoff: Duration,
    transport: Box<dyn HttpTransport>,
    calls: u64,
}

impl HttpGenerator {
    pub fn new(endpoint: &str, auth_token: Option<String>) -> Self {
        Self::with_transport(endpoint, auth_token, Box::new(UreqTransport))
    }

    pub fn with_transport(
        endpoint: &str,
        auth_token: Option<String>,
        transport: Box<dyn HttpTransport>,
    ) -> Self {
        Self {
            endpoint: endpoint.to_string(),
            auth_token,
            max_retries: 3,
            base_backoff: Duration::from_millis(250),
            transport,
            calls: 0,
        }
    }

    pub fn with_retry(mut self, max_retries: u32, base_backoff: Duration) -> Self {
        self.max_retries = max_retries;
        self.base_backoff = base_backoff;
        self
    }
}

impl GeneratorClient for HttpGenerator {
    fn id(&self) -> String {
        format!("http-{}", self.endpoint)
    }

    fn generate(&mut self, prompt: &str) -> Result<String> {
        let body = serde_json::json!({ "prompt": prompt }).to_string();
        let mut last_err = None;
        for attempt in 0..=self.max_retries {
            if attempt > 0 {
                std::thread::sleep(self.base_backoff * 2u32.pow(attempt - 1));
            }
            self.calls += 1;
            match self
                .transport
                .post(&self.endpoint, self.auth_token.as_deref(), &body)
            {
                Ok(response) if response.status == 200 => {
                    let parsed: serde_json::Value = serde_json::from_str(&response.body)?;
                    let text = parsed.get("text").and_then(|t| t.as_str()).ok_or_else(|| {
                        SugarError::Generator("response has no text field".into())
                    })?;
                    return Ok(text.to_string());
                }
                Ok(response) if response.status >= 500 => {
                    last_err = Some(SugarError::Generator(format!(
                        "server error {}",
                        response.status
                    )));
                }
                Ok(response) => {
                    return Err(SugarError::Generator(format!(
                        "request rejected with status {}",
                        response.status
                    )));
                }
                Err(e) => last_err = Some(e),
            }
        }
        Err(last_err.unwrap_or_else(|| SugarError::Generator("no attempts made".into())))
    }

    fn calls(&self) -> u64 {
        self.calls
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct FlakyTransport {
        failures_left: u32,
        posts: u64,
    }

    impl HttpTransport for FlakyTransport {
        fn post(&mut self, _url: &str, _auth: Option<&str>, body: &str) -> Result<HttpResponse> {
            self.posts += 1;
            let parsed: serde_json::Value = serde_json::from_str(body).unwrap();
            assert!(parsed.get("prompt").is_some());
            if self.failures_left > 0 {
                self.failures_left -= 1;
                return Ok(HttpResponse {
                    status: 503,
                    body: String::new(),
                });
            }
            Ok(HttpResponse {
                status: 200,
                body: serde_json::json!({ "text": "ok" }).to_string(),
            })
        }
    }

    #[test]
    fn http_generator_retries_server_errors() {
        let transport = FlakyTransport {
            failures_left: 2,
            posts: 0,
        };
        let mut client = HttpGenerator::with_transport("http://unit.test", None, Box::new(transport))
            .with_retry(3, Duration::from_millis(0));
        assert_eq!(client.generate("hello").unwrap(), "ok");
        assert_eq!(client.calls(), 3);
    }

    #[test]
    fn http_generator_gives_up_after_retries() {
        let transport = FlakyTransport {
            failures_left: 10,
            posts: 0,
        };
        let mut client = HttpGenerator::with_transport("http://unit.test", None, Box::new(transport))
            .with_retry(2, Duration::from_millis(0));
        assert!(client.generate("hello").is_err());
        assert_eq!(client.calls(), 3);
    }

    #[test]
    fn http_generator_does_not_retry_client_errors() {
        struct Reject;
        impl HttpTransport for Reject {
            fn post(&mut self, _: &str, _: Option<&str>, _: &str) -> Result<HttpResponse> {
                Ok(HttpResponse {
                    status: 401,
                    body: String::new(),
                })
            }
        }
        let mut client = HttpGenerator::with_transport("http://unit.test", None, Box::new(Reject))
            .with_retry(5, Duration::from_millis(0));
        assert!(client.generate("hello").is_err());
        assert_eq!(client.calls(), 1);
    }

    #[test]
    fn caching_generator_serves_warm_hits_without_calls() {
        let dir = tempfile::tempdir().unwrap();
        let mut client =
            CachingGenerator::new(FixtureGenerator::bundled(), dir.path()).unwrap();
        let prompt = "describe\nAction : wave the hand";
        let first = client.generate(prompt).unwrap();
        assert_eq!(client.calls(), 1);
        let second = client.generate(prompt).unwrap();
        assert_eq!(first, second);
        assert_eq!(client.calls(), 1, "warm cache must not call the generator");
    }

    #[test]
    fn fixture_confusable_pair_shares_motion_but_not_visuals() {
        let mut client = FixtureGenerator::bundled();
        let motion_a = client
            .generate("...\nAction : drink from bottle")
            .unwrap();
        let motion_b = client.generate("...\nAction : drink from can").unwrap();
        let motion_a = motion_a
            .lines()
            .map(|l| l.split_once(':').unwrap().1)
            .collect::<Vec<_>>();
        let motion_b = motion_b
            .lines()
            .map(|l| l.split_once(':').unwrap().1)
            .collect::<Vec<_>>();
        assert_eq!(motion_a, motion_b, "pair motion parts must be identical");
        let visual_a = client
            .generate("...\nAction : drink from bottle\nFrame : 0")
            .unwrap();
        let visual_b = client
            .generate("...\nAction : drink from can\nFrame : 0")
            .unwrap();
        assert_ne!(visual_a, visual_b, "pair visuals must differ");
    }
}
