//! Failure-type judging through a chat-completions endpoint.
//!
//! A failed solution is sent, with the problem and a reference solution, to
//! an external judge model using a fixed instruction template. The judge
//! answers with a boxed letter: A (unrelated / dummy), B (low-level
//! execution), C (high-level plan) or D (actually acceptable).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, OnceLock};
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::{MetricSeries, Unit};

/// The instruction template. Its three `{}` slots take the problem, the
/// reference solution and the student solution, in that order.
pub const PROMPT_TEMPLATE: &str = include_str!("judge_prompt.txt");

/// Environment variable consulted for the endpoint token when none is
/// configured.
pub const TOKEN_ENV: &str = "HICRA_JUDGE_TOKEN";

pub fn fill_prompt(problem: &str, reference: &str, student: &str) -> String {
    let parts: Vec<&str> = PROMPT_TEMPLATE.split("{}").collect();
    debug_assert_eq!(parts.len(), 4);
    let mut out = String::with_capacity(PROMPT_TEMPLATE.len() + problem.len() + reference.len() + student.len());
    out.push_str(parts[0]);
    out.push_str(problem);
    out.push_str(parts[1]);
    out.push_str(reference);
    out.push_str(parts[2]);
    out.push_str(student);
    out.push_str(parts[3]);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Choice {
    A,
    B,
    C,
    D,
}

impl Choice {
    pub fn from_letter(c: char) -> Option<Self> {
        match c.to_ascii_uppercase() {
            'A' => Some(Choice::A),
            'B' => Some(Choice::B),
            'C' => Some(Choice::C),
            'D' => Some(Choice::D),
            _ => None,
        }
    }

    pub fn category(self) -> Category {
        match self {
            Choice::A => Category::Dummy,
            Choice::B => Category::Others,
            Choice::C => Category::PlanningStrategy,
            Choice::D => Category::Acceptable,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    PlanningStrategy,
    Others,
    Acceptable,
    Dummy,
}

impl Category {
    pub fn as_str(self) -> &'static str {
        match self {
            Category::PlanningStrategy => "planning_strategy",
            Category::Others => "others",
            Category::Acceptable => "acceptable",
            Category::Dummy => "dummy",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorVerdict {
    pub choice: Choice,
    pub category: Category,
    pub raw_response: String,
}

fn boxed_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        // \boxed{X}, \boxed{ (X) }, \boxed{\text{X}}, \boxed{X.}, or \boxed X
        Regex::new(
            r"\\+boxed\s*(?:\{\s*(?:\\[A-Za-z]+\s*\{\s*)?\(?\s*([A-Za-z])\s*\)?[\s.:]*\}|\s+\(?([A-Za-z])\)?(?:[^A-Za-z0-9]|$))",
        )
        .expect("valid regex")
    })
}

/// Extracts the last boxed letter of a judge response.
pub fn parse_verdict(response: &str) -> Result<ErrorVerdict> {
    let letter = boxed_regex()
        .captures_iter(response)
        .last()
        .and_then(|c| c.get(1).or_else(|| c.get(2)))
        .and_then(|m| m.as_str().chars().next())
        .ok_or_else(|| Error::Judge("unparseable verdict".into()))?;
    let choice = Choice::from_letter(letter)
        .ok_or_else(|| Error::Judge(format!("verdict letter '{letter}' outside A-D")))?;
    Ok(ErrorVerdict {
        choice,
        category: choice.category(),
        raw_response: response.to_owned(),
    })
}

/// Something that answers a single-turn prompt.
pub trait ChatBackend: Sync {
    /// Identifies the model; part of the cache key.
    fn model(&self) -> &str;
    fn complete(&self, prompt: &str) -> Result<String>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointConfig {
    pub url: String,
    pub model: String,
    /// Bearer token; falls back to the `HICRA_JUDGE_TOKEN` environment variable.
    pub token: Option<String>,
    pub temperature: f64,
    pub timeout_secs: u64,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        EndpointConfig {
            url: "http://localhost:8000/v1/chat/completions".into(),
            model: "judge".into(),
            token: None,
            temperature: 0.0,
            timeout_secs: 120,
        }
    }
}

/// OpenAI-style chat-completions client.
pub struct HttpChatBackend {
    config: EndpointConfig,
    token: Option<String>,
    agent: ureq::Agent,
}

impl HttpChatBackend {
    pub fn new(config: EndpointConfig) -> Self {
        let token = config.token.clone().or_else(|| std::env::var(TOKEN_ENV).ok());
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        HttpChatBackend { config, token, agent }
    }
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
    content: String,
}

impl ChatBackend for HttpChatBackend {
    fn model(&self) -> &str {
        &self.config.model
    }

    fn complete(&self, prompt: &str) -> Result<String> {
        let body = serde_json::json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.config.temperature,
        });
        let mut req = self.agent.post(&self.config.url).header("Content-Type", "application/json");
        if let Some(t) = &self.token {
            req = req.header("Authorization", format!("Bearer {t}"));
        }
        let mut resp = req
            .send_json(&body)
            .map_err(|e| Error::Endpoint(format!("{}: {e}", self.config.url)))?;
        let status = resp.status().as_u16();
        if status != 200 {
            let text = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(Error::Endpoint(format!(
                "{} returned HTTP {status}: {}",
                self.config.url,
                text.chars().take(200).collect::<String>()
            )));
        }
        let parsed: ChatResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| Error::Endpoint(format!("{}: malformed response: {e}", self.config.url)))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| Error::Endpoint(format!("{}: response has no choices", self.config.url)))
    }
}

/// Responses keyed by a hash of (model, prompt), persisted as JSON.
#[derive(Debug, Default)]
pub struct VerdictCache {
    path: Option<PathBuf>,
    entries: Mutex<BTreeMap<String, String>>,
}

impl VerdictCache {
    pub fn in_memory() -> Self {
        VerdictCache::default()
    }

    /// Opens `path`, starting empty when it does not exist.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let entries = match std::fs::read_to_string(&path) {
            Ok(s) => serde_json::from_str(&s).map_err(|e| Error::json(path.display().to_string(), e))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => BTreeMap::new(),
            Err(e) => return Err(Error::io(&path, e)),
        };
        Ok(VerdictCache {
            path: Some(path),
            entries: Mutex::new(entries),
        })
    }

    pub fn key(model: &str, prompt: &str) -> String {
        let mut h = Sha256::new();
        h.update(model.as_bytes());
        h.update([0u8]);
        h.update(prompt.as_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn get(&self, key: &str) -> Option<String> {
        self.entries.lock().expect("cache lock").get(key).cloned()
    }

    pub fn insert(&self, key: String, response: String) {
        self.entries.lock().expect("cache lock").insert(key, response);
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Writes the cache back to its file, if it has one.
    pub fn save(&self) -> Result<()> {
        let Some(path) = &self.path else {
            return Ok(());
        };
        let text = serde_json::to_string_pretty(&*self.entries.lock().expect("cache lock"))
            .expect("cache serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// One failed solution to judge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureCase {
    #[serde(default)]
    pub step: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub problem: String,
    pub reference: String,
    pub student: String,
}

pub struct JudgeClient<B> {
    backend: B,
    cache: VerdictCache,
    /// Extra attempts after the first failed request.
    pub retries: u32,
    /// Delay before the first retry; doubles on each further retry.
    pub backoff: Duration,
    /// Maximum in-flight requests in [`JudgeClient::classify_batch`].
    pub concurrency: usize,
}

impl<B: ChatBackend> JudgeClient<B> {
    pub fn new(backend: B) -> Self {
        JudgeClient {
            backend,
            cache: VerdictCache::in_memory(),
            retries: 2,
            backoff: Duration::from_millis(500),
            concurrency: 4,
        }
    }

    pub fn with_cache(mut self, cache: VerdictCache) -> Self {
        self.cache = cache;
        self
    }

    pub fn cache(&self) -> &VerdictCache {
        &self.cache
    }

    pub fn backend(&self) -> &B {
        &self.backend
    }

    fn request(&self, prompt: &str) -> Result<String> {
        let mut attempt = 0;
        loop {
            match self.backend.complete(prompt) {
                Ok(r) => return Ok(r),
                Err(_) if attempt < self.retries => {
                    std::thread::sleep(self.backoff * 2u32.pow(attempt));
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }

    pub fn classify_failure(&self, problem: &str, reference: &str, student: &str) -> Result<ErrorVerdict> {
        let prompt = fill_prompt(problem, reference, student);
        let key = VerdictCache::key(self.backend.model(), &prompt);
        if let Some(r) = self.cache.get(&key) {
            return parse_verdict(&r);
        }
        let response = self.request(&prompt)?;
        let verdict = parse_verdict(&response)?;
        self.cache.insert(key, response);
        Ok(verdict)
    }

    /// Judges every case with at most `concurrency` requests in flight;
    /// results are in input order.
    pub fn classify_batch(&self, cases: &[FailureCase]) -> Vec<Result<ErrorVerdict>> {
        let slots: Vec<Mutex<Option<Result<ErrorVerdict>>>> = cases.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let workers = self.concurrency.clamp(1, cases.len().max(1));
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(c) = cases.get(i) else { break };
                    let r = self.classify_failure(&c.problem, &c.reference, &c.student);
                    *slots[i].lock().expect("slot lock") = Some(r);
                });
            }
        });
        slots
            .into_iter()
            .map(|m| m.into_inner().expect("slot lock").expect("every slot filled"))
            .collect()
    }
}

/// Per-step counts of high-level-plan errors and of all other errors
/// (execution and dummy). Acceptable verdicts are excluded; a step with no
/// verdicts is a gap.
pub fn error_series(by_step: &BTreeMap<u64, Vec<ErrorVerdict>>) -> Result<(MetricSeries, MetricSeries)> {
    let mut planning = MetricSeries::new("errors_planning_strategy", Unit::Count);
    let mut others = MetricSeries::new("errors_others", Unit::Count);
    for (&step, verdicts) in by_step {
        if verdicts.is_empty() {
            planning.push(step, None)?;
            others.push(step, None)?;
            continue;
        }
        let count = |f: &dyn Fn(Category) -> bool| verdicts.iter().filter(|v| f(v.category)).count() as f64;
        planning.push(step, Some(count(&|c| c == Category::PlanningStrategy)))?;
        others.push(step, Some(count(&|c| matches!(c, Category::Others | Category::Dummy))))?;
    }
    Ok((planning, others))
}

/// Per-step counts for each of the four categories.
pub fn error_breakdown(by_step: &BTreeMap<u64, Vec<ErrorVerdict>>) -> Result<Vec<MetricSeries>> {
    [Category::PlanningStrategy, Category::Others, Category::Dummy, Category::Acceptable]
        .into_iter()
        .map(|cat| {
            let mut s = MetricSeries::new(format!("verdicts_{}", cat.as_str()), Unit::Count);
            for (&step, verdicts) in by_step {
                let v = (!verdicts.is_empty()).then(|| verdicts.iter().filter(|v| v.category == cat).count() as f64);
                s.push(step, v)?;
            }
            Ok(s)
        })
        .collect()
}
