//! Scoring backends: the contract every neural scorer satisfies, a
//! deterministic mock, and an HTTP client for the model server.
//!
//! All logits are exchanged over pipeline tokens (see [`crate::tokenize`]);
//! mapping to model subwords is the server's job.

use std::collections::HashSet;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::metrics::normalize_answer;
use crate::qaecore::LogitPair;
use crate::tokenize::{is_punct, lower_tokens};

/// Literal that replaces the answer entity in a masked passage.
pub const MASK_TOKEN: &str = "[MASK]";
/// Separator between masked passage and entity in the QG input.
pub const SEP: &str = "[SEP]";

/// Source string fed to the question generator.
pub fn qg_source(masked_text: &str, entity: &str) -> String {
    format!("{masked_text} {SEP} {entity}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub question: String,
    pub token_logprobs: Vec<f64>,
    pub perplexity: f64,
}

/// `exp(-mean(logprobs))`; 1.0 for an empty sequence.
pub fn perplexity_of(logprobs: &[f64]) -> f64 {
    if logprobs.is_empty() {
        return 1.0;
    }
    (-logprobs.iter().sum::<f64>() / logprobs.len() as f64).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Qg,
    Qae,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Pending,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    #[serde(default)]
    pub models: serde_json::Value,
}

pub trait ScoringBackend: Send + Sync {
    fn qg_generate(&self, masked_text: &str, entity: &str) -> Result<Generation>;
    /// Perplexity of `question` under the generator conditioned on the
    /// masked passage and entity.
    fn qg_score(&self, masked_text: &str, entity: &str, question: &str) -> Result<f64>;
    fn qae_logits(&self, question: &str, tokens: &[String]) -> Result<LogitPair>;
    fn aer_logits(&self, tokens: &[String]) -> Result<LogitPair>;
    fn finetune_submit(&self, model: ModelKind, dataset_path: &Path) -> Result<String>;
    fn finetune_status(&self, job_id: &str) -> Result<JobStatus>;
    fn health(&self) -> Result<Health>;
    /// True when finetune completion reflects real model updates.
    fn is_remote(&self) -> bool {
        false
    }
}

// ---------------------------------------------------------------------------
// mock

/// 64-bit FNV-1a, used so mock outputs are stable across builds.
struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }
    fn bytes(mut self, b: &[u8]) -> Self {
        for &x in b {
            self.0 ^= x as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
        // field separator so ("ab","c") != ("a","bc")
        self.0 ^= 0xff;
        self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        self
    }
    fn str(self, s: &str) -> Self {
        self.bytes(s.as_bytes())
    }
    fn u64(self, v: u64) -> Self {
        self.bytes(&v.to_le_bytes())
    }
    fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MockMode {
    /// `what is <entity>?` questions with perplexity 1.
    Echo,
    /// Peaks logits at known entities; see [`MockBackend::planted`].
    Planted {
        entities: Vec<Vec<String>>,
        noise: f64,
        seed: u64,
    },
    Random { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRecord {
    pub job_id: String,
    pub model: ModelKind,
    pub dataset_path: String,
}

pub struct MockBackend {
    mode: MockMode,
    planted_set: HashSet<Vec<String>>,
    jobs: Mutex<Vec<FinetuneRecord>>,
}

/// Peak value the planted mock puts on entity boundaries.
pub const PLANTED_PEAK: f64 = 10.0;

const PLANTED_TEMPLATES_AFTER: [&str; 3] = [
    "{wh} is mentioned right after {ctx}?",
    "{wh} comes after {ctx}?",
    "{wh} follows {ctx}?",
];
const PLANTED_TEMPLATES_BEFORE: [&str; 2] = ["{wh} is mentioned before {ctx}?", "{wh} comes before {ctx}?"];
const CONTEXT_WORDS: usize = 4;

fn is_word(tok: &str) -> bool {
    !tok.chars().all(is_punct)
}

fn words(text: &str) -> Vec<String> {
    lower_tokens(text).into_iter().filter(|t| is_word(t)).collect()
}

fn wh_word(entity: &str) -> &'static str {
    let digits = entity.chars().filter(char::is_ascii_digit).count();
    if digits > 0 && digits * 2 >= entity.chars().filter(|c| !c.is_whitespace()).count() {
        "when"
    } else {
        "what"
    }
}

/// Context phrase around the mask: the last few words before it, or the
/// first few after it when fewer than two precede it.
fn context_phrase(before: &[String], after: &[String]) -> (String, bool) {
    if before.len() >= 2 || after.is_empty() {
        let s = before.len().saturating_sub(CONTEXT_WORDS);
        (before[s..].join(" "), true)
    } else {
        let e = after.len().min(CONTEXT_WORDS);
        (after[..e].join(" "), false)
    }
}

impl MockBackend {
    pub fn new(mode: MockMode) -> Self {
        let planted_set = match &mode {
            MockMode::Planted { entities, .. } => entities.iter().cloned().collect(),
            _ => HashSet::new(),
        };
        Self {
            mode,
            planted_set,
            jobs: Mutex::new(Vec::new()),
        }
    }

    pub fn echo() -> Self {
        Self::new(MockMode::Echo)
    }

    pub fn random(seed: u64) -> Self {
        Self::new(MockMode::Random { seed })
    }

    /// A mock that knows the answer entities planted in a corpus. AER logits
    /// peak at every planted occurrence. The generator emits a context
    /// question for planted entities which the extractor can resolve back to
    /// the entity; questions about other spans get flat extractor logits.
    pub fn planted<S: AsRef<str>>(entities: &[S], noise: f64, seed: u64) -> Self {
        let mut ents: Vec<Vec<String>> = entities
            .iter()
            .map(|e| lower_tokens(e.as_ref()))
            .filter(|t| !t.is_empty())
            .collect();
        ents.sort();
        ents.dedup();
        Self::new(MockMode::Planted {
            entities: ents,
            noise,
            seed,
        })
    }

    pub fn mode(&self) -> &MockMode {
        &self.mode
    }

    pub fn finetune_requests(&self) -> Vec<FinetuneRecord> {
        self.jobs.lock().expect("mock job log poisoned").clone()
    }

    fn planted_occurrences(&self, lowered: &[String]) -> Vec<(usize, usize)> {
        let MockMode::Planted { entities, .. } = &self.mode else {
            return Vec::new();
        };
        let mut out = Vec::new();
        for e in entities {
            if e.len() > lowered.len() {
                continue;
            }
            for i in 0..=lowered.len() - e.len() {
                if lowered[i..i + e.len()] == e[..] {
                    out.push((i, i + e.len() - 1));
                }
            }
        }
        out.sort_unstable();
        out
    }

    fn noise_vec(&self, n: usize, key: &Fnv) -> (Vec<f64>, Vec<f64>) {
        let amp = match &self.mode {
            MockMode::Planted { noise, .. } => *noise,
            _ => 0.0,
        };
        if amp == 0.0 {
            return (vec![0.0; n], vec![0.0; n]);
        }
        let mut rng = key.rng();
        let s = (0..n).map(|_| rng.gen_range(-amp..=amp)).collect();
        let e = (0..n).map(|_| rng.gen_range(-amp..=amp)).collect();
        (s, e)
    }

    fn seed(&self) -> u64 {
        match &self.mode {
            MockMode::Echo => 0,
            MockMode::Planted { seed, .. } | MockMode::Random { seed } => *seed,
        }
    }

    fn split_mask(masked_text: &str) -> (Vec<String>, Vec<String>) {
        match masked_text.split_once(MASK_TOKEN) {
            Some((b, a)) => (words(b), words(a)),
            None => (words(masked_text), Vec::new()),
        }
    }

    fn echo_question(entity: &str) -> String {
        format!("what is {entity}?")
    }

    fn planted_question(&self, masked_text: &str, entity: &str) -> (String, bool) {
        let (before, after) = Self::split_mask(masked_text);
        let (ctx, is_after) = context_phrase(&before, &after);
        let wh = wh_word(entity);
        let planted = self.planted_set.contains(&lower_tokens(entity));
        let h = Fnv::new().str(masked_text).str(entity).u64(self.seed()).0;
        let template = if !planted {
            "{wh} is said about {ctx}?"
        } else if is_after {
            PLANTED_TEMPLATES_AFTER[(h % PLANTED_TEMPLATES_AFTER.len() as u64) as usize]
        } else {
            PLANTED_TEMPLATES_BEFORE[(h % PLANTED_TEMPLATES_BEFORE.len() as u64) as usize]
        };
        (template.replace("{wh}", wh).replace("{ctx}", &ctx), planted)
    }

    /// Planted extractor: find a planted occurrence whose context phrase and
    /// template direction both appear in the question.
    fn planted_target(&self, question: &str, lowered: &[String]) -> Option<(usize, usize)> {
        let q = question.to_lowercase();
        let after_dir = PLANTED_TEMPLATES_AFTER
            .iter()
            .any(|t| q.contains(t.split("{ctx}").next().unwrap().trim_start_matches("{wh}").trim()));
        let before_dir = PLANTED_TEMPLATES_BEFORE
            .iter()
            .any(|t| q.contains(t.split("{ctx}").next().unwrap().trim_start_matches("{wh}").trim()));
        if !after_dir && !before_dir {
            return None;
        }
        let word_idx: Vec<usize> = (0..lowered.len()).filter(|&i| is_word(&lowered[i])).collect();
        for (s, e) in self.planted_occurrences(lowered) {
            let before: Vec<String> = word_idx
                .iter()
                .filter(|&&i| i < s)
                .map(|&i| lowered[i].clone())
                .collect();
            let after: Vec<String> = word_idx
                .iter()
                .filter(|&&i| i > e)
                .map(|&i| lowered[i].clone())
                .collect();
            let (ctx, is_after) = context_phrase(&before, &after);
            let dir_ok = if is_after { after_dir } else { before_dir };
            if dir_ok && !ctx.is_empty() && q.contains(&format!(" {ctx}?")) {
                return Some((s, e));
            }
        }
        None
    }

    fn random_logits(&self, key: Fnv, n: usize) -> LogitPair {
        let mut rng = key.rng();
        let start = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let end = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        LogitPair {
            start_logits: start,
            end_logits: end,
        }
    }
}

fn require_tokens(tokens: &[String]) -> Result<()> {
    if tokens.is_empty() {
        Err(Error::contract("token list must be non-empty"))
    } else {
        Ok(())
    }
}

fn hash_tokens(key: Fnv, tokens: &[String]) -> Fnv {
    tokens.iter().fold(key, |k, t| k.str(t))
}

impl ScoringBackend for MockBackend {
    fn qg_generate(&self, masked_text: &str, entity: &str) -> Result<Generation> {
        let (question, token_logprobs) = match &self.mode {
            MockMode::Echo => {
                let q = Self::echo_question(entity);
                let n = lower_tokens(&q).len();
                (q, vec![0.0; n])
            }
            MockMode::Planted { seed, .. } => {
                let (q, planted) = self.planted_question(masked_text, entity);
                let mut rng = Fnv::new().str(masked_text).str(entity).u64(*seed).u64(1).rng();
                let n = lower_tokens(&q).len();
                let lp = (0..n)
                    .map(|_| {
                        let u: f64 = rng.gen();
                        if planted {
                            -0.05 - 0.1 * u
                        } else {
                            -1.0 - 1.5 * u
                        }
                    })
                    .collect();
                (q, lp)
            }
            MockMode::Random { seed } => {
                const WH: [&str; 6] = ["what", "who", "when", "where", "which", "how"];
                let mut rng = Fnv::new().str(masked_text).str(entity).u64(*seed).rng();
                let pool = words(masked_text);
                let mut q = vec![WH[rng.gen_range(0..WH.len())].to_string()];
                let len = rng.gen_range(3..9);
                for _ in 0..len {
                    if pool.is_empty() {
                        q.push("thing".into());
                    } else {
                        q.push(pool[rng.gen_range(0..pool.len())].clone());
                    }
                }
                let q = format!("{}?", q.join(" "));
                let n = lower_tokens(&q).len();
                let lp = (0..n).map(|_| -rng.gen_range(0.01..3.0)).collect();
                (q, lp)
            }
        };
        let perplexity = perplexity_of(&token_logprobs);
        Ok(Generation {
            question,
            token_logprobs,
            perplexity,
        })
    }

    fn qg_score(&self, masked_text: &str, entity: &str, question: &str) -> Result<f64> {
        match &self.mode {
            MockMode::Echo => Ok(if question == Self::echo_question(entity) { 1.0 } else { 2.0 }),
            MockMode::Planted { .. } => {
                let own = self.qg_generate(masked_text, entity)?;
                if own.question == question {
                    return Ok(own.perplexity);
                }
                // overlap with the generator's own question lowers perplexity
                let own_words: HashSet<String> = words(&own.question).into_iter().collect();
                let qw = words(question);
                let shared = qw.iter().filter(|w| own_words.contains(*w)).count();
                let frac = if qw.is_empty() { 0.0 } else { shared as f64 / qw.len() as f64 };
                Ok(own.perplexity * (1.0 + 4.0 * (1.0 - frac)))
            }
            MockMode::Random { seed } => {
                let mut rng = Fnv::new().str(masked_text).str(entity).str(question).u64(*seed).rng();
                Ok(rng.gen_range(1.0..20.0))
            }
        }
    }

    fn qae_logits(&self, question: &str, tokens: &[String]) -> Result<LogitPair> {
        require_tokens(tokens)?;
        let n = tokens.len();
        let lowered: Vec<String> = tokens.iter().map(|t| t.to_lowercase()).collect();
        match &self.mode {
            MockMode::Echo => {
                let mut l = LogitPair {
                    start_logits: vec![0.0; n],
                    end_logits: vec![0.0; n],
                };
                let ent = question
                    .strip_prefix("what is ")
                    .and_then(|r| r.strip_suffix('?'))
                    .map(lower_tokens)
                    .unwrap_or_default();
                if !ent.is_empty() && ent.len() <= n {
                    if let Some(i) = (0..=n - ent.len()).find(|&i| lowered[i..i + ent.len()] == ent[..]) {
                        l.start_logits[i] = PLANTED_PEAK;
                        l.end_logits[i + ent.len() - 1] = PLANTED_PEAK;
                    }
                }
                Ok(l)
            }
            MockMode::Planted { seed, .. } => {
                let key = hash_tokens(Fnv::new().str("qae").str(question).u64(*seed), tokens);
                let (mut s, mut e) = self.noise_vec(n, &key);
                if let Some((a, b)) = self.planted_target(question, &lowered) {
                    s[a] += PLANTED_PEAK;
                    e[b] += PLANTED_PEAK;
                }
                Ok(LogitPair {
                    start_logits: s,
                    end_logits: e,
                })
            }
            MockMode::Random { seed } => Ok(self.random_logits(
                hash_tokens(Fnv::new().str("qae").str(question).u64(*seed), tokens),
                n,
            )),
        }
    }

    fn aer_logits(&self, tokens: &[String]) -> Result<LogitPair> {
        require_tokens(tokens)?;
        let n = tokens.len();
        match &self.mode {
            MockMode::Echo => {
                // capitalised or numeric tokens look entity-like
                let v: Vec<f64> = tokens
                    .iter()
                    .map(|t| {
                        let c = t.chars().next().unwrap_or(' ');
                        if c.is_uppercase() || c.is_ascii_digit() {
                            1.0
                        } else {
                            0.0
                        }
                    })
                    .collect();
                Ok(LogitPair {
                    start_logits: v.clone(),
                    end_logits: v,
                })
            }
            MockMode::Planted { seed, .. } => {
                let lowered: Vec<String> = tokens.iter().map(|t| t.to_lowercase()).collect();
                let key = hash_tokens(Fnv::new().str("aer").u64(*seed), tokens);
                let (mut s, mut e) = self.noise_vec(n, &key);
                for (a, b) in self.planted_occurrences(&lowered) {
                    s[a] += PLANTED_PEAK;
                    e[b] += PLANTED_PEAK;
                }
                Ok(LogitPair {
                    start_logits: s,
                    end_logits: e,
                })
            }
            MockMode::Random { seed } => Ok(self.random_logits(hash_tokens(Fnv::new().str("aer").u64(*seed), tokens), n)),
        }
    }

    fn finetune_submit(&self, model: ModelKind, dataset_path: &Path) -> Result<String> {
        if !dataset_path.exists() {
            return Err(Error::contract(format!(
                "finetune dataset {} does not exist",
                dataset_path.display()
            )));
        }
        let mut jobs = self.jobs.lock().expect("mock job log poisoned");
        let job_id = format!("mock-{}", jobs.len() + 1);
        jobs.push(FinetuneRecord {
            job_id: job_id.clone(),
            model,
            dataset_path: dataset_path.display().to_string(),
        });
        Ok(job_id)
    }

    fn finetune_status(&self, job_id: &str) -> Result<JobStatus> {
        let jobs = self.jobs.lock().expect("mock job log poisoned");
        if jobs.iter().any(|j| j.job_id == job_id) {
            Ok(JobStatus::Done)
        } else {
            Err(Error::Job(format!("unknown job {job_id}")))
        }
    }

    fn health(&self) -> Result<Health> {
        let mode = match &self.mode {
            MockMode::Echo => "echo",
            MockMode::Planted { .. } => "planted",
            MockMode::Random { .. } => "random",
        };
        Ok(Health {
            status: "ok".into(),
            models: json!({"qg": format!("mock:{mode}"), "qae": format!("mock:{mode}"), "aer": format!("mock:{mode}")}),
        })
    }
}

// ---------------------------------------------------------------------------
// remote

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            backoff_ms: 200,
        }
    }
}

/// Counting semaphore bounding concurrent requests.
struct InFlight {
    count: Mutex<usize>,
    cv: Condvar,
    cap: usize,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn acquire(&self) -> Permit<'_> {
        let mut c = self.count.lock().expect("in-flight lock poisoned");
        while *c >= self.cap {
            c = self.cv.wait(c).expect("in-flight lock poisoned");
        }
        *c += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut c = self.0.count.lock().expect("in-flight lock poisoned");
        *c -= 1;
        self.0.cv.notify_one();
    }
}

pub struct RemoteBackend {
    endpoint: String,
    agent: ureq::Agent,
    retry: RetryPolicy,
    in_flight: InFlight,
    requests: AtomicU64,
}

enum Attempt {
    Ok(serde_json::Value),
    Retriable(String),
    Fatal(Error),
}

impl RemoteBackend {
    pub fn new(endpoint: impl Into<String>, timeout: Duration, retry: RetryPolicy, max_in_flight: usize) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(timeout).build();
        Self {
            endpoint: endpoint.into().trim_end_matches('/').to_string(),
            agent,
            retry,
            in_flight: InFlight {
                count: Mutex::new(0),
                cv: Condvar::new(),
                cap: max_in_flight.max(1),
            },
            requests: AtomicU64::new(0),
        }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    /// Total HTTP attempts made, including retries.
    pub fn request_count(&self) -> u64 {
        self.requests.load(Ordering::Relaxed)
    }

    fn attempt(&self, method: &str, path: &str, body: Option<&serde_json::Value>) -> Attempt {
        let _permit = self.in_flight.acquire();
        self.requests.fetch_add(1, Ordering::Relaxed);
        let url = format!("{}{}", self.endpoint, path);
        let req = self.agent.request(method, &url);
        let res = match body {
            Some(b) => req.send_json(b.clone()),
            None => req.call(),
        };
        match res {
            Ok(resp) => match resp.into_json::<serde_json::Value>() {
                Ok(v) => Attempt::Ok(v),
                Err(e) => Attempt::Fatal(Error::Protocol(format!("{path}: invalid JSON body: {e}"))),
            },
            Err(ureq::Error::Status(code, resp)) => {
                let msg = resp.into_string().unwrap_or_default();
                let text = format!("{path}: HTTP {code}: {msg}");
                if code >= 500 || code == 429 {
                    Attempt::Retriable(text)
                } else {
                    Attempt::Fatal(Error::Protocol(text))
                }
            }
            Err(ureq::Error::Transport(t)) => Attempt::Retriable(format!("{path}: {t}")),
        }
    }

    fn call(&self, method: &str, path: &str, body: Option<serde_json::Value>) -> Result<serde_json::Value> {
        let mut last = String::new();
        for attempt in 0..=self.retry.max_retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(self.retry.backoff_ms << (attempt - 1).min(10)));
            }
            match self.attempt(method, path, body.as_ref()) {
                Attempt::Ok(v) => return Ok(v),
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retriable(m) => {
                    log::warn!("retriable backend failure (attempt {}): {m}", attempt + 1);
                    last = m;
                }
            }
        }
        Err(Error::Transport {
            message: format!("giving up after {} retries: {last}", self.retry.max_retries),
            retriable: true,
            passage_id: None,
        })
    }

    fn parse<T: for<'de> Deserialize<'de>>(path: &str, v: serde_json::Value) -> Result<T> {
        serde_json::from_value(v).map_err(|e| Error::Protocol(format!("{path}: {e}")))
    }

    fn logits(&self, path: &str, body: serde_json::Value, n: usize) -> Result<LogitPair> {
        let pair: LogitPair = Self::parse(path, self.call("POST", path, Some(body))?)?;
        if pair.start_logits.len() != n || pair.end_logits.len() != n {
            return Err(Error::Protocol(format!(
                "{path}: expected {n} logits, got {} start / {} end",
                pair.start_logits.len(),
                pair.end_logits.len()
            )));
        }
        pair.validate().map_err(|e| Error::Protocol(format!("{path}: {e}")))?;
        Ok(pair)
    }
}

#[derive(Deserialize)]
struct PerplexityBody {
    perplexity: f64,
}

#[derive(Deserialize)]
struct JobIdBody {
    job_id: String,
}

#[derive(Deserialize)]
struct StatusBody {
    status: JobStatus,
}

impl ScoringBackend for RemoteBackend {
    fn qg_generate(&self, masked_text: &str, entity: &str) -> Result<Generation> {
        let path = "/v1/qg/generate";
        let body = json!({"masked_text": masked_text, "entity": entity, "sep": SEP});
        let g: Generation = Self::parse(path, self.call("POST", path, Some(body))?)?;
        if g.token_logprobs.iter().any(|&x| !(x <= 0.0)) {
            return Err(Error::Protocol(format!("{path}: token log-probabilities must be <= 0")));
        }
        let expected = perplexity_of(&g.token_logprobs);
        if !((g.perplexity - expected).abs() <= 1e-6 * expected.max(1.0)) {
            return Err(Error::Protocol(format!(
                "{path}: perplexity {} inconsistent with token log-probabilities ({expected})",
                g.perplexity
            )));
        }
        Ok(g)
    }

    fn qg_score(&self, masked_text: &str, entity: &str, question: &str) -> Result<f64> {
        let path = "/v1/qg/score";
        let body = json!({"masked_text": masked_text, "entity": entity, "question": question});
        let p: PerplexityBody = Self::parse(path, self.call("POST", path, Some(body))?)?;
        if !(p.perplexity > 0.0 && p.perplexity.is_finite()) {
            return Err(Error::Protocol(format!("{path}: perplexity must be positive")));
        }
        Ok(p.perplexity)
    }

    fn qae_logits(&self, question: &str, tokens: &[String]) -> Result<LogitPair> {
        require_tokens(tokens)?;
        self.logits("/v1/qae/logits", json!({"question": question, "tokens": tokens}), tokens.len())
    }

    fn aer_logits(&self, tokens: &[String]) -> Result<LogitPair> {
        require_tokens(tokens)?;
        self.logits("/v1/aer/logits", json!({"tokens": tokens}), tokens.len())
    }

    fn finetune_submit(&self, model: ModelKind, dataset_path: &Path) -> Result<String> {
        if !dataset_path.exists() {
            return Err(Error::contract(format!(
                "finetune dataset {} does not exist",
                dataset_path.display()
            )));
        }
        let path = "/v1/finetune";
        let body = json!({"model": model, "dataset_path": dataset_path.display().to_string()});
        match self.call("POST", path, Some(body)) {
            Ok(v) => Ok(Self::parse::<JobIdBody>(path, v)?.job_id),
            Err(Error::Transport { message, .. }) => Err(Error::Job(message)),
            Err(Error::Protocol(message)) => Err(Error::Job(format!("rejected: {message}"))),
            Err(e) => Err(e),
        }
    }

    fn finetune_status(&self, job_id: &str) -> Result<JobStatus> {
        let path = format!("/v1/finetune/{job_id}");
        Ok(Self::parse::<StatusBody>(&path, self.call("GET", &path, None)?)?.status)
    }

    fn health(&self) -> Result<Health> {
        Self::parse("/v1/health", self.call("GET", "/v1/health", None)?)
    }

    fn is_remote(&self) -> bool {
        true
    }
}

// ---------------------------------------------------------------------------
// handle

pub enum BackendHandle {
    Mock(MockBackend),
    Remote(RemoteBackend),
}

/// Parsed `--backend` value.
#[derive(Debug, Clone, PartialEq)]
pub enum BackendSpec {
    Echo,
    /// Planted mock; entities come from the corpus gold answers.
    Planted { noise: f64 },
    Random { seed: u64 },
    Remote { endpoint: String },
}

pub const DEFAULT_PLANTED_NOISE: f64 = 0.5;

impl std::str::FromStr for BackendSpec {
    type Err = Error;

    /// `mock:echo`, `mock:planted[:NOISE]`, `mock:random[:SEED]`,
    /// `remote[:URL]` or a bare `http://` URL.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::contract(format!("unrecognised backend {s:?}"));
        if s.starts_with("http://") || s.starts_with("https://") {
            return Ok(BackendSpec::Remote { endpoint: s.into() });
        }
        let mut parts = s.splitn(3, ':');
        match (parts.next(), parts.next(), parts.next()) {
            (Some("mock"), Some("echo"), None) => Ok(BackendSpec::Echo),
            (Some("mock"), Some("planted"), None) => Ok(BackendSpec::Planted {
                noise: DEFAULT_PLANTED_NOISE,
            }),
            (Some("mock"), Some("planted"), Some(n)) => Ok(BackendSpec::Planted {
                noise: n.parse().map_err(|_| bad())?,
            }),
            (Some("mock"), Some("random"), None) => Ok(BackendSpec::Random { seed: 0 }),
            (Some("mock"), Some("random"), Some(n)) => Ok(BackendSpec::Random {
                seed: n.parse().map_err(|_| bad())?,
            }),
            (Some("remote"), None, None) => match std::env::var("RGX_BACKEND_URL") {
                Ok(url) if !url.is_empty() => Ok(BackendSpec::Remote { endpoint: url }),
                _ => Err(Error::contract("remote backend requires an endpoint or RGX_BACKEND_URL")),
            },
            (Some("remote"), Some(rest), tail) => Ok(BackendSpec::Remote {
                endpoint: match tail {
                    Some(t) => format!("{rest}:{t}"),
                    None => rest.to_string(),
                },
            }),
            _ => Err(bad()),
        }
    }
}

impl BackendHandle {
    fn inner(&self) -> &dyn ScoringBackend {
        match self {
            BackendHandle::Mock(m) => m,
            BackendHandle::Remote(r) => r,
        }
    }

    pub fn as_mock(&self) -> Option<&MockBackend> {
        match self {
            BackendHandle::Mock(m) => Some(m),
            _ => None,
        }
    }
}

impl ScoringBackend for BackendHandle {
    fn qg_generate(&self, masked_text: &str, entity: &str) -> Result<Generation> {
        self.inner().qg_generate(masked_text, entity)
    }
    fn qg_score(&self, masked_text: &str, entity: &str, question: &str) -> Result<f64> {
        self.inner().qg_score(masked_text, entity, question)
    }
    fn qae_logits(&self, question: &str, tokens: &[String]) -> Result<LogitPair> {
        self.inner().qae_logits(question, tokens)
    }
    fn aer_logits(&self, tokens: &[String]) -> Result<LogitPair> {
        self.inner().aer_logits(tokens)
    }
    fn finetune_submit(&self, model: ModelKind, dataset_path: &Path) -> Result<String> {
        self.inner().finetune_submit(model, dataset_path)
    }
    fn finetune_status(&self, job_id: &str) -> Result<JobStatus> {
        self.inner().finetune_status(job_id)
    }
    fn health(&self) -> Result<Health> {
        self.inner().health()
    }
    fn is_remote(&self) -> bool {
        self.inner().is_remote()
    }
}

/// Correctness check shared by cooperative ranking and diagnostics.
pub fn same_answer(a: &str, b: &str) -> bool {
    normalize_answer(a) == normalize_answer(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        crate::tokenize::tokenize(s).into_iter().map(|t| t.surface).collect()
    }

    #[test]
    fn echo_contract() {
        let m = MockBackend::echo();
        let g = m.qg_generate("a [MASK] c", "x").unwrap();
        assert_eq!(g.question, "what is x?");
        assert!(g.token_logprobs.iter().all(|&x| x == 0.0));
        assert_eq!(g.perplexity, 1.0);
        assert_eq!(m.qg_score("a [MASK] c", "x", "what is x?").unwrap(), 1.0);
        assert_eq!(m.qg_score("a [MASK] c", "x", "who is x?").unwrap(), 2.0);
    }

    #[test]
    fn planted_logits_contract() {
        let m = MockBackend::planted(&["c d"], 0.0, 1);
        let l = m.aer_logits(&toks("a b c d e")).unwrap();
        assert_eq!(l.start_logits, vec![0.0, 0.0, 10.0, 0.0, 0.0]);
        assert_eq!(l.end_logits, vec![0.0, 0.0, 0.0, 10.0, 0.0]);
    }

    #[test]
    fn planted_question_resolves_to_entity() {
        let text = "It is a replica of the grotto at Lourdes, France where the Virgin Mary reputedly appeared to Saint Bernadette Soubirous in 1858.";
        let m = MockBackend::planted(&["1858", "Saint Bernadette Soubirous"], 0.0, 3);
        let masked = text.replace("1858", MASK_TOKEN);
        let g = m.qg_generate(&masked, "1858").unwrap();
        assert!(g.question.starts_with("when "), "{}", g.question);
        assert!(g.question.contains("bernadette soubirous in"), "{}", g.question);
        let t = toks(text);
        let l = m.qae_logits(&g.question, &t).unwrap();
        let i = t.iter().position(|x| x == "1858").unwrap();
        assert_eq!(l.start_logits[i], PLANTED_PEAK);
        assert_eq!(l.end_logits[i], PLANTED_PEAK);

        // a non-planted span yields a question the extractor cannot resolve
        let masked = text.replace("replica", MASK_TOKEN);
        let g2 = m.qg_generate(&masked, "replica").unwrap();
        assert!(g2.perplexity > g.perplexity);
        let l2 = m.qae_logits(&g2.question, &t).unwrap();
        assert!(l2.start_logits.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn random_mode_is_deterministic() {
        let a = MockBackend::random(9);
        let b = MockBackend::random(9);
        let t = toks("one two three four");
        assert_eq!(a.qg_generate("x [MASK] y", "e").unwrap(), b.qg_generate("x [MASK] y", "e").unwrap());
        assert_eq!(a.qae_logits("q?", &t).unwrap(), b.qae_logits("q?", &t).unwrap());
        assert_eq!(a.aer_logits(&t).unwrap(), b.aer_logits(&t).unwrap());
        assert_ne!(a.aer_logits(&t).unwrap(), MockBackend::random(10).aer_logits(&t).unwrap());
    }

    #[test]
    fn perplexity_identity_holds_for_all_modes() {
        let modes = [MockBackend::echo(), MockBackend::random(4), MockBackend::planted(&["b"], 0.3, 2)];
        for m in &modes {
            let g = m.qg_generate("a [MASK] c d e", "b").unwrap();
            assert!((g.perplexity - perplexity_of(&g.token_logprobs)).abs() < 1e-6);
            assert!(g.token_logprobs.iter().all(|&x| x <= 0.0));
            assert!(!g.question.is_empty());
        }
    }

    #[test]
    fn mock_finetune() {
        let m = MockBackend::echo();
        let f = tempfile::NamedTempFile::new().unwrap();
        let id = m.finetune_submit(ModelKind::Qae, f.path()).unwrap();
        assert_eq!(id, "mock-1");
        assert_eq!(m.finetune_status(&id).unwrap(), JobStatus::Done);
        assert!(matches!(
            m.finetune_submit(ModelKind::Qg, Path::new("/nonexistent/x.json")),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn empty_tokens_rejected() {
        assert!(MockBackend::echo().aer_logits(&[]).is_err());
    }

    #[test]
    fn backend_spec_parsing() {
        assert_eq!("mock:echo".parse::<BackendSpec>().unwrap(), BackendSpec::Echo);
        assert_eq!(
            "mock:planted:0".parse::<BackendSpec>().unwrap(),
            BackendSpec::Planted { noise: 0.0 }
        );
        assert_eq!(
            "mock:random:7".parse::<BackendSpec>().unwrap(),
            BackendSpec::Random { seed: 7 }
        );
        assert_eq!(
            "remote:http://localhost:8000".parse::<BackendSpec>().unwrap(),
            BackendSpec::Remote {
                endpoint: "http://localhost:8000".into()
            }
        );
        assert!("mock:nope".parse::<BackendSpec>().is_err());
    }
}
