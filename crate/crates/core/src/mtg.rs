//! Modification-text generation.
//!
//! Three modes are supported: fixed rule templates, rule templates passed
//! through an external paraphrasing service, and an external language-model
//! service that receives both captions in the delimited prompt format below.
//!
//! ```
//! use covr_forge::mtg::format_llm_prompt;
//! assert_eq!(
//!     format_llm_prompt("Clouds in the sky", "Airplane in the sky"),
//!     "Clouds in the sky\n&&\nAirplane in the sky \n\n### Response:"
//! );
//! ```

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::pairminer::DirectedEdit;

pub mod stub;

pub const PARAPHRASE_PREFIX: &str = "Paraphrase the following sentence: ";
pub const PROMPT_SEPARATOR: &str = "\n&&\n";
pub const RESPONSE_MARKER: &str = "### Response:";

#[derive(Debug, Error)]
pub enum MtgError {
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("service returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("empty completion")]
    EmptyCompletion,
    #[error("service returned {got} completion(s), expected {expected}")]
    CompletionCount { expected: usize, got: usize },
    #[error("no MTG service configured for mode {0:?}")]
    NoClient(MtgMode),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("empty candidate list")]
    NoCandidates,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextSource {
    Rule,
    RuleParaphrased,
    Llm,
}

impl TextSource {
    pub fn is_rule(self) -> bool {
        matches!(self, TextSource::Rule | TextSource::RuleParaphrased)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModificationText {
    pub text: String,
    pub source: TextSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_id: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidates: Option<Vec<String>>,
    /// Template of each entry of `candidates`, for rule-derived texts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate_template_ids: Option<Vec<u32>>,
}

/// Rule templates. `{d1}` is the token removed from the query caption,
/// `{d2}` the token added in the target caption.
pub const TEMPLATES: [&str; 8] = [
    "Remove {d1}",
    "Take out {d1} and add {d2}",
    "Change {d1} for {d2}",
    "Replace {d1} with {d2}",
    "Replace {d1} by {d2}",
    "Make the {d1} into {d2}",
    "Add {d2}",
    "Change it to {d2}",
];

/// Template ids usable for an edit: a template may only reference diff
/// tokens the edit actually has.
pub fn applicable_templates(removed: Option<&str>, added: Option<&str>) -> Vec<u32> {
    TEMPLATES
        .iter()
        .enumerate()
        .filter(|(_, t)| {
            (!t.contains("{d1}") || removed.is_some()) && (!t.contains("{d2}") || added.is_some())
        })
        .map(|(i, _)| i as u32)
        .collect()
}

pub fn render_template(id: u32, removed: Option<&str>, added: Option<&str>) -> String {
    TEMPLATES[id as usize]
        .replace("{d1}", removed.unwrap_or(""))
        .replace("{d2}", added.unwrap_or(""))
}

fn edit_seed(seed: u64, edit: &DirectedEdit<'_>) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(edit.source.as_bytes());
    h.update([0u8]);
    h.update(edit.target.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Pick one applicable template uniformly at random. The draw depends only
/// on `seed` and the two captions, not on processing order.
pub fn rule_based_text(edit: &DirectedEdit<'_>, seed: u64) -> ModificationText {
    let ids = applicable_templates(edit.removed, edit.added);
    assert!(!ids.is_empty(), "every single-token edit has an applicable template");
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(edit_seed(seed, edit));
    let id = ids[rng.random_range(0..ids.len())];
    ModificationText {
        text: render_template(id, edit.removed, edit.added),
        source: TextSource::Rule,
        template_id: Some(id),
        candidates: None,
        candidate_template_ids: None,
    }
}

pub fn format_llm_prompt(caption_a: &str, caption_b: &str) -> String {
    format!("{caption_a}{PROMPT_SEPARATOR}{caption_b} \n\n{RESPONSE_MARKER}")
}

/// Inverse of [`format_llm_prompt`].
pub fn parse_llm_prompt(prompt: &str) -> Option<(String, String)> {
    let body = prompt.strip_suffix(RESPONSE_MARKER)?.strip_suffix(" \n\n")?;
    let (a, b) = body.split_once(PROMPT_SEPARATOR)?;
    Some((a.to_owned(), b.to_owned()))
}

/// Keep what follows the response marker (if echoed), up to the first
/// newline, trimmed. `None` when nothing remains.
pub fn clean_completion(raw: &str) -> Option<String> {
    let after = match raw.find(RESPONSE_MARKER) {
        Some(i) => &raw[i + RESPONSE_MARKER.len()..],
        None => raw,
    };
    let after = after.trim_start();
    let line = after.split('\n').next().unwrap_or("").trim_end();
    (!line.is_empty()).then(|| line.to_owned())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SelectStrategy {
    #[default]
    First,
    Longest,
}

impl std::str::FromStr for SelectStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "first" => Ok(SelectStrategy::First),
            "longest" => Ok(SelectStrategy::Longest),
            other => Err(format!("unknown selection strategy {other:?}")),
        }
    }
}

/// `Longest` compares character counts; ties keep the earliest candidate.
pub fn select_candidate(candidates: &[String], strategy: SelectStrategy) -> Result<usize, MtgError> {
    if candidates.is_empty() {
        return Err(MtgError::NoCandidates);
    }
    Ok(match strategy {
        SelectStrategy::First => 0,
        SelectStrategy::Longest => {
            let mut best = 0;
            let mut best_len = candidates[0].chars().count();
            for (i, c) in candidates.iter().enumerate().skip(1) {
                let n = c.chars().count();
                if n > best_len {
                    best = i;
                    best_len = n;
                }
            }
            best
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Sampling {
    pub top_k: u32,
    pub temperature: f64,
}

impl Default for Sampling {
    fn default() -> Self {
        Sampling { top_k: 200, temperature: 0.8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MtgRequest {
    pub caption_a: String,
    pub caption_b: String,
    pub sampling: Sampling,
    pub n_candidates: usize,
}

impl MtgRequest {
    pub fn new(caption_a: impl Into<String>, caption_b: impl Into<String>) -> Self {
        MtgRequest {
            caption_a: caption_a.into(),
            caption_b: caption_b.into(),
            sampling: Sampling::default(),
            n_candidates: 1,
        }
    }

    pub fn validate(&self) -> Result<(), MtgError> {
        if self.sampling.top_k < 1 {
            return Err(MtgError::InvalidRequest("top_k must be >= 1".into()));
        }
        if !(self.sampling.temperature > 0.0) {
            return Err(MtgError::InvalidRequest("temperature must be > 0".into()));
        }
        if self.n_candidates < 1 {
            return Err(MtgError::InvalidRequest("n_candidates must be >= 1".into()));
        }
        if self.caption_a.is_empty() || self.caption_b.is_empty() {
            return Err(MtgError::InvalidRequest("captions must be nonempty".into()));
        }
        Ok(())
    }
}

/// Body of `POST /v1/generate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub prompt: String,
    pub top_k: u32,
    pub temperature: f64,
    pub n: usize,
    pub stop: Vec<String>,
}

impl GenerateRequest {
    pub fn new(prompt: String, sampling: Sampling, n: usize) -> Self {
        GenerateRequest {
            prompt,
            top_k: sampling.top_k,
            temperature: sampling.temperature,
            n,
            stop: vec!["\n".to_owned()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub completions: Vec<String>,
}

/// Anything that can answer a generation request. Closures implement it,
/// which is how tests plug in deterministic stubs.
pub trait MtgClient: Send + Sync {
    fn generate(&self, req: &GenerateRequest) -> Result<Vec<String>, MtgError>;
}

impl<F> MtgClient for F
where
    F: Fn(&GenerateRequest) -> Result<Vec<String>, MtgError> + Send + Sync,
{
    fn generate(&self, req: &GenerateRequest) -> Result<Vec<String>, MtgError> {
        self(req)
    }
}

/// HTTP client for the generation service with exponential-backoff retries
/// on transport failures and 5xx responses.
pub struct HttpMtgClient {
    endpoint: String,
    agent: ureq::Agent,
    max_attempts: u32,
    backoff: Duration,
}

impl HttpMtgClient {
    pub fn new(base_url: &str) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(60)))
            .http_status_as_error(false)
            .build()
            .into();
        HttpMtgClient {
            endpoint: format!("{}/v1/generate", base_url.trim_end_matches('/')),
            agent,
            max_attempts: 3,
            backoff: Duration::from_millis(200),
        }
    }

    /// Initial delay; doubles after every failed attempt.
    pub fn with_backoff(mut self, backoff: Duration) -> Self {
        self.backoff = backoff;
        self
    }

    pub fn with_max_attempts(mut self, attempts: u32) -> Self {
        self.max_attempts = attempts.max(1);
        self
    }

    fn attempt(&self, req: &GenerateRequest) -> Result<Vec<String>, (bool, MtgError)> {
        let transport = |e: ureq::Error| {
            (true, MtgError::Transport { attempts: 0, message: e.to_string() })
        };
        let mut resp = self.agent.post(&self.endpoint).send_json(req).map_err(transport)?;
        let status = resp.status().as_u16();
        if status != 200 {
            let body = resp.body_mut().read_to_string().unwrap_or_default();
            return Err((status >= 500, MtgError::Status { status, body }));
        }
        let parsed: GenerateResponse = resp.body_mut().read_json().map_err(transport)?;
        Ok(parsed.completions)
    }
}

impl MtgClient for HttpMtgClient {
    fn generate(&self, req: &GenerateRequest) -> Result<Vec<String>, MtgError> {
        let mut delay = self.backoff;
        let mut attempt = 1;
        loop {
            match self.attempt(req) {
                Ok(c) => return Ok(c),
                Err((retryable, err)) => {
                    if !retryable || attempt >= self.max_attempts {
                        return Err(match err {
                            MtgError::Transport { message, .. } => {
                                MtgError::Transport { attempts: attempt, message }
                            }
                            other => other,
                        });
                    }
                    log::warn!("MTG request failed (attempt {attempt}): {err}; retrying in {delay:?}");
                    std::thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
            }
        }
    }
}

fn request_completions(
    client: &dyn MtgClient,
    prompt: String,
    sampling: Sampling,
    n: usize,
) -> Result<Vec<String>, MtgError> {
    let raw = client.generate(&GenerateRequest::new(prompt, sampling, n))?;
    if raw.len() < n {
        return Err(MtgError::CompletionCount { expected: n, got: raw.len() });
    }
    raw.iter()
        .take(n)
        .map(|c| clean_completion(c).ok_or(MtgError::EmptyCompletion))
        .collect()
}

/// Ask the language-model service for `n_candidates` texts and keep one.
pub fn llm_generate(
    req: &MtgRequest,
    client: &dyn MtgClient,
    strategy: SelectStrategy,
) -> Result<ModificationText, MtgError> {
    req.validate()?;
    let prompt = format_llm_prompt(&req.caption_a, &req.caption_b);
    let candidates = request_completions(client, prompt, req.sampling, req.n_candidates)?;
    let pick = select_candidate(&candidates, strategy)?;
    Ok(ModificationText {
        text: candidates[pick].clone(),
        source: TextSource::Llm,
        template_id: None,
        candidates: (req.n_candidates > 1).then_some(candidates),
        candidate_template_ids: None,
    })
}

pub fn paraphrase(text: &str, client: &dyn MtgClient, sampling: Sampling) -> Result<String, MtgError> {
    let prompt = format!("{PARAPHRASE_PREFIX}{text}");
    let mut out = request_completions(client, prompt, sampling, 1)?;
    Ok(out.remove(0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MtgMode {
    #[default]
    Rule,
    RuleParaphrase,
    Llm,
}

impl std::str::FromStr for MtgMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rule" => Ok(MtgMode::Rule),
            "rule-paraphrase" => Ok(MtgMode::RuleParaphrase),
            "llm" => Ok(MtgMode::Llm),
            other => Err(format!("unknown MTG mode {other:?}")),
        }
    }
}

/// Generation settings shared by every edit of a run.
#[derive(Clone)]
pub struct Generator {
    pub mode: MtgMode,
    pub seed: u64,
    pub n_candidates: usize,
    pub select: SelectStrategy,
    pub sampling: Sampling,
    pub in_flight: usize,
    pub client: Option<Arc<dyn MtgClient>>,
}

impl Generator {
    pub fn rule(seed: u64) -> Self {
        Generator {
            mode: MtgMode::Rule,
            seed,
            n_candidates: 1,
            select: SelectStrategy::First,
            sampling: Sampling::default(),
            in_flight: 4,
            client: None,
        }
    }

    fn client(&self) -> Result<&dyn MtgClient, MtgError> {
        self.client.as_deref().ok_or(MtgError::NoClient(self.mode))
    }

    pub fn generate(&self, edit: &DirectedEdit<'_>) -> Result<ModificationText, MtgError> {
        match self.mode {
            MtgMode::Llm => {
                let req = MtgRequest {
                    caption_a: edit.source.to_owned(),
                    caption_b: edit.target.to_owned(),
                    sampling: self.sampling,
                    n_candidates: self.n_candidates,
                };
                llm_generate(&req, self.client()?, self.select)
            }
            MtgMode::Rule | MtgMode::RuleParaphrase => {
                let mut texts = Vec::with_capacity(self.n_candidates);
                let mut templates = Vec::with_capacity(self.n_candidates);
                for k in 0..self.n_candidates as u64 {
                    let m = rule_based_text(edit, self.seed.wrapping_add(k));
                    templates.push(m.template_id);
                    texts.push(m.text);
                }
                let source = if self.mode == MtgMode::RuleParaphrase {
                    let client = self.client()?;
                    for t in texts.iter_mut() {
                        *t = paraphrase(t, client, self.sampling)?;
                    }
                    TextSource::RuleParaphrased
                } else {
                    TextSource::Rule
                };
                let pick = select_candidate(&texts, self.select)?;
                Ok(ModificationText {
                    text: texts[pick].clone(),
                    source,
                    template_id: templates[pick],
                    candidates: (self.n_candidates > 1).then_some(texts),
                    candidate_template_ids: (self.n_candidates > 1)
                        .then(|| templates.iter().map(|t| t.expect("rule text has a template")).collect()),
                })
            }
        }
    }

    /// Generate for every edit with at most `in_flight` concurrent requests.
    /// Results come back in input order.
    pub fn generate_all(&self, edits: &[DirectedEdit<'_>]) -> Vec<Result<ModificationText, MtgError>> {
        let workers = self.in_flight.max(1).min(edits.len().max(1));
        if self.mode == MtgMode::Rule || workers == 1 {
            return edits.iter().map(|e| self.generate(e)).collect();
        }
        let next = AtomicUsize::new(0);
        let mut slots: Vec<Option<Result<ModificationText, MtgError>>> =
            (0..edits.len()).map(|_| None).collect();
        let done: Vec<Vec<(usize, Result<ModificationText, MtgError>)>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|_| {
                    s.spawn(|| {
                        let mut local = Vec::new();
                        loop {
                            let i = next.fetch_add(1, Ordering::Relaxed);
                            if i >= edits.len() {
                                break;
                            }
                            local.push((i, self.generate(&edits[i])));
                        }
                        local
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("generation worker")).collect()
        });
        for (i, r) in done.into_iter().flatten() {
            slots[i] = Some(r);
        }
        slots.into_iter().map(|r| r.expect("every slot filled")).collect()
    }
}
