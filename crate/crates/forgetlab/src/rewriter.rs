//! Pluggable answer-rewriting backends for style transformations.
//!
//! Converting a sample into another answer style sometimes needs new text a
//! fixed rule cannot supply: a plausible-but-wrong answer, distractor
//! options, a condensed label, or an explanation of a given length. Those
//! duties go through the [`Rewriter`] trait with two implementations:
//!
//! * [`TemplateRewriter`] — deterministic, semantics-free, contract-exact;
//!   the backend every test and the default pipeline use.
//! * [`HttpRewriter`] — a JSON-over-HTTP client for an external model server
//!   (the production stand-in for "ask a big model to rewrite this").
//!
//! The wire protocol is deliberately tiny: POST the request object (with a
//! `kind` discriminator) to the endpoint, receive `{"texts": [...]}`,
//! status 200 on success and nothing else.

use std::collections::BTreeMap;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// What the caller wants rewritten, with per-kind parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewriteKind {
    /// One plausible but incorrect answer to the question.
    IncorrectAnswer,
    /// `count` distractor options, pairwise distinct and unequal to the
    /// ground truth.
    Distractors { count: u32 },
    /// Rewrite a yes/no question into one whose answer is neither "Yes" nor
    /// "No"; returns the new question and its answer.
    RewriteYnQuestion,
    /// Condense the ground-truth label to at most `max_words` words.
    Condense { max_words: u32 },
    /// Produce the direct answer followed by an explanation of roughly
    /// `target_words` words.
    Explain { target_words: u32 },
    /// Reformulate an explanatory label to roughly `target_words` words.
    Reformulate { target_words: u32 },
}

impl RewriteKind {
    /// Number of texts a conforming response carries.
    pub fn arity(&self) -> usize {
        match self {
            RewriteKind::Distractors { .. } => 3,
            RewriteKind::RewriteYnQuestion => 2,
            _ => 1,
        }
    }

    fn validate(&self) -> Result<(), RewriteError> {
        match *self {
            RewriteKind::Distractors { count } if count != 3 => Err(
                RewriteError::InvalidRequest(format!("distractor count must be 3, got {count}")),
            ),
            RewriteKind::Explain { target_words } | RewriteKind::Reformulate { target_words }
                if target_words != 20 && target_words != 50 =>
            {
                Err(RewriteError::InvalidRequest(format!(
                    "target_words must be 20 or 50, got {target_words}"
                )))
            }
            RewriteKind::Condense { max_words } if max_words == 0 => Err(
                RewriteError::InvalidRequest("max_words must be positive".to_string()),
            ),
            _ => Ok(()),
        }
    }
}

/// A rewriting job: the kind plus the sample context the backend may use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewriteRequest {
    #[serde(flatten)]
    pub kind: RewriteKind,
    pub question: String,
    pub gt_label: String,
    #[serde(default)]
    pub image: String,
    #[serde(default)]
    pub context: BTreeMap<String, String>,
}

impl RewriteRequest {
    pub fn new(kind: RewriteKind, question: &str, gt_label: &str) -> Self {
        RewriteRequest {
            kind,
            question: question.to_string(),
            gt_label: gt_label.to_string(),
            image: String::new(),
            context: BTreeMap::new(),
        }
    }
}

/// Texts produced by a backend; length must match the kind's arity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewriteResponse {
    pub texts: Vec<String>,
}

#[derive(Debug, Error)]
pub enum RewriteError {
    #[error("invalid rewrite request: {0}")]
    InvalidRequest(String),
    #[error("rewrite backend unavailable: {0}")]
    Unavailable(String),
    #[error("rewrite response violates contract: {0}")]
    ContractViolation(String),
    #[error("rewrite timed out after {attempts} attempts")]
    Timeout { attempts: u32 },
}

/// Check a response against the request's contract: arity, non-empty texts,
/// and the per-kind content rules (distractor distinctness, incorrectness,
/// non-yes/no rewrites, word limits, answer prefixes).
pub fn check_response(req: &RewriteRequest, resp: &RewriteResponse) -> Result<(), RewriteError> {
    let want = req.kind.arity();
    if resp.texts.len() != want {
        return Err(RewriteError::ContractViolation(format!(
            "expected {want} texts for {:?}, got {}",
            req.kind,
            resp.texts.len()
        )));
    }
    if resp.texts.iter().any(|t| t.is_empty()) {
        return Err(RewriteError::ContractViolation(
            "response contains an empty text".to_string(),
        ));
    }
    match req.kind {
        RewriteKind::IncorrectAnswer => {
            if resp.texts[0].to_lowercase() == req.gt_label.to_lowercase() {
                return Err(RewriteError::ContractViolation(
                    "incorrect answer equals the ground-truth label".to_string(),
                ));
            }
        }
        RewriteKind::Distractors { .. } => {
            let lowered: Vec<String> = resp.texts.iter().map(|t| t.to_lowercase()).collect();
            let gt = req.gt_label.to_lowercase();
            for (i, a) in lowered.iter().enumerate() {
                if *a == gt {
                    return Err(RewriteError::ContractViolation(format!(
                        "distractor {i} equals the ground-truth label"
                    )));
                }
                for b in &lowered[i + 1..] {
                    if a == b {
                        return Err(RewriteError::ContractViolation(format!(
                            "duplicate distractor {a:?}"
                        )));
                    }
                }
            }
        }
        RewriteKind::RewriteYnQuestion => {
            let answer = resp.texts[1].trim().to_lowercase();
            if answer == "yes" || answer == "no" {
                return Err(RewriteError::ContractViolation(
                    "rewritten question still has a yes/no answer".to_string(),
                ));
            }
        }
        RewriteKind::Condense { max_words } => {
            let words = resp.texts[0].split_whitespace().count();
            if words > max_words as usize {
                return Err(RewriteError::ContractViolation(format!(
                    "condensed label has {words} words, limit is {max_words}"
                )));
            }
        }
        RewriteKind::Explain { .. } => {
            if !resp.texts[0].starts_with(&req.gt_label) {
                return Err(RewriteError::ContractViolation(
                    "explanation does not open with the direct answer".to_string(),
                ));
            }
        }
        RewriteKind::Reformulate { .. } => {}
    }
    Ok(())
}

/// An answer-rewriting backend, safe for concurrent use.
pub trait Rewriter: Send + Sync {
    fn rewrite(&self, request: &RewriteRequest) -> Result<RewriteResponse, RewriteError>;

    /// Whether word-count tolerance bands are enforced on this backend's
    /// output (true only for the deterministic template backend; generative
    /// backends cannot be hard-bounded, so bands are reported instead).
    fn enforces_word_bands(&self) -> bool {
        false
    }
}

/// Default answer pool for the template backend: distinct single words that
/// never collide with "Yes"/"No".
const DEFAULT_POOL: [&str; 16] = [
    "granite", "harbor", "falcon", "lantern", "meadow", "dolphin", "orchid", "canyon", "ember",
    "juniper", "kettle", "nebula", "pebble", "bridge", "island", "apple",
];

/// Filler vocabulary for deterministic explanations; cycled to reach an
/// exact word count.
const FILLER: [&str; 14] = [
    "because", "the", "visible", "evidence", "in", "the", "scene", "supports", "this",
    "conclusion", "over", "every", "alternative", "reading",
];

/// Deterministic, semantics-free backend: a pure function of the request
/// and the configured answer pool.
#[derive(Debug, Clone)]
pub struct TemplateRewriter {
    pool: Vec<String>,
}

impl Default for TemplateRewriter {
    fn default() -> Self {
        TemplateRewriter {
            pool: DEFAULT_POOL.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl TemplateRewriter {
    /// Backend drawing answers from a custom pool (entries should be
    /// pairwise distinct).
    pub fn with_pool(pool: Vec<String>) -> Self {
        TemplateRewriter { pool }
    }

    fn pool_entries_not_equal<'a>(&'a self, gt: &str) -> impl Iterator<Item = &'a str> {
        let gt = gt.to_lowercase();
        self.pool
            .iter()
            .map(String::as_str)
            .filter(move |p| p.to_lowercase() != gt)
    }

    /// Exactly `n` filler words, cycling the fixed vocabulary.
    fn filler_words(n: usize) -> String {
        (0..n)
            .map(|i| FILLER[i % FILLER.len()])
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl Rewriter for TemplateRewriter {
    fn rewrite(&self, request: &RewriteRequest) -> Result<RewriteResponse, RewriteError> {
        request.kind.validate()?;
        let texts = match request.kind {
            RewriteKind::IncorrectAnswer => {
                let answer = self
                    .pool_entries_not_equal(&request.gt_label)
                    .next()
                    .ok_or_else(|| {
                        RewriteError::Unavailable("answer pool exhausted".to_string())
                    })?;
                vec![answer.to_string()]
            }
            RewriteKind::Distractors { count } => {
                let picks: Vec<String> = self
                    .pool_entries_not_equal(&request.gt_label)
                    .take(count as usize)
                    .map(str::to_string)
                    .collect();
                if picks.len() < count as usize {
                    return Err(RewriteError::Unavailable(format!(
                        "answer pool has only {} entries distinct from the label",
                        picks.len()
                    )));
                }
                picks
            }
            RewriteKind::RewriteYnQuestion => {
                let answer = self
                    .pool_entries_not_equal(&request.gt_label)
                    .next()
                    .ok_or_else(|| {
                        RewriteError::Unavailable("answer pool exhausted".to_string())
                    })?;
                vec![
                    format!("What is the answer to: {}?", request.question),
                    answer.to_string(),
                ]
            }
            RewriteKind::Condense { max_words } => {
                let condensed: Vec<&str> = request
                    .gt_label
                    .split_whitespace()
                    .take(max_words as usize)
                    .collect();
                vec![condensed.join(" ")]
            }
            RewriteKind::Explain { target_words } => {
                // Direct answer first, then an exactly target_words filler
                // explanation.
                vec![format!(
                    "{} {}",
                    request.gt_label,
                    Self::filler_words(target_words as usize)
                )]
            }
            RewriteKind::Reformulate { target_words } => {
                // Reuse the original words, padded or truncated to exactly
                // target_words.
                let original: Vec<&str> = request.gt_label.split_whitespace().collect();
                let target = target_words as usize;
                let text = if original.len() >= target {
                    original[..target].join(" ")
                } else {
                    let pad = Self::filler_words(target - original.len());
                    format!("{} {}", original.join(" "), pad)
                };
                vec![text]
            }
        };
        let response = RewriteResponse { texts };
        check_response(request, &response)?;
        Ok(response)
    }

    fn enforces_word_bands(&self) -> bool {
        true
    }
}

/// Retry/timeout/concurrency policy for the HTTP backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HttpPolicy {
    pub timeout_ms: u64,
    /// Additional attempts after the first; at most 5.
    pub retries: u32,
    /// Base delay for exponential backoff between attempts.
    pub backoff_ms: u64,
    /// In-flight request bound across threads.
    pub max_in_flight: usize,
}

impl Default for HttpPolicy {
    fn default() -> Self {
        HttpPolicy {
            timeout_ms: 10_000,
            retries: 3,
            backoff_ms: 100,
            max_in_flight: 8,
        }
    }
}

/// Counting gate bounding concurrent HTTP calls.
struct InFlightGate {
    permits: Mutex<usize>,
    freed: Condvar,
}

impl InFlightGate {
    fn new(limit: usize) -> Self {
        InFlightGate {
            permits: Mutex::new(limit.max(1)),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) {
        let mut permits = self.permits.lock().expect("gate lock");
        while *permits == 0 {
            permits = self.freed.wait(permits).expect("gate wait");
        }
        *permits -= 1;
    }

    fn release(&self) {
        let mut permits = self.permits.lock().expect("gate lock");
        *permits += 1;
        self.freed.notify_one();
    }
}

/// JSON-over-HTTP backend for an external rewrite service.
pub struct HttpRewriter {
    endpoint: String,
    policy: HttpPolicy,
    client: reqwest::blocking::Client,
    gate: InFlightGate,
}

impl HttpRewriter {
    pub fn new(endpoint: impl Into<String>, policy: HttpPolicy) -> Result<Self, RewriteError> {
        if policy.retries > 5 {
            return Err(RewriteError::InvalidRequest(format!(
                "retries must be at most 5, got {}",
                policy.retries
            )));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(policy.timeout_ms))
            .build()
            .map_err(|e| RewriteError::Unavailable(e.to_string()))?;
        Ok(HttpRewriter {
            endpoint: endpoint.into(),
            gate: InFlightGate::new(policy.max_in_flight),
            policy,
            client,
        })
    }

    fn attempt(&self, request: &RewriteRequest) -> Result<RewriteResponse, AttemptFailure> {
        let result = self.client.post(&self.endpoint).json(request).send();
        let response = result.map_err(|_| AttemptFailure::Transient)?;
        let status = response.status();
        if status.is_server_error() {
            return Err(AttemptFailure::Transient);
        }
        if !status.is_success() {
            return Err(AttemptFailure::Fatal(RewriteError::Unavailable(format!(
                "endpoint returned status {status}"
            ))));
        }
        let parsed: RewriteResponse = response.json().map_err(|e| {
            AttemptFailure::Fatal(RewriteError::ContractViolation(format!(
                "malformed response body: {e}"
            )))
        })?;
        check_response(request, &parsed).map_err(AttemptFailure::Fatal)?;
        Ok(parsed)
    }
}

enum AttemptFailure {
    /// Worth retrying: transport error, timeout, or 5xx.
    Transient,
    /// Not worth retrying: contract violations and client-side rejections.
    Fatal(RewriteError),
}

impl Rewriter for HttpRewriter {
    fn rewrite(&self, request: &RewriteRequest) -> Result<RewriteResponse, RewriteError> {
        request.kind.validate()?;
        self.gate.acquire();
        let result = (|| {
            let attempts = self.policy.retries + 1;
            for attempt in 0..attempts {
                match self.attempt(request) {
                    Ok(resp) => return Ok(resp),
                    Err(AttemptFailure::Fatal(e)) => return Err(e),
                    Err(AttemptFailure::Transient) if attempt + 1 < attempts => {
                        let delay = self.policy.backoff_ms.saturating_mul(1 << attempt);
                        std::thread::sleep(Duration::from_millis(delay));
                    }
                    Err(AttemptFailure::Transient) => {}
                }
            }
            Err(RewriteError::Timeout { attempts })
        })();
        self.gate.release();
        result
    }
}

/// One-shot convenience wrapper over [`HttpRewriter`].
pub fn http_rewrite(
    endpoint: &str,
    request: &RewriteRequest,
    policy: HttpPolicy,
) -> Result<RewriteResponse, RewriteError> {
    HttpRewriter::new(endpoint, policy)?.rewrite(request)
}
