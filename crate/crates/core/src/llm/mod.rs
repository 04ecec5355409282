//! Zero-shot classification with hosted chat models: prompt construction,
//! provider calls, response normalisation and scoring from a verdict archive.

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::metrics::MetricsError;
use crate::taxonomy::{normalize_label_text, parse_label, Fallacy};

mod eval;
mod provider;

pub use eval::{
    evaluate_llm, read_archive, score_archive, ArchiveRecord, EvalOptions, FailureCensus, LlmEvaluation,
};
pub use provider::{
    classify_remote, HttpResponse, LlmRequest, Provider, ProviderKind, RemoteProvider, ReplayProvider, RetryPolicy,
    Sleeper, Transport, UreqTransport,
};

#[derive(Debug, thiserror::Error)]
pub enum LlmError {
    #[error("text to classify is empty")]
    EmptyText,
    #[error("model id is empty")]
    EmptyModel,
    #[error("{provider}: authentication failed: {reason}")]
    AuthError { provider: String, reason: String },
    #[error("{provider}: still rate limited after {attempts} attempts")]
    RateLimited { provider: String, attempts: u32 },
    #[error("{provider}: {message}")]
    ProviderError {
        provider: String,
        status: Option<u16>,
        message: String,
    },
    #[error("unknown provider `{0}` (expected openai, gemini or replay:<archive>)")]
    UnknownProvider(String),
    #[error("replay archive has no response for prompt of sample `{0}`")]
    NotInReplay(String),
    #[error("archive {path}: {source}")]
    Archive {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("archive line {line}: {message}")]
    ArchiveCorrupt { line: usize, message: String },
    #[error("archive has no verdict for sample `{0}`")]
    MissingVerdict(String),
    #[error("stopped after {completed} new verdicts (progress saved): {source}")]
    Aborted {
        completed: usize,
        #[source]
        source: Box<LlmError>,
    },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

pub type Result<T, E = LlmError> = std::result::Result<T, E>;

/// The classification prompt for one text.
pub fn build_prompt(labels: &[&str], text: &str) -> Result<String> {
    if text.trim().is_empty() {
        return Err(LlmError::EmptyText);
    }
    Ok(format!(
        "Please classify a piece of text into the following categories of logical fallacies: {}. Text: {} Label: ",
        labels.join(", "),
        text
    ))
}

/// [`build_prompt`] with the twelve canonical label names.
pub fn prompt_for(text: &str) -> Result<String> {
    let labels: Vec<&str> = Fallacy::ALL.iter().map(|f| f.canonical_name()).collect();
    build_prompt(&labels, text)
}

/// Outcome of normalising one response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Normalized {
    Label(Fallacy),
    /// The model declined to pick a label.
    NoneMarker,
    Unparseable,
}

const NONE_MARKER: &str = "<none>";
const UNPARSEABLE: &str = "<unparseable>";

impl Normalized {
    pub fn label(self) -> Option<Fallacy> {
        match self {
            Normalized::Label(f) => Some(f),
            _ => None,
        }
    }
}

impl fmt::Display for Normalized {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Normalized::Label(l) => f.write_str(l.canonical_name()),
            Normalized::NoneMarker => f.write_str(NONE_MARKER),
            Normalized::Unparseable => f.write_str(UNPARSEABLE),
        }
    }
}

impl From<Normalized> for String {
    fn from(n: Normalized) -> Self {
        n.to_string()
    }
}

impl TryFrom<String> for Normalized {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        match s.as_str() {
            NONE_MARKER => Ok(Normalized::NoneMarker),
            UNPARSEABLE => Ok(Normalized::Unparseable),
            other => parse_label(other).map(Normalized::Label).map_err(|e| e.to_string()),
        }
    }
}

/// Which step of the normalisation cascade decided a verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationRule {
    ExactLabel,
    TrailingLabel,
    LastMention,
    NoneMarker,
    Unparseable,
}

impl NormalizationRule {
    pub fn number(self) -> u8 {
        match self {
            NormalizationRule::ExactLabel => 1,
            NormalizationRule::TrailingLabel => 2,
            NormalizationRule::LastMention => 3,
            NormalizationRule::NoneMarker => 4,
            NormalizationRule::Unparseable => 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmVerdict {
    pub raw_response: String,
    pub normalized: Normalized,
    pub normalization_rule_applied: NormalizationRule,
}

fn strip_decoration(s: &str) -> &str {
    s.trim().trim_matches(|c: char| matches!(c, '"' | '\'' | '*' | '`' | '[' | ']' | '(' | ')')).trim()
}

fn is_none_answer(s: &str) -> bool {
    let norm = normalize_label_text(strip_decoration(s));
    matches!(norm.as_str(), "" | "none" | "none of the above" | "n/a" | "no label")
}

/// Lowercase alphanumeric words separated by single spaces.
fn words(s: &str) -> String {
    let mapped: String = s
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .flat_map(char::to_lowercase)
        .collect();
    mapped.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn last_mention(raw: &str, labels: &[Fallacy]) -> Option<Fallacy> {
    let haystack = format!(" {} ", words(raw));
    labels
        .iter()
        .filter_map(|&f| haystack.rfind(&format!(" {} ", f.canonical_name())).map(|pos| (pos, f)))
        .max_by_key(|&(pos, _)| pos)
        .map(|(_, f)| f)
}

/// Maps a free-text reply onto a label. Rules are tried in order: the whole
/// reply is a label; the reply ends in `Label: X`; the last label name
/// mentioned anywhere; an explicit none or empty reply; otherwise unparseable.
pub fn normalize_response(raw: &str, labels: &[Fallacy]) -> LlmVerdict {
    let verdict = |normalized, rule| LlmVerdict {
        raw_response: raw.to_string(),
        normalized,
        normalization_rule_applied: rule,
    };
    let allowed = |f: Fallacy| labels.contains(&f);

    if let Ok(f) = parse_label(strip_decoration(raw)) {
        if allowed(f) {
            return verdict(Normalized::Label(f), NormalizationRule::ExactLabel);
        }
    }
    let lower = raw.to_lowercase();
    if let Some(pos) = lower.rfind("label:") {
        let tail = &raw[pos + "label:".len()..];
        if let Ok(f) = parse_label(strip_decoration(tail)) {
            if allowed(f) {
                return verdict(Normalized::Label(f), NormalizationRule::TrailingLabel);
            }
        }
        if is_none_answer(tail) {
            return verdict(Normalized::NoneMarker, NormalizationRule::NoneMarker);
        }
    }
    if let Some(f) = last_mention(raw, labels) {
        return verdict(Normalized::Label(f), NormalizationRule::LastMention);
    }
    if is_none_answer(raw) {
        return verdict(Normalized::NoneMarker, NormalizationRule::NoneMarker);
    }
    verdict(Normalized::Unparseable, NormalizationRule::Unparseable)
}
