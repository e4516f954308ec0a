//! The generator abstraction every pipeline step runs through.
//!
//! A [`BackendDescriptor`] names a backend kind plus string parameters; it is
//! what configs and CLI flags carry. [`BackendDescriptor::build`] validates the
//! parameters and yields a [`Backend`], which implements [`Generator`].

mod http;
mod toy;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::{HttpBackend, DEFAULT_MAX_IN_FLIGHT, DEFAULT_TIMEOUT};
pub use toy::{CorpusLookupBackend, EchoBackend, TemplateBackend};

pub const DEFAULT_MAX_TOKENS: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub input_text: String,
    pub beam_size: usize,
    pub n_best: usize,
    pub max_tokens: usize,
    pub seed: u64,
}

impl GenerationRequest {
    pub fn new(input_text: impl Into<String>) -> Self {
        Self {
            input_text: input_text.into(),
            beam_size: 1,
            n_best: 1,
            max_tokens: DEFAULT_MAX_TOKENS,
            seed: 0,
        }
    }

    pub fn with_beams(mut self, beam_size: usize, n_best: usize) -> Self {
        self.beam_size = beam_size;
        self.n_best = n_best;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_max_tokens(mut self, max_tokens: usize) -> Self {
        self.max_tokens = max_tokens;
        self
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        let fail = |m: &str| Err(BackendError::InvalidRequest(m.to_owned()));
        if self.input_text.is_empty() {
            return fail("input_text is empty");
        }
        if self.beam_size == 0 || self.n_best == 0 || self.max_tokens == 0 {
            return fail("beam_size, n_best and max_tokens must be positive");
        }
        if self.n_best > self.beam_size {
            return fail("n_best exceeds beam_size");
        }
        Ok(())
    }
}

/// One ranked hypothesis. Higher scores are better; the scale is backend
/// specific.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Beam {
    pub text: String,
    pub score: f64,
}

impl Beam {
    pub fn new(text: impl Into<String>, score: f64) -> Self {
        Self {
            text: text.into(),
            score,
        }
    }
}

/// Sorts by score descending. The sort is stable so equal scores keep the
/// backend's order.
pub fn sort_beams(beams: &mut [Beam]) {
    beams.sort_by(|a, b| b.score.total_cmp(&a.score));
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("invalid {kind} backend: {reason}")]
    InvalidDescriptor { kind: String, reason: String },
    #[error("invalid generation request: {0}")]
    InvalidRequest(String),
    #[error("backend {endpoint}: transport failure: {cause}")]
    Transport { endpoint: String, cause: String },
    #[error("backend {endpoint}: timed out after {timeout:?}")]
    Timeout { endpoint: String, timeout: Duration },
    #[error("backend {endpoint}: HTTP status {status}: {body}")]
    Status {
        endpoint: String,
        status: u16,
        body: String,
    },
    #[error("backend {endpoint}: malformed reply, field `{field}`: {detail}")]
    Schema {
        endpoint: String,
        field: String,
        detail: String,
    },
    #[error("corpus {path}: {cause}")]
    Corpus { path: String, cause: String },
}

pub trait Generator: Send + Sync {
    /// Short label used in logs and errors.
    fn name(&self) -> String;

    /// Returns at most `request.n_best` beams sorted by score descending.
    fn generate(&self, request: &GenerationRequest) -> Result<Vec<Beam>, BackendError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    Echo,
    Template,
    CorpusLookup,
    Http,
}

impl BackendKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BackendKind::Echo => "echo",
            BackendKind::Template => "template",
            BackendKind::CorpusLookup => "corpus-lookup",
            BackendKind::Http => "http",
        }
    }

    fn allowed_params(self) -> &'static [&'static str] {
        match self {
            BackendKind::Echo => &[],
            BackendKind::Template => &["template", "open_token", "close_token"],
            BackendKind::CorpusLookup => &["path", "corpus"],
            BackendKind::Http => &["endpoint", "timeout_secs", "max_in_flight"],
        }
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BackendKind {
    type Err = BackendError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "echo" => Ok(BackendKind::Echo),
            "template" => Ok(BackendKind::Template),
            "corpus-lookup" => Ok(BackendKind::CorpusLookup),
            "http" => Ok(BackendKind::Http),
            other => Err(BackendError::InvalidDescriptor {
                kind: other.to_owned(),
                reason: "unknown backend kind (expected echo, template, corpus-lookup or http)"
                    .into(),
            }),
        }
    }
}

/// Serializable description of a backend.
///
/// Parameters by kind:
/// - `template`: `template` (required; placeholders `{k}`, `{last}`, `{input}`),
///   `open_token`, `close_token`
/// - `corpus-lookup`: `path` (one sentence per line) or inline `corpus`
/// - `http`: `endpoint` (required), `timeout_secs` (default 30),
///   `max_in_flight` (default 8)
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub kind: BackendKind,
    #[serde(default)]
    pub params: BTreeMap<String, String>,
}

impl BackendDescriptor {
    pub fn new(kind: BackendKind) -> Self {
        Self {
            kind,
            params: BTreeMap::new(),
        }
    }

    pub fn echo() -> Self {
        Self::new(BackendKind::Echo)
    }

    pub fn template(template: impl Into<String>) -> Self {
        Self::new(BackendKind::Template).with_param("template", template)
    }

    pub fn corpus_file(path: impl Into<String>) -> Self {
        Self::new(BackendKind::CorpusLookup).with_param("path", path)
    }

    pub fn corpus_inline<I, S>(sentences: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let joined = sentences
            .into_iter()
            .map(|s| s.as_ref().to_owned())
            .collect::<Vec<_>>()
            .join("\n");
        Self::new(BackendKind::CorpusLookup).with_param("corpus", joined)
    }

    pub fn http(endpoint: impl Into<String>) -> Self {
        Self::new(BackendKind::Http).with_param("endpoint", endpoint)
    }

    pub fn with_param(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.params.insert(key.into(), value.into());
        self
    }

    fn invalid(&self, reason: impl Into<String>) -> BackendError {
        BackendError::InvalidDescriptor {
            kind: self.kind.to_string(),
            reason: reason.into(),
        }
    }

    pub(crate) fn required(&self, key: &str) -> Result<&str, BackendError> {
        self.params
            .get(key)
            .map(String::as_str)
            .filter(|v| !v.is_empty())
            .ok_or_else(|| self.invalid(format!("missing parameter `{key}`")))
    }

    pub(crate) fn parsed<T: FromStr>(&self, key: &str, default: T) -> Result<T, BackendError> {
        match self.params.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| self.invalid(format!("parameter `{key}` is not valid: {v:?}"))),
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        let allowed = self.kind.allowed_params();
        if let Some(bad) = self.params.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(self.invalid(format!("unknown parameter `{bad}`")));
        }
        match self.kind {
            BackendKind::Echo => {}
            BackendKind::Template => {
                self.required("template")?;
            }
            BackendKind::CorpusLookup => match (self.params.get("path"), self.params.get("corpus"))
            {
                (Some(_), Some(_)) => {
                    return Err(self.invalid("give either `path` or `corpus`, not both"))
                }
                (None, None) => return Err(self.invalid("missing parameter `path`")),
                _ => {}
            },
            BackendKind::Http => {
                self.required("endpoint")?;
                let secs: f64 = self.parsed("timeout_secs", DEFAULT_TIMEOUT.as_secs_f64())?;
                if !(secs > 0.0 && secs.is_finite()) {
                    return Err(self.invalid("timeout_secs must be positive"));
                }
                if self.parsed::<usize>("max_in_flight", DEFAULT_MAX_IN_FLIGHT)? == 0 {
                    return Err(self.invalid("max_in_flight must be positive"));
                }
            }
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Backend, BackendError> {
        self.validate()?;
        Ok(match self.kind {
            BackendKind::Echo => Backend::Echo(EchoBackend),
            BackendKind::Template => Backend::Template(TemplateBackend::from_descriptor(self)?),
            BackendKind::CorpusLookup => {
                Backend::CorpusLookup(CorpusLookupBackend::from_descriptor(self)?)
            }
            BackendKind::Http => Backend::Http(HttpBackend::from_descriptor(self)?),
        })
    }
}

/// Compact CLI form: `echo`, `template:<text>`, `corpus-lookup:<path>`,
/// `http:<url>`, or a JSON descriptor object.
impl FromStr for BackendDescriptor {
    type Err = BackendError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let desc = if s.starts_with('{') {
            serde_json::from_str(s).map_err(|e| BackendError::InvalidDescriptor {
                kind: "json".into(),
                reason: e.to_string(),
            })?
        } else {
            let (kind, arg) = match s.split_once(':') {
                Some((k, a)) => (k, Some(a)),
                None => (s, None),
            };
            let kind: BackendKind = kind.parse()?;
            match (kind, arg) {
                (BackendKind::Echo, None) => Self::echo(),
                (BackendKind::Template, Some(a)) => Self::template(a),
                (BackendKind::CorpusLookup, Some(a)) => Self::corpus_file(a),
                (BackendKind::Http, Some(a)) => Self::http(a),
                (kind, _) => {
                    return Err(BackendError::InvalidDescriptor {
                        kind: kind.to_string(),
                        reason: format!("cannot parse {s:?}"),
                    })
                }
            }
        };
        desc.validate()?;
        Ok(desc)
    }
}

pub enum Backend {
    Echo(EchoBackend),
    Template(TemplateBackend),
    CorpusLookup(CorpusLookupBackend),
    Http(HttpBackend),
}

impl Generator for Backend {
    fn name(&self) -> String {
        match self {
            Backend::Echo(b) => b.name(),
            Backend::Template(b) => b.name(),
            Backend::CorpusLookup(b) => b.name(),
            Backend::Http(b) => b.name(),
        }
    }

    fn generate(&self, request: &GenerationRequest) -> Result<Vec<Beam>, BackendError> {
        match self {
            Backend::Echo(b) => b.generate(request),
            Backend::Template(b) => b.generate(request),
            Backend::CorpusLookup(b) => b.generate(request),
            Backend::Http(b) => b.generate(request),
        }
    }
}
