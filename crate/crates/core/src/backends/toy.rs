//! Deterministic in-process backends. They ignore the seed and use
//! `max_tokens` only to truncate output.

use std::collections::BTreeSet;

use super::{sort_beams, BackendDescriptor, BackendError, Beam, GenerationRequest, Generator};
use crate::metrics::unigram_f1;
use crate::pipeline::SpecialTokens;
use crate::textnorm::{normalize, TokenSequence};

fn truncate_words(text: &str, max_tokens: usize) -> String {
    if text.split_whitespace().count() <= max_tokens {
        text.to_owned()
    } else {
        text.split_whitespace()
            .take(max_tokens)
            .collect::<Vec<_>>()
            .join(" ")
    }
}

fn last_line(input: &str) -> &str {
    input
        .lines()
        .rev()
        .find(|l| !l.trim().is_empty())
        .unwrap_or("")
}

/// Returns its input unchanged as a single beam with score 0.
#[derive(Debug, Clone, Copy, Default)]
pub struct EchoBackend;

impl Generator for EchoBackend {
    fn name(&self) -> String {
        "echo".into()
    }

    fn generate(&self, request: &GenerationRequest) -> Result<Vec<Beam>, BackendError> {
        request.validate()?;
        Ok(vec![Beam::new(
            truncate_words(&request.input_text, request.max_tokens),
            0.0,
        )])
    }
}

/// Fills a template from the input.
///
/// `{k}` binds to the text inside the knowledge span if the input has one,
/// otherwise to the value of an `answer:` line, otherwise to the last line.
/// `{last}` is the last non-empty line and `{input}` the whole input.
#[derive(Debug, Clone)]
pub struct TemplateBackend {
    template: String,
    tokens: SpecialTokens,
}

impl TemplateBackend {
    pub fn new(template: impl Into<String>, tokens: SpecialTokens) -> Self {
        Self {
            template: template.into(),
            tokens,
        }
    }

    pub(super) fn from_descriptor(desc: &BackendDescriptor) -> Result<Self, BackendError> {
        let defaults = SpecialTokens::default();
        let tokens = SpecialTokens {
            open: desc
                .params
                .get("open_token")
                .cloned()
                .unwrap_or(defaults.open),
            close: desc
                .params
                .get("close_token")
                .cloned()
                .unwrap_or(defaults.close),
        };
        tokens
            .validate()
            .map_err(|e| BackendError::InvalidDescriptor {
                kind: "template".into(),
                reason: e.to_string(),
            })?;
        Ok(Self::new(desc.required("template")?, tokens))
    }

    fn knowledge_binding<'a>(&self, input: &'a str) -> &'a str {
        if let Some(span) = self.tokens.extract_span(input) {
            return span;
        }
        input
            .lines()
            .find_map(|l| l.strip_prefix("answer:"))
            .map(str::trim)
            .unwrap_or_else(|| last_line(input).trim())
    }

    pub fn render(&self, input: &str) -> String {
        self.template
            .replace("{k}", self.knowledge_binding(input))
            .replace("{last}", last_line(input))
            .replace("{input}", input)
    }
}

impl Generator for TemplateBackend {
    fn name(&self) -> String {
        format!("template({:?})", self.template)
    }

    fn generate(&self, request: &GenerationRequest) -> Result<Vec<Beam>, BackendError> {
        request.validate()?;
        Ok(vec![Beam::new(
            truncate_words(&self.render(&request.input_text), request.max_tokens),
            0.0,
        )])
    }
}

/// Lexical retrieval over a fixed sentence list: every sentence is scored by
/// unigram F1 against the input's last line; ties go to the lexicographically
/// smaller sentence.
#[derive(Debug, Clone)]
pub struct CorpusLookupBackend {
    source: String,
    sentences: Vec<(String, TokenSequence)>,
}

impl CorpusLookupBackend {
    pub fn new<I, S>(source: impl Into<String>, sentences: I) -> Result<Self, BackendError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let source = source.into();
        let unique: BTreeSet<String> = sentences
            .into_iter()
            .map(|s| s.as_ref().trim().to_owned())
            .filter(|s| !s.is_empty())
            .collect();
        if unique.is_empty() {
            return Err(BackendError::Corpus {
                path: source,
                cause: "corpus has no sentences".into(),
            });
        }
        let sentences = unique.into_iter().map(|s| {
            let toks = normalize(&s);
            (s, toks)
        });
        Ok(Self {
            source,
            sentences: sentences.collect(),
        })
    }

    pub(super) fn from_descriptor(desc: &BackendDescriptor) -> Result<Self, BackendError> {
        if let Some(inline) = desc.params.get("corpus") {
            return Self::new("<inline>", inline.lines());
        }
        let path = desc.required("path")?;
        let text = std::fs::read_to_string(path).map_err(|e| BackendError::Corpus {
            path: path.to_owned(),
            cause: e.to_string(),
        })?;
        Self::new(path, text.lines())
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// All sentences with their scores, best first.
    pub fn rank(&self, input: &str) -> Vec<Beam> {
        let query = normalize(last_line(input));
        // sentences are held in ascending order, so a stable sort keeps the
        // lexicographic tie-break
        let mut beams: Vec<Beam> = self
            .sentences
            .iter()
            .map(|(s, toks)| Beam::new(s.clone(), unigram_f1(toks, &query)))
            .collect();
        sort_beams(&mut beams);
        beams
    }
}

impl Generator for CorpusLookupBackend {
    fn name(&self) -> String {
        format!("corpus-lookup({})", self.source)
    }

    fn generate(&self, request: &GenerationRequest) -> Result<Vec<Beam>, BackendError> {
        request.validate()?;
        let mut beams = self.rank(&request.input_text);
        beams.truncate(request.n_best);
        for b in &mut beams {
            b.text = truncate_words(&b.text, request.max_tokens);
        }
        Ok(beams)
    }
}
