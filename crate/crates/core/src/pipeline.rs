//! Knowledge-to-response composition.
//!
//! The knowledge step sees the serialized context alone; the response step
//! sees the same context followed by one line holding the knowledge between
//! the open and close tokens, optionally followed by a confidence token:
//!
//! ```text
//! topic: Husky
//! apprentice: I just got a husky puppy
//! __knowledge__ huskies are used in sled dog racing. __endknowledge__ __conf-6__
//! ```
//!
//! A backend bound to both steps (shared mode) tells the tasks apart by the
//! presence of the knowledge span.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{
    BackendDescriptor, BackendError, Beam, GenerationRequest, Generator, DEFAULT_MAX_TOKENS,
};
use crate::episode::DialogueEpisode;
use crate::metrics::{
    answer_present, bleu4, knowledge_f1, rare_f1, rouge_l, unigram_f1, Metric, MetricRow,
    RarityTable,
};
use crate::textnorm::normalize;

pub const DEFAULT_OPEN_TOKEN: &str = "__knowledge__";
pub const DEFAULT_CLOSE_TOKEN: &str = "__endknowledge__";
pub const CONFIDENCE_PREFIX: &str = "__conf-";
pub const MAX_CONFIDENCE: u8 = 10;
pub const DEFAULT_RESPONSE_BEAM_SIZE: usize = 3;
pub const DEFAULT_FILTERED_BEAM_SIZE: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Step {
    Knowledge,
    Response,
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Step::Knowledge => "knowledge",
            Step::Response => "response",
        })
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("episode has no turns")]
    EmptyContext,
    #[error("reserved token in input")]
    ReservedTokenInInput,
    #[error("reserved token in knowledge")]
    ReservedTokenInKnowledge,
    #[error("knowledge is empty")]
    EmptyKnowledge,
    #[error("{step} step: {source}")]
    Backend {
        step: Step,
        #[source]
        source: BackendError,
    },
    #[error("{step} step: backend returned no beams")]
    NoBeams { step: Step },
}

impl PipelineError {
    /// The pipeline step a backend failure came from, if any.
    pub fn step(&self) -> Option<Step> {
        match self {
            PipelineError::Backend { step, .. } | PipelineError::NoBeams { step } => Some(*step),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialTokens {
    pub open: String,
    pub close: String,
}

impl Default for SpecialTokens {
    fn default() -> Self {
        Self {
            open: DEFAULT_OPEN_TOKEN.into(),
            close: DEFAULT_CLOSE_TOKEN.into(),
        }
    }
}

impl SpecialTokens {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.open.trim().is_empty() || self.close.trim().is_empty() {
            return Err(PipelineError::InvalidConfig(
                "knowledge tokens must be non-empty".into(),
            ));
        }
        if self.open.contains(&self.close) || self.close.contains(&self.open) {
            return Err(PipelineError::InvalidConfig(
                "knowledge tokens must be distinct".into(),
            ));
        }
        Ok(())
    }

    pub fn contains_reserved(&self, text: &str) -> bool {
        text.contains(&self.open) || text.contains(&self.close) || text.contains(CONFIDENCE_PREFIX)
    }

    /// Text between the first open token and the following close token.
    pub fn extract_span<'a>(&self, input: &'a str) -> Option<&'a str> {
        let start = input.find(&self.open)? + self.open.len();
        let len = input[start..].find(&self.close)?;
        Some(input[start..start + len].trim())
    }

    pub fn count_spans(&self, input: &str) -> usize {
        input.matches(&self.open).count()
    }
}

pub fn confidence_token(level: u8) -> String {
    format!("{CONFIDENCE_PREFIX}{level}__")
}

/// Reads a trailing confidence token (`__conf-<k>__`) back out of an input.
pub fn parse_confidence(input: &str) -> Option<u8> {
    let last = input.lines().last()?;
    let start = last.rfind(CONFIDENCE_PREFIX)? + CONFIDENCE_PREFIX.len();
    last[start..]
        .strip_suffix("__")?
        .parse()
        .ok()
        .filter(|k| *k <= MAX_CONFIDENCE)
}

/// Context lines: optional topic, personas, then turns, newline-joined.
pub fn serialize_context(
    episode: &DialogueEpisode,
    tokens: &SpecialTokens,
) -> Result<String, PipelineError> {
    if episode.turns.is_empty() {
        return Err(PipelineError::EmptyContext);
    }
    let mut lines = Vec::with_capacity(episode.turns.len() + 1);
    if let Some(topic) = &episode.topic {
        lines.push(format!("topic: {topic}"));
    }
    for p in episode.personas.iter().flatten() {
        lines.push(format!("persona {}: {}", p.speaker, p.text));
    }
    for t in &episode.turns {
        lines.push(format!("{}: {}", t.speaker, t.text));
    }
    let context = lines.join("\n");
    if tokens.contains_reserved(&context) {
        return Err(PipelineError::ReservedTokenInInput);
    }
    Ok(context)
}

/// Appends the knowledge line to an already serialized context.
pub fn append_knowledge(
    context: &str,
    knowledge: &str,
    tokens: &SpecialTokens,
    confidence: Option<u8>,
) -> Result<String, PipelineError> {
    if knowledge.trim().is_empty() {
        return Err(PipelineError::EmptyKnowledge);
    }
    if tokens.contains_reserved(knowledge) {
        return Err(PipelineError::ReservedTokenInKnowledge);
    }
    let mut out = format!("{context}\n{} {knowledge} {}", tokens.open, tokens.close);
    if let Some(level) = confidence {
        out.push(' ');
        out.push_str(&confidence_token(level));
    }
    Ok(out)
}

pub fn serialize_response_input(
    episode: &DialogueEpisode,
    knowledge: &str,
    tokens: &SpecialTokens,
    confidence: Option<u8>,
) -> Result<String, PipelineError> {
    append_knowledge(
        &serialize_context(episode, tokens)?,
        knowledge,
        tokens,
        confidence,
    )
}

/// Index of the highest-ranked beam containing the knowledge as a contiguous
/// normalized token run; `(0, false)` when none does.
pub fn filter_select(beams: &[Beam], knowledge: &str) -> (usize, bool) {
    let needle = normalize(knowledge);
    if needle.is_empty() {
        log::warn!("beam filter: knowledge {knowledge:?} normalizes to nothing; keeping top beam");
        return (0, false);
    }
    beams
        .iter()
        .position(|b| normalize(&b.text).contains_run(&needle))
        .map_or((0, false), |i| (i, true))
}

fn default_open() -> String {
    DEFAULT_OPEN_TOKEN.into()
}
fn default_close() -> String {
    DEFAULT_CLOSE_TOKEN.into()
}
fn default_response_beam_size() -> usize {
    DEFAULT_RESPONSE_BEAM_SIZE
}
fn default_filtered_beam_size() -> usize {
    DEFAULT_FILTERED_BEAM_SIZE
}
fn default_max_tokens() -> usize {
    DEFAULT_MAX_TOKENS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct K2RConfig {
    pub knowledge_backend: BackendDescriptor,
    pub response_backend: BackendDescriptor,
    /// Bind one backend instance (built from `knowledge_backend`) to both
    /// steps. `response_backend` must then be the same descriptor.
    #[serde(default)]
    pub shared: bool,
    #[serde(default = "default_open")]
    pub knowledge_open_token: String,
    #[serde(default = "default_close")]
    pub knowledge_close_token: String,
    #[serde(default)]
    pub confidence: Option<u8>,
    #[serde(default = "default_response_beam_size")]
    pub response_beam_size: usize,
    #[serde(default)]
    pub filter_beams: bool,
    #[serde(default = "default_filtered_beam_size")]
    pub filtered_beam_size: usize,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
}

impl K2RConfig {
    pub fn new(knowledge_backend: BackendDescriptor, response_backend: BackendDescriptor) -> Self {
        Self {
            knowledge_backend,
            response_backend,
            shared: false,
            knowledge_open_token: default_open(),
            knowledge_close_token: default_close(),
            confidence: None,
            response_beam_size: DEFAULT_RESPONSE_BEAM_SIZE,
            filter_beams: false,
            filtered_beam_size: DEFAULT_FILTERED_BEAM_SIZE,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }

    pub fn shared(backend: BackendDescriptor) -> Self {
        let mut config = Self::new(backend.clone(), backend);
        config.shared = true;
        config
    }

    pub fn with_confidence(mut self, confidence: Option<u8>) -> Self {
        self.confidence = confidence;
        self
    }

    pub fn with_filter(mut self, filter_beams: bool) -> Self {
        self.filter_beams = filter_beams;
        self
    }

    pub fn tokens(&self) -> SpecialTokens {
        SpecialTokens {
            open: self.knowledge_open_token.clone(),
            close: self.knowledge_close_token.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let invalid = |m: String| Err(PipelineError::InvalidConfig(m));
        self.tokens().validate()?;
        if let Some(level) = self.confidence {
            if level > MAX_CONFIDENCE {
                return invalid(format!("confidence {level} outside 0..={MAX_CONFIDENCE}"));
            }
        }
        if self.response_beam_size == 0 || self.max_tokens == 0 {
            return invalid("response_beam_size and max_tokens must be positive".into());
        }
        if self.filtered_beam_size < self.response_beam_size {
            return invalid("filtered_beam_size must be at least response_beam_size".into());
        }
        if self.shared && self.knowledge_backend != self.response_backend {
            return invalid("shared mode needs identical knowledge and response backends".into());
        }
        for (step, desc) in [
            (Step::Knowledge, &self.knowledge_backend),
            (Step::Response, &self.response_backend),
        ] {
            desc.validate()
                .map_err(|e| PipelineError::InvalidConfig(format!("{step} backend: {e}")))?;
        }
        Ok(())
    }

    /// Beam size (and n-best) used for the response step.
    pub fn response_beams(&self) -> usize {
        if self.filter_beams {
            self.filtered_beam_size
        } else {
            self.response_beam_size
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgePrediction {
    pub serialized_input: String,
    pub knowledge: String,
    pub beams: Vec<Beam>,
}

/// Everything one pipeline pass saw and produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineTrace {
    pub seed: u64,
    pub serialized_knowledge_input: String,
    /// `None` when injected knowledge skipped the knowledge step.
    pub predicted_knowledge: Option<String>,
    pub knowledge_beams: Vec<Beam>,
    pub injected_knowledge: Option<String>,
    pub knowledge_used: String,
    pub confidence: Option<u8>,
    pub serialized_response_input: String,
    pub beams: Vec<Beam>,
    pub selected_index: usize,
    pub response: String,
    pub filter_applied: bool,
    pub filter_hit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub trace: PipelineTrace,
    pub metrics: MetricRow,
}

struct ResponseSelection {
    beams: Vec<Beam>,
    selected_index: usize,
    filter_hit: bool,
}

/// A validated config bound to live generators.
#[derive(Clone)]
pub struct Pipeline {
    config: K2RConfig,
    tokens: SpecialTokens,
    knowledge: Arc<dyn Generator>,
    response: Arc<dyn Generator>,
}

impl fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Pipeline")
            .field("config", &self.config)
            .field("knowledge", &self.knowledge.name())
            .field("response", &self.response.name())
            .finish()
    }
}

impl Pipeline {
    /// Builds backends from the config's descriptors.
    pub fn from_config(config: K2RConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let build = |step, desc: &BackendDescriptor| -> Result<Arc<dyn Generator>, PipelineError> {
            Ok(Arc::new(desc.build().map_err(|source| {
                PipelineError::Backend { step, source }
            })?))
        };
        let knowledge = build(Step::Knowledge, &config.knowledge_backend)?;
        let response = if config.shared {
            knowledge.clone()
        } else {
            build(Step::Response, &config.response_backend)?
        };
        Self::assemble(config, knowledge, response)
    }

    /// Uses caller-supplied generators; the config's descriptors are kept only
    /// as a record.
    pub fn with_generators(
        config: K2RConfig,
        knowledge: Arc<dyn Generator>,
        response: Arc<dyn Generator>,
    ) -> Result<Self, PipelineError> {
        config.validate()?;
        Self::assemble(config, knowledge, response)
    }

    pub fn with_shared_generator(
        config: K2RConfig,
        generator: Arc<dyn Generator>,
    ) -> Result<Self, PipelineError> {
        let mut config = config;
        config.shared = true;
        config.response_backend = config.knowledge_backend.clone();
        Self::with_generators(config, generator.clone(), generator)
    }

    fn assemble(
        config: K2RConfig,
        knowledge: Arc<dyn Generator>,
        response: Arc<dyn Generator>,
    ) -> Result<Self, PipelineError> {
        let tokens = config.tokens();
        Ok(Self {
            config,
            tokens,
            knowledge,
            response,
        })
    }

    pub fn config(&self) -> &K2RConfig {
        &self.config
    }

    pub fn tokens(&self) -> &SpecialTokens {
        &self.tokens
    }

    pub fn is_shared_instance(&self) -> bool {
        Arc::ptr_eq(&self.knowledge, &self.response)
    }

    /// Same generators, different confidence level.
    pub fn with_confidence(&self, confidence: Option<u8>) -> Result<Self, PipelineError> {
        let config = self.config.clone().with_confidence(confidence);
        config.validate()?;
        Ok(Self {
            config,
            ..self.clone()
        })
    }

    pub fn serialize_context(&self, episode: &DialogueEpisode) -> Result<String, PipelineError> {
        serialize_context(episode, &self.tokens)
    }

    pub fn serialize_response_input(
        &self,
        episode: &DialogueEpisode,
        knowledge: &str,
    ) -> Result<String, PipelineError> {
        serialize_response_input(episode, knowledge, &self.tokens, self.config.confidence)
    }

    fn call(&self, step: Step, request: &GenerationRequest) -> Result<Vec<Beam>, PipelineError> {
        let generator = match step {
            Step::Knowledge => &self.knowledge,
            Step::Response => &self.response,
        };
        let beams = generator
            .generate(request)
            .map_err(|source| PipelineError::Backend { step, source })?;
        if beams.is_empty() {
            return Err(PipelineError::NoBeams { step });
        }
        Ok(beams)
    }

    pub fn predict_knowledge(
        &self,
        episode: &DialogueEpisode,
        seed: u64,
    ) -> Result<KnowledgePrediction, PipelineError> {
        let serialized_input = self.serialize_context(episode)?;
        let request = GenerationRequest::new(serialized_input.clone())
            .with_beams(self.config.response_beam_size, 1)
            .with_max_tokens(self.config.max_tokens)
            .with_seed(seed);
        let beams = self.call(Step::Knowledge, &request)?;
        let knowledge = beams[0].text.clone();
        Ok(KnowledgePrediction {
            serialized_input,
            knowledge,
            beams,
        })
    }

    fn run_response(
        &self,
        input: &str,
        knowledge: &str,
        seed: u64,
    ) -> Result<ResponseSelection, PipelineError> {
        let n = self.config.response_beams();
        let request = GenerationRequest::new(input)
            .with_beams(n, n)
            .with_max_tokens(self.config.max_tokens)
            .with_seed(seed);
        let beams = self.call(Step::Response, &request)?;
        let (selected_index, filter_hit) = if self.config.filter_beams {
            filter_select(&beams, knowledge)
        } else {
            (0, false)
        };
        Ok(ResponseSelection {
            beams,
            selected_index,
            filter_hit,
        })
    }

    /// Knowledge step (unless `injected_knowledge` is given, in which case the
    /// knowledge backend is not called at all), then the response step.
    pub fn respond(
        &self,
        episode: &DialogueEpisode,
        seed: u64,
        injected_knowledge: Option<&str>,
    ) -> Result<PipelineTrace, PipelineError> {
        let (serialized_knowledge_input, predicted, knowledge_beams) = match injected_knowledge {
            Some(_) => (self.serialize_context(episode)?, None, Vec::new()),
            None => {
                let p = self.predict_knowledge(episode, seed)?;
                (p.serialized_input, Some(p.knowledge), p.beams)
            }
        };
        let knowledge_used = injected_knowledge
            .map(str::to_owned)
            .or_else(|| predicted.clone())
            .expect("either injected or predicted knowledge");
        let serialized_response_input = append_knowledge(
            &serialized_knowledge_input,
            &knowledge_used,
            &self.tokens,
            self.config.confidence,
        )?;
        let sel = self.run_response(&serialized_response_input, &knowledge_used, seed)?;
        Ok(PipelineTrace {
            seed,
            serialized_knowledge_input,
            predicted_knowledge: predicted,
            knowledge_beams,
            injected_knowledge: injected_knowledge.map(str::to_owned),
            knowledge_used,
            confidence: self.config.confidence,
            serialized_response_input,
            response: sel.beams[sel.selected_index].text.clone(),
            beams: sel.beams,
            selected_index: sel.selected_index,
            filter_applied: self.config.filter_beams,
            filter_hit: sel.filter_hit,
        })
    }

    /// Re-issues a trace's recorded response input and returns the response
    /// the backend now produces.
    pub fn replay_response(&self, trace: &PipelineTrace) -> Result<String, PipelineError> {
        let sel = self.run_response(
            &trace.serialized_response_input,
            &trace.knowledge_used,
            trace.seed,
        )?;
        Ok(sel.beams[sel.selected_index].text.clone())
    }

    pub fn run_episode(
        &self,
        episode: &DialogueEpisode,
        seed: u64,
        rarity: Option<&RarityTable>,
    ) -> Result<EpisodeOutcome, PipelineError> {
        let trace = self.respond(episode, seed, None)?;
        let metrics = score_episode(episode, &trace, rarity);
        Ok(EpisodeOutcome { trace, metrics })
    }
}

/// Metrics for one episode, each computed only when its reference exists:
/// F1/RF1/BLEU-4/ROUGE-L need `gold_response`, KF1 needs `gold_knowledge`,
/// AP/GAP need `gold_answers`. PKF1 is reported for dialogue-style episodes
/// (gold response or gold knowledge present).
pub fn score_episode(
    episode: &DialogueEpisode,
    trace: &PipelineTrace,
    rarity: Option<&RarityTable>,
) -> MetricRow {
    let mut row = MetricRow::new(episode.example_id.clone());
    let response = normalize(&trace.response);
    let v = &mut row.values;
    if let Some(gold) = &episode.gold_response {
        let gold = normalize(gold);
        v.set(Metric::F1, unigram_f1(&response, &gold));
        v.set(Metric::Bleu4, bleu4(&response, &gold));
        v.set(Metric::RougeL, rouge_l(&response, &gold));
        if let Some(table) = rarity {
            v.set(Metric::Rf1, rare_f1(&response, &gold, table));
        }
    }
    if let Some(gold) = &episode.gold_knowledge {
        v.set(Metric::Kf1, knowledge_f1(&response, &normalize(gold)));
    }
    if episode.gold_response.is_some() || episode.gold_knowledge.is_some() {
        v.set(
            Metric::Pkf1,
            knowledge_f1(&response, &normalize(&trace.knowledge_used)),
        );
    }
    if let Some(answers) = &episode.gold_answers {
        if let Ok(ap) = answer_present(&trace.response, answers) {
            v.set(Metric::Ap, ap as f64);
        }
        if let Ok(gap) =
            answer_present(&trace.response, std::slice::from_ref(&trace.knowledge_used))
        {
            v.set(Metric::Gap, gap as f64);
        }
    }
    row
}
