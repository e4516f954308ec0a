//! QA-episode construction from dialogue episodes: summarize, propose answer
//! candidates, generate a question per candidate, keep the questions a QA
//! model answers with the candidate, and append each kept question to a
//! truncated copy of the source dialogue.
//!
//! Backend prompts:
//! - summarizer: the serialized context
//! - question generator: `answer: <candidate>\ncontext: <summary>`
//! - QA model: `question: <question>\ncontext: <summary>`

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendDescriptor, BackendError, GenerationRequest, Generator};
use crate::chunker::{tokenize, HeuristicChunker, PhraseExtractor};
use crate::episode::{DialogueEpisode, Turn};
use crate::pipeline::{serialize_context, PipelineError, SpecialTokens};
use crate::seed::{derive_seed, example_rng};
use crate::textnorm::{normalize, ARTICLES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DropReason {
    QaMismatch,
    EmptyCandidate,
    GenerationFailure,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForgeRecord {
    pub source_example_id: String,
    pub candidate_index: usize,
    pub summary: String,
    pub candidate: String,
    pub question: String,
    pub qa_answer: String,
    pub kept: bool,
    pub drop_reason: Option<DropReason>,
}

#[derive(Debug, Error)]
pub enum ForgeError {
    #[error("empty answer candidate")]
    EmptyCandidate,
    #[error("{stage}: {source}")]
    Backend {
        stage: &'static str,
        #[source]
        source: BackendError,
    },
    #[error("{stage}: backend returned no beams")]
    NoBeams { stage: &'static str },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

pub struct ForgeBackends {
    pub summarizer: Arc<dyn Generator>,
    pub question_generator: Arc<dyn Generator>,
    pub qa: Arc<dyn Generator>,
}

impl ForgeBackends {
    pub fn from_descriptors(
        summarizer: &BackendDescriptor,
        question_generator: &BackendDescriptor,
        qa: &BackendDescriptor,
    ) -> Result<Self, BackendError> {
        Ok(Self {
            summarizer: Arc::new(summarizer.build()?),
            question_generator: Arc::new(question_generator.build()?),
            qa: Arc::new(qa.build()?),
        })
    }
}

fn top_beam(
    stage: &'static str,
    generator: &dyn Generator,
    input: String,
    seed: u64,
) -> Result<String, ForgeError> {
    let request = GenerationRequest::new(input).with_seed(seed);
    let beams = generator
        .generate(&request)
        .map_err(|source| ForgeError::Backend { stage, source })?;
    beams
        .into_iter()
        .next()
        .map(|b| b.text)
        .ok_or(ForgeError::NoBeams { stage })
}

pub fn summarize(
    episode: &DialogueEpisode,
    summarizer: &dyn Generator,
    tokens: &SpecialTokens,
    seed: u64,
) -> Result<String, ForgeError> {
    top_beam(
        "summarize",
        summarizer,
        serialize_context(episode, tokens)?,
        seed,
    )
}

pub fn generate_question(
    summary: &str,
    candidate: &str,
    question_generator: &dyn Generator,
    seed: u64,
) -> Result<String, ForgeError> {
    if candidate.trim().is_empty() {
        return Err(ForgeError::EmptyCandidate);
    }
    top_beam(
        "question",
        question_generator,
        format!("answer: {candidate}\ncontext: {summary}"),
        seed,
    )
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QaVerdict {
    pub kept: bool,
    pub answer: String,
}

/// Keeps a question iff the QA model's answer normalizes to the candidate.
pub fn qa_filter(
    summary: &str,
    question: &str,
    candidate: &str,
    qa: &dyn Generator,
    seed: u64,
) -> Result<QaVerdict, ForgeError> {
    let answer = top_beam(
        "qa",
        qa,
        format!("question: {question}\ncontext: {summary}"),
        seed,
    )?;
    Ok(QaVerdict {
        kept: normalize(&answer) == normalize(candidate),
        answer,
    })
}

/// Proposes answer candidates for a summary.
pub trait CandidateExtractor: Send + Sync {
    fn candidates(&self, summary: &str) -> Vec<String>;
}

/// Phrase chunks plus capitalized-token runs (a stand-in for entity and
/// proper-noun detection), deduplicated by normalized form in order of
/// appearance.
#[derive(Debug, Clone, Copy, Default)]
pub struct HeuristicCandidates {
    pub chunker: HeuristicChunker,
}

/// Capitalized runs as (normalized start, surface), with stopwords trimmed
/// from both ends.
fn capitalized_runs(text: &str) -> Vec<(usize, String)> {
    let tokens = tokenize(text);
    let mut runs = Vec::new();
    let mut current: Vec<(usize, usize)> = Vec::new(); // (token idx, normalized idx)
    let mut flush = |current: &mut Vec<(usize, usize)>| {
        let trimmed: Vec<_> = {
            let is_stop = |&(ti, _): &(usize, usize)| {
                let w = tokens[ti].lower.as_str();
                crate::chunker::is_stopword(w) || ARTICLES.contains(&w)
            };
            let start = current.iter().position(|t| !is_stop(t));
            let end = current.iter().rposition(|t| !is_stop(t));
            match (start, end) {
                (Some(s), Some(e)) => current[s..=e].to_vec(),
                _ => Vec::new(),
            }
        };
        if let (Some(first), Some(last)) = (trimmed.first(), trimmed.last()) {
            runs.push((
                first.1,
                text[tokens[first.0].start..tokens[last.0].end].to_owned(),
            ));
        }
        current.clear();
    };
    let mut norm_index = 0;
    for (ti, tok) in tokens.iter().enumerate() {
        if tok.breaks_before {
            flush(&mut current);
        }
        if tok.raw.chars().next().is_some_and(char::is_uppercase) {
            current.push((ti, norm_index));
        } else {
            flush(&mut current);
        }
        if !ARTICLES.contains(&tok.lower.as_str()) {
            norm_index += 1;
        }
    }
    flush(&mut current);
    runs
}

impl CandidateExtractor for HeuristicCandidates {
    fn candidates(&self, summary: &str) -> Vec<String> {
        // phrases sort before capitalized runs at the same start
        let mut found: Vec<(usize, u8, String)> = self
            .chunker
            .extract(summary)
            .into_iter()
            .map(|s| (s.start, 0, s.surface))
            .collect();
        found.extend(
            capitalized_runs(summary)
                .into_iter()
                .map(|(start, s)| (start, 1, s)),
        );
        found.sort_by_key(|(start, kind, _)| (*start, *kind));

        let mut seen = std::collections::HashSet::new();
        found
            .into_iter()
            .filter_map(|(_, _, surface)| {
                let key = normalize(&surface);
                (!key.is_empty() && seen.insert(key)).then_some(surface)
            })
            .collect()
    }
}

pub fn extract_candidates(summary: &str) -> Vec<String> {
    HeuristicCandidates::default().candidates(summary)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForgeStats {
    pub episodes: usize,
    pub summary_failures: usize,
    pub candidates: usize,
    pub kept: usize,
    pub dropped: BTreeMap<DropReason, usize>,
}

/// What one source episode contributed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpisodeForge {
    pub records: Vec<ForgeRecord>,
    pub qa_episodes: Vec<DialogueEpisode>,
    pub summary_error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ForgeOutput {
    pub qa_episodes: Vec<DialogueEpisode>,
    pub records: Vec<ForgeRecord>,
    pub stats: ForgeStats,
}

impl ForgeOutput {
    /// Merges per-episode results in source id order.
    pub fn from_parts(mut parts: Vec<(String, EpisodeForge)>) -> Self {
        parts.sort_by(|a, b| a.0.cmp(&b.0));
        let mut out = ForgeOutput::default();
        out.stats.episodes = parts.len();
        for (_, part) in parts {
            if part.summary_error.is_some() {
                out.stats.summary_failures += 1;
            }
            for r in &part.records {
                out.stats.candidates += 1;
                match r.drop_reason {
                    None => out.stats.kept += 1,
                    Some(reason) => *out.stats.dropped.entry(reason).or_insert(0) += 1,
                }
            }
            out.records.extend(part.records);
            out.qa_episodes.extend(part.qa_episodes);
        }
        out
    }
}

/// Source turns up to a seeded cut point (at least one turn) followed by the
/// question, asked by the speaker who would have spoken next.
fn qa_episode(
    source: &DialogueEpisode,
    index: usize,
    question: &str,
    answer: &str,
    seed: u64,
) -> DialogueEpisode {
    let key = format!("{}#{index}", source.example_id);
    let cut = example_rng(seed, &key).random_range(1..=source.turns.len());
    let turns = &source.turns[..cut];
    let asker = match source.turns.get(cut) {
        Some(next) => next.speaker.clone(),
        None => turns
            .iter()
            .rev()
            .map(|t| &t.speaker)
            .find(|s| **s != turns[cut - 1].speaker)
            .unwrap_or(&turns[cut - 1].speaker)
            .clone(),
    };
    let mut out_turns = turns.to_vec();
    out_turns.push(Turn::new(asker, question));
    DialogueEpisode {
        example_id: format!("{}-q{index}", source.example_id),
        topic: source.topic.clone(),
        personas: source.personas.clone(),
        turns: out_turns,
        gold_knowledge: None,
        gold_response: None,
        gold_answers: Some(vec![answer.to_owned()]),
    }
}

pub fn forge_episode(
    episode: &DialogueEpisode,
    backends: &ForgeBackends,
    extractor: &dyn CandidateExtractor,
    tokens: &SpecialTokens,
    seed: u64,
) -> EpisodeForge {
    let call_seed = derive_seed(seed, &episode.example_id);
    let summary = match summarize(episode, backends.summarizer.as_ref(), tokens, call_seed) {
        Ok(s) => s,
        Err(e) => {
            log::warn!("forge: summary failed for {}: {e}", episode.example_id);
            return EpisodeForge {
                summary_error: Some(e.to_string()),
                ..Default::default()
            };
        }
    };
    let mut out = EpisodeForge::default();
    for (index, candidate) in extractor.candidates(&summary).into_iter().enumerate() {
        let mut record = ForgeRecord {
            source_example_id: episode.example_id.clone(),
            candidate_index: index,
            summary: summary.clone(),
            candidate: candidate.clone(),
            question: String::new(),
            qa_answer: String::new(),
            kept: false,
            drop_reason: None,
        };
        if normalize(&candidate).is_empty() {
            record.drop_reason = Some(DropReason::EmptyCandidate);
            out.records.push(record);
            continue;
        }
        let verdict = generate_question(
            &summary,
            &candidate,
            backends.question_generator.as_ref(),
            call_seed,
        )
        .and_then(|q| {
            record.question = q;
            qa_filter(
                &summary,
                &record.question,
                &candidate,
                backends.qa.as_ref(),
                call_seed,
            )
        });
        match verdict {
            Ok(v) => {
                record.qa_answer = v.answer;
                record.kept = v.kept;
                if v.kept {
                    out.qa_episodes.push(qa_episode(
                        episode,
                        index,
                        &record.question,
                        &candidate,
                        seed,
                    ));
                } else {
                    record.drop_reason = Some(DropReason::QaMismatch);
                }
            }
            Err(e) => {
                log::warn!("forge: {} candidate {index}: {e}", episode.example_id);
                record.drop_reason = Some(DropReason::GenerationFailure);
            }
        }
        out.records.push(record);
    }
    out
}

pub fn forge_dataset(
    episodes: &[DialogueEpisode],
    backends: &ForgeBackends,
    extractor: &dyn CandidateExtractor,
    tokens: &SpecialTokens,
    seed: u64,
) -> ForgeOutput {
    ForgeOutput::from_parts(
        episodes
            .iter()
            .map(|e| {
                (
                    e.example_id.clone(),
                    forge_episode(e, backends, extractor, tokens, seed),
                )
            })
            .collect(),
    )
}
