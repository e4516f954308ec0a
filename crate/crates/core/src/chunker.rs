//! Stopword / closed-verb-list phrase chunker.
//!
//! Candidate phrases are maximal runs of tokens that are neither stopwords
//! nor common verbs and are not separated by clause punctuation. Runs longer
//! than `max_phrase_len` keep their trailing tokens, where English noun
//! phrases put the head noun.

use std::collections::HashSet;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::textnorm::{is_punctuation, ARTICLES};

pub const DEFAULT_MAX_PHRASE_LEN: usize = 4;

const STOPWORDS: &str = "i me my myself we our ours ourselves you your yours yourself yourselves \
he him his himself she her hers herself it its itself they them their theirs themselves what which \
who whom this that these those am is are was were be been being have has had having do does did \
doing a an the and but if or because as until while of at by for with about against between into \
through during before after above below to from up down in out on off over under again further then \
once here there when where why how all any both each few more most other some such no nor not only \
own same so than too very s t can will just don should now d ll m o re ve y ain aren couldn didn \
doesn hadn hasn haven isn ma mightn mustn needn shan shouldn wasn weren won wouldn \
yes yeah yep oh ok okay well really also would could may might must shall us im ive id youre \
thats dont cant wont lot lots much many one ones something anything nothing everything someone \
anyone everyone thing things way hi hello hey please thanks thank sure maybe even still though \
let lets among amongst within without upon across toward towards";

const VERBS: &str = "love loves loved loving like likes liked want wants wanted know knows knew \
known think thinks thought get gets got getting go goes went gone going see sees saw seen make makes \
made take takes took taken come comes came say says said tell tells told give gives gave given find \
finds found feel feels felt look looks looked need needs needed use uses used try tries tried hope \
hopes hoped wish wishes wished live lives lived work works worked seem seems seemed keep keeps kept \
put puts run runs ran sit sits sat stand stands stood hear hears heard walk walks walked eat eats ate \
play plays played enjoy enjoys enjoyed admire admires admired guess guesses guessed mean means meant \
believe believes believed call calls called become becomes became bring brings brought buy buys \
bought show shows showed help helps helped leave leaves left win wins lost lose loses grow grows grew \
sounds sound sounded";

fn word_set(list: &'static str) -> HashSet<&'static str> {
    list.split_whitespace().collect()
}

pub fn is_stopword(word: &str) -> bool {
    static SET: OnceLock<HashSet<&'static str>> = OnceLock::new();
    SET.get_or_init(|| word_set(STOPWORDS)).contains(word)
}

pub fn is_common_verb(word: &str) -> bool {
    static SET: OnceLock<HashSet<&'static str>> = OnceLock::new();
    SET.get_or_init(|| word_set(VERBS)).contains(word)
}

/// A word of the raw text with its byte range.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawToken<'a> {
    pub raw: &'a str,
    pub lower: String,
    pub start: usize,
    pub end: usize,
    /// Clause punctuation (anything but `'` and `-`) sits between this token
    /// and the previous one.
    pub breaks_before: bool,
}

/// Splits on whitespace and the normalization punctuation set, matching
/// [`crate::textnorm::normalize`] token for token (articles included).
pub fn tokenize(text: &str) -> Vec<RawToken<'_>> {
    fn push<'a>(out: &mut Vec<RawToken<'a>>, text: &'a str, s: usize, e: usize, brk: bool) {
        let raw = &text[s..e];
        out.push(RawToken {
            raw,
            lower: raw.to_lowercase(),
            start: s,
            end: e,
            breaks_before: brk,
        });
    }
    let mut out = Vec::new();
    let mut start = None;
    let mut pending_break = false;
    for (i, c) in text.char_indices() {
        let separator = c.is_whitespace() || is_punctuation(c);
        if separator {
            if let Some(s) = start.take() {
                push(&mut out, text, s, i, pending_break);
                pending_break = false;
            }
            if is_punctuation(c) && c != '\'' && c != '-' {
                pending_break = true;
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        push(&mut out, text, s, text.len(), pending_break);
    }
    out
}

/// A candidate phrase; `start..end` indexes the normalized token sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhraseSpan {
    pub start: usize,
    pub end: usize,
    pub surface: String,
}

impl PhraseSpan {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

/// Anything that proposes phrases for a text. External taggers can implement
/// this to replace the heuristic.
pub trait PhraseExtractor: Send + Sync {
    fn extract(&self, text: &str) -> Vec<PhraseSpan>;
}

#[derive(Debug, Clone, Copy)]
pub struct HeuristicChunker {
    pub max_phrase_len: usize,
}

impl Default for HeuristicChunker {
    fn default() -> Self {
        Self {
            max_phrase_len: DEFAULT_MAX_PHRASE_LEN,
        }
    }
}

impl HeuristicChunker {
    fn excluded(word: &str) -> bool {
        is_stopword(word) || is_common_verb(word)
    }
}

impl PhraseExtractor for HeuristicChunker {
    fn extract(&self, text: &str) -> Vec<PhraseSpan> {
        let max_len = self.max_phrase_len.max(1);
        let tokens = tokenize(text);
        let mut spans = Vec::new();
        // (normalized index, raw token) of the current run
        let mut run: Vec<(usize, &RawToken<'_>)> = Vec::new();
        let mut flush = |run: &mut Vec<(usize, &RawToken<'_>)>| {
            if run.is_empty() {
                return;
            }
            let keep = &run[run.len().saturating_sub(max_len)..];
            let (first, last) = (keep[0], keep[keep.len() - 1]);
            spans.push(PhraseSpan {
                start: first.0,
                end: last.0 + 1,
                surface: text[first.1.start..last.1.end].to_owned(),
            });
            run.clear();
        };
        let mut norm_index = 0;
        for tok in &tokens {
            if tok.breaks_before {
                flush(&mut run);
            }
            let is_article = ARTICLES.contains(&tok.lower.as_str());
            if is_article || Self::excluded(&tok.lower) {
                flush(&mut run);
            } else {
                run.push((norm_index, tok));
            }
            if !is_article {
                norm_index += 1;
            }
        }
        flush(&mut run);
        spans
    }
}

pub fn extract_phrases(text: &str) -> Vec<PhraseSpan> {
    HeuristicChunker::default().extract(text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textnorm::normalize;
    use proptest::prelude::*;

    fn surfaces(text: &str) -> Vec<String> {
        extract_phrases(text)
            .into_iter()
            .map(|s| s.surface)
            .collect()
    }

    #[test]
    fn view_and_peaceful() {
        assert_eq!(
            surfaces("I love the view, it's so peaceful here"),
            ["view", "peaceful"]
        );
    }

    #[test]
    fn all_stopwords_is_empty() {
        assert!(extract_phrases("and of the").is_empty());
        assert!(extract_phrases("").is_empty());
    }

    #[test]
    fn single_number() {
        let spans = extract_phrases("2014");
        assert_eq!(
            spans,
            vec![PhraseSpan {
                start: 0,
                end: 1,
                surface: "2014".into()
            }]
        );
    }

    #[test]
    fn hyphenated_words_stay_together() {
        assert_eq!(
            surfaces("known amongst sled-dogs for speed"),
            ["sled-dogs", "speed"]
        );
    }

    #[test]
    fn long_runs_keep_the_tail() {
        let spans = extract_phrases("big red barn door handle maker");
        assert_eq!(spans.len(), 1);
        assert_eq!(spans[0].surface, "barn door handle maker");
        assert_eq!((spans[0].start, spans[0].end), (2, 6));
    }

    #[test]
    fn farmer_sentence() {
        assert_eq!(
            surfaces("Farmer admires the view from the tall tree"),
            ["Farmer", "view", "tall tree"]
        );
    }

    proptest! {
        #[test]
        fn spans_index_normalized_tokens(words in prop::collection::vec(
            prop::sample::select(vec!["the", "dog", "red", "barn", "is", "big", ",", "it's", "sled-dog", "a", "love", "Tree"]), 0..16)) {
            let text = words.join(" ");
            let norm = normalize(&text);
            for span in extract_phrases(&text) {
                prop_assert!(!span.is_empty() && span.len() <= DEFAULT_MAX_PHRASE_LEN);
                prop_assert_eq!(&norm[span.start..span.end], &*normalize(&span.surface));
                let first = &norm[span.start];
                let last = &norm[span.end - 1];
                prop_assert!(!is_stopword(first) && !is_stopword(last));
            }
        }

        #[test]
        fn tokenize_agrees_with_normalize(s in "[a-zA-Z0-9 ,.'!-]{0,40}") {
            let from_tokens: Vec<String> = tokenize(&s)
                .into_iter()
                .map(|t| t.lower)
                .filter(|w| !ARTICLES.contains(&w.as_str()))
                .collect();
            prop_assert_eq!(from_tokens, normalize(&s).into_inner());
        }
    }
}
