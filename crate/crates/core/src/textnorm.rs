//! Text normalization shared by every metric.

use std::ops::Deref;

use serde::{Deserialize, Serialize};

/// Characters replaced by whitespace before splitting.
pub const PUNCTUATION: &[char] = &[
    '.', ',', '!', '?', ';', ':', '\'', '"', '(', ')', '[', ']', '-',
];

pub const ARTICLES: &[&str] = &["a", "an", "the"];

/// Ordered list of normalized word tokens.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(Vec<String>);

impl TokenSequence {
    /// Wraps tokens that are already normalized. No checks are applied, which
    /// lets metric tests work over synthetic vocabularies such as `a`, `b`.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self(tokens.into_iter().map(Into::into).collect())
    }

    pub fn into_inner(self) -> Vec<String> {
        self.0
    }

    pub fn joined(&self) -> String {
        self.0.join(" ")
    }

    /// True if `needle` occurs as a contiguous run of tokens.
    pub fn contains_run(&self, needle: &[String]) -> bool {
        !needle.is_empty() && self.0.windows(needle.len()).any(|w| w == needle)
    }
}

impl Deref for TokenSequence {
    type Target = [String];

    fn deref(&self) -> &[String] {
        &self.0
    }
}

pub fn is_punctuation(c: char) -> bool {
    PUNCTUATION.contains(&c)
}

/// Lowercases, replaces punctuation with spaces, drops articles and splits on
/// whitespace.
pub fn normalize(text: &str) -> TokenSequence {
    let cleaned: String = text
        .to_lowercase()
        .chars()
        .map(|c| if is_punctuation(c) { ' ' } else { c })
        .collect();
    TokenSequence(
        cleaned
            .split_whitespace()
            .filter(|w| !ARTICLES.contains(w))
            .map(str::to_owned)
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_input() {
        assert!(normalize("").is_empty());
    }

    #[test]
    fn strips_articles_and_punctuation() {
        assert_eq!(&*normalize("The cat, the HAT!"), &["cat", "hat"]);
    }

    #[test]
    fn dallas_sentence() {
        let toks = normalize("The last time the Dallas Cowboys won a playoff game was in 2014.");
        assert_eq!(
            &*toks,
            &["last", "time", "dallas", "cowboys", "won", "playoff", "game", "was", "in", "2014"]
        );
    }

    #[test]
    fn apostrophes_and_hyphens_split_words() {
        assert_eq!(&*normalize("it's sled-dogs"), &["it", "s", "sled", "dogs"]);
    }

    proptest! {
        #[test]
        fn idempotent(s in "\\PC{0,60}") {
            let once = normalize(&s);
            let twice = normalize(&once.joined());
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn tokens_are_clean(s in "[a-zA-Z .,!?;:'\"()\\[\\]-]{0,60}") {
            for t in normalize(&s).iter() {
                prop_assert!(!t.is_empty());
                prop_assert!(!t.chars().any(is_punctuation));
                prop_assert_eq!(t.to_lowercase(), t.clone());
                prop_assert!(!ARTICLES.contains(&t.as_str()));
            }
        }
    }
}
