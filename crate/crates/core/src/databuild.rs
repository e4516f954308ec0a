//! Training files for external trainers: supervised knowledge/response pairs,
//! unsupervised noun-phrase targets and confidence-corrupted examples.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chunker::{HeuristicChunker, PhraseExtractor};
use crate::episode::DialogueEpisode;
use crate::pipeline::{
    serialize_context, serialize_response_input, PipelineError, SpecialTokens, MAX_CONFIDENCE,
};
use crate::seed::example_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Knowledge,
    Response,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub input: String,
    pub target: String,
    pub task: Task,
    pub confidence_token: Option<u8>,
    pub corrupted: bool,
}

impl TrainingExample {
    fn knowledge(input: String, target: String) -> Self {
        Self {
            input,
            target,
            task: Task::Knowledge,
            confidence_token: None,
            corrupted: false,
        }
    }

    fn response(input: String, target: String) -> Self {
        Self {
            input,
            target,
            task: Task::Response,
            confidence_token: None,
            corrupted: false,
        }
    }
}

#[derive(Debug, Error)]
pub enum BuildError {
    #[error("missing gold knowledge")]
    MissingGoldKnowledge,
    #[error("missing gold response")]
    MissingGoldResponse,
    #[error("no phrases in response")]
    NoPhrases,
    #[error("wrong-knowledge pool is empty")]
    EmptyWrongPool,
    #[error("wrong-knowledge pool contains the gold knowledge")]
    PoolContainsGold,
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

impl BuildError {
    /// Stable key used when counting skipped episodes.
    pub fn reason(&self) -> &'static str {
        match self {
            BuildError::MissingGoldKnowledge => "missing-gold-knowledge",
            BuildError::MissingGoldResponse => "missing-gold-response",
            BuildError::NoPhrases => "no-phrases",
            BuildError::EmptyWrongPool => "empty-wrong-pool",
            BuildError::PoolContainsGold => "pool-contains-gold",
            BuildError::Pipeline(_) => "invalid-episode",
        }
    }
}

fn gold_fields(episode: &DialogueEpisode) -> Result<(&str, &str), BuildError> {
    let knowledge = episode
        .gold_knowledge
        .as_deref()
        .ok_or(BuildError::MissingGoldKnowledge)?;
    let response = episode
        .gold_response
        .as_deref()
        .ok_or(BuildError::MissingGoldResponse)?;
    Ok((knowledge, response))
}

/// (context → gold knowledge, context + gold knowledge → gold response).
pub fn make_supervised_pair(
    episode: &DialogueEpisode,
    tokens: &SpecialTokens,
) -> Result<(TrainingExample, TrainingExample), BuildError> {
    let (knowledge, response) = gold_fields(episode)?;
    let context = serialize_context(episode, tokens)?;
    let response_input = serialize_response_input(episode, knowledge, tokens, None)?;
    Ok((
        TrainingExample::knowledge(context, knowledge.to_owned()),
        TrainingExample::response(response_input, response.to_owned()),
    ))
}

/// Picks one phrase of the gold response (uniformly, seeded by run seed and
/// example id) and uses it as the knowledge target.
pub fn make_unsupervised_pair(
    episode: &DialogueEpisode,
    tokens: &SpecialTokens,
    extractor: &dyn PhraseExtractor,
    seed: u64,
) -> Result<(TrainingExample, TrainingExample), BuildError> {
    let response = episode
        .gold_response
        .as_deref()
        .ok_or(BuildError::MissingGoldResponse)?;
    let spans = extractor.extract(response);
    let mut rng = example_rng(seed, &episode.example_id);
    let span = spans.choose(&mut rng).ok_or(BuildError::NoPhrases)?;
    let context = serialize_context(episode, tokens)?;
    let response_input = serialize_response_input(episode, &span.surface, tokens, None)?;
    Ok((
        TrainingExample::knowledge(context, span.surface.clone()),
        TrainingExample::response(response_input, response.to_owned()),
    ))
}

/// `round(10 p)` with halves rounded up.
pub fn confidence_level(p: f64) -> u8 {
    ((10.0 * p + 0.5).floor() as i64).clamp(0, MAX_CONFIDENCE as i64) as u8
}

/// Response example whose knowledge is replaced by a random pool entry with
/// probability `1 - p`; the input carries the `round(10 p)` confidence token.
pub fn corrupt_at<R: Rng + ?Sized>(
    episode: &DialogueEpisode,
    wrong_pool: &[String],
    tokens: &SpecialTokens,
    p: f64,
    rng: &mut R,
) -> Result<TrainingExample, BuildError> {
    let (gold, response) = gold_fields(episode)?;
    if wrong_pool.is_empty() {
        return Err(BuildError::EmptyWrongPool);
    }
    if wrong_pool.iter().any(|w| w == gold) {
        return Err(BuildError::PoolContainsGold);
    }
    let level = confidence_level(p);
    let corrupted = rng.random::<f64>() < 1.0 - p;
    let knowledge = if corrupted {
        wrong_pool.choose(rng).expect("non-empty pool")
    } else {
        gold
    };
    let input = serialize_response_input(episode, knowledge, tokens, Some(level))?;
    Ok(TrainingExample {
        input,
        target: response.to_owned(),
        task: Task::Response,
        confidence_token: Some(level),
        corrupted,
    })
}

/// Draws `p ~ U(0,1)` from the example's seeded stream, then corrupts.
pub fn corrupt_with_confidence(
    episode: &DialogueEpisode,
    wrong_pool: &[String],
    tokens: &SpecialTokens,
    seed: u64,
) -> Result<TrainingExample, BuildError> {
    let mut rng = example_rng(seed, &episode.example_id);
    let p: f64 = rng.random();
    corrupt_at(episode, wrong_pool, tokens, p, &mut rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BuildMode {
    /// Gold knowledge pairs.
    Supervised,
    /// Noun-phrase knowledge targets taken from the gold response.
    Unsupervised,
    /// Gold knowledge example plus a confidence-conditioned, possibly
    /// corrupted response example.
    Confidence,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildStats {
    pub episodes: usize,
    pub examples: usize,
    pub corrupted: usize,
    pub skipped: BTreeMap<String, usize>,
}

/// Builds examples for every episode, ordered by example id.
pub fn build_training_set(
    episodes: &[DialogueEpisode],
    mode: BuildMode,
    tokens: &SpecialTokens,
    seed: u64,
) -> (Vec<TrainingExample>, BuildStats) {
    let mut ordered: Vec<&DialogueEpisode> = episodes.iter().collect();
    ordered.sort_by(|a, b| a.example_id.cmp(&b.example_id));
    let all_knowledge: BTreeSet<&str> = episodes
        .iter()
        .filter_map(|e| e.gold_knowledge.as_deref())
        .collect();
    let chunker = HeuristicChunker::default();

    let mut stats = BuildStats {
        episodes: episodes.len(),
        ..Default::default()
    };
    let mut out = Vec::new();
    for episode in ordered {
        let built = match mode {
            BuildMode::Supervised => make_supervised_pair(episode, tokens).map(|(k, r)| vec![k, r]),
            BuildMode::Unsupervised => {
                make_unsupervised_pair(episode, tokens, &chunker, seed).map(|(k, r)| vec![k, r])
            }
            BuildMode::Confidence => make_supervised_pair(episode, tokens).and_then(|(k, _)| {
                let gold = episode.gold_knowledge.as_deref().unwrap_or_default();
                let pool: Vec<String> = all_knowledge
                    .iter()
                    .filter(|w| **w != gold)
                    .map(|w| (*w).to_owned())
                    .collect();
                Ok(vec![
                    k,
                    corrupt_with_confidence(episode, &pool, tokens, seed)?,
                ])
            }),
        };
        match built {
            Ok(examples) => {
                stats.corrupted += examples.iter().filter(|e| e.corrupted).count();
                out.extend(examples);
            }
            Err(e) => *stats.skipped.entry(e.reason().to_owned()).or_insert(0) += 1,
        }
    }
    stats.examples = out.len();
    (out, stats)
}

pub fn write_jsonl<W: Write, T: Serialize>(mut writer: W, items: &[T]) -> std::io::Result<()> {
    for item in items {
        serde_json::to_writer(&mut writer, item)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episode::Turn;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const SLED: &str = "Sled dogs were important for transportation in arctic areas, hauling supplies in areas that were inaccessible by other methods.";

    fn husky() -> DialogueEpisode {
        DialogueEpisode::new(
            "husky",
            vec![
                Turn::new("apprentice", "I just got a husky puppy"),
                Turn::new("wizard", "It sounds cute! Huskies are known amongst sled-dogs for their fast pulling style."),
                Turn::new("apprentice", "I guess in the north they are working dogs huh?"),
            ],
        )
        .with_topic("Husky")
        .with_gold_knowledge(SLED)
        .with_gold_response("Sled dogs, including Huskies, are used for transportation in arctic areas.")
    }

    fn tokens() -> SpecialTokens {
        SpecialTokens::default()
    }

    #[test]
    fn supervised_pair_from_husky_episode() {
        let (k, r) = make_supervised_pair(&husky(), &tokens()).unwrap();
        assert_eq!(k.task, Task::Knowledge);
        assert!(k
            .target
            .starts_with("Sled dogs were important for transportation"));
        assert!(!k.input.contains("__knowledge__"));
        assert!(r.input.ends_with("__endknowledge__"));
        assert_eq!(tokens().extract_span(&r.input), Some(SLED));
        assert_eq!(tokens().count_spans(&r.input), 1);
    }

    #[test]
    fn supervised_pair_missing_knowledge() {
        let mut ep = husky();
        ep.gold_knowledge = None;
        let err = make_supervised_pair(&ep, &tokens()).unwrap_err();
        assert_eq!(err.reason(), "missing-gold-knowledge");
        let (_, stats) = build_training_set(&[ep], BuildMode::Supervised, &tokens(), 0);
        assert_eq!(stats.skipped["missing-gold-knowledge"], 1);
    }

    #[test]
    fn unsupervised_is_deterministic_and_single_span_forced() {
        let chunker = HeuristicChunker::default();
        let ep = husky();
        let a = make_unsupervised_pair(&ep, &tokens(), &chunker, 9).unwrap();
        let b = make_unsupervised_pair(&ep, &tokens(), &chunker, 9).unwrap();
        assert_eq!(a, b);

        let single = DialogueEpisode::new("s", vec![Turn::new("u", "when?")])
            .with_gold_response("It was 2014.");
        let (k, r) = make_unsupervised_pair(&single, &tokens(), &chunker, 3).unwrap();
        assert_eq!(k.target, "2014");
        assert_eq!(tokens().extract_span(&r.input), Some("2014"));

        let none =
            DialogueEpisode::new("n", vec![Turn::new("u", "x")]).with_gold_response("and of the");
        assert_eq!(
            make_unsupervised_pair(&none, &tokens(), &chunker, 3)
                .unwrap_err()
                .reason(),
            "no-phrases"
        );
    }

    #[test]
    fn unsupervised_draws_are_uniform() {
        let chunker = HeuristicChunker::default();
        // four phrases: apples, river, castle, dragon
        let ep = DialogueEpisode::new("u", vec![Turn::new("u", "x")])
            .with_gold_response("apples and the river, then a castle or a dragon");
        assert_eq!(
            chunker.extract(ep.gold_response.as_deref().unwrap()).len(),
            4
        );
        let mut freq: BTreeMap<String, usize> = BTreeMap::new();
        for seed in 0..1000u64 {
            let (k, _) = make_unsupervised_pair(&ep, &tokens(), &chunker, seed).unwrap();
            *freq.entry(k.target).or_insert(0) += 1;
        }
        assert_eq!(freq.len(), 4);
        for (span, n) in &freq {
            let f = *n as f64 / 1000.0;
            assert!((f - 0.25).abs() <= 0.05, "{span}: {f}");
        }
    }

    #[test]
    fn rounding_is_half_up() {
        assert_eq!(confidence_level(0.0), 0);
        assert_eq!(confidence_level(0.049), 0);
        assert_eq!(confidence_level(0.05), 1);
        assert_eq!(confidence_level(0.25), 3);
        assert_eq!(confidence_level(0.95), 10);
        assert_eq!(confidence_level(1.0), 10);
    }

    #[test]
    fn corruption_extremes() {
        let pool = vec!["wrong one".to_owned(), "wrong two".to_owned()];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let e = corrupt_at(&husky(), &pool, &tokens(), 1.0, &mut rng).unwrap();
            assert!(!e.corrupted);
            assert_eq!(e.confidence_token, Some(10));
            assert_eq!(tokens().extract_span(&e.input), Some(SLED));
            let e = corrupt_at(&husky(), &pool, &tokens(), 0.0, &mut rng).unwrap();
            assert!(e.corrupted);
            assert_eq!(e.confidence_token, Some(0));
            assert!(pool
                .iter()
                .any(|w| Some(w.as_str()) == tokens().extract_span(&e.input)));
            assert!(e.input.ends_with("__conf-0__"));
        }
    }

    #[test]
    fn corruption_pool_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            corrupt_at(&husky(), &[], &tokens(), 0.5, &mut rng),
            Err(BuildError::EmptyWrongPool)
        ));
        let pool = vec![SLED.to_owned()];
        assert!(matches!(
            corrupt_at(&husky(), &pool, &tokens(), 0.5, &mut rng),
            Err(BuildError::PoolContainsGold)
        ));
    }

    #[test]
    fn whole_file_is_deterministic() {
        let mut eps = Vec::new();
        for i in 0..20 {
            let mut e = husky();
            e.example_id = format!("ep{i:02}");
            e.gold_knowledge = Some(format!("fact number {i}"));
            eps.push(e);
        }
        for mode in [
            BuildMode::Supervised,
            BuildMode::Unsupervised,
            BuildMode::Confidence,
        ] {
            let render = || {
                let (ex, _) = build_training_set(&eps, mode, &tokens(), 5);
                let mut buf = Vec::new();
                write_jsonl(&mut buf, &ex).unwrap();
                buf
            };
            assert_eq!(render(), render());
        }
        let (ex, stats) = build_training_set(&eps, BuildMode::Confidence, &tokens(), 5);
        assert_eq!(stats.examples, 40);
        for pair in ex.chunks(2) {
            let (k, r) = (&pair[0], &pair[1]);
            assert_eq!((k.task, r.task), (Task::Knowledge, Task::Response));
            let span = tokens().extract_span(&r.input).unwrap();
            assert!(r.confidence_token.is_some());
            assert_eq!(r.corrupted, span != k.target);
            assert!(span.starts_with("fact number"));
        }
    }

    #[test]
    fn example_json_has_exact_fields() {
        let (k, _) = make_supervised_pair(&husky(), &tokens()).unwrap();
        let v = serde_json::to_value(&k).unwrap();
        let keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        assert_eq!(
            keys,
            ["confidence_token", "corrupted", "input", "target", "task"]
        );
        assert_eq!(v["task"], "knowledge");
    }
}
