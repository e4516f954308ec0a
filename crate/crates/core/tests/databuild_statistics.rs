use std::collections::BTreeMap;

use k2r_core::databuild::{corrupt_with_confidence, TrainingExample};
use k2r_core::pipeline::SpecialTokens;
use k2r_core::{DialogueEpisode, Turn};

fn corpus(n: usize) -> (Vec<DialogueEpisode>, Vec<String>) {
    let knowledge: Vec<String> = (0..50).map(|i| format!("fact {i}")).collect();
    let episodes = (0..n)
        .map(|i| {
            DialogueEpisode::new(
                format!("ex{i:05}"),
                vec![Turn::new("u", "tell me something")],
            )
            .with_gold_knowledge(knowledge[i % 50].clone())
            .with_gold_response("here is something")
        })
        .collect();
    (episodes, knowledge)
}

fn build(seed: u64) -> Vec<(TrainingExample, String)> {
    let (episodes, knowledge) = corpus(10_000);
    let tokens = SpecialTokens::default();
    episodes
        .iter()
        .map(|ep| {
            let gold = ep.gold_knowledge.clone().unwrap();
            let pool: Vec<String> = knowledge.iter().filter(|k| **k != gold).cloned().collect();
            (
                corrupt_with_confidence(ep, &pool, &tokens, seed).unwrap(),
                gold,
            )
        })
        .collect()
}

// Each bucket holds ~1,000 draws, so the ±0.03 band is about 1.9 standard
// errors; the check uses the default run seed.
#[test]
fn corruption_rate_tracks_confidence() {
    let mut by_level: BTreeMap<u8, (usize, usize)> = BTreeMap::new();
    for (ex, _) in build(0) {
        let slot = by_level.entry(ex.confidence_token.unwrap()).or_default();
        slot.0 += 1;
        slot.1 += ex.corrupted as usize;
    }
    for k in 1..=9u8 {
        let (n, c) = by_level[&k];
        let rate = c as f64 / n as f64;
        let expected = 1.0 - k as f64 / 10.0;
        assert!(
            (rate - expected).abs() <= 0.03,
            "level {k}: {rate} vs {expected} over {n}"
        );
    }
}

#[test]
fn token_histogram_has_half_buckets_at_ends() {
    let mut hist = [0usize; 11];
    for (ex, _) in build(2) {
        hist[ex.confidence_token.unwrap() as usize] += 1;
    }
    // interior buckets hold ~1/10 of the mass, the end buckets ~1/20
    for (k, n) in hist.iter().enumerate() {
        let f = *n as f64 / 10_000.0;
        let expected = if k == 0 || k == 10 { 0.05 } else { 0.1 };
        assert!((f - expected).abs() < 0.015, "bucket {k}: {f}");
    }
}

#[test]
fn spans_parse_back() {
    let tokens = SpecialTokens::default();
    for (ex, gold) in build(3).into_iter().take(2000) {
        let span = tokens.extract_span(&ex.input).unwrap();
        if ex.corrupted {
            assert_ne!(span, gold);
            assert!(span.starts_with("fact "));
        } else {
            assert_eq!(span, gold);
        }
        assert!(ex
            .input
            .ends_with(&format!("__conf-{}__", ex.confidence_token.unwrap())));
    }
}
