//! Slow, obviously-correct reference computations for metric tests.
//!
//! Nothing here shares code with `k2r-core`; every function is written from
//! the metric definitions using exhaustive enumeration.

/// Bag overlap by repeated linear scans: each predicted token consumes one
/// unused matching reference token.
pub fn bag_overlap(pred: &[String], reference: &[String]) -> usize {
    let mut used = vec![false; reference.len()];
    let mut overlap = 0;
    for p in pred {
        for (i, r) in reference.iter().enumerate() {
            if !used[i] && r == p {
                used[i] = true;
                overlap += 1;
                break;
            }
        }
    }
    overlap
}

pub fn unigram_f1(pred: &[String], reference: &[String]) -> f64 {
    if pred.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let overlap = bag_overlap(pred, reference) as f64;
    if overlap == 0.0 {
        return 0.0;
    }
    let precision = overlap / pred.len() as f64;
    let recall = overlap / reference.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

fn ngrams(tokens: &[String], n: usize) -> Vec<Vec<String>> {
    if tokens.len() < n {
        return Vec::new();
    }
    (0..=tokens.len() - n)
        .map(|i| tokens[i..i + n].to_vec())
        .collect()
}

/// Modified precision for order `n` computed by enumerating every predicted
/// n-gram and counting occurrences on both sides.
pub fn clipped_matches(pred: &[String], reference: &[String], n: usize) -> (usize, usize) {
    let pred_grams = ngrams(pred, n);
    let ref_grams = ngrams(reference, n);
    let mut seen: Vec<Vec<String>> = Vec::new();
    let mut matches = 0;
    for g in &pred_grams {
        if seen.contains(g) {
            continue;
        }
        seen.push(g.clone());
        let in_pred = pred_grams.iter().filter(|x| *x == g).count();
        let in_ref = ref_grams.iter().filter(|x| *x == g).count();
        matches += in_pred.min(in_ref);
    }
    (matches, pred_grams.len())
}

pub fn bleu4(pred: &[String], reference: &[String]) -> f64 {
    const EPS: f64 = 1e-9;
    if pred.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let (m, total) = clipped_matches(pred, reference, n);
        let p = if total == 0 {
            EPS
        } else if m == 0 {
            EPS / total as f64
        } else {
            m as f64 / total as f64
        };
        log_sum += p.ln();
    }
    let bp = if pred.len() < reference.len() {
        (1.0 - reference.len() as f64 / pred.len() as f64).exp()
    } else {
        1.0
    };
    bp * (log_sum / 4.0).exp()
}

fn is_subsequence(needle: &[&String], hay: &[String]) -> bool {
    let mut it = hay.iter();
    needle.iter().all(|n| it.any(|h| h == *n))
}

/// LCS length by enumerating every subsequence of the shorter side.
/// Exponential; only for sequences of length ≤ ~16.
pub fn lcs_exhaustive(a: &[String], b: &[String]) -> usize {
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    assert!(short.len() <= 20, "exhaustive LCS oracle is exponential");
    let mut best = 0;
    for mask in 0u32..(1u32 << short.len()) {
        let k = mask.count_ones() as usize;
        if k <= best {
            continue;
        }
        let sub: Vec<&String> = (0..short.len())
            .filter(|i| mask & (1 << i) != 0)
            .map(|i| &short[i])
            .collect();
        if is_subsequence(&sub, long) {
            best = k;
        }
    }
    best
}

pub fn rouge_l(pred: &[String], reference: &[String]) -> f64 {
    const BETA: f64 = 1.2;
    if pred.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_exhaustive(pred, reference);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / pred.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    (1.0 + BETA * BETA) * p * r / (r + BETA * BETA * p)
}

/// Contiguous containment by checking every start offset.
pub fn contains_run(hay: &[String], needle: &[String]) -> bool {
    if needle.is_empty() || needle.len() > hay.len() {
        return false;
    }
    (0..=hay.len() - needle.len()).any(|s| (0..needle.len()).all(|j| hay[s + j] == needle[j]))
}

pub fn toks(words: &[&str]) -> Vec<String> {
    words.iter().map(|w| w.to_string()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lcs_small_cases() {
        assert_eq!(
            lcs_exhaustive(&toks(&["a", "c", "b"]), &toks(&["a", "b", "c"])),
            2
        );
        assert_eq!(lcs_exhaustive(&toks(&[]), &toks(&["a"])), 0);
    }

    #[test]
    fn bag_overlap_respects_multiplicity() {
        assert_eq!(
            bag_overlap(&toks(&["a", "a", "b"]), &toks(&["a", "b", "b"])),
            2
        );
    }
}
