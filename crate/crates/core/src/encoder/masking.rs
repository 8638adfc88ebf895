//! Correction-style masking: selected tokens are replaced by similar words
//! rather than a mask symbol, chosen in whole-word N-gram spans.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::vocab::{TokenSequence, Vocabulary};

/// Span lengths 1, 2, 3 words with these probabilities.
pub const SPAN_PROBS: [f64; 3] = [0.4, 0.3, 0.3];
/// Share of selected tokens left as they are.
pub const KEEP_PROB: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedTokens {
    pub tokens: Vec<usize>,
    /// Ascending positions into `tokens`; never 0 (START).
    pub positions: Vec<usize>,
    /// Original ids at `positions`.
    pub targets: Vec<usize>,
}

/// Number of positions selected out of `len` maskable tokens.
pub fn mask_count(len: usize, mask_rate: f64) -> usize {
    ((mask_rate * len as f64).ceil() as usize).clamp(1, len.max(1))
}

fn span_len(rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in SPAN_PROBS.iter().enumerate() {
        acc += p;
        if u < acc {
            return i + 1;
        }
    }
    SPAN_PROBS.len()
}

/// Selects `mask_count(len)` non-START positions in whole-word N-gram
/// spans and corrupts them.
pub fn mac_mask(
    seq: &TokenSequence,
    vocab: &Vocabulary,
    mask_rate: f64,
    seed: u64,
) -> MaskedTokens {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // word groups over positions 1..len
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for pos in 1..seq.len() {
        let same = pos > 1 && seq.words[pos].is_some() && seq.words[pos] == seq.words[pos - 1];
        match groups.last_mut() {
            Some(g) if same => g.push(pos),
            _ => groups.push(vec![pos]),
        }
    }
    let maskable = seq.len().saturating_sub(1);
    if maskable == 0 {
        return MaskedTokens {
            tokens: seq.ids.clone(),
            positions: vec![],
            targets: vec![],
        };
    }
    let count = mask_count(maskable, mask_rate);
    let mut selected = vec![false; seq.len()];
    let mut chosen = 0;
    while chosen < count {
        let n = span_len(&mut rng);
        let first = rng.gen_range(0..groups.len());
        for group in groups.iter().skip(first).take(n) {
            for &pos in group {
                if chosen < count && !selected[pos] {
                    selected[pos] = true;
                    chosen += 1;
                }
            }
        }
    }
    let positions: Vec<usize> = (1..seq.len()).filter(|&p| selected[p]).collect();
    let targets = positions.iter().map(|&p| seq.ids[p]).collect();
    let mut tokens = seq.ids.clone();
    let regular = vocab.regular_len();
    for &p in &positions {
        let original = seq.ids[p];
        if rng.gen::<f64>() < KEEP_PROB {
            continue;
        }
        let candidates = vocab.similar(original);
        tokens[p] = if !candidates.is_empty() {
            candidates[rng.gen_range(0..candidates.len())]
        } else if regular > 0 {
            4 + rng.gen_range(0..regular)
        } else {
            original
        };
    }
    MaskedTokens {
        tokens,
        positions,
        targets,
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::encoder::vocab::tokenize;

    fn vocab() -> Vocabulary {
        Vocabulary::new(["a", "b", "c", "d", "e", "f", "g", "h", "i", "j"])
    }

    #[test]
    fn count_contract() {
        let v = vocab();
        let seq = tokenize("a b c d e f g h i j", &v, 32).unwrap();
        assert_eq!(seq.len(), 11);
        let m = mac_mask(&seq, &v, 0.15, 9);
        assert_eq!(m.positions.len(), 2);
        assert_eq!(m.targets.len(), 2);
        assert!(m.positions.iter().all(|&p| p >= 1));
    }

    #[test]
    fn count_matches_ceiling_for_every_length() {
        let v = vocab();
        for len in 2..60 {
            let text = vec!["a"; len].join(" ");
            let seq = tokenize(&text, &v, 128).unwrap();
            for seed in 0..5 {
                let m = mac_mask(&seq, &v, 0.15, seed);
                assert_eq!(m.positions.len(), (0.15 * len as f64).ceil() as usize);
            }
        }
    }

    #[test]
    fn short_sequence_masks_one_position() {
        let v = vocab();
        let seq = tokenize("a", &v, 8).unwrap();
        assert_eq!(mac_mask(&seq, &v, 0.15, 1).positions, [1]);
    }

    #[test]
    fn similar_word_replacement_stays_in_candidate_set() {
        let mut v = vocab();
        let table = BTreeMap::from([("a".to_string(), vec!["b".to_string(), "c".to_string()])]);
        v.set_similar_words(&table);
        let a = v.id("a").unwrap();
        let candidates = v.similar(a).to_vec();
        let seq = tokenize("a a a a a a a a", &v, 32).unwrap();
        let mut replaced = 0;
        for seed in 0..20 {
            let m = mac_mask(&seq, &v, 0.5, seed);
            for &p in &m.positions {
                if m.tokens[p] != a {
                    assert!(candidates.contains(&m.tokens[p]));
                    replaced += 1;
                }
            }
        }
        assert!(replaced > 0);
    }

    #[test]
    fn same_seed_same_corruption() {
        let v = vocab();
        let seq = tokenize("a b c d e f g h i j a b c", &v, 32).unwrap();
        assert_eq!(mac_mask(&seq, &v, 0.3, 42), mac_mask(&seq, &v, 0.3, 42));
    }

    #[test]
    fn whole_words_are_masked_together() {
        let v = Vocabulary::from_corpus(&["降准 降息 放水 加息 缩表"]);
        let seq = tokenize("降准 降息 放水 加息 缩表", &v, 32).unwrap();
        // 10 tokens, 4 to mask: spans start on word boundaries
        for seed in 0..10 {
            let m = mac_mask(&seq, &v, 0.4, seed);
            assert_eq!(m.positions.len(), 4);
            let words: Vec<_> = m.positions.iter().map(|&p| seq.words[p]).collect();
            let mut distinct = words.clone();
            distinct.dedup();
            assert_eq!(distinct.len(), 2, "seed {seed}: {words:?}");
        }
    }
}
