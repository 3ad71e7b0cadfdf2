//! Workload builders shared by the benchmarks.

use hicra_core::sg::DEFAULT_LEXICON;
use hicra_core::{TokenRecord, Trajectory};

const FILLER: &[&str] = &[
    "x", "=", "2", "3y", "+", "add", "the", "both", "sides", "gives", "7,", "so", "then", "we", "get", "sum", "of",
    "roots", "it's", "hence",
];

/// Splits on whitespace, keeping the leading space with each word.
pub fn word_tokens(text: &str) -> Vec<TokenRecord> {
    let mut tokens = Vec::new();
    let mut cur = String::new();
    for (i, w) in text.split(' ').enumerate() {
        if i > 0 {
            cur.push(' ');
        }
        cur.push_str(w);
        tokens.push(TokenRecord::new(std::mem::take(&mut cur), -0.4).with_entropy(0.6));
    }
    tokens
}

/// A solution of roughly `words` words; every eighth slot is a lexicon phrase.
pub fn solution_text(index: usize, words: usize) -> String {
    let mut parts = Vec::with_capacity(words);
    let mut k = index.wrapping_mul(2_654_435_761);
    for slot in 0..words {
        k = k.wrapping_mul(6_364_136_223_846_793_005).wrapping_add(1_442_695_040_888_963_407);
        if slot % 8 == 0 {
            parts.push(DEFAULT_LEXICON[(k >> 33) as usize % DEFAULT_LEXICON.len()]);
        } else {
            parts.push(FILLER[(k >> 33) as usize % FILLER.len()]);
        }
    }
    parts.join(" ")
}

/// `n` correct trajectories of about `words` words each.
pub fn corpus(n: usize, words: usize) -> Vec<Trajectory> {
    (0..n)
        .map(|i| {
            let tokens = word_tokens(&solution_text(i, words));
            Trajectory::from_tokens(format!("p{}", i % 16), 0, tokens, 1.0, true)
        })
        .collect()
}
