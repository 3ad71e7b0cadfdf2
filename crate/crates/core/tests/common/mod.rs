//! Oracles and fixture generators shared by the integration tests and the
//! acceptance harness. Everything here is written independently of the
//! library's implementations.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use hicra_core::sg::{Gram, SgCluster, SgSet};
use hicra_core::trace::{TokenRecord, Trajectory};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn fixture_path(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// Splits text into tokens of one word each, keeping the preceding
/// whitespace on the token.
pub fn tokenize(text: &str) -> Vec<TokenRecord> {
    let mut tokens = Vec::new();
    let mut cur = String::new();
    let mut in_word = false;
    for c in text.chars() {
        if c.is_whitespace() && in_word {
            tokens.push(TokenRecord::new(std::mem::take(&mut cur), -0.5).with_entropy(0.7));
            in_word = false;
        }
        if !c.is_whitespace() {
            in_word = true;
        }
        cur.push(c);
    }
    if !cur.is_empty() {
        tokens.push(TokenRecord::new(cur, -0.5).with_entropy(0.7));
    }
    tokens
}

pub fn trajectory(problem: &str, step: u64, text: &str, correct: bool) -> Trajectory {
    Trajectory::from_tokens(problem, step, tokenize(text), if correct { 1.0 } else { 0.0 }, correct)
}

const PHRASES: &[&str] = &[
    "let me verify the result",
    "wait, that's not right",
    "let's try a different approach",
    "we can simplify the expression",
    "first, we need to find",
    "on the other hand",
    "let me check again",
    "Alternatively, we could",
    "so the answer is",
    "we know that",
];

const FILLER: &[&str] = &[
    "x", "=", "2", "3y", "+", "add", "the", "both", "sides", "gives", "7,", "so", "then", "we", "get",
    "Let's", "it's", "sum", "of", "roots",
];

/// A seeded corpus of short solutions mixing recurring phrases and filler.
pub fn fixture_corpus(seed: u64, n: usize) -> Vec<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let mut parts = Vec::new();
            for _ in 0..rng.random_range(2..6) {
                if rng.random_bool(0.5) {
                    parts.push(PHRASES.choose(&mut rng).unwrap().to_string());
                }
                let k = rng.random_range(1..6);
                let f: Vec<&str> = (0..k).map(|_| *FILLER.choose(&mut rng).unwrap()).collect();
                parts.push(f.join(" "));
            }
            let sep = if rng.random_bool(0.2) { "  \n" } else { " " };
            trajectory(&format!("p{}", i % 7), 0, &parts.join(sep), rng.random_bool(0.8))
        })
        .collect()
}

fn naive_words(text: &str) -> Vec<String> {
    text.split_whitespace().map(|w| w.to_lowercase()).collect()
}

/// `surface -> (total occurrences, number of solutions containing it)` by
/// direct enumeration.
pub fn oracle_ngrams(solutions: &[Trajectory], n_min: usize, n_max: usize) -> BTreeMap<String, (u64, u64)> {
    let mut out: BTreeMap<String, (u64, u64)> = BTreeMap::new();
    for t in solutions {
        let w = naive_words(&t.full_text);
        let mut seen = BTreeSet::new();
        for n in n_min..=n_max {
            if w.len() < n {
                continue;
            }
            for s in 0..=w.len() - n {
                let g = w[s..s + n].join(" ");
                out.entry(g.clone()).or_default().0 += 1;
                seen.insert(g);
            }
        }
        for g in seen {
            out.get_mut(&g).unwrap().1 += 1;
        }
    }
    out
}

fn contains_words(hay: &[String], needle: &[String]) -> bool {
    needle.len() <= hay.len() && (0..=hay.len() - needle.len()).any(|s| hay[s..s + needle.len()] == *needle)
}

/// Number of solutions containing at least one member of the cluster.
pub fn oracle_cluster_df(cluster: &SgCluster, solutions: &[Trajectory]) -> u64 {
    solutions
        .iter()
        .filter(|t| {
            let w = naive_words(&t.full_text);
            cluster.members.iter().any(|g| contains_words(&w, &naive_words(&g.surface)))
        })
        .count() as u64
}

/// Ids of the top `ceil(q * n)` clusters by (df desc, size desc, id asc).
pub fn oracle_select(clusters: &[SgCluster], solutions: &[Trajectory], q: f64) -> Vec<u32> {
    let mut scored: Vec<(u64, usize, u32)> = clusters
        .iter()
        .map(|c| (oracle_cluster_df(c, solutions), c.members.len(), c.id))
        .collect();
    scored.sort_by(|a, b| b.0.cmp(&a.0).then(b.1.cmp(&a.1)).then(a.2.cmp(&b.2)));
    let keep = (q * clusters.len() as f64).ceil() as usize;
    let mut ids: Vec<u32> = scored.into_iter().take(keep.max(1)).map(|s| s.2).collect();
    ids.sort_unstable();
    ids
}

fn word_char(chars: &[char], i: usize) -> bool {
    let c = chars[i];
    c.is_alphanumeric()
        || ((c == '\'' || c == '\u{2019}')
            && i > 0
            && i + 1 < chars.len()
            && chars[i - 1].is_alphanumeric()
            && chars[i + 1].is_alphanumeric())
}

fn boundary(chars: &[char], i: usize) -> bool {
    i == 0 || i >= chars.len() || !(word_char(chars, i - 1) && word_char(chars, i))
}

/// Reference matcher over normalized text: a table of the longest gram
/// starting at each boundary position, then a left-to-right walk taking
/// table entries. Returns `(start, end, surface)` in normalized char indices.
pub fn oracle_match(normalized: &str, grams: &[String]) -> Vec<(usize, usize, String)> {
    let chars: Vec<char> = normalized.chars().collect();
    let n = chars.len();
    let mut longest: Vec<Option<(usize, String)>> = vec![None; n];
    for (i, slot) in longest.iter_mut().enumerate() {
        if !boundary(&chars, i) {
            continue;
        }
        for g in grams {
            let gc: Vec<char> = g.chars().collect();
            let end = i + gc.len();
            if end <= n && chars[i..end] == gc[..] && boundary(&chars, end) {
                let better = match slot {
                    None => true,
                    Some((len, _)) => gc.len() > *len,
                };
                if better {
                    *slot = Some((gc.len(), g.clone()));
                }
            }
        }
    }
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        if let Some((len, g)) = &longest[i] {
            out.push((i, i + len, g.clone()));
            i += len;
        } else {
            i += 1;
        }
    }
    out
}

/// Naive normalization used by the oracle: lowercase, collapse whitespace.
pub fn oracle_normalize(s: &str) -> String {
    s.split_whitespace().map(|w| w.to_lowercase()).collect::<Vec<_>>().join(" ")
}

const SMALL_WORDS: &[&str] = &[
    "let", "me", "Let's", "lets", "try", "wait,", "wait", "check", "a", "b", "ab", "it's", "so", "x=1", "(a)", "verify", "it’s", "Été", "d’accord",
];

/// A random small matching case: text of at most 200 characters and at most
/// 10 grams.
pub fn random_match_case(rng: &mut ChaCha8Rng) -> (String, Vec<String>) {
    let mut text = String::new();
    while text.chars().count() < 180 {
        let w = SMALL_WORDS.choose(rng).unwrap();
        let sep = *[" ", " ", " ", "  ", "\n", "", ","].choose(rng).unwrap();
        if !text.is_empty() {
            text.push_str(sep);
        }
        text.push_str(w);
        if rng.random_bool(0.08) {
            break;
        }
    }
    let text: String = text.chars().take(200).collect();
    let k = rng.random_range(1..=10);
    let mut grams = BTreeSet::new();
    while grams.len() < k {
        let len = rng.random_range(1..=3);
        let g: Vec<String> = (0..len).map(|_| SMALL_WORDS.choose(rng).unwrap().to_lowercase()).collect();
        grams.insert(g.join(" "));
    }
    (text, grams.into_iter().collect())
}

pub fn singleton_set(grams: &[String]) -> SgSet {
    let clusters = grams
        .iter()
        .enumerate()
        .map(|(i, g)| SgCluster {
            id: i as u32,
            members: vec![Gram::parse(g).unwrap()],
            cluster_df: None,
            df_fraction: None,
        })
        .collect();
    SgSet::from_clusters(clusters, 0.2).unwrap()
}

pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i as u128 + 1))
}

/// Fraction of k-subsets of `g` samples (c correct) containing a correct one,
/// by enumerating every subset as a bitmask.
pub fn pass_at_k_enumerated(g: usize, c: usize, k: usize) -> f64 {
    let mut hit = 0u64;
    let mut total = 0u64;
    for mask in 0u32..(1 << g) {
        if mask.count_ones() as usize != k {
            continue;
        }
        total += 1;
        if (0..c).any(|i| mask & (1 << i) != 0) {
            hit += 1;
        }
    }
    hit as f64 / total as f64
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// 500 traces over 25 steps. At step `s` each trace uses strategic phrases
/// drawn from the first `m(s)` entries of `phrases`, with `m` growing over
/// training, so phrase diversity rises with the step.
pub fn synthetic_trace_corpus(seed: u64, phrases: &[&str]) -> Vec<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = 25u64;
    let per_step = 20;
    let mut out = Vec::with_capacity(500);
    for s in 0..steps {
        let m = 2 + (s as usize * (phrases.len() - 2)) / (steps as usize - 1);
        for i in 0..per_step {
            let mut parts = Vec::new();
            for _ in 0..rng.random_range(3..7) {
                // Skewed towards the earliest phrases.
                let j = ((rng.random::<f64>().powf(1.5)) * m as f64) as usize;
                parts.push(phrases[j.min(m - 1)].to_string());
                let k = rng.random_range(2..5);
                let f: Vec<&str> = (0..k).map(|_| *["x", "=", "4", "+", "y", "1;"].choose(&mut rng).unwrap()).collect();
                parts.push(f.join(" "));
            }
            out.push(trajectory(&format!("q{i}"), s, &parts.join(" "), rng.random_bool(0.5)));
        }
    }
    out
}

/// Pearson correlation between the semantic-entropy series under the full
/// default lexicon and under a copy with `rho` of its grams dropped, one
/// value per drop seed.
pub fn sensitivity_correlations(rho: f64, seeds: &[u64]) -> Vec<f64> {
    use hicra_core::metrics::{label_and_window, semantic_entropy_series, sensitivity_drop, GramKey};
    use hicra_core::sg::{load_default_lexicon, DEFAULT_LEXICON};

    let phrases: Vec<&str> = DEFAULT_LEXICON.iter().step_by(6).copied().collect();
    let corpus = synthetic_trace_corpus(2024, &phrases);
    assert_eq!(corpus.len(), 500);
    let full = load_default_lexicon();
    let series = |set: &SgSet| -> Vec<f64> {
        let windows = label_and_window(corpus.clone(), set).unwrap();
        semantic_entropy_series(&windows, set, GramKey::Gram).unwrap().values().into_iter().map(|v| v.unwrap_or(0.0)).collect()
    };
    let base = series(&full);
    seeds
        .iter()
        .map(|&seed| pearson(&base, &series(&sensitivity_drop(&full, rho, seed).unwrap())))
        .collect()
}
