use std::collections::{BTreeMap, HashMap, HashSet};

use rayon::prelude::*;

use super::{Gram, MAX_MINED_N};
use crate::error::{Error, Result};
use crate::text;
use crate::trace::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GramCounts {
    pub total_count: u64,
    /// Number of solutions containing the gram at least once.
    pub document_frequency: u64,
}

pub type NgramTable = BTreeMap<Gram, GramCounts>;

/// The correct trajectories of a corpus.
pub fn successful(corpus: &[Trajectory]) -> Vec<Trajectory> {
    corpus.iter().filter(|t| t.correct).cloned().collect()
}

/// Counts every contiguous window of `n_min..=n_max` normalised words.
pub fn extract_ngrams(corpus: &[Trajectory], n_min: usize, n_max: usize) -> Result<NgramTable> {
    if corpus.is_empty() {
        return Err(Error::Miner("empty corpus".into()));
    }
    if !(1 <= n_min && n_min <= n_max && n_max <= MAX_MINED_N) {
        return Err(Error::Miner(format!(
            "n-gram range must satisfy 1 <= n_min <= n_max <= {MAX_MINED_N}, got [{n_min}, {n_max}]"
        )));
    }

    let merged: HashMap<String, GramCounts> = corpus
        .par_iter()
        .map(|t| {
            let words = text::words(&t.full_text);
            let mut local: HashMap<String, u64> = HashMap::new();
            for n in n_min..=n_max {
                for w in words.windows(n) {
                    *local.entry(w.join(" ")).or_default() += 1;
                }
            }
            local
        })
        .fold(HashMap::new, |mut acc: HashMap<String, GramCounts>, local| {
            for (g, c) in local {
                let e = acc.entry(g).or_default();
                e.total_count += c;
                e.document_frequency += 1;
            }
            acc
        })
        .reduce(HashMap::new, |mut a, b| {
            for (g, c) in b {
                let e = a.entry(g).or_default();
                e.total_count += c.total_count;
                e.document_frequency += c.document_frequency;
            }
            a
        });

    Ok(merged
        .into_iter()
        .map(|(surface, c)| {
            let words = surface.split(' ').map(str::to_owned).collect();
            (Gram { surface, words }, c)
        })
        .collect())
}

/// Set of gram surfaces of the given lengths present in one text.
pub(crate) fn gram_surfaces(full_text: &str, lengths: &HashSet<usize>) -> HashSet<String> {
    let words = text::words(full_text);
    lengths
        .iter()
        .flat_map(|&n| words.windows(n).map(|w| w.join(" ")).collect::<Vec<_>>())
        .collect()
}
