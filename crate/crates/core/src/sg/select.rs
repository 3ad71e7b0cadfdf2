use std::collections::{HashMap, HashSet};

use rayon::prelude::*;

use super::ngrams::gram_surfaces;
use super::{SgCluster, SgSet};
use crate::error::{Error, Result};
use crate::trace::Trajectory;

/// Fills in `cluster_df` and `df_fraction` for every cluster.
pub(crate) fn score_clusters(clusters: &[SgCluster], corpus: &[Trajectory]) -> Vec<SgCluster> {
    let mut owner: HashMap<&str, usize> = HashMap::new();
    let mut lengths = HashSet::new();
    for (ci, c) in clusters.iter().enumerate() {
        for g in &c.members {
            owner.insert(g.surface.as_str(), ci);
            lengths.insert(g.len());
        }
    }

    let df = corpus
        .par_iter()
        .map(|t| {
            let hit: HashSet<usize> = gram_surfaces(&t.full_text, &lengths)
                .iter()
                .filter_map(|s| owner.get(s.as_str()).copied())
                .collect();
            let mut v = vec![0u64; clusters.len()];
            for ci in hit {
                v[ci] = 1;
            }
            v
        })
        .reduce(
            || vec![0u64; clusters.len()],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                a
            },
        );

    let n = corpus.len() as f64;
    clusters
        .iter()
        .zip(df)
        .map(|(c, df)| SgCluster {
            cluster_df: Some(df),
            df_fraction: Some(if n > 0.0 { df as f64 / n } else { 0.0 }),
            ..c.clone()
        })
        .collect()
}

/// Scores clusters by document frequency and keeps the top
/// `ceil(quantile * clusters)`, ordered by df descending, then member count
/// descending, then id.
pub fn score_and_select(
    clusters: &[SgCluster],
    corpus: &[Trajectory],
    quantile: f64,
) -> Result<SgSet> {
    if clusters.is_empty() {
        return Err(Error::Miner("empty cluster list".into()));
    }
    if !(quantile > 0.0 && quantile <= 1.0) {
        return Err(Error::Miner(format!(
            "quantile must be in (0, 1], got {quantile}"
        )));
    }
    let mut scored = score_clusters(clusters, corpus);
    scored.sort_by(|a, b| {
        b.cluster_df
            .cmp(&a.cluster_df)
            .then_with(|| b.members.len().cmp(&a.members.len()))
            .then_with(|| a.id.cmp(&b.id))
    });
    let keep = ((quantile * scored.len() as f64).ceil() as usize).clamp(1, scored.len());
    scored.truncate(keep);
    SgSet::from_clusters(scored, quantile)
}
