//! Strategic-gram mining.
//!
//! The pipeline runs in three stages over a corpus of successful solutions:
//! n-gram extraction with document frequencies ([`extract_ngrams`]),
//! embedding and greedy leader clustering ([`embed_grams`],
//! [`cluster_grams`]), then scoring clusters by the number of solutions that
//! contain any member and keeping the top quantile ([`score_and_select`]).

mod cluster;
mod embed;
mod lexicon;
mod ngrams;
mod select;

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use cluster::{cluster_grams, cosine};
pub use embed::{
    embed_grams, EmbeddingProvider, HashingEmbedder, HttpEmbedder, HttpEmbedderConfig,
    PrecomputedEmbeddings, ProviderKind, FALLBACK_DIMENSION, FALLBACK_SEED,
};
pub use lexicon::{load_default_lexicon, DEFAULT_LEXICON};
pub use ngrams::{extract_ngrams, successful, GramCounts, NgramTable};
pub use select::score_and_select;

use crate::error::{Error, Result};
use crate::text::{self, NORMALIZATION_VERSION};
use crate::trace::Trajectory;

/// Longest gram accepted. Mining stops at five words; the shipped lexicon
/// has a few six-word entries.
pub const MAX_GRAM_WORDS: usize = 6;
pub const MAX_MINED_N: usize = 5;
pub const DEFAULT_TAU: f64 = 0.8;
pub const DEFAULT_QUANTILE: f64 = 0.20;

/// A normalised word n-gram. Ordered by surface.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Gram {
    pub surface: String,
    pub words: Vec<String>,
}

impl Gram {
    pub fn parse(s: &str) -> Result<Self> {
        let words = text::words(s);
        Self::from_words(words)
    }

    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if words.is_empty() || words.len() > MAX_GRAM_WORDS {
            return Err(Error::Miner(format!(
                "gram must have 1-{MAX_GRAM_WORDS} words, got {}",
                words.len()
            )));
        }
        Ok(Gram {
            surface: words.join(" "),
            words,
        })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgCluster {
    pub id: u32,
    /// Members sorted by surface, no duplicates.
    pub members: Vec<Gram>,
    /// Number of solutions containing at least one member; `None` when the
    /// cluster was not scored against a corpus.
    pub cluster_df: Option<u64>,
    pub df_fraction: Option<f64>,
}

/// The selected strategic grams.
#[derive(Debug, Clone, PartialEq)]
pub struct SgSet {
    pub clusters: Vec<SgCluster>,
    /// Union of all members, sorted by surface.
    pub grams: Vec<Gram>,
    pub selection_quantile: f64,
    pub normalization_version: String,
}

impl SgSet {
    pub fn from_clusters(mut clusters: Vec<SgCluster>, selection_quantile: f64) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for c in &mut clusters {
            if c.members.is_empty() {
                return Err(Error::Miner(format!("cluster {} has no members", c.id)));
            }
            c.members.sort();
            c.members.dedup();
            for g in &c.members {
                if !seen.insert(g.clone()) {
                    return Err(Error::Miner(format!(
                        "gram '{}' appears in more than one cluster",
                        g.surface
                    )));
                }
            }
        }
        Ok(SgSet {
            clusters,
            grams: seen.into_iter().collect(),
            selection_quantile,
            normalization_version: NORMALIZATION_VERSION.to_owned(),
        })
    }

    pub fn contains(&self, surface: &str) -> bool {
        self.grams
            .binary_search_by(|g| g.surface.as_str().cmp(surface))
            .is_ok()
    }

    /// Surface → cluster id.
    pub fn cluster_index(&self) -> HashMap<&str, u32> {
        self.clusters
            .iter()
            .flat_map(|c| c.members.iter().map(move |g| (g.surface.as_str(), c.id)))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.grams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grams.is_empty()
    }

    pub fn to_json(&self) -> String {
        let doc = SgSetFile {
            version: SGSET_FILE_VERSION,
            normalization_version: self.normalization_version.clone(),
            selection_quantile: self.selection_quantile,
            clusters: self
                .clusters
                .iter()
                .map(|c| ClusterEntry {
                    id: c.id,
                    cluster_df: c.cluster_df,
                    df_fraction: c.df_fraction,
                    members: c.members.iter().map(|g| g.surface.clone()).collect(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("sg set serialises")
    }

    /// Parses an SG set document. The stored normalisation version is kept as
    /// is; the classifier refuses to match with a foreign one.
    pub fn from_json(s: &str) -> Result<Self> {
        let doc: SgSetFile =
            serde_json::from_str(s).map_err(|e| Error::json("sg-miner: sg set file", e))?;
        if doc.version != SGSET_FILE_VERSION {
            return Err(Error::Miner(format!(
                "unsupported sg set file version {}",
                doc.version
            )));
        }
        let clusters = doc
            .clusters
            .into_iter()
            .map(|c| {
                Ok(SgCluster {
                    id: c.id,
                    members: c
                        .members
                        .iter()
                        .map(|m| Gram::parse(m))
                        .collect::<Result<_>>()?,
                    cluster_df: c.cluster_df,
                    df_fraction: c.df_fraction,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut set = SgSet::from_clusters(clusters, doc.selection_quantile)?;
        set.normalization_version = doc.normalization_version;
        Ok(set)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

const SGSET_FILE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct SgSetFile {
    version: u32,
    normalization_version: String,
    selection_quantile: f64,
    clusters: Vec<ClusterEntry>,
}

#[derive(Serialize, Deserialize)]
struct ClusterEntry {
    id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cluster_df: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    df_fraction: Option<f64>,
    members: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct MinerConfig {
    pub n_min: usize,
    pub n_max: usize,
    pub tau: f64,
    pub quantile: f64,
    /// Grams seen in fewer solutions are not embedded. 1 keeps everything.
    pub min_document_frequency: u64,
}

impl Default for MinerConfig {
    fn default() -> Self {
        MinerConfig {
            n_min: 3,
            n_max: MAX_MINED_N,
            tau: DEFAULT_TAU,
            quantile: DEFAULT_QUANTILE,
            min_document_frequency: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MineOutput {
    pub sgset: SgSet,
    /// Every cluster with its document frequency, before selection.
    pub scored_clusters: Vec<SgCluster>,
    pub table: NgramTable,
}

/// Runs extraction, embedding, clustering and selection over the successful
/// solutions of `corpus`.
pub fn mine(
    corpus: &[Trajectory],
    config: &MinerConfig,
    provider: &dyn EmbeddingProvider,
) -> Result<MineOutput> {
    let solutions = successful(corpus);
    let table = extract_ngrams(&solutions, config.n_min, config.n_max)?;
    let kept: Vec<(&Gram, &GramCounts)> = table
        .iter()
        .filter(|(_, c)| c.document_frequency >= config.min_document_frequency)
        .collect();
    if kept.is_empty() {
        return Err(Error::Miner("no n-grams left to cluster".into()));
    }
    let grams: Vec<Gram> = kept.iter().map(|(g, _)| (*g).clone()).collect();
    let counts: Vec<u64> = kept.iter().map(|(_, c)| c.total_count).collect();
    let vectors = embed_grams(&grams, provider)?;
    let clusters = cluster_grams(&grams, &counts, &vectors, config.tau)?;
    let sgset = score_and_select(&clusters, &solutions, config.quantile)?;
    let scored_clusters = select::score_clusters(&clusters, &solutions);
    Ok(MineOutput {
        sgset,
        scored_clusters,
        table,
    })
}
