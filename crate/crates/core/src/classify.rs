//! Planning/execution token labelling.
//!
//! Strategic grams are matched on the normalised text, greedily and
//! left-to-right, preferring the longest gram at each position and never
//! overlapping. Matches must sit on word boundaries. Spans are then mapped
//! back to the original text and every token that overlaps a match by at
//! least one character is a planning token.

use std::collections::HashMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::sg::SgSet;
use crate::text::{NormalizedText, NORMALIZATION_VERSION};
use crate::trace::Trajectory;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SgMatch {
    pub surface: String,
    pub cluster_id: u32,
    /// Half-open character span in the original text.
    pub start: usize,
    pub end: usize,
    /// Half-open character span in the normalised text.
    #[serde(skip)]
    pub norm_start: usize,
    #[serde(skip)]
    pub norm_end: usize,
}

/// One label per token; `true` marks a planning token.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenClassMask {
    pub labels: Vec<bool>,
}

impl TokenClassMask {
    pub fn all_execution(len: usize) -> Self {
        TokenClassMask {
            labels: vec![false; len],
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn planning_count(&self) -> usize {
        self.labels.iter().filter(|&&b| b).count()
    }

    pub fn execution_count(&self) -> usize {
        self.len() - self.planning_count()
    }

    pub fn is_planning(&self, i: usize) -> bool {
        self.labels[i]
    }
}

struct Candidate {
    chars: Vec<char>,
    surface: String,
    cluster_id: u32,
}

/// Prepared matcher for one SG set.
pub struct SgMatcher {
    by_first_char: HashMap<char, Vec<Candidate>>,
}

impl SgMatcher {
    pub fn new(sgset: &SgSet) -> Result<Self> {
        if sgset.normalization_version != NORMALIZATION_VERSION {
            return Err(Error::NormalizationVersion {
                expected: NORMALIZATION_VERSION.to_owned(),
                found: sgset.normalization_version.clone(),
            });
        }
        let mut by_first_char: HashMap<char, Vec<Candidate>> = HashMap::new();
        for cluster in &sgset.clusters {
            for g in &cluster.members {
                let chars: Vec<char> = g.surface.chars().collect();
                by_first_char.entry(chars[0]).or_default().push(Candidate {
                    chars,
                    surface: g.surface.clone(),
                    cluster_id: cluster.id,
                });
            }
        }
        for list in by_first_char.values_mut() {
            list.sort_by(|a, b| b.chars.len().cmp(&a.chars.len()));
        }
        Ok(SgMatcher { by_first_char })
    }

    pub fn find(&self, full_text: &str) -> Vec<SgMatch> {
        self.find_normalized(&NormalizedText::new(full_text))
    }

    pub fn find_normalized(&self, norm: &NormalizedText) -> Vec<SgMatch> {
        let chars = &norm.chars;
        let mut out = Vec::new();
        let mut i = 0;
        while i < chars.len() {
            if norm.is_boundary(i) {
                if let Some(cands) = self.by_first_char.get(&chars[i]) {
                    let hit = cands.iter().find(|c| {
                        let end = i + c.chars.len();
                        end <= chars.len()
                            && chars[i..end] == c.chars[..]
                            && norm.is_boundary(end)
                    });
                    if let Some(c) = hit {
                        let end = i + c.chars.len();
                        let (start, orig_end) = norm.original_span(i, end);
                        out.push(SgMatch {
                            surface: c.surface.clone(),
                            cluster_id: c.cluster_id,
                            start,
                            end: orig_end,
                            norm_start: i,
                            norm_end: end,
                        });
                        i = end;
                        continue;
                    }
                }
            }
            i += 1;
        }
        out
    }
}

/// Finds strategic grams in `full_text`.
pub fn match_sgs(full_text: &str, sgset: &SgSet) -> Result<Vec<SgMatch>> {
    Ok(SgMatcher::new(sgset)?.find(full_text))
}

/// Labels tokens that overlap any match by one or more characters.
pub fn label_tokens(trajectory: &Trajectory, matches: &[SgMatch]) -> TokenClassMask {
    // Merged, sorted match intervals; token spans are sorted too, so one sweep.
    let mut spans: Vec<(usize, usize)> = matches.iter().map(|m| (m.start, m.end)).filter(|(s, e)| s < e).collect();
    spans.sort_unstable();
    let mut merged: Vec<(usize, usize)> = Vec::with_capacity(spans.len());
    for (s, e) in spans {
        match merged.last_mut() {
            Some(last) if s < last.1 => last.1 = last.1.max(e),
            _ => merged.push((s, e)),
        }
    }
    let mut j = 0;
    let labels = trajectory
        .token_char_spans()
        .into_iter()
        .map(|(ts, te)| {
            while j < merged.len() && merged[j].1 <= ts {
                j += 1;
            }
            ts < te && j < merged.len() && merged[j].0 < te
        })
        .collect();
    TokenClassMask { labels }
}

/// Matches and labels one trajectory.
pub fn classify(trajectory: &Trajectory, matcher: &SgMatcher) -> (Vec<SgMatch>, TokenClassMask) {
    let matches = matcher.find(&trajectory.full_text);
    let mask = label_tokens(trajectory, &matches);
    (matches, mask)
}

/// An annotated-trace line: the trace record plus `mask` and `matches`.
pub fn annotated_line(trajectory: &Trajectory, matches: &[SgMatch], mask: &TokenClassMask) -> String {
    let mut value: serde_json::Value =
        serde_json::from_str(&crate::trace::to_line(trajectory)).expect("trace line is json");
    let obj = value.as_object_mut().expect("trace line is an object");
    obj.insert(
        "mask".into(),
        mask.labels.iter().map(|&b| u8::from(b)).collect::<Vec<_>>().into(),
    );
    obj.insert(
        "matches".into(),
        serde_json::to_value(matches).expect("matches serialise"),
    );
    value.to_string()
}
