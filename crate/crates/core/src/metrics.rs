//! Training-dynamics metrics computed over per-step windows of labeled
//! trajectories.
//!
//! Entropies are stored in nats and reported in bits. A point whose value is
//! undefined (for example a window with no planning tokens) is a gap, never a
//! zero.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classify::{SgMatch, SgMatcher, TokenClassMask};
use crate::error::{Error, Result};
use crate::sg::SgSet;
use crate::text::NormalizedText;
use crate::trace::{RolloutGroup, TokenRecord, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    Bits,
    Nats,
    Ratio,
    Tokens,
    Fraction,
    Count,
}

impl Unit {
    pub fn as_str(self) -> &'static str {
        match self {
            Unit::Bits => "bits",
            Unit::Nats => "nats",
            Unit::Ratio => "ratio",
            Unit::Tokens => "tokens",
            Unit::Fraction => "fraction",
            Unit::Count => "count",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "bits" => Unit::Bits,
            "nats" => Unit::Nats,
            "ratio" => Unit::Ratio,
            "tokens" => Unit::Tokens,
            "fraction" => Unit::Fraction,
            "count" => Unit::Count,
            _ => return None,
        })
    }
}

/// One point of a series. `value: None` is a gap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub step: u64,
    pub value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    pub name: String,
    pub unit: Unit,
    pub points: Vec<SeriesPoint>,
    /// Set when some values are truncated-entropy lower bounds.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub lower_bound: bool,
}

impl MetricSeries {
    pub fn new(name: impl Into<String>, unit: Unit) -> Self {
        MetricSeries {
            name: name.into(),
            unit,
            points: Vec::new(),
            lower_bound: false,
        }
    }

    /// Appends a point. Steps must be strictly increasing and values finite.
    pub fn push(&mut self, step: u64, value: Option<f64>) -> Result<()> {
        if let Some(last) = self.points.last() {
            if step <= last.step {
                return Err(Error::Metrics(format!(
                    "series '{}': step {step} after step {}",
                    self.name, last.step
                )));
            }
        }
        if let Some(v) = value {
            if !v.is_finite() {
                return Err(Error::Metrics(format!(
                    "series '{}': non-finite value at step {step}",
                    self.name
                )));
            }
        }
        self.points.push(SeriesPoint { step, value });
        Ok(())
    }

    fn from_points(name: &str, unit: Unit, points: Vec<(u64, Option<f64>)>) -> Result<Self> {
        let mut s = MetricSeries::new(name, unit);
        for (step, v) in points {
            s.push(step, v)?;
        }
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn steps(&self) -> Vec<u64> {
        self.points.iter().map(|p| p.step).collect()
    }

    pub fn values(&self) -> Vec<Option<f64>> {
        self.points.iter().map(|p| p.value).collect()
    }

    /// Non-gap values in step order.
    pub fn defined_values(&self) -> Vec<f64> {
        self.points.iter().filter_map(|p| p.value).collect()
    }

    /// Trailing moving average over the last `width` points; gaps stay gaps
    /// and are skipped inside the window.
    pub fn moving_average(&self, width: usize) -> MetricSeries {
        let width = width.max(1);
        let points = self
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let value = p.value.map(|_| {
                    let lo = (i + 1).saturating_sub(width);
                    let vals: Vec<f64> =
                        self.points[lo..=i].iter().filter_map(|q| q.value).collect();
                    vals.iter().sum::<f64>() / vals.len() as f64
                });
                SeriesPoint { step: p.step, value }
            })
            .collect();
        MetricSeries {
            name: format!("{}_ma{width}", self.name),
            unit: self.unit,
            points,
            lower_bound: self.lower_bound,
        }
    }

    /// Writes `step,value,unit,gap` rows.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let csv_err = |source| Error::Csv {
            context: format!("writing series '{}'", self.name),
            source,
        };
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["step", "value", "unit", "gap"]).map_err(csv_err)?;
        for p in &self.points {
            let value = p.value.map(|v| v.to_string()).unwrap_or_default();
            let gap = if p.value.is_some() { "0" } else { "1" };
            wr.write_record([p.step.to_string().as_str(), &value, self.unit.as_str(), gap])
                .map_err(csv_err)?;
        }
        wr.flush().map_err(|e| Error::io(format!("series '{}'", self.name), e))?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    /// Reads a table written by [`MetricSeries::write_csv`].
    pub fn read_csv(name: &str, text: &str) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(text.as_bytes());
        let mut points = Vec::new();
        let mut unit = None;
        for (i, rec) in rd.records().enumerate() {
            let rec = rec.map_err(|source| Error::Csv {
                context: format!("reading series '{name}'"),
                source,
            })?;
            let bad = |what: &str| Error::Metrics(format!("series '{name}' row {}: bad {what}", i + 1));
            let step: u64 = rec.get(0).and_then(|s| s.parse().ok()).ok_or_else(|| bad("step"))?;
            let u = rec.get(2).and_then(Unit::parse).ok_or_else(|| bad("unit"))?;
            let gap = rec.get(3) == Some("1");
            let value = if gap {
                None
            } else {
                Some(rec.get(1).and_then(|s| s.parse().ok()).ok_or_else(|| bad("value"))?)
            };
            unit = Some(u);
            points.push((step, value));
        }
        MetricSeries::from_points(name, unit.unwrap_or(Unit::Ratio), points)
    }
}

/// The trajectories sharing one training step, with their token labels.
#[derive(Debug, Clone, PartialEq)]
pub struct StepWindow {
    pub step: u64,
    pub trajectories: Vec<Trajectory>,
    pub masks: Vec<TokenClassMask>,
}

impl StepWindow {
    pub fn new(step: u64, trajectories: Vec<Trajectory>, masks: Vec<TokenClassMask>) -> Result<Self> {
        if trajectories.len() != masks.len() {
            return Err(Error::Metrics(format!(
                "step {step}: {} trajectories but {} masks",
                trajectories.len(),
                masks.len()
            )));
        }
        for (i, (t, m)) in trajectories.iter().zip(&masks).enumerate() {
            if t.step != step {
                return Err(Error::Metrics(format!(
                    "step {step}: trajectory {i} has step {}",
                    t.step
                )));
            }
            if t.tokens.len() != m.len() {
                return Err(Error::Metrics(format!(
                    "step {step}: trajectory {i} has {} tokens but {} labels",
                    t.tokens.len(),
                    m.len()
                )));
            }
        }
        Ok(StepWindow {
            step,
            trajectories,
            masks,
        })
    }

    fn tokens(&self, class: TokenClass) -> impl Iterator<Item = &TokenRecord> {
        self.trajectories
            .iter()
            .zip(&self.masks)
            .flat_map(move |(t, m)| {
                t.tokens
                    .iter()
                    .zip(&m.labels)
                    .filter(move |(_, &p)| class.admits(p))
                    .map(|(tok, _)| tok)
            })
    }
}

/// Groups labeled trajectories into windows by their `step` field, in
/// ascending step order.
pub fn build_windows(trajectories: Vec<Trajectory>, masks: Vec<TokenClassMask>) -> Result<Vec<StepWindow>> {
    if trajectories.len() != masks.len() {
        return Err(Error::Metrics(format!(
            "{} trajectories but {} masks",
            trajectories.len(),
            masks.len()
        )));
    }
    let mut by_step: BTreeMap<u64, (Vec<Trajectory>, Vec<TokenClassMask>)> = BTreeMap::new();
    for (t, m) in trajectories.into_iter().zip(masks) {
        let e = by_step.entry(t.step).or_default();
        e.0.push(t);
        e.1.push(m);
    }
    by_step
        .into_iter()
        .map(|(step, (t, m))| StepWindow::new(step, t, m))
        .collect()
}

/// Classifies every trajectory against `sgset` and groups by step.
pub fn label_and_window(trajectories: Vec<Trajectory>, sgset: &SgSet) -> Result<Vec<StepWindow>> {
    let matcher = SgMatcher::new(sgset)?;
    let masks = trajectories
        .par_iter()
        .map(|t| crate::classify::classify(t, &matcher).1)
        .collect();
    build_windows(trajectories, masks)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenClass {
    Planning,
    Execution,
    All,
}

impl TokenClass {
    fn admits(self, planning: bool) -> bool {
        match self {
            TokenClass::Planning => planning,
            TokenClass::Execution => !planning,
            TokenClass::All => true,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TokenClass::Planning => "planning",
            TokenClass::Execution => "execution",
            TokenClass::All => "all",
        }
    }
}

/// Grouping key for strategic-gram statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GramKey {
    #[default]
    Gram,
    Cluster,
}

impl GramKey {
    fn of(self, m: &SgMatch) -> String {
        match self {
            GramKey::Gram => m.surface.clone(),
            GramKey::Cluster => m.cluster_id.to_string(),
        }
    }
}

/// Shannon entropy in bits of a count distribution; `None` when empty.
pub fn shannon_bits<I: IntoIterator<Item = u64>>(counts: I) -> Option<f64> {
    let counts: Vec<u64> = counts.into_iter().filter(|&c| c > 0).collect();
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return None;
    }
    let n = total as f64;
    let h = -counts
        .iter()
        .map(|&c| {
            let p = c as f64 / n;
            p * p.log2()
        })
        .sum::<f64>();
    Some(h.max(0.0))
}

/// Token entropy in nats, falling back to the truncated top-k estimate.
/// The flag is true when the fallback was used.
fn token_entropy_nats(tok: &TokenRecord) -> Option<(f64, bool)> {
    if let Some(h) = tok.entropy {
        return Some((h, false));
    }
    let topk = tok.topk.as_ref()?;
    let h = -topk
        .iter()
        .map(|(_, lp)| lp.exp() * lp)
        .filter(|x| x.is_finite())
        .sum::<f64>();
    Some((h.max(0.0), true))
}

/// Mean per-token entropy in bits of the tokens of `class`, per window.
pub fn token_entropy_series(windows: &[StepWindow], class: TokenClass) -> Result<MetricSeries> {
    let per_window: Vec<(Option<f64>, bool)> = windows
        .par_iter()
        .map(|w| {
            let mut sum = 0.0;
            let mut n = 0usize;
            let mut lower = false;
            for tok in w.tokens(class) {
                let (h, fallback) = token_entropy_nats(tok).ok_or_else(|| {
                    Error::Metrics(format!(
                        "step {}: token '{}' has neither entropy nor topk",
                        w.step, tok.text
                    ))
                })?;
                sum += h;
                n += 1;
                lower |= fallback;
            }
            let v = (n > 0).then(|| sum / n as f64 / std::f64::consts::LN_2);
            Ok((v, lower))
        })
        .collect::<Result<_>>()?;
    let mut s = MetricSeries::from_points(
        &format!("token_entropy_{}", class.as_str()),
        Unit::Bits,
        windows.iter().zip(&per_window).map(|(w, p)| (w.step, p.0)).collect(),
    )?;
    s.lower_bound = per_window.iter().any(|p| p.1);
    Ok(s)
}

fn mean_logprob(w: &StepWindow, class: TokenClass) -> Option<f64> {
    let (sum, n) = w
        .tokens(class)
        .fold((0.0, 0usize), |(s, n), t| (s + t.logprob, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Perplexity of each window's class tokens divided by the first window's.
pub fn relative_perplexity_series(windows: &[StepWindow], class: TokenClass) -> Result<MetricSeries> {
    let name = format!("relative_perplexity_{}", class.as_str());
    let Some(first) = windows.first() else {
        return Err(Error::Metrics(format!("{name}: undefined baseline (no windows)")));
    };
    let base = mean_logprob(first, class).ok_or_else(|| {
        Error::Metrics(format!("{name}: undefined baseline at step {}", first.step))
    })?;
    let mut points = vec![(first.step, Some(1.0))];
    points.extend(windows[1..].iter().map(|w| {
        // exp(-m) / exp(-base)
        (w.step, mean_logprob(w, class).map(|m| (base - m).exp()))
    }));
    MetricSeries::from_points(&name, Unit::Ratio, points)
}

fn window_matches(window: &StepWindow, matcher: &SgMatcher) -> Vec<Vec<SgMatch>> {
    window
        .trajectories
        .iter()
        .map(|t| matcher.find(&t.full_text))
        .collect()
}

/// Entropy in bits of the strategic-gram occurrence distribution in a window.
pub fn semantic_entropy(window: &StepWindow, sgset: &SgSet, key: GramKey) -> Result<Option<f64>> {
    let matcher = SgMatcher::new(sgset)?;
    Ok(semantic_entropy_with(window, &matcher, key))
}

pub fn semantic_entropy_with(window: &StepWindow, matcher: &SgMatcher, key: GramKey) -> Option<f64> {
    let mut counts: HashMap<String, u64> = HashMap::new();
    for m in window_matches(window, matcher).iter().flatten() {
        *counts.entry(key.of(m)).or_default() += 1;
    }
    shannon_bits(counts.into_values())
}

pub fn semantic_entropy_series(windows: &[StepWindow], sgset: &SgSet, key: GramKey) -> Result<MetricSeries> {
    let matcher = SgMatcher::new(sgset)?;
    let values: Vec<_> = windows
        .par_iter()
        .map(|w| (w.step, semantic_entropy_with(w, &matcher, key)))
        .collect();
    MetricSeries::from_points("semantic_entropy", Unit::Bits, values)
}

pub const DEFAULT_FOLLOW_WORDS: usize = 4;

/// (key, following w-gram) pairs: for each match, the next `w` normalized
/// words after it that do not overlap any match.
pub fn follow_pairs(text: &str, matcher: &SgMatcher, w: usize, key: GramKey) -> Vec<(String, String)> {
    let norm = NormalizedText::new(text);
    let matches = matcher.find_normalized(&norm);
    if matches.is_empty() {
        return Vec::new();
    }
    let free_words: Vec<(usize, usize)> = norm
        .word_spans()
        .into_iter()
        .filter(|&(s, e)| !matches.iter().any(|m| s < m.norm_end && m.norm_start < e))
        .collect();
    let mut pairs = Vec::new();
    for m in &matches {
        let first = free_words.partition_point(|&(s, _)| s < m.norm_end);
        if free_words.len() - first < w {
            continue;
        }
        let y: Vec<String> = free_words[first..first + w]
            .iter()
            .map(|&(s, e)| norm.chars[s..e].iter().collect())
            .collect();
        pairs.push((key.of(m), y.join(" ")));
    }
    pairs
}

/// `H(Y | X)` in bits over (key, following words) pairs.
pub fn conditional_entropy_of_pairs(pairs: &[(String, String)]) -> Option<f64> {
    if pairs.is_empty() {
        return None;
    }
    let mut by_x: HashMap<&str, HashMap<&str, u64>> = HashMap::new();
    for (x, y) in pairs {
        *by_x.entry(x).or_default().entry(y).or_default() += 1;
    }
    let total = pairs.len() as f64;
    let h = by_x
        .values()
        .map(|ys| {
            let nx: u64 = ys.values().sum();
            nx as f64 / total * shannon_bits(ys.values().copied()).unwrap_or(0.0)
        })
        .sum();
    Some(h)
}

pub fn conditional_entropy(window: &StepWindow, sgset: &SgSet, w: usize) -> Result<Option<f64>> {
    let matcher = SgMatcher::new(sgset)?;
    conditional_entropy_with(window, &matcher, w, GramKey::Gram)
}

pub fn conditional_entropy_with(
    window: &StepWindow,
    matcher: &SgMatcher,
    w: usize,
    key: GramKey,
) -> Result<Option<f64>> {
    if w == 0 {
        return Err(Error::Metrics("conditional entropy needs w >= 1".into()));
    }
    let pairs: Vec<_> = window
        .trajectories
        .iter()
        .flat_map(|t| follow_pairs(&t.full_text, matcher, w, key))
        .collect();
    Ok(conditional_entropy_of_pairs(&pairs))
}

pub fn conditional_entropy_series(
    windows: &[StepWindow],
    sgset: &SgSet,
    w: usize,
    key: GramKey,
) -> Result<MetricSeries> {
    let matcher = SgMatcher::new(sgset)?;
    let values = windows
        .par_iter()
        .map(|win| Ok((win.step, conditional_entropy_with(win, &matcher, w, key)?)))
        .collect::<Result<Vec<_>>>()?;
    MetricSeries::from_points("conditional_entropy", Unit::Bits, values)
}

/// Per-window accuracy and mean trajectory length in tokens.
pub fn accuracy_length_series(windows: &[StepWindow]) -> Result<(MetricSeries, MetricSeries)> {
    let mut acc = Vec::with_capacity(windows.len());
    let mut len = Vec::with_capacity(windows.len());
    for w in windows {
        let n = w.trajectories.len();
        if n == 0 {
            acc.push((w.step, None));
            len.push((w.step, None));
            continue;
        }
        let correct = w.trajectories.iter().filter(|t| t.correct).count();
        let tokens: usize = w.trajectories.iter().map(|t| t.tokens.len()).sum();
        acc.push((w.step, Some(correct as f64 / n as f64)));
        len.push((w.step, Some(tokens as f64 / n as f64)));
    }
    Ok((
        MetricSeries::from_points("accuracy", Unit::Fraction, acc)?,
        MetricSeries::from_points("length", Unit::Tokens, len)?,
    ))
}

/// Unbiased pass@k for one group of `g` samples with `c` correct.
pub fn pass_at_k_single(g: usize, c: usize, k: usize) -> f64 {
    if g - c < k {
        return 1.0;
    }
    // C(g-c, k) / C(g, k) as a product of ratios.
    let miss: f64 = (0..k).map(|i| (g - c - i) as f64 / (g - i) as f64).product();
    1.0 - miss
}

pub fn pass_at_k(groups: &[RolloutGroup], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Metrics("k must be at least 1".into()));
    }
    if groups.is_empty() {
        return Err(Error::Metrics("pass@k over no groups".into()));
    }
    let mut total = 0.0;
    for g in groups {
        if g.size() < k {
            return Err(Error::Metrics(format!(
                "group '{}' at step {} has {} samples, fewer than k = {k}",
                g.problem_id,
                g.step,
                g.size()
            )));
        }
        total += pass_at_k_single(g.size(), g.num_correct(), k);
    }
    Ok(total / groups.len() as f64)
}

/// Removes `round(rho * n)` grams chosen uniformly at random under `seed`.
pub fn sensitivity_drop(sgset: &SgSet, rho: f64, seed: u64) -> Result<SgSet> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::Metrics(format!("rho must be in [0, 1), got {rho}")));
    }
    let n = sgset.grams.len();
    let remove = (rho * n as f64).round() as usize;
    if remove >= n {
        return Err(Error::Metrics(format!(
            "dropping {remove} of {n} grams would empty the set"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dropped: std::collections::HashSet<&str> = sample(&mut rng, n, remove)
        .into_iter()
        .map(|i| sgset.grams[i].surface.as_str())
        .collect();
    let clusters = sgset
        .clusters
        .iter()
        .filter_map(|c| {
            let members: Vec<_> = c
                .members
                .iter()
                .filter(|g| !dropped.contains(g.surface.as_str()))
                .cloned()
                .collect();
            (!members.is_empty()).then(|| crate::sg::SgCluster {
                members,
                ..c.clone()
            })
        })
        .collect();
    let mut out = SgSet::from_clusters(clusters, sgset.selection_quantile)?;
    out.normalization_version = sgset.normalization_version.clone();
    Ok(out)
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapStats {
    /// Fraction of planning tokens whose entropy is in the top-p set.
    pub planning_in_top: Option<f64>,
    /// Fraction of top-p tokens that are planning tokens.
    pub top_that_are_planning: Option<f64>,
    /// Entropy threshold in nats.
    pub threshold: f64,
}

/// Overlap between planning tokens and the top-`p` highest-entropy tokens,
/// pooled over all given windows.
pub fn entropy_overlap_stats(windows: &[StepWindow], p: f64) -> Result<OverlapStats> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Metrics(format!("p must be in (0, 1), got {p}")));
    }
    let mut tokens = Vec::new();
    for w in windows {
        for (t, m) in w.trajectories.iter().zip(&w.masks) {
            for (tok, &planning) in t.tokens.iter().zip(&m.labels) {
                let h = tok.entropy.ok_or_else(|| {
                    Error::Metrics(format!("step {}: token '{}' has no entropy", w.step, tok.text))
                })?;
                tokens.push((h, planning));
            }
        }
    }
    if tokens.is_empty() {
        return Err(Error::Metrics("no tokens".into()));
    }
    let mut sorted: Vec<f64> = tokens.iter().map(|t| t.0).collect();
    sorted.sort_by(f64::total_cmp);
    let threshold = quantile_sorted(&sorted, 1.0 - p);
    let top = tokens.iter().filter(|t| t.0 >= threshold).count();
    let planning = tokens.iter().filter(|t| t.1).count();
    let both = tokens.iter().filter(|t| t.1 && t.0 >= threshold).count();
    let frac = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
    Ok(OverlapStats {
        planning_in_top: frac(both, planning),
        top_that_are_planning: frac(both, top),
        threshold,
    })
}

/// Every series the metrics command produces, plus the scalar summaries.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub series: Vec<MetricSeries>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub scalars: BTreeMap<String, f64>,
}

impl MetricsReport {
    pub fn get(&self, name: &str) -> Option<&MetricSeries> {
        self.series.iter().find(|s| s.name == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::json("metrics report", e))
    }
}

/// Options for [`compute_report`].
#[derive(Debug, Clone)]
pub struct ReportOptions {
    pub key: GramKey,
    pub follow_words: usize,
    pub overlap_quantile: f64,
    pub pass_k: Vec<usize>,
    pub smooth_width: Option<usize>,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions {
            key: GramKey::Gram,
            follow_words: DEFAULT_FOLLOW_WORDS,
            overlap_quantile: 0.3,
            pass_k: vec![1, 8],
            smooth_width: None,
        }
    }
}

/// Computes the full metric suite over labeled windows. Metrics whose
/// inputs are absent (no entropies, no groups) are omitted.
pub fn compute_report(windows: &[StepWindow], sgset: &SgSet, opts: &ReportOptions) -> Result<MetricsReport> {
    let mut report = MetricsReport::default();
    let has_entropy = windows
        .iter()
        .flat_map(|w| &w.trajectories)
        .flat_map(|t| &t.tokens)
        .all(|t| t.entropy.is_some() || t.topk.is_some());
    for class in [TokenClass::Planning, TokenClass::Execution, TokenClass::All] {
        if has_entropy {
            report.series.push(token_entropy_series(windows, class)?);
        }
        if windows.first().is_some_and(|w| mean_logprob(w, class).is_some()) {
            report.series.push(relative_perplexity_series(windows, class)?);
        }
    }
    report.series.push(semantic_entropy_series(windows, sgset, opts.key)?);
    report
        .series
        .push(conditional_entropy_series(windows, sgset, opts.follow_words, opts.key)?);
    let (acc, len) = accuracy_length_series(windows)?;
    report.series.push(acc);
    report.series.push(len);

    for &k in &opts.pass_k {
        let mut s = MetricSeries::new(format!("pass_at_{k}"), Unit::Fraction);
        for w in windows {
            let grouping = crate::trace::group_rollouts(&w.trajectories);
            let value = pass_at_k(&grouping.groups, k).ok();
            s.push(w.step, value)?;
        }
        if s.points.iter().any(|p| p.value.is_some()) {
            report.series.push(s);
        }
    }

    if windows
        .iter()
        .flat_map(|w| &w.trajectories)
        .flat_map(|t| &t.tokens)
        .all(|t| t.entropy.is_some())
    {
        if let Ok(o) = entropy_overlap_stats(windows, opts.overlap_quantile) {
            if let Some(v) = o.planning_in_top {
                report.scalars.insert("overlap_planning_in_top".into(), v);
            }
            if let Some(v) = o.top_that_are_planning {
                report.scalars.insert("overlap_top_that_are_planning".into(), v);
            }
        }
    }

    if let Some(width) = opts.smooth_width {
        let smoothed: Vec<_> = report.series.iter().map(|s| s.moving_average(width)).collect();
        report.series.extend(smoothed);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sg::{Gram, SgCluster};
    use proptest::prelude::*;

    fn sgset(grams: &[&str]) -> SgSet {
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

    fn traj(step: u64, toks: &[(&str, f64, Option<f64>)], correct: bool) -> Trajectory {
        let tokens = toks
            .iter()
            .map(|&(t, lp, h)| TokenRecord {
                text: t.into(),
                logprob: lp,
                entropy: h,
                topk: None,
            })
            .collect();
        Trajectory::from_tokens("p", step, tokens, if correct { 1.0 } else { 0.0 }, correct)
    }

    fn window(step: u64, trajs: Vec<(Trajectory, Vec<bool>)>) -> StepWindow {
        let (t, m): (Vec<_>, Vec<_>) = trajs
            .into_iter()
            .map(|(t, l)| (t, TokenClassMask { labels: l }))
            .unzip();
        StepWindow::new(step, t, m).unwrap()
    }

    fn text_window(texts: &[&str]) -> StepWindow {
        let trajs = texts
            .iter()
            .map(|s| (traj(0, &[(s, -0.1, None)], true), vec![false]))
            .collect();
        window(0, trajs)
    }

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn token_entropy_examples() {
        let w = window(
            0,
            vec![(
                traj(0, &[("a", -0.1, Some(1.0 * LN2)), ("b", -0.1, Some(3.0 * LN2)), ("c", -0.1, Some(0.0))], true),
                vec![true, true, false],
            )],
        );
        let s = token_entropy_series(std::slice::from_ref(&w), TokenClass::Planning).unwrap();
        assert!((s.points[0].value.unwrap() - 2.0).abs() < 1e-12);
        let s = token_entropy_series(std::slice::from_ref(&w), TokenClass::Execution).unwrap();
        assert_eq!(s.points[0].value, Some(0.0));
        assert_eq!(s.unit, Unit::Bits);

        let w = window(3, vec![(traj(3, &[("a", -0.1, Some(1.0))], true), vec![false])]);
        let s = token_entropy_series(&[w], TokenClass::Planning).unwrap();
        assert_eq!(s.points[0], SeriesPoint { step: 3, value: None });
    }

    #[test]
    fn token_entropy_topk_fallback_and_error() {
        let mut t = traj(0, &[("a", -0.1, None)], true);
        t.tokens[0].topk = Some(vec![("a".into(), 0.5f64.ln()), ("b".into(), 0.5f64.ln())]);
        let w = window(0, vec![(t, vec![true])]);
        let s = token_entropy_series(&[w], TokenClass::All).unwrap();
        assert!(s.lower_bound);
        assert!((s.points[0].value.unwrap() - 1.0).abs() < 1e-12);

        let w = window(0, vec![(traj(0, &[("a", -0.1, None)], true), vec![true])]);
        assert!(token_entropy_series(&[w], TokenClass::All).is_err());
    }

    #[test]
    fn relative_perplexity_examples() {
        let w0 = window(0, vec![(traj(0, &[("a", -1.0, None)], true), vec![true])]);
        let w1 = window(5, vec![(traj(5, &[("a", -0.5, None), ("b", -0.5, None)], true), vec![true, true])]);
        let w2 = window(9, vec![(traj(9, &[("a", -1.0, None)], true), vec![true])]);
        let s = relative_perplexity_series(&[w0.clone(), w1, w2], TokenClass::Planning).unwrap();
        assert_eq!(s.points[0].value, Some(1.0));
        assert!((s.points[1].value.unwrap() - 0.6065).abs() < 1e-4);
        assert!((s.points[2].value.unwrap() - 1.0).abs() < 1e-15);

        let err = relative_perplexity_series(&[w0], TokenClass::Execution).unwrap_err();
        assert!(err.to_string().contains("undefined baseline"));
    }

    #[test]
    fn semantic_entropy_examples() {
        let set = sgset(&["wait", "let me verify", "try again", "hmm"]);
        let w = text_window(&["wait let me verify", "try again hmm"]);
        assert!((semantic_entropy(&w, &set, GramKey::Gram).unwrap().unwrap() - 2.0).abs() < 1e-12);

        let w = text_window(&["wait wait", "wait"]);
        assert_eq!(semantic_entropy(&w, &set, GramKey::Gram).unwrap(), Some(0.0));

        let w = text_window(&["wait wait wait hmm"]);
        let h = semantic_entropy(&w, &set, GramKey::Gram).unwrap().unwrap();
        assert!((h - 0.8113).abs() < 1e-4);

        let w = text_window(&["nothing here"]);
        assert_eq!(semantic_entropy(&w, &set, GramKey::Gram).unwrap(), None);
    }

    #[test]
    fn semantic_entropy_cluster_key_merges_members() {
        let clusters = vec![SgCluster {
            id: 7,
            members: vec![Gram::parse("wait").unwrap(), Gram::parse("hmm").unwrap()],
            cluster_df: None,
            df_fraction: None,
        }];
        let set = SgSet::from_clusters(clusters, 0.2).unwrap();
        let w = text_window(&["wait hmm"]);
        assert_eq!(semantic_entropy(&w, &set, GramKey::Cluster).unwrap(), Some(0.0));
        assert_eq!(semantic_entropy(&w, &set, GramKey::Gram).unwrap(), Some(1.0));
    }

    #[test]
    fn conditional_entropy_examples() {
        let set = sgset(&["wait", "hmm"]);
        let w = text_window(&["wait a b c d", "wait a b c d"]);
        assert_eq!(conditional_entropy(&w, &set, 4).unwrap(), Some(0.0));

        let w = text_window(&["wait a b c d", "wait e f g h"]);
        assert!((conditional_entropy(&w, &set, 4).unwrap().unwrap() - 1.0).abs() < 1e-12);

        let w = text_window(&["wait a b c d", "wait a b c d", "hmm a b c d", "hmm e f g h"]);
        assert!((conditional_entropy(&w, &set, 4).unwrap().unwrap() - 0.5).abs() < 1e-9);

        let w = text_window(&["wait a b"]);
        assert_eq!(conditional_entropy(&w, &set, 4).unwrap(), None);
    }

    #[test]
    fn follow_words_skip_matched_words() {
        let set = sgset(&["wait", "hmm"]);
        let m = SgMatcher::new(&set).unwrap();
        let pairs = follow_pairs("Wait x hmm y z", &m, 3, GramKey::Gram);
        assert_eq!(pairs, vec![("wait".to_string(), "x y z".to_string())]);
    }

    #[test]
    fn accuracy_length_examples() {
        let w = window(
            0,
            vec![
                (traj(0, &[("a", -0.1, None); 10], true), vec![false; 10]),
                (traj(0, &[("a", -0.1, None); 30], true), vec![false; 30]),
            ],
        );
        let empty = StepWindow::new(1, vec![], vec![]).unwrap();
        let (acc, len) = accuracy_length_series(&[w, empty]).unwrap();
        assert_eq!(acc.points[0].value, Some(1.0));
        assert_eq!(len.points[0].value, Some(20.0));
        assert_eq!(acc.points[1].value, None);
    }

    fn group(g: usize, c: usize) -> RolloutGroup {
        let t = (0..g)
            .map(|i| traj(0, &[("x", -0.1, None)], i < c))
            .collect();
        RolloutGroup::new(t).unwrap()
    }

    #[test]
    fn pass_at_k_examples() {
        assert_eq!(pass_at_k(&[group(8, 8)], 4).unwrap(), 1.0);
        assert_eq!(pass_at_k(&[group(8, 0)], 3).unwrap(), 0.0);
        assert!((pass_at_k(&[group(8, 4)], 2).unwrap() - 0.7857).abs() < 1e-4);
        assert!(pass_at_k(&[group(4, 1)], 5).is_err());
        assert!(pass_at_k(&[group(4, 1)], 0).is_err());
    }

    #[test]
    fn sensitivity_drop_examples() {
        let names: Vec<String> = (0..10).map(|i| format!("gram {i}")).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let set = sgset(&refs);
        assert_eq!(sensitivity_drop(&set, 0.0, 1).unwrap(), set);
        let a = sensitivity_drop(&set, 0.3, 9).unwrap();
        assert_eq!(a.grams.len(), 7);
        assert_eq!(a.clusters.len(), 7);
        assert_eq!(a, sensitivity_drop(&set, 0.3, 9).unwrap());
        assert!(sensitivity_drop(&sgset(&["a"]), 0.6, 1).is_err());
        assert!(sensitivity_drop(&set, 1.0, 1).is_err());
    }

    #[test]
    fn overlap_examples() {
        let ent = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];
        let mk = |planning: &[usize]| {
            let toks: Vec<_> = ent.iter().map(|&h| ("t", -0.1, Some(h))).collect();
            let labels = (0..10).map(|i| planning.contains(&i)).collect();
            window(0, vec![(traj(0, &toks, true), labels)])
        };
        let o = entropy_overlap_stats(&[mk(&[7, 8, 9])], 0.3).unwrap();
        assert_eq!((o.planning_in_top, o.top_that_are_planning), (Some(1.0), Some(1.0)));
        let o = entropy_overlap_stats(&[mk(&[0, 1])], 0.3).unwrap();
        assert_eq!((o.planning_in_top, o.top_that_are_planning), (Some(0.0), Some(0.0)));
        let o = entropy_overlap_stats(&[mk(&[8, 9])], 0.3).unwrap();
        assert_eq!(o.planning_in_top, Some(1.0));
        assert!((o.top_that_are_planning.unwrap() - 0.667).abs() < 1e-3);

        let w = window(0, vec![(traj(0, &[("a", -0.1, None)], true), vec![true])]);
        assert!(entropy_overlap_stats(&[w], 0.3).is_err());
    }

    #[test]
    fn series_rejects_non_increasing_steps() {
        let mut s = MetricSeries::new("x", Unit::Ratio);
        s.push(1, Some(1.0)).unwrap();
        assert!(s.push(1, Some(1.0)).is_err());
        assert!(s.push(2, Some(f64::NAN)).is_err());
        s.push(3, None).unwrap();
    }

    #[test]
    fn csv_round_trip_with_gaps() {
        let mut s = MetricSeries::new("acc", Unit::Fraction);
        s.push(0, Some(0.25)).unwrap();
        s.push(4, None).unwrap();
        let text = s.to_csv_string();
        assert!(text.starts_with("step,value,unit,gap\n0,0.25,fraction,0\n4,,fraction,1"));
        assert_eq!(MetricSeries::read_csv("acc", &text).unwrap(), s);
    }

    #[test]
    fn moving_average_trails() {
        let mut s = MetricSeries::new("x", Unit::Ratio);
        for (i, v) in [Some(1.0), Some(3.0), None, Some(5.0)].into_iter().enumerate() {
            s.push(i as u64, v).unwrap();
        }
        let m = s.moving_average(2);
        assert_eq!(m.values(), vec![Some(1.0), Some(2.0), None, Some(5.0)]);
    }

    proptest! {
        #[test]
        fn semantic_entropy_bounded_and_permutation_invariant(
            counts in prop::collection::vec(1u64..50, 1..12)
        ) {
            let h = shannon_bits(counts.iter().copied()).unwrap();
            prop_assert!(h >= 0.0);
            prop_assert!(h <= (counts.len() as f64).log2() + 1e-12);
            let mut rev = counts.clone();
            rev.reverse();
            prop_assert!((shannon_bits(rev).unwrap() - h).abs() < 1e-12);
        }

        #[test]
        fn conditioning_reduces_entropy(
            pairs in prop::collection::vec((0u8..3, 0u8..4), 1..60)
        ) {
            let pairs: Vec<(String, String)> =
                pairs.iter().map(|(x, y)| (x.to_string(), y.to_string())).collect();
            let hyx = conditional_entropy_of_pairs(&pairs).unwrap();
            let mut ys: HashMap<&str, u64> = HashMap::new();
            for (_, y) in &pairs {
                *ys.entry(y).or_default() += 1;
            }
            let hy = shannon_bits(ys.into_values()).unwrap();
            prop_assert!(hyx <= hy + 1e-12);
        }

        #[test]
        fn pass_at_k_monotone_and_full_k(g in 1usize..16, c_frac in 0.0f64..=1.0) {
            let c = (c_frac * g as f64).round() as usize;
            let mut prev = 0.0;
            for k in 1..=g {
                let v = pass_at_k_single(g, c, k);
                prop_assert!(v + 1e-12 >= prev);
                prev = v;
            }
            prop_assert_eq!(pass_at_k_single(g, c, g), if c >= 1 { 1.0 } else { 0.0 });
        }
    }
}
