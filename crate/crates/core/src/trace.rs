//! Reasoning-trace data model and line-delimited persistence.
//!
//! Each line of a trace file is one JSON record:
//!
//! ```text
//! {"v":1,"problem_id":"p1","step":0,"reward":1.0,"correct":true,
//!  "full_text":"Let me verify","tokens":[{"text":"Let","logprob":-0.1},
//!  {"text":" me","logprob":-0.2,"entropy":0.7},{"text":" verify","logprob":-0.3}]}
//! ```
//!
//! Log-probabilities and entropies are stored in nats. Token records carry no
//! offsets; character positions are recovered from cumulative text lengths,
//! which is why the concatenation of token texts must reproduce `full_text`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub text: String,
    pub logprob: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entropy: Option<f64>,
    /// Alternatives as `(text, logprob)`, most likely first.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topk: Option<Vec<(String, f64)>>,
}

impl TokenRecord {
    pub fn new(text: impl Into<String>, logprob: f64) -> Self {
        TokenRecord {
            text: text.into(),
            logprob,
            entropy: None,
            topk: None,
        }
    }

    pub fn with_entropy(mut self, entropy: f64) -> Self {
        self.entropy = Some(entropy);
        self
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.logprob.is_nan() || self.logprob > 0.0 {
            return Err("logprob > 0".into());
        }
        if let Some(h) = self.entropy {
            if !(h >= 0.0) {
                return Err("entropy < 0".into());
            }
        }
        if let Some(topk) = &self.topk {
            if topk.iter().any(|(_, lp)| lp.is_nan() || *lp > 0.0) {
                return Err("topk logprob > 0".into());
            }
            if topk.windows(2).any(|w| w[0].1 < w[1].1) {
                return Err("topk not sorted descending".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub problem_id: String,
    pub step: u64,
    pub tokens: Vec<TokenRecord>,
    pub full_text: String,
    pub reward: f64,
    pub correct: bool,
}

impl Trajectory {
    /// Builds a trajectory whose `full_text` is the concatenation of its tokens.
    pub fn from_tokens(
        problem_id: impl Into<String>,
        step: u64,
        tokens: Vec<TokenRecord>,
        reward: f64,
        correct: bool,
    ) -> Self {
        let full_text = tokens.iter().map(|t| t.text.as_str()).collect();
        Trajectory {
            problem_id: problem_id.into(),
            step,
            tokens,
            full_text,
            reward,
            correct,
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        for tok in &self.tokens {
            tok.validate()?;
        }
        if self.tokens.is_empty() && !self.full_text.is_empty() {
            return Err("tokens empty but full_text is not".into());
        }
        let mut rest = self.full_text.as_str();
        for tok in &self.tokens {
            match rest.strip_prefix(tok.text.as_str()) {
                Some(r) => rest = r,
                None => return Err("concatenation mismatch".into()),
            }
        }
        if !rest.is_empty() {
            return Err("concatenation mismatch".into());
        }
        if !self.reward.is_finite() {
            return Err("reward is not finite".into());
        }
        Ok(())
    }

    /// Half-open character (Unicode scalar) spans of each token in `full_text`.
    pub fn token_char_spans(&self) -> Vec<(usize, usize)> {
        let mut start = 0;
        self.tokens
            .iter()
            .map(|t| {
                let end = start + t.text.chars().count();
                let span = (start, end);
                start = end;
                span
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// G trajectories sampled for the same query at the same training step.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub problem_id: String,
    pub step: u64,
    pub trajectories: Vec<Trajectory>,
}

impl RolloutGroup {
    pub fn new(trajectories: Vec<Trajectory>) -> Result<Self> {
        if trajectories.len() < 2 {
            return Err(Error::Trace(format!(
                "rollout group needs at least 2 trajectories, got {}",
                trajectories.len()
            )));
        }
        let problem_id = trajectories[0].problem_id.clone();
        let step = trajectories[0].step;
        if trajectories
            .iter()
            .any(|t| t.problem_id != problem_id || t.step != step)
        {
            return Err(Error::Trace(
                "rollout group mixes problem ids or steps".into(),
            ));
        }
        Ok(RolloutGroup {
            problem_id,
            step,
            trajectories,
        })
    }

    pub fn size(&self) -> usize {
        self.trajectories.len()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.trajectories.iter().map(|t| t.reward).collect()
    }

    pub fn num_correct(&self) -> usize {
        self.trajectories.iter().filter(|t| t.correct).count()
    }
}

#[derive(Debug, Deserialize)]
struct WireRecord {
    v: u32,
    problem_id: String,
    step: u64,
    reward: f64,
    correct: bool,
    full_text: String,
    tokens: Vec<TokenRecord>,
}

#[derive(Serialize)]
struct WireRecordRef<'a> {
    v: u32,
    problem_id: &'a str,
    step: u64,
    reward: f64,
    correct: bool,
    full_text: &'a str,
    tokens: &'a [TokenRecord],
}

impl<'a> From<&'a Trajectory> for WireRecordRef<'a> {
    fn from(t: &'a Trajectory) -> Self {
        WireRecordRef {
            v: SCHEMA_VERSION,
            problem_id: &t.problem_id,
            step: t.step,
            reward: t.reward,
            correct: t.correct,
            full_text: &t.full_text,
            tokens: &t.tokens,
        }
    }
}

/// Serialises one trajectory as a single trace-file line (without newline).
pub fn to_line(t: &Trajectory) -> String {
    serde_json::to_string(&WireRecordRef::from(t)).expect("trajectory serialises")
}

/// Parses one trace-file line.
pub fn parse_line(line: &str) -> std::result::Result<Trajectory, String> {
    let wire: WireRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
    if wire.v != SCHEMA_VERSION {
        return Err(format!("unsupported schema version {}", wire.v));
    }
    let t = Trajectory {
        problem_id: wire.problem_id,
        step: wire.step,
        tokens: wire.tokens,
        full_text: wire.full_text,
        reward: wire.reward,
        correct: wire.correct,
    };
    t.validate()?;
    Ok(t)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkippedLine {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub trajectories: Vec<Trajectory>,
    /// Lines dropped in lenient mode.
    pub skipped: Vec<SkippedLine>,
}

/// Parses trace text. Line numbers in errors are 1-based; blank lines are ignored.
pub fn parse_corpus(text: &str, strict: bool) -> Result<Corpus> {
    let lines: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l))
        .collect();
    if strict && lines.is_empty() {
        return Err(Error::Trace("empty corpus".into()));
    }
    let parsed: Vec<(usize, std::result::Result<Trajectory, String>)> = lines
        .par_iter()
        .map(|&(n, l)| (n, parse_line(l)))
        .collect();

    let mut corpus = Corpus::default();
    for (line, res) in parsed {
        match res {
            Ok(t) => corpus.trajectories.push(t),
            Err(reason) if strict => return Err(Error::Malformed { line, reason }),
            Err(reason) => corpus.skipped.push(SkippedLine { line, reason }),
        }
    }
    Ok(corpus)
}

pub fn load_corpus(path: impl AsRef<Path>, strict: bool) -> Result<Corpus> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text, strict)
}

pub fn write_corpus(path: impl AsRef<Path>, trajectories: &[Trajectory]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for t in trajectories {
        writeln!(w, "{}", to_line(t)).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Streams records one at a time; used by tools that should not hold a whole
/// corpus in memory.
pub fn read_lines(
    path: impl AsRef<Path>,
) -> Result<impl Iterator<Item = (usize, std::result::Result<Trajectory, String>)>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(BufReader::new(file)
        .lines()
        .enumerate()
        .filter_map(|(i, l)| match l {
            Ok(l) if l.trim().is_empty() => None,
            Ok(l) => Some((i + 1, parse_line(&l))),
            Err(e) => Some((i + 1, Err(e.to_string()))),
        }))
}

#[derive(Debug, Clone, Default)]
pub struct Grouping {
    pub groups: Vec<RolloutGroup>,
    /// Trajectories whose (problem_id, step) had no partner.
    pub singletons: Vec<Trajectory>,
}

/// Partitions trajectories by `(problem_id, step)`; groups come out ordered by
/// step, then problem id, with members in input order.
pub fn group_rollouts(trajectories: &[Trajectory]) -> Grouping {
    let mut buckets: BTreeMap<(u64, &str), Vec<&Trajectory>> = BTreeMap::new();
    for t in trajectories {
        buckets.entry((t.step, &t.problem_id)).or_default().push(t);
    }
    let mut out = Grouping::default();
    for (_, members) in buckets {
        if members.len() == 1 {
            out.singletons.push(members[0].clone());
        } else {
            let trajs = members.into_iter().cloned().collect();
            out.groups
                .push(RolloutGroup::new(trajs).expect("bucket shares id and step"));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(tokens: &str, full_text: &str) -> String {
        format!(
            r#"{{"v":1,"problem_id":"p","step":0,"reward":1.0,"correct":true,"full_text":{full_text},"tokens":{tokens}}}"#
        )
    }

    #[test]
    fn parses_well_formed_record() {
        let l = line(
            r#"[{"text":"a","logprob":-0.1},{"text":" b","logprob":-0.2,"entropy":0.5},{"text":" c","logprob":0.0}]"#,
            r#""a b c""#,
        );
        let c = parse_corpus(&l, true).unwrap();
        assert_eq!(c.trajectories.len(), 1);
        assert_eq!(c.trajectories[0].tokens.len(), 3);
        assert_eq!(c.trajectories[0].tokens[1].entropy, Some(0.5));
    }

    #[test]
    fn positive_logprob_is_rejected_with_line() {
        let l = line(r#"[{"text":"a","logprob":0.1}]"#, r#""a""#);
        let err = parse_corpus(&l, true).unwrap_err();
        assert_eq!(err.to_string(), "trace: logprob > 0 at line 1");
    }

    #[test]
    fn concatenation_mismatch_is_rejected() {
        let l = line(r#"[{"text":"a","logprob":-0.1}]"#, r#""ab""#);
        let err = parse_corpus(&l, true).unwrap_err();
        assert!(err.to_string().contains("concatenation mismatch"), "{err}");
    }

    #[test]
    fn lenient_mode_skips_and_counts() {
        let good = line(r#"[{"text":"a","logprob":-0.1}]"#, r#""a""#);
        let bad = line(r#"[{"text":"a","logprob":0.5}]"#, r#""a""#);
        let text = format!("{good}\n{bad}\n{{\"v\":1}}\n{good}\n");
        let c = parse_corpus(&text, false).unwrap();
        assert_eq!(c.trajectories.len(), 2);
        assert_eq!(c.skipped.len(), 2);
        assert_eq!(c.skipped[0].line, 2);
        assert!(c.skipped[1].reason.contains("missing field"));
        assert!(parse_corpus(&text, true).is_err());
    }

    #[test]
    fn empty_file_errors_only_in_strict_mode() {
        assert!(parse_corpus("", true).is_err());
        assert!(parse_corpus("\n", false).unwrap().trajectories.is_empty());
    }

    #[test]
    fn wrong_schema_version_and_unknown_fields() {
        let l = r#"{"v":2,"problem_id":"p","step":0,"reward":0,"correct":false,"full_text":"","tokens":[]}"#;
        assert!(parse_corpus(l, true).is_err());
        let l = r#"{"v":1,"extra":[1,2],"problem_id":"p","step":0,"reward":0,"correct":false,"full_text":"","tokens":[]}"#;
        assert_eq!(parse_corpus(l, true).unwrap().trajectories.len(), 1);
    }

    #[test]
    fn topk_must_be_sorted() {
        let l = line(
            r#"[{"text":"a","logprob":-0.1,"topk":[["a",-0.5],["b",-0.1]]}]"#,
            r#""a""#,
        );
        assert!(parse_corpus(&l, true).is_err());
    }

    fn traj(pid: &str, step: u64) -> Trajectory {
        Trajectory::from_tokens(pid, step, vec![TokenRecord::new("x", -1.0)], 0.0, false)
    }

    #[test]
    fn grouping_examples() {
        let g = group_rollouts(&[traj("a", 0), traj("a", 0), traj("a", 0), traj("a", 0)]);
        assert_eq!(g.groups.len(), 1);
        assert_eq!(g.groups[0].size(), 4);

        let g = group_rollouts(&[traj("a", 0), traj("b", 0), traj("a", 0), traj("b", 0)]);
        assert_eq!(g.groups.len(), 2);
        assert!(g.groups.iter().all(|g| g.size() == 2));

        let g = group_rollouts(&[traj("a", 0)]);
        assert!(g.groups.is_empty());
        assert_eq!(g.singletons.len(), 1);
    }

    #[test]
    fn token_spans_count_chars() {
        let t = Trajectory::from_tokens(
            "p",
            0,
            vec![TokenRecord::new("é", -0.1), TokenRecord::new(" ab", -0.1)],
            0.0,
            false,
        );
        assert_eq!(t.token_char_spans(), vec![(0, 1), (1, 4)]);
    }
}
