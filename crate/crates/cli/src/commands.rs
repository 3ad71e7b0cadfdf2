use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use hicra_core::classify::{classify as classify_one, SgMatcher};
use hicra_core::credit::{grpo_advantages_with, hicra_advantages, is_vanishing, AdvantageArray, GrpoOptions};
use hicra_core::judge::{error_breakdown, error_series, EndpointConfig, ErrorVerdict, FailureCase, HttpChatBackend, JudgeClient, VerdictCache};
use hicra_core::metrics::{compute_report, label_and_window, semantic_entropy_series, sensitivity_drop, GramKey, MetricsReport, ReportOptions};
use hicra_core::sg::{self, EmbeddingProvider, HashingEmbedder, HttpEmbedder, HttpEmbedderConfig, MinerConfig, PrecomputedEmbeddings, SgSet};
use hicra_core::sim::{two_phase_probe, Method, SimConfig, MIN_PROBE_POINTS};
use hicra_core::trace::{group_rollouts, load_corpus, to_line, Trajectory};
use serde_json::json;

use crate::config::{required, AdvantageConfig, ClassifyConfig, JudgeConfig, MetricsConfig, MineConfig};
use crate::{io_failure, AdvantageArgs, Cli, ClassifyArgs, Failure, JudgeArgs, MetricsArgs, MineArgs, SimulateArgs};

/// Environment variable holding the embeddings endpoint token.
pub const EMBED_TOKEN_ENV: &str = "HICRA_EMBED_TOKEN";

pub fn out_dir(cli: &Cli) -> Result<PathBuf, Failure> {
    fs::create_dir_all(&cli.out).map_err(|e| io_failure(&cli.out, e))?;
    Ok(cli.out.clone())
}

pub fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| io_failure(path, e))
}

fn corpus(cli: &Cli, path: &Path) -> Result<Vec<Trajectory>, Failure> {
    let c = load_corpus(path, cli.strict)?;
    for s in &c.skipped {
        eprintln!("warning: {}: skipped line {}: {}", path.display(), s.line, s.reason);
    }
    if c.trajectories.is_empty() {
        return Err(Failure::Validation(format!("trace: {}: no valid trajectories", path.display())));
    }
    Ok(c.trajectories)
}

fn sgset(path: Option<&PathBuf>) -> Result<SgSet, Failure> {
    match path {
        Some(p) => Ok(SgSet::load(p)?),
        None => Ok(sg::load_default_lexicon()),
    }
}

/// One CSV per series plus the whole report as JSON.
pub fn write_report(dir: &Path, file_name: &str, report: &MetricsReport) -> Result<(), Failure> {
    for s in &report.series {
        let p = dir.join(format!("{}.csv", s.name));
        s.save_csv(&p)?;
    }
    write(&dir.join(file_name), report.to_json())
}

fn check_unit_interval(name: &str, v: f64, module: &str) -> Result<(), Failure> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(Failure::Validation(format!("{module}: {name} must be in (0, 1), got {v}")))
    }
}

pub fn mine(cli: &Cli, a: &MineArgs, f: &MineConfig) -> Result<(), Failure> {
    let path = required(a.corpus.clone(), f.corpus.clone(), "corpus")?;
    let defaults = MinerConfig::default();
    let config = MinerConfig {
        n_min: a.n_min.or(f.n_min).unwrap_or(defaults.n_min),
        n_max: a.n_max.or(f.n_max).unwrap_or(defaults.n_max),
        tau: a.tau.or(f.tau).unwrap_or(defaults.tau),
        quantile: a.quantile.or(f.quantile).unwrap_or(defaults.quantile),
        min_document_frequency: a.min_df.or(f.min_df).unwrap_or(defaults.min_document_frequency),
    };
    if !(config.tau > 0.0 && config.tau <= 1.0) {
        return Err(Failure::Validation(format!("sg-miner: tau must be in (0, 1], got {}", config.tau)));
    }
    if !(config.quantile > 0.0 && config.quantile <= 1.0) {
        return Err(Failure::Validation(format!("sg-miner: quantile must be in (0, 1], got {}", config.quantile)));
    }
    let provider: Box<dyn EmbeddingProvider> = match (a.embeddings.as_ref().or(f.embeddings.as_ref()), a.embed_url.as_ref().or(f.embed_url.as_ref())) {
        (Some(_), Some(_)) => {
            return Err(Failure::Validation("sg-miner: give either embeddings or embed_url, not both".into()));
        }
        (Some(p), None) => Box::new(PrecomputedEmbeddings::load(p)?),
        (None, Some(url)) => {
            let mut c = HttpEmbedderConfig::new(url.clone());
            c.model = a.embed_model.clone().or(f.embed_model.clone());
            c.token = std::env::var(EMBED_TOKEN_ENV).ok();
            Box::new(HttpEmbedder::new(c))
        }
        (None, None) => {
            eprintln!("note: no embeddings configured; using the offline hashing embedder");
            Box::new(HashingEmbedder::default())
        }
    };
    let trajectories = corpus(cli, &path)?;
    let out = sg::mine(&trajectories, &config, provider.as_ref())?;
    let dir = out_dir(cli)?;
    out.sgset.save(dir.join("sgset.json"))?;
    SgSet::from_clusters(out.scored_clusters.clone(), 1.0)?.save(dir.join("clusters.json"))?;
    eprintln!(
        "mined {} grams into {} clusters; kept {} clusters ({} grams)",
        out.table.len(),
        out.scored_clusters.len(),
        out.sgset.clusters.len(),
        out.sgset.len()
    );
    Ok(())
}

pub fn classify(cli: &Cli, a: &ClassifyArgs, f: &ClassifyConfig) -> Result<(), Failure> {
    let path = required(a.corpus.clone(), f.corpus.clone(), "corpus")?;
    let set = sgset(a.sgset.as_ref().or(f.sgset.as_ref()))?;
    let matcher = SgMatcher::new(&set)?;
    let trajectories = corpus(cli, &path)?;
    let mut lines = String::new();
    let (mut planning, mut total) = (0, 0);
    for t in &trajectories {
        let (matches, mask) = classify_one(t, &matcher);
        planning += mask.planning_count();
        total += mask.len();
        let mut record: serde_json::Value = serde_json::from_str(&to_line(t)).expect("trace line is JSON");
        record["mask"] = json!(mask.labels.iter().map(|&p| p as u8).collect::<Vec<_>>());
        record["matches"] = json!(matches);
        lines.push_str(&record.to_string());
        lines.push('\n');
    }
    write(&out_dir(cli)?.join("annotated.jsonl"), lines)?;
    eprintln!("labeled {} trajectories: {planning} of {total} tokens are planning tokens", trajectories.len());
    Ok(())
}

fn parse_key(s: &str) -> Result<GramKey, Failure> {
    match s {
        "gram" => Ok(GramKey::Gram),
        "cluster" => Ok(GramKey::Cluster),
        other => Err(Failure::Validation(format!("metrics: key must be 'gram' or 'cluster', got '{other}'"))),
    }
}

pub fn metrics(cli: &Cli, a: &MetricsArgs, f: &MetricsConfig) -> Result<(), Failure> {
    let path = required(a.corpus.clone(), f.corpus.clone(), "corpus")?;
    let set = sgset(a.sgset.as_ref().or(f.sgset.as_ref()))?;
    let defaults = ReportOptions::default();
    let opts = ReportOptions {
        key: parse_key(a.key.as_deref().or(f.key.as_deref()).unwrap_or("gram"))?,
        follow_words: a.follow_words.or(f.follow_words).unwrap_or(defaults.follow_words),
        overlap_quantile: a.overlap_quantile.or(f.overlap_quantile).unwrap_or(defaults.overlap_quantile),
        pass_k: a.pass_k.clone().or(f.pass_k.clone()).unwrap_or(defaults.pass_k),
        smooth_width: a.smooth.or(f.smooth),
    };
    if opts.follow_words == 0 {
        return Err(Failure::Validation("metrics: follow_words must be at least 1".into()));
    }
    if opts.pass_k.contains(&0) {
        return Err(Failure::Validation("metrics: k must be at least 1".into()));
    }
    check_unit_interval("overlap_quantile", opts.overlap_quantile, "metrics")?;
    if opts.smooth_width == Some(0) {
        return Err(Failure::Validation("metrics: smoothing width must be at least 1".into()));
    }
    let rho = a.drop_rho.or(f.drop_rho);
    if let Some(r) = rho {
        if !(0.0..1.0).contains(&r) {
            return Err(Failure::Validation(format!("metrics: rho must be in [0, 1), got {r}")));
        }
    }

    let windows = label_and_window(corpus(cli, &path)?, &set)?;
    let mut report = compute_report(&windows, &set, &opts)?;
    if let Some(r) = rho {
        let dropped = sensitivity_drop(&set, r, cli.seed.unwrap_or(0))?;
        let mut s = semantic_entropy_series(&windows, &dropped, opts.key)?;
        s.name = "semantic_entropy_dropped".into();
        if let Some(full) = report.get("semantic_entropy") {
            if let Some(c) = pearson_on_shared(full.values(), s.values()) {
                report.scalars.insert("sensitivity_pearson".into(), c);
            }
        }
        report.series.push(s);
    }
    let dir = out_dir(cli)?;
    write_report(&dir, "report.json", &report)?;
    eprintln!("{} windows, {} series", windows.len(), report.series.len());
    Ok(())
}

fn pearson_on_shared(a: Vec<Option<f64>>, b: Vec<Option<f64>>) -> Option<f64> {
    let (x, y): (Vec<f64>, Vec<f64>) = a.into_iter().zip(b).filter_map(|(a, b)| Some((a?, b?))).unzip();
    if x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    (vx > 0.0 && vy > 0.0).then(|| cov / (vx * vy).sqrt())
}

pub fn advantage(cli: &Cli, a: &AdvantageArgs, f: &AdvantageConfig) -> Result<(), Failure> {
    let path = required(a.corpus.clone(), f.corpus.clone(), "corpus")?;
    let method = a.method.as_deref().or(f.method.as_deref()).unwrap_or("hicra");
    let alpha = a.alpha.or(f.alpha).unwrap_or(0.2);
    let hicra = match method {
        "hicra" => true,
        "grpo" => false,
        other => return Err(Failure::Validation(format!("credit: method must be 'grpo' or 'hicra', got '{other}'"))),
    };
    if hicra {
        check_unit_interval("alpha", alpha, "credit")?;
    }
    let options = GrpoOptions {
        std_normalize: a.std_normalize || f.std_normalize.unwrap_or(false),
    };
    let set = sgset(a.sgset.as_ref().or(f.sgset.as_ref()))?;
    let matcher = SgMatcher::new(&set)?;
    let grouping = group_rollouts(&corpus(cli, &path)?);
    if !grouping.singletons.is_empty() {
        eprintln!("note: {} trajectories without a group (size 1) skipped", grouping.singletons.len());
    }

    let mut lines = String::new();
    let mut vanishing = 0;
    for g in &grouping.groups {
        let rewards = g.rewards();
        vanishing += is_vanishing(&rewards) as usize;
        let counts: Vec<usize> = g.trajectories.iter().map(|t| t.tokens.len()).collect();
        let masks: Vec<_> = g.trajectories.iter().map(|t| classify_one(t, &matcher).1).collect();
        let raw = AdvantageArray::raw(grpo_advantages_with(&rewards, options)?, &counts)?;
        let adv = if hicra { hicra_advantages(&raw, &masks, alpha)? } else { raw };
        for (i, t) in g.trajectories.iter().enumerate() {
            let record = json!({
                "problem_id": t.problem_id,
                "step": t.step,
                "index": i,
                "reward": t.reward,
                "advantage": adv.per_trajectory[i],
                "mask": masks[i].labels.iter().map(|&p| p as u8).collect::<Vec<_>>(),
                "token_advantages": adv.per_token[i],
            });
            lines.push_str(&record.to_string());
            lines.push('\n');
        }
    }
    write(&out_dir(cli)?.join("advantages.jsonl"), lines)?;
    eprintln!("{} groups ({vanishing} with vanishing advantage)", grouping.groups.len());
    Ok(())
}

fn parse_method(s: &str) -> Result<Method, Failure> {
    match s {
        "grpo" => Ok(Method::Grpo),
        "hicra" => Ok(Method::Hicra),
        "entropy_reg" => Ok(Method::EntropyReg),
        other => Err(Failure::Validation(format!(
            "sim: method must be grpo, hicra or entropy_reg, got '{other}'"
        ))),
    }
}

pub fn simulate(cli: &Cli, a: &SimulateArgs, mut config: SimConfig) -> Result<(), Failure> {
    if let Some(m) = &a.method {
        config.train.method = parse_method(m)?;
    }
    if let Some(s) = cli.seed {
        config.train.seed = s;
    }
    let t = &mut config.train;
    t.steps = a.steps.unwrap_or(t.steps);
    t.alpha = a.alpha.unwrap_or(t.alpha);
    t.learning_rate = a.learning_rate.unwrap_or(t.learning_rate);
    t.entropy_coefficient = a.entropy_coefficient.unwrap_or(t.entropy_coefficient);
    config.env.exec_bias = a.exec_bias.unwrap_or(config.env.exec_bias);
    config.train.validate()?;

    let (env, out) = config.run()?;
    let dir = out_dir(cli)?;
    write_report(&dir, "series.json", &out.series)?;
    write(&dir.join("policy.json"), serde_json::to_string_pretty(&out.policy).expect("policy serializes"))?;
    write(&dir.join("env.json"), serde_json::to_string_pretty(&env).expect("env serializes"))?;
    write(&dir.join("config.json"), serde_json::to_string_pretty(&config).expect("config serializes"))?;
    if config.train.steps >= MIN_PROBE_POINTS {
        let probe = two_phase_probe(&out.series)?;
        write(&dir.join("probe.json"), serde_json::to_string_pretty(&probe).expect("probe serializes"))?;
        eprintln!(
            "{}: phase 1 {}, phase 2 {}, crossover {:?}",
            config.train.method.as_str(),
            probe.phase1_detected,
            probe.phase2_detected,
            probe.crossover_step
        );
    }
    Ok(())
}

pub fn judge(cli: &Cli, a: &JudgeArgs, f: &JudgeConfig) -> Result<(), Failure> {
    let path = required(a.cases.clone(), f.cases.clone(), "cases")?;
    let text = fs::read_to_string(&path)
        .map_err(|e| Failure::Runtime(format!("judge: cannot read {}: {e}", path.display())))?;
    let mut cases = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        match serde_json::from_str::<FailureCase>(line) {
            Ok(c) => cases.push(c),
            Err(e) if cli.strict => {
                return Err(Failure::Validation(format!("judge: {}: line {}: {e}", path.display(), i + 1)));
            }
            Err(e) => eprintln!("warning: {}: skipped line {}: {e}", path.display(), i + 1),
        }
    }
    if cases.is_empty() {
        return Err(Failure::Validation(format!("judge: {}: no cases", path.display())));
    }
    let defaults = EndpointConfig::default();
    let endpoint = EndpointConfig {
        url: a.url.clone().or(f.url.clone()).unwrap_or(defaults.url),
        model: a.model.clone().or(f.model.clone()).unwrap_or(defaults.model),
        token: None,
        temperature: f.temperature.unwrap_or(defaults.temperature),
        timeout_secs: f.timeout_secs.unwrap_or(defaults.timeout_secs),
    };
    let dir = out_dir(cli)?;
    let cache_path = a.cache.clone().or(f.cache.clone()).unwrap_or_else(|| dir.join("judge_cache.json"));
    let mut client = JudgeClient::new(HttpChatBackend::new(endpoint)).with_cache(VerdictCache::open(&cache_path)?);
    if let Some(r) = f.retries {
        client.retries = r;
    }
    if let Some(c) = f.concurrency.or(cli.threads) {
        client.concurrency = c.max(1);
    }

    let results = client.classify_batch(&cases);
    client.cache().save()?;
    let mut by_step: BTreeMap<u64, Vec<ErrorVerdict>> = BTreeMap::new();
    let mut lines = String::new();
    let mut failures = 0;
    for (c, r) in cases.iter().zip(results) {
        let record = match r {
            Ok(v) => {
                let rec = json!({"step": c.step, "id": c.id, "choice": v.choice, "category": v.category, "response": v.raw_response});
                by_step.entry(c.step).or_default().push(v);
                rec
            }
            Err(e) => {
                failures += 1;
                json!({"step": c.step, "id": c.id, "error": e.to_string()})
            }
        };
        lines.push_str(&record.to_string());
        lines.push('\n');
    }
    write(&dir.join("verdicts.jsonl"), lines)?;
    let (planning, others) = error_series(&by_step)?;
    let mut report = MetricsReport {
        series: vec![planning, others],
        ..Default::default()
    };
    report.series.extend(error_breakdown(&by_step)?);
    write_report(&dir, "judge_report.json", &report)?;
    if failures > 0 {
        return Err(Failure::Runtime(format!("judge: {failures} of {} cases failed", cases.len())));
    }
    Ok(())
}
