//! Synthetic hierarchical-reasoning environment and tabular trainer.
//!
//! Each episode is one planning symbol (a strategy) followed by `L`
//! execution symbols. Reward is 1 only when the strategy is one of the task's
//! correct strategies and every execution symbol is correct. The policy is a
//! table of softmax logits: one planning row per task and one execution row
//! per (task, position).

use std::collections::{HashMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classify::TokenClassMask;
use crate::credit::{self, AdvantageArray, ClipRange};
use crate::error::{Error, Result};
use crate::metrics::{shannon_bits, MetricSeries, MetricsReport, Unit};
use crate::trace::{RolloutGroup, TokenRecord, Trajectory};

/// Per-step series produced by [`train`].
pub type SeriesBundle = MetricsReport;

pub const SERIES_REWARD: &str = "reward";
pub const SERIES_EXPECTED_REWARD: &str = "expected_reward";
pub const SERIES_EXEC_ENTROPY: &str = "exec_entropy";
pub const SERIES_PLANNING_ENTROPY: &str = "planning_entropy";
pub const SERIES_SEMANTIC_ENTROPY: &str = "semantic_entropy";
pub const SERIES_LENGTH: &str = "length";
pub const SERIES_VANISHING: &str = "vanishing_advantage";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub num_tasks: usize,
    pub num_strategies: usize,
    pub strategies_per_task: Vec<Vec<usize>>,
    pub exec_len: usize,
    pub exec_branching: usize,
    /// `correct_exec[task][position]`.
    pub correct_exec: Vec<Vec<usize>>,
}

impl EnvSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Sim(m));
        if self.num_tasks == 0 {
            return bad("need at least one task".into());
        }
        if self.num_strategies < 2 || self.exec_branching < 2 {
            return bad(format!(
                "need P >= 2 and E >= 2, got P = {}, E = {}",
                self.num_strategies, self.exec_branching
            ));
        }
        if self.strategies_per_task.len() != self.num_tasks || self.correct_exec.len() != self.num_tasks {
            return bad("per-task tables do not cover every task".into());
        }
        for (t, s) in self.strategies_per_task.iter().enumerate() {
            if s.is_empty() || s.iter().any(|&x| x >= self.num_strategies) {
                return bad(format!("task {t}: invalid correct-strategy set {s:?}"));
            }
        }
        for (t, e) in self.correct_exec.iter().enumerate() {
            if e.len() != self.exec_len || e.iter().any(|&x| x >= self.exec_branching) {
                return bad(format!("task {t}: invalid execution answer {e:?}"));
            }
        }
        Ok(())
    }

    pub fn is_correct_strategy(&self, task: usize, strategy: usize) -> bool {
        self.strategies_per_task[task].contains(&strategy)
    }

    pub fn reward(&self, task: usize, actions: &Actions) -> f64 {
        let ok = self.is_correct_strategy(task, actions.strategy)
            && actions.exec.iter().zip(&self.correct_exec[task]).all(|(a, b)| a == b);
        if ok {
            1.0
        } else {
            0.0
        }
    }
}

/// Which execution symbol the initial bias favours.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BiasTarget {
    Correct,
    Wrong,
}

/// Parameters for generating an environment and its initial policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub num_tasks: usize,
    pub num_strategies: usize,
    pub strategies_per_task: usize,
    pub exec_len: usize,
    pub exec_branching: usize,
    /// Initial logit bonus on one execution symbol per (task, position).
    pub exec_bias: f64,
    pub bias_target: BiasTarget,
    /// Initial logit bonus on strategy 0 in every task: a shared habitual
    /// strategy the policy starts out preferring.
    pub habit_strength: f64,
    /// Number of tasks (the first ones) for which the habitual strategy is
    /// correct. The other tasks' correct strategies exclude it.
    pub routine_tasks: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            num_tasks: 8,
            num_strategies: 8,
            strategies_per_task: 3,
            exec_len: 4,
            exec_branching: 4,
            exec_bias: 1.0,
            bias_target: BiasTarget::Correct,
            habit_strength: 4.0,
            routine_tasks: 5,
        }
    }
}

impl EnvConfig {
    /// Draws the environment and initial policy from `seed`.
    pub fn build(&self, seed: u64) -> Result<(EnvSpec, PolicyTable)> {
        if self.strategies_per_task == 0 || self.strategies_per_task > self.num_strategies {
            return Err(Error::Sim(format!(
                "strategies_per_task must be in 1..={}, got {}",
                self.num_strategies, self.strategies_per_task
            )));
        }
        if self.routine_tasks > self.num_tasks || self.strategies_per_task >= self.num_strategies {
            return Err(Error::Sim(format!(
                "need routine_tasks <= T and strategies_per_task < P, got {} and {}",
                self.routine_tasks, self.strategies_per_task
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0x454e_56]));
        let strategies_per_task = (0..self.num_tasks)
            .map(|t| {
                let routine = t < self.routine_tasks;
                let others = self.strategies_per_task - usize::from(routine);
                let mut s: Vec<usize> = rand::seq::index::sample(&mut rng, self.num_strategies - 1, others)
                    .into_iter()
                    .map(|i| i + 1)
                    .collect();
                if routine {
                    s.push(0);
                }
                s.sort_unstable();
                s
            })
            .collect();
        let correct_exec: Vec<Vec<usize>> = (0..self.num_tasks)
            .map(|_| (0..self.exec_len).map(|_| rng.random_range(0..self.exec_branching.max(1))).collect())
            .collect();
        let env = EnvSpec {
            num_tasks: self.num_tasks,
            num_strategies: self.num_strategies,
            strategies_per_task,
            exec_len: self.exec_len,
            exec_branching: self.exec_branching,
            correct_exec,
        };
        env.validate()?;

        let mut policy = PolicyTable::zeros(&env);
        for t in 0..env.num_tasks {
            policy.planning_mut(t)[0] += self.habit_strength;
            for l in 0..env.exec_len {
                let correct = env.correct_exec[t][l];
                let target = match self.bias_target {
                    BiasTarget::Correct => correct,
                    BiasTarget::Wrong => {
                        let k = rng.random_range(0..env.exec_branching - 1);
                        if k >= correct {
                            k + 1
                        } else {
                            k
                        }
                    }
                };
                policy.execution_mut(t, l)[target] += self.exec_bias;
            }
        }
        Ok((env, policy))
    }
}

/// Softmax logits: `T` planning rows of width `P`, then `T * L` execution
/// rows of width `E`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyTable {
    pub num_tasks: usize,
    pub num_strategies: usize,
    pub exec_len: usize,
    pub exec_branching: usize,
    pub logits: Vec<f64>,
}

/// A row of the policy table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Context {
    Planning { task: usize },
    Execution { task: usize, position: usize },
}

impl PolicyTable {
    pub fn zeros(env: &EnvSpec) -> Self {
        let n = env.num_tasks * env.num_strategies + env.num_tasks * env.exec_len * env.exec_branching;
        PolicyTable {
            num_tasks: env.num_tasks,
            num_strategies: env.num_strategies,
            exec_len: env.exec_len,
            exec_branching: env.exec_branching,
            logits: vec![0.0; n],
        }
    }

    pub fn row_range(&self, ctx: Context) -> std::ops::Range<usize> {
        match ctx {
            Context::Planning { task } => {
                let s = task * self.num_strategies;
                s..s + self.num_strategies
            }
            Context::Execution { task, position } => {
                let s = self.num_tasks * self.num_strategies
                    + (task * self.exec_len + position) * self.exec_branching;
                s..s + self.exec_branching
            }
        }
    }

    pub fn row(&self, ctx: Context) -> &[f64] {
        &self.logits[self.row_range(ctx)]
    }

    pub fn planning_mut(&mut self, task: usize) -> &mut [f64] {
        let r = self.row_range(Context::Planning { task });
        &mut self.logits[r]
    }

    pub fn execution_mut(&mut self, task: usize, position: usize) -> &mut [f64] {
        let r = self.row_range(Context::Execution { task, position });
        &mut self.logits[r]
    }

    pub fn probs(&self, ctx: Context) -> Vec<f64> {
        softmax(self.row(ctx))
    }

    pub fn contexts(&self) -> impl Iterator<Item = Context> + '_ {
        let planning = (0..self.num_tasks).map(|task| Context::Planning { task });
        let exec = (0..self.num_tasks)
            .flat_map(move |task| (0..self.exec_len).map(move |position| Context::Execution { task, position }));
        planning.chain(exec)
    }

    /// Mean policy entropy in bits over all planning rows.
    pub fn planning_entropy_bits(&self) -> f64 {
        mean((0..self.num_tasks).map(|task| entropy_nats(&self.probs(Context::Planning { task }))))
            / std::f64::consts::LN_2
    }

    /// Mean policy entropy in bits over all execution rows; `None` when there
    /// are none.
    pub fn exec_entropy_bits(&self) -> Option<f64> {
        if self.exec_len == 0 {
            return None;
        }
        let it = self
            .contexts()
            .filter(|c| matches!(c, Context::Execution { .. }))
            .map(|c| entropy_nats(&self.probs(c)));
        Some(mean(it) / std::f64::consts::LN_2)
    }

    /// Exact success probability averaged over tasks.
    pub fn expected_reward(&self, env: &EnvSpec) -> f64 {
        mean((0..env.num_tasks).map(|task| {
            let plan = self.probs(Context::Planning { task });
            let strategy: f64 = env.strategies_per_task[task].iter().map(|&s| plan[s]).sum();
            let exec: f64 = (0..env.exec_len)
                .map(|position| self.probs(Context::Execution { task, position })[env.correct_exec[task][position]])
                .product();
            strategy * exec
        }))
    }

    fn check_finite(&self) -> Result<()> {
        if let Some(i) = self.logits.iter().position(|x| !x.is_finite()) {
            return Err(Error::Sim(format!("non-finite logit at index {i}")));
        }
        Ok(())
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

pub fn entropy_nats(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}

/// splitmix64 chained over `parts`.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9e37_79b9_7f4a_7c15u64;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Actions {
    pub strategy: usize,
    pub exec: Vec<usize>,
}

/// A group of sampled episodes for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct SimGroup {
    pub task: usize,
    pub group: RolloutGroup,
    pub actions: Vec<Actions>,
    pub masks: Vec<TokenClassMask>,
}

impl SimGroup {
    /// (context, action) per token, in trajectory order.
    pub fn token_contexts(&self, i: usize) -> Vec<(Context, usize)> {
        let a = &self.actions[i];
        std::iter::once((Context::Planning { task: self.task }, a.strategy))
            .chain(a.exec.iter().enumerate().map(|(position, &x)| {
                (
                    Context::Execution {
                        task: self.task,
                        position,
                    },
                    x,
                )
            }))
            .collect()
    }
}

fn sample_index(p: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &x) in p.iter().enumerate() {
        acc += x;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

/// Samples `g` episodes of `task`; episode `i` uses its own stream derived
/// from `(seed, i)`.
pub fn rollout(env: &EnvSpec, policy: &PolicyTable, task: usize, g: usize, seed: u64) -> Result<SimGroup> {
    if task >= env.num_tasks {
        return Err(Error::Sim(format!("task {task} out of range")));
    }
    let plan_p = policy.probs(Context::Planning { task });
    let exec_p: Vec<Vec<f64>> = (0..env.exec_len)
        .map(|position| policy.probs(Context::Execution { task, position }))
        .collect();
    let plan_h = entropy_nats(&plan_p);
    let exec_h: Vec<f64> = exec_p.iter().map(|p| entropy_nats(p)).collect();

    let mut trajectories = Vec::with_capacity(g);
    let mut actions = Vec::with_capacity(g);
    for i in 0..g {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, i as u64]));
        let strategy = sample_index(&plan_p, &mut rng);
        let exec: Vec<usize> = exec_p.iter().map(|p| sample_index(p, &mut rng)).collect();
        let mut tokens = vec![TokenRecord::new(format!("<s{strategy}>"), plan_p[strategy].ln()).with_entropy(plan_h)];
        for (l, &x) in exec.iter().enumerate() {
            tokens.push(TokenRecord::new(format!(" x{x}"), exec_p[l][x].ln()).with_entropy(exec_h[l]));
        }
        let a = Actions { strategy, exec };
        let reward = env.reward(task, &a);
        trajectories.push(Trajectory::from_tokens(format!("task-{task}"), 0, tokens, reward, reward > 0.0));
        actions.push(a);
    }
    let masks = (0..g)
        .map(|_| {
            let mut labels = vec![false; env.exec_len + 1];
            labels[0] = true;
            TokenClassMask { labels }
        })
        .collect();
    Ok(SimGroup {
        task,
        group: RolloutGroup::new(trajectories)?,
        actions,
        masks,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Grpo,
    Hicra,
    EntropyReg,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Grpo => "grpo",
            Method::Hicra => "hicra",
            Method::EntropyReg => "entropy_reg",
        }
    }
}

/// How per-token gradient terms are combined within a group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Mean over all tokens of the group.
    TokenMean,
    /// Mean over each trajectory's tokens, summed over the group.
    SequenceMean,
    /// Sum over all tokens of the group.
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub steps: usize,
    pub group_size: usize,
    pub learning_rate: f64,
    pub alpha: f64,
    pub entropy_coefficient: f64,
    pub clip: Option<ClipRange>,
    pub update_epochs: usize,
    pub seed: u64,
    pub filter_degenerate: bool,
    pub aggregation: Aggregation,
    /// Rollouts in the trailing strategy-usage window.
    pub semantic_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::Grpo,
            steps: 3000,
            group_size: 8,
            learning_rate: 0.5,
            alpha: 0.2,
            entropy_coefficient: 0.01,
            clip: None,
            update_epochs: 1,
            seed: 0,
            filter_degenerate: false,
            aggregation: Aggregation::SequenceMean,
            semantic_window: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Sim(m));
        if self.steps == 0 {
            return bad("steps must be positive".into());
        }
        if self.group_size < 2 {
            return bad(format!("group size must be at least 2, got {}", self.group_size));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning rate must be non-negative, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return bad(format!("alpha must be in [0, 1), got {}", self.alpha));
        }
        if !(self.entropy_coefficient >= 0.0) {
            return bad("entropy coefficient must be non-negative".into());
        }
        if self.update_epochs == 0 {
            return bad("update_epochs must be positive".into());
        }
        if self.semantic_window == 0 {
            return bad("semantic window must be positive".into());
        }
        Ok(())
    }
}

/// Per-token advantages for a group under `method`.
pub fn group_advantages(group: &SimGroup, method: Method, alpha: f64) -> Result<AdvantageArray> {
    let rewards = group.group.rewards();
    let counts: Vec<usize> = group.group.trajectories.iter().map(Trajectory::len).collect();
    let raw = AdvantageArray::raw(credit::grpo_advantages(&rewards)?, &counts)?;
    match method {
        Method::Hicra => credit::hicra_unchecked(&raw, &group.masks, alpha),
        Method::Grpo | Method::EntropyReg => Ok(raw),
    }
}

fn aggregation_scale(group: &SimGroup, i: usize, aggregation: Aggregation) -> f64 {
    match aggregation {
        Aggregation::TokenMean => {
            let n: usize = group.group.trajectories.iter().map(Trajectory::len).sum();
            1.0 / n as f64
        }
        Aggregation::SequenceMean => 1.0 / group.group.trajectories[i].len() as f64,
        Aggregation::Sum => 1.0,
    }
}

/// Surrogate `sum_tokens scale * A * log pi(a | ctx)` whose gradient is the
/// policy gradient.
pub fn surrogate_objective(policy: &PolicyTable, group: &SimGroup, adv: &AdvantageArray, aggregation: Aggregation) -> f64 {
    let mut total = 0.0;
    for (i, a_tok) in adv.per_token.iter().enumerate() {
        let scale = aggregation_scale(group, i, aggregation);
        for ((ctx, action), a) in group.token_contexts(i).into_iter().zip(a_tok) {
            total += scale * a * policy.probs(ctx)[action].ln();
        }
    }
    total
}

/// Gradient of [`surrogate_objective`] with respect to every logit.
pub fn surrogate_gradient(policy: &PolicyTable, group: &SimGroup, adv: &AdvantageArray, aggregation: Aggregation) -> Vec<f64> {
    let mut grad = vec![0.0; policy.logits.len()];
    accumulate_gradient(policy, group, adv, aggregation, None, 0.0, None, &mut grad);
    grad
}

/// Dense per-token score vectors, for cross-checking against
/// [`credit::policy_gradient`].
pub fn score_vectors(policy: &PolicyTable, group: &SimGroup) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for i in 0..group.actions.len() {
        for (ctx, action) in group.token_contexts(i) {
            let mut s = vec![0.0; policy.logits.len()];
            let r = policy.row_range(ctx);
            for (k, p) in policy.probs(ctx).into_iter().enumerate() {
                s[r.start + k] = if k == action { 1.0 } else { 0.0 } - p;
            }
            out.push(s);
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn accumulate_gradient(
    policy: &PolicyTable,
    group: &SimGroup,
    adv: &AdvantageArray,
    aggregation: Aggregation,
    old_logprobs: Option<&[Vec<f64>]>,
    entropy_coefficient: f64,
    clip: Option<ClipRange>,
    grad: &mut [f64],
) {
    let mut cache: HashMap<Context, (Vec<f64>, f64)> = HashMap::new();
    for (i, a_tok) in adv.per_token.iter().enumerate() {
        let scale = aggregation_scale(group, i, aggregation);
        for (t, ((ctx, action), &a)) in group.token_contexts(i).into_iter().zip(a_tok).enumerate() {
            let (p, h) = cache.entry(ctx).or_insert_with(|| {
                let p = policy.probs(ctx);
                let h = entropy_nats(&p);
                (p, h)
            });
            let weight = match old_logprobs {
                None => a,
                Some(old) => {
                    let ratio = (p[action].ln() - old[i][t]).exp();
                    match clip {
                        Some(c) => credit::clipped_surrogate_log_grad(ratio, a, c),
                        None => ratio * a,
                    }
                }
            };
            let r = policy.row_range(ctx);
            for (k, &pk) in p.iter().enumerate() {
                let onehot = if k == action { 1.0 } else { 0.0 };
                let mut g = weight * (onehot - pk);
                if entropy_coefficient > 0.0 && pk > 0.0 {
                    g -= entropy_coefficient * pk * (pk.ln() + *h);
                }
                grad[r.start + k] += scale * g;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub series: SeriesBundle,
    pub policy: PolicyTable,
}

/// Runs `config.steps` updates from `policy`. Each step samples one task
/// uniformly, rolls out a group, and takes one gradient-ascent step per
/// update epoch.
pub fn train(env: &EnvSpec, mut policy: PolicyTable, config: &TrainConfig) -> Result<TrainOutput> {
    env.validate()?;
    config.validate()?;
    if policy.logits.len() != PolicyTable::zeros(env).logits.len() {
        return Err(Error::Sim("policy table does not match the environment".into()));
    }
    policy
        .check_finite()
        .map_err(|e| Error::Sim(format!("initial policy: {e}")))?;
    let mut reward = MetricSeries::new(SERIES_REWARD, Unit::Fraction);
    let mut expected = MetricSeries::new(SERIES_EXPECTED_REWARD, Unit::Fraction);
    let mut exec_h = MetricSeries::new(SERIES_EXEC_ENTROPY, Unit::Bits);
    let mut plan_h = MetricSeries::new(SERIES_PLANNING_ENTROPY, Unit::Bits);
    let mut sem_h = MetricSeries::new(SERIES_SEMANTIC_ENTROPY, Unit::Bits);
    let mut length = MetricSeries::new(SERIES_LENGTH, Unit::Tokens);
    let mut vanishing = MetricSeries::new(SERIES_VANISHING, Unit::Fraction);
    let mut usage: VecDeque<usize> = VecDeque::with_capacity(config.semantic_window + config.group_size);
    let mut usage_counts = vec![0u64; env.num_strategies];
    let entropy_coefficient = match config.method {
        Method::EntropyReg => config.entropy_coefficient,
        _ => 0.0,
    };
    let mut grad = vec![0.0; policy.logits.len()];

    for step in 0..config.steps {
        let s = step as u64;
        let task = ChaCha8Rng::seed_from_u64(derive_seed(&[config.seed, s, u64::MAX])).random_range(0..env.num_tasks);
        let group = rollout(env, &policy, task, config.group_size, derive_seed(&[config.seed, s]))?;
        let rewards = group.group.rewards();
        let degenerate = credit::is_vanishing(&rewards);

        if !(config.filter_degenerate && degenerate) && config.learning_rate > 0.0 {
            let adv = group_advantages(&group, config.method, config.alpha)?;
            let old: Vec<Vec<f64>> = group
                .group
                .trajectories
                .iter()
                .map(|t| t.tokens.iter().map(|k| k.logprob).collect())
                .collect();
            for epoch in 0..config.update_epochs {
                grad.iter_mut().for_each(|g| *g = 0.0);
                let old_lp = (epoch > 0).then_some(old.as_slice());
                accumulate_gradient(&policy, &group, &adv, config.aggregation, old_lp, entropy_coefficient, config.clip, &mut grad);
                for (w, g) in policy.logits.iter_mut().zip(&grad) {
                    *w += config.learning_rate * g;
                }
                policy.check_finite().map_err(|e| {
                    Error::Sim(format!("{} diverged at step {step} (task {task}): {e}", config.method.as_str()))
                })?;
            }
        }

        for a in &group.actions {
            usage.push_back(a.strategy);
            usage_counts[a.strategy] += 1;
        }
        while usage.len() > config.semantic_window {
            let old = usage.pop_front().expect("non-empty");
            usage_counts[old] -= 1;
        }

        reward.push(s, Some(rewards.iter().sum::<f64>() / rewards.len() as f64))?;
        expected.push(s, Some(policy.expected_reward(env)))?;
        exec_h.push(s, policy.exec_entropy_bits())?;
        plan_h.push(s, Some(policy.planning_entropy_bits()))?;
        sem_h.push(s, shannon_bits(usage_counts.iter().copied()))?;
        length.push(s, Some((env.exec_len + 1) as f64))?;
        vanishing.push(s, Some(if degenerate { 1.0 } else { 0.0 }))?;
    }
    Ok(TrainOutput {
        series: SeriesBundle {
            series: vec![reward, expected, exec_h, plan_h, sem_h, length, vanishing],
            scalars: Default::default(),
        },
        policy,
    })
}

/// Environment plus trainer settings, loadable from a config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub env: EnvConfig,
    pub train: TrainConfig,
}

impl SimConfig {
    /// Builds the environment from the training seed and trains.
    pub fn run(&self) -> Result<(EnvSpec, TrainOutput)> {
        let (env, policy) = self.env.build(self.train.seed)?;
        let out = train(&env, policy, &self.train)?;
        Ok((env, out))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseProbe {
    pub phase1_detected: bool,
    pub phase2_detected: bool,
    pub crossover_step: Option<u64>,
}

pub const MIN_PROBE_POINTS: usize = 30;

fn trailing_mean(values: &[f64], width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for i in 0..values.len() {
        sum += values[i];
        if i >= width {
            sum -= values[i - width];
        }
        out.push(sum / (i + 1).min(width) as f64);
    }
    out
}

fn dense(bundle: &SeriesBundle, name: &str) -> Result<Vec<Option<f64>>> {
    bundle
        .get(name)
        .map(MetricSeries::values)
        .ok_or_else(|| Error::Sim(format!("series bundle lacks '{name}'")))
}

/// Detects the two training phases.
///
/// Phase one: execution entropy drops below half its initial value within
/// the first third of training; the first such step is the crossover.
/// Phase two: the smoothed strategy semantic entropy peaks after the
/// crossover (or after the start when there is none) and smoothed reward at
/// the peak exceeds smoothed reward at the crossover. Smoothing is a trailing
/// mean over `max(1, n / 20)` steps.
pub fn two_phase_probe(bundle: &SeriesBundle) -> Result<PhaseProbe> {
    let reward_s = bundle
        .get(SERIES_REWARD)
        .ok_or_else(|| Error::Sim(format!("series bundle lacks '{SERIES_REWARD}'")))?;
    let n = reward_s.len();
    if n < MIN_PROBE_POINTS {
        return Err(Error::Sim(format!(
            "series too short for the phase probe: {n} points (need {MIN_PROBE_POINTS})"
        )));
    }
    let steps = reward_s.steps();
    let exec = dense(bundle, SERIES_EXEC_ENTROPY)?;
    let sem = dense(bundle, SERIES_SEMANTIC_ENTROPY)?;
    let reward = dense(bundle, SERIES_REWARD)?;
    if exec.len() != n || sem.len() != n {
        return Err(Error::Sim("series lengths differ".into()));
    }

    let crossover = match exec.first().copied().flatten() {
        Some(h0) if h0 > 0.0 => exec.iter().position(|h| h.is_some_and(|h| h < 0.5 * h0)),
        _ => None,
    };
    let phase1 = crossover.is_some_and(|c| c < n / 3);

    let width = (n / 20).max(1);
    let fill = |v: &[Option<f64>]| -> Vec<f64> {
        let mut last = 0.0;
        v.iter()
            .map(|x| {
                if let Some(x) = x {
                    last = *x;
                }
                last
            })
            .collect()
    };
    let sem_s = trailing_mean(&fill(&sem), width);
    let rew_s = trailing_mean(&fill(&reward), width);
    let reference = crossover.unwrap_or(0);
    let peak = sem_s
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0;
    let phase2 = peak > reference && rew_s[peak] > rew_s[reference];

    Ok(PhaseProbe {
        phase1_detected: phase1,
        phase2_detected: phase2,
        crossover_step: crossover.map(|c| steps[c]),
    })
}

/// Largest drop of a non-overlapping `width`-step block mean below the
/// running maximum of earlier block means. Zero for a block-monotone series.
pub fn block_mean_max_dip(values: &[f64], width: usize) -> f64 {
    let mut best = f64::NEG_INFINITY;
    let mut dip: f64 = 0.0;
    for block in values.chunks_exact(width.max(1)) {
        let m = block.iter().sum::<f64>() / block.len() as f64;
        if best.is_finite() {
            dip = dip.max(best - m);
        }
        best = best.max(m);
    }
    dip
}

/// Relative error between the analytic surrogate gradient and central
/// finite differences with step `h`: `max_i |g_i - fd_i| / max(max_i |fd_i|, 1e-12)`.
pub fn gradient_check(policy: &PolicyTable, group: &SimGroup, adv: &AdvantageArray, aggregation: Aggregation, h: f64) -> f64 {
    let analytic = surrogate_gradient(policy, group, adv, aggregation);
    let mut p = policy.clone();
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for i in 0..p.logits.len() {
        let x = p.logits[i];
        p.logits[i] = x + h;
        let up = surrogate_objective(&p, group, adv, aggregation);
        p.logits[i] = x - h;
        let down = surrogate_objective(&p, group, adv, aggregation);
        p.logits[i] = x;
        let fd = (up - down) / (2.0 * h);
        num = num.max((analytic[i] - fd).abs());
        den = den.max(fd.abs());
    }
    num / den.max(1e-12)
}
