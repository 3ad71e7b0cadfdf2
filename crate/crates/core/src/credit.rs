//! Credit assignment.
//!
//! Group-relative advantages subtract the group's mean reward from each
//! trajectory's reward and broadcast the result to every token. The
//! hierarchy-aware variant adds `alpha * |A|` on planning tokens, which boosts
//! credit in successful trajectories and softens the penalty in failed ones.
//!
//! The second half of the module is the distribution-matching view of the
//! update: the advantage-reweighted target `pi_old * exp(A / beta) / Z` is
//! the maximiser of `E_pi[A] - beta * KL(pi || pi_old)`.

use crate::classify::TokenClassMask;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AdvantageKind {
    Raw,
    Hicra { alpha: f64 },
}

/// Per-trajectory advantages and their per-token expansion.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageArray {
    pub kind: AdvantageKind,
    pub per_trajectory: Vec<f64>,
    pub per_token: Vec<Vec<f64>>,
}

impl AdvantageArray {
    /// Broadcasts each trajectory advantage to its `token_counts[i]` tokens.
    pub fn raw(per_trajectory: Vec<f64>, token_counts: &[usize]) -> Result<Self> {
        if per_trajectory.len() != token_counts.len() {
            return Err(Error::Credit(format!(
                "{} advantages for {} trajectories",
                per_trajectory.len(),
                token_counts.len()
            )));
        }
        let per_token = per_trajectory
            .iter()
            .zip(token_counts)
            .map(|(&a, &n)| vec![a; n])
            .collect();
        Ok(AdvantageArray {
            kind: AdvantageKind::Raw,
            per_trajectory,
            per_token,
        })
    }

    pub fn flat_tokens(&self) -> Vec<f64> {
        self.per_token.iter().flatten().copied().collect()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GrpoOptions {
    /// Divide by the group's reward standard deviation. Off by default; the
    /// plain estimator only subtracts the mean.
    pub std_normalize: bool,
}

/// `A_i = R_i - mean(R)`.
pub fn grpo_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    grpo_advantages_with(rewards, GrpoOptions::default())
}

pub fn grpo_advantages_with(rewards: &[f64], options: GrpoOptions) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::Credit(format!(
            "group size must be at least 2, got {}",
            rewards.len()
        )));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::Credit("non-finite reward".into()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let mut adv: Vec<f64> = rewards.iter().map(|r| r - mean).collect();
    if options.std_normalize {
        let std = (adv.iter().map(|a| a * a).sum::<f64>() / n).sqrt();
        if std > 0.0 {
            adv.iter_mut().for_each(|a| *a /= std);
        }
    }
    Ok(adv)
}

/// True when every reward in the group is equal, so all advantages vanish.
pub fn is_vanishing(rewards: &[f64]) -> bool {
    rewards.windows(2).all(|w| w[0] == w[1])
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::Credit(format!("alpha must be in (0, 1), got {alpha}")))
    }
}

/// Hierarchy-aware advantage of a single token.
#[inline]
pub fn hicra_value(advantage: f64, planning: bool, alpha: f64) -> f64 {
    if planning {
        advantage + alpha * advantage.abs()
    } else {
        advantage
    }
}

/// Applies `A + alpha * |A|` to planning tokens; execution tokens keep `A`.
pub fn hicra_advantages(
    raw: &AdvantageArray,
    masks: &[TokenClassMask],
    alpha: f64,
) -> Result<AdvantageArray> {
    check_alpha(alpha)?;
    hicra_unchecked(raw, masks, alpha)
}

/// Same as [`hicra_advantages`] but accepts any `alpha >= 0`, including the
/// degenerate `alpha = 0`.
pub(crate) fn hicra_unchecked(
    raw: &AdvantageArray,
    masks: &[TokenClassMask],
    alpha: f64,
) -> Result<AdvantageArray> {
    if raw.kind != AdvantageKind::Raw {
        return Err(Error::Credit("expected raw advantages".into()));
    }
    if masks.len() != raw.per_token.len() {
        return Err(Error::Credit(format!(
            "{} masks for {} trajectories",
            masks.len(),
            raw.per_token.len()
        )));
    }
    let per_token = raw
        .per_token
        .iter()
        .zip(masks)
        .enumerate()
        .map(|(i, (adv, mask))| {
            if adv.len() != mask.len() {
                return Err(Error::Credit(format!(
                    "trajectory {i}: mask has {} labels for {} tokens",
                    mask.len(),
                    adv.len()
                )));
            }
            Ok(adv
                .iter()
                .zip(&mask.labels)
                .map(|(&a, &p)| hicra_value(a, p, alpha))
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AdvantageArray {
        kind: AdvantageKind::Hicra { alpha },
        per_trajectory: raw.per_trajectory.clone(),
        per_token,
    })
}

/// Mean over tokens of `advantage * score`, where each score is the gradient
/// of the token's log-probability.
pub fn policy_gradient(scores: &[Vec<f64>], advantages: &[f64]) -> Result<Vec<f64>> {
    if scores.len() != advantages.len() {
        return Err(Error::Credit(format!(
            "{} score vectors for {} advantages",
            scores.len(),
            advantages.len()
        )));
    }
    let Some(dim) = scores.first().map(Vec::len) else {
        return Err(Error::Credit("no tokens".into()));
    };
    let mut grad = vec![0.0; dim];
    for (s, &a) in scores.iter().zip(advantages) {
        if s.len() != dim {
            return Err(Error::Credit(format!(
                "score vector of length {} (expected {dim})",
                s.len()
            )));
        }
        grad.iter_mut().zip(s).for_each(|(g, x)| *g += a * x);
    }
    let n = scores.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok(grad)
}

/// Asymmetric clip range for the ratio `pi / pi_old`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ClipRange {
    pub low: f64,
    pub high: f64,
}

impl Default for ClipRange {
    fn default() -> Self {
        ClipRange {
            low: 0.2,
            high: 0.28,
        }
    }
}

/// `min(r * A, clip(r, 1 - low, 1 + high) * A)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip: ClipRange) -> f64 {
    let clipped = ratio.clamp(1.0 - clip.low, 1.0 + clip.high);
    (ratio * advantage).min(clipped * advantage)
}

/// Derivative of [`clipped_surrogate`] with respect to the log-ratio: `r * A`
/// when the unclipped branch is active, zero otherwise.
pub fn clipped_surrogate_log_grad(ratio: f64, advantage: f64, clip: ClipRange) -> f64 {
    let clipped = ratio.clamp(1.0 - clip.low, 1.0 + clip.high);
    if ratio * advantage <= clipped * advantage {
        ratio * advantage
    } else {
        0.0
    }
}

const DISTRIBUTION_TOL: f64 = 1e-9;

fn check_distribution(p: &[f64], name: &str) -> Result<()> {
    if p.is_empty() {
        return Err(Error::Credit(format!("{name} is empty")));
    }
    if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::Credit(format!("{name} has negative or non-finite entries")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > DISTRIBUTION_TOL {
        return Err(Error::Credit(format!("{name} sums to {s}, not 1")));
    }
    Ok(())
}

/// `pi_old * exp(A / beta) / Z` with its log-partition.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetDistribution {
    pub probabilities: Vec<f64>,
    pub beta: f64,
    pub log_partition: f64,
}

pub fn target_distribution(pi_old: &[f64], adv: &[f64], beta: f64) -> Result<TargetDistribution> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::Credit(format!("beta must be positive, got {beta}")));
    }
    check_distribution(pi_old, "pi_old")?;
    if adv.len() != pi_old.len() {
        return Err(Error::Credit(format!(
            "{} advantages for {} actions",
            adv.len(),
            pi_old.len()
        )));
    }
    let shift = adv.iter().fold(f64::NEG_INFINITY, |m, &a| m.max(a)) / beta;
    let weights: Vec<f64> = pi_old
        .iter()
        .zip(adv)
        .map(|(&p, &a)| p * (a / beta - shift).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    Ok(TargetDistribution {
        probabilities: weights.iter().map(|w| w / total).collect(),
        beta,
        log_partition: shift + total.ln(),
    })
}

/// `KL(p || q)` in nats; `None` when `p` puts mass where `q` has none.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Option<f64> {
    let mut kl = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            if qi <= 0.0 {
                return None;
            }
            kl += pi * (pi / qi).ln();
        }
    }
    Some(kl)
}

/// `sum_a pi_theta(a) * A(a) - beta * KL(pi_theta || pi_old)`.
pub fn kl_objective(pi_theta: &[f64], pi_old: &[f64], adv: &[f64], beta: f64) -> Result<f64> {
    check_distribution(pi_theta, "pi_theta")?;
    check_distribution(pi_old, "pi_old")?;
    if pi_theta.len() != pi_old.len() || adv.len() != pi_old.len() {
        return Err(Error::Credit("distributions and advantages differ in length".into()));
    }
    if !(beta >= 0.0) {
        return Err(Error::Credit(format!("beta must be non-negative, got {beta}")));
    }
    let expected: f64 = pi_theta.iter().zip(adv).map(|(p, a)| p * a).sum();
    let kl = kl_divergence(pi_theta, pi_old).ok_or_else(|| {
        Error::Credit("pi_theta is not absolutely continuous with respect to pi_old".into())
    })?;
    Ok(expected - beta * kl)
}

/// Calls `f` on every point of the simplex lattice with spacing `1 / divisions`.
pub fn for_each_simplex_point(n: usize, divisions: usize, mut f: impl FnMut(&[f64])) {
    fn rec(
        idx: usize,
        remaining: usize,
        divisions: usize,
        point: &mut Vec<f64>,
        f: &mut dyn FnMut(&[f64]),
    ) {
        let n = point.len();
        if idx == n - 1 {
            point[idx] = remaining as f64 / divisions as f64;
            f(point);
            return;
        }
        for k in 0..=remaining {
            point[idx] = k as f64 / divisions as f64;
            rec(idx + 1, remaining - k, divisions, point, f);
        }
    }
    if n == 0 {
        return;
    }
    let mut point = vec![0.0; n];
    rec(0, divisions, divisions, &mut point, &mut f);
}

/// Objective at the closed-form target minus the best objective found on a
/// simplex grid with spacing `grid_step`. Non-negative up to rounding when
/// the target is the maximiser.
pub fn optimal_target_check(pi_old: &[f64], adv: &[f64], beta: f64, grid_step: f64) -> Result<f64> {
    let target = target_distribution(pi_old, adv, beta)?;
    if !(grid_step > 0.0 && grid_step <= 1.0) {
        return Err(Error::Credit(format!("grid step must be in (0, 1], got {grid_step}")));
    }
    let at_target = objective_unchecked(&target.probabilities, pi_old, adv, beta)
        .expect("target is supported on pi_old");
    let divisions = (1.0 / grid_step).round() as usize;
    let mut best = f64::NEG_INFINITY;
    for_each_simplex_point(pi_old.len(), divisions, |p| {
        if let Some(v) = objective_unchecked(p, pi_old, adv, beta) {
            best = best.max(v);
        }
    });
    Ok(at_target - best)
}

fn objective_unchecked(p: &[f64], pi_old: &[f64], adv: &[f64], beta: f64) -> Option<f64> {
    let expected: f64 = p.iter().zip(adv).map(|(p, a)| p * a).sum();
    Some(expected - beta * kl_divergence(p, pi_old)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grpo_examples() {
        assert_eq!(
            grpo_advantages(&[1.0, 0.0, 0.0, 1.0]).unwrap(),
            vec![0.5, -0.5, -0.5, 0.5]
        );
        assert_eq!(grpo_advantages(&[0.3; 4]).unwrap(), vec![0.0; 4]);
        assert_eq!(grpo_advantages(&[2.0, 0.0]).unwrap(), vec![1.0, -1.0]);
        assert!(grpo_advantages(&[1.0]).is_err());
        assert!(is_vanishing(&[1.0, 1.0, 1.0]));
    }

    #[test]
    fn std_normalized_variant() {
        let a = grpo_advantages_with(&[1.0, 0.0], GrpoOptions { std_normalize: true }).unwrap();
        assert_eq!(a, vec![1.0, -1.0]);
        let a = grpo_advantages_with(&[1.0, 1.0], GrpoOptions { std_normalize: true }).unwrap();
        assert_eq!(a, vec![0.0, 0.0]);
    }

    #[test]
    fn hicra_examples() {
        let mask = |labels: Vec<bool>| TokenClassMask { labels };
        let raw = AdvantageArray::raw(vec![0.5, -0.5], &[2, 2]).unwrap();
        let h = hicra_advantages(&raw, &[mask(vec![true, false]), mask(vec![true, false])], 0.2)
            .unwrap();
        assert!((h.per_token[0][0] - 0.6).abs() < 1e-15);
        assert_eq!(h.per_token[0][1], 0.5);
        assert!((h.per_token[1][0] + 0.4).abs() < 1e-15);
        assert_eq!(h.per_token[1][1], -0.5);
        assert_eq!(h.kind, AdvantageKind::Hicra { alpha: 0.2 });
    }

    #[test]
    fn hicra_validates() {
        let raw = AdvantageArray::raw(vec![0.5], &[1]).unwrap();
        let m = [TokenClassMask { labels: vec![true] }];
        assert!(hicra_advantages(&raw, &m, 1.5).is_err());
        assert!(hicra_advantages(&raw, &m, 0.0).is_err());
        assert!(hicra_advantages(&raw, &[TokenClassMask::all_execution(2)], 0.2).is_err());
    }

    #[test]
    fn policy_gradient_examples() {
        let scores = vec![vec![1.0, -2.0], vec![0.5, 0.5]];
        assert_eq!(policy_gradient(&scores, &[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(policy_gradient(&scores[..1], &[1.0]).unwrap(), vec![1.0, -2.0]);
        assert!(policy_gradient(&scores, &[1.0]).is_err());
    }

    #[test]
    fn clip_higher_bounds() {
        let c = ClipRange::default();
        assert_eq!(clipped_surrogate(1.5, 1.0, c), 1.28);
        assert_eq!(clipped_surrogate(0.5, -1.0, c), -0.8);
        assert_eq!(clipped_surrogate(1.1, 1.0, c), 1.1);
        assert_eq!(clipped_surrogate_log_grad(1.5, 1.0, c), 0.0);
        assert_eq!(clipped_surrogate_log_grad(1.1, 1.0, c), 1.1);
    }

    #[test]
    fn target_examples() {
        let t = target_distribution(&[0.2, 0.3, 0.5], &[0.0; 3], 1.0).unwrap();
        assert_eq!(t.probabilities, vec![0.2, 0.3, 0.5]);

        let t = target_distribution(&[0.2, 0.3, 0.5], &[1.0, -2.0, 0.5], 1e6).unwrap();
        let d = t
            .probabilities
            .iter()
            .zip([0.2, 0.3, 0.5])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(d < 1e-5);

        let t = target_distribution(&[0.5, 0.5], &[2f64.ln(), 0.0], 1.0).unwrap();
        assert!((t.probabilities[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((t.probabilities[1] - 1.0 / 3.0).abs() < 1e-12);
        assert!((t.log_partition - 1.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn target_rejects_bad_inputs() {
        assert!(target_distribution(&[0.5, 0.5], &[0.0, 0.0], 0.0).is_err());
        assert!(target_distribution(&[0.5, 0.6], &[0.0, 0.0], 1.0).is_err());
        assert!(target_distribution(&[0.5, 0.5], &[0.0], 1.0).is_err());
    }

    #[test]
    fn kl_objective_examples() {
        let old = [0.3, 0.7];
        let adv = [1.0, -1.0];
        let v = kl_objective(&old, &old, &adv, 2.0).unwrap();
        assert!((v - (0.3 - 0.7)).abs() < 1e-15);

        assert_eq!(kl_objective(&[1.0, 0.0], &old, &adv, 0.0).unwrap(), 1.0);

        let v = kl_objective(&[0.75, 0.25], &[0.5, 0.5], &[1.0, 0.0], 1.0).unwrap();
        assert!((v - 0.6192).abs() < 1e-4);

        assert!(kl_objective(&[0.5, 0.5], &[1.0, 0.0], &adv, 1.0).is_err());
    }

    #[test]
    fn simplex_grid_sizes() {
        let mut n = 0;
        for_each_simplex_point(3, 10, |p| {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            n += 1;
        });
        assert_eq!(n, 66);
    }

    #[test]
    fn optimal_target_check_examples() {
        let gap = optimal_target_check(&[0.4, 0.6], &[0.7, -0.2], 0.5, 1e-3).unwrap();
        assert!(gap >= -1e-6, "{gap}");
        let gap = optimal_target_check(&[0.4, 0.6], &[0.3, 0.3], 0.5, 1e-3).unwrap();
        assert!(gap.abs() < 1e-9, "{gap}");
        let gap = optimal_target_check(&[0.4, 0.6], &[1.0, -1.0], 1e4, 1e-3).unwrap();
        assert!(gap >= -1e-6, "{gap}");
    }
}
