//! Return propagation and advantage estimation.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AdvantageError {
    #[error("length mismatch: {what} has {got} entries, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    GroupRelative,
    Gae,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdvantageConfig {
    /// Semi-online reward discount along the trajectory.
    pub reward_discount: f64,
    pub gae_gamma: f64,
    pub gae_lambda: f64,
    /// Minimum population reward std for a group to survive filtering.
    pub dapo_threshold: f64,
    pub dapo_enabled: bool,
    pub estimator: Estimator,
    pub kl_coef: f64,
    pub normalize_std: bool,
}

impl Default for AdvantageConfig {
    fn default() -> Self {
        Self {
            reward_discount: 0.5,
            gae_gamma: 1.0,
            gae_lambda: 0.95,
            dapo_threshold: 0.2,
            dapo_enabled: true,
            estimator: Estimator::GroupRelative,
            kl_coef: 0.0,
            normalize_std: true,
        }
    }
}

impl AdvantageConfig {
    pub fn validate(&self) -> Result<(), String> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(format!("{name} must lie in [0, 1], got {v}"))
            }
        };
        unit("reward_discount", self.reward_discount)?;
        unit("gae_gamma", self.gae_gamma)?;
        unit("gae_lambda", self.gae_lambda)?;
        if !(self.dapo_threshold.is_finite() && self.dapo_threshold >= 0.0) {
            return Err(format!(
                "dapo_threshold must be nonnegative, got {}",
                self.dapo_threshold
            ));
        }
        if !(self.kl_coef.is_finite() && self.kl_coef >= 0.0) {
            return Err(format!("kl_coef must be nonnegative, got {}", self.kl_coef));
        }
        Ok(())
    }
}

/// `R_t = r_t + d·R_{t+1}`, `R_{T+1} = 0`.
pub fn propagate_returns(rewards: &[f64], discount: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut next = 0.0;
    for (o, r) in out.iter_mut().zip(rewards).rev() {
        next = r + discount * next;
        *o = next;
    }
    out
}

/// Generalized advantage estimation. `values` carries one extra trailing
/// entry for the bootstrap state.
pub fn gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Result<Vec<f64>, AdvantageError> {
    if values.len() != rewards.len() + 1 {
        return Err(AdvantageError::LengthMismatch {
            what: "values",
            got: values.len(),
            expected: rewards.len() + 1,
        });
    }
    let mut out = vec![0.0; rewards.len()];
    let mut next = 0.0;
    for t in (0..rewards.len()).rev() {
        let delta = rewards[t] + gamma * values[t + 1] - values[t];
        next = delta + gamma * lambda * next;
        out[t] = next;
    }
    Ok(out)
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Population standard deviation (zero for empty or singleton input).
pub fn population_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Group-relative advantages: centered on the group mean, optionally scaled
/// by the population std when it is positive.
pub fn group_relative(returns: &[f64], normalize_std: bool) -> Vec<f64> {
    let m = mean(returns);
    let centered = returns.iter().map(|g| g - m);
    let sd = population_std(returns);
    if normalize_std && sd > 0.0 {
        centered.map(|a| a / sd).collect()
    } else {
        centered.collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DapoOutcome<K> {
    /// Surviving keys, in input order.
    pub retained: Vec<K>,
    /// Groups that cleared the threshold, before the budget cut.
    pub passing: usize,
    pub budget_met: bool,
}

/// Drops groups whose reward std is below `threshold`, then keeps the
/// `budget` highest-std survivors (ties go to the smaller key).
pub fn dapo_filter<K: Ord + Clone>(groups: &[(K, Vec<f64>)], threshold: f64, budget: Option<usize>) -> DapoOutcome<K> {
    let mut passing: Vec<(usize, f64)> = groups
        .iter()
        .enumerate()
        .map(|(i, (_, r))| (i, population_std(r)))
        .filter(|&(_, sd)| sd >= threshold)
        .collect();
    let n_passing = passing.len();
    passing.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| groups[a.0].0.cmp(&groups[b.0].0)));
    if let Some(b) = budget {
        passing.truncate(b);
    }
    let mut keep: Vec<usize> = passing.into_iter().map(|(i, _)| i).collect();
    keep.sort_unstable();
    DapoOutcome {
        retained: keep.into_iter().map(|i| groups[i].0.clone()).collect(),
        passing: n_passing,
        budget_met: budget.is_none_or(|b| n_passing >= b),
    }
}

/// Per-entry penalty `kl_coef·(logπ − logπ_ref)` to subtract from rewards.
pub fn kl_penalty(policy_logp: &[f64], ref_logp: &[f64], kl_coef: f64) -> Result<Vec<f64>, AdvantageError> {
    if policy_logp.len() != ref_logp.len() {
        return Err(AdvantageError::LengthMismatch {
            what: "ref_logp",
            got: ref_logp.len(),
            expected: policy_logp.len(),
        });
    }
    Ok(policy_logp
        .iter()
        .zip(ref_logp)
        .map(|(p, r)| if kl_coef == 0.0 { 0.0 } else { kl_coef * (p - r) })
        .collect())
}
