//! Progressive multi-round training over the scripted environment.
//!
//! Each global step draws a mini-batch of episodes and runs generation rounds.
//! Round `k` builds every history from the coordinates gathered in rounds
//! `< k` (earlier training steps included), samples `N` rollouts per turn,
//! scores them, and then merges its own coordinates for round `k + 1`. Rounds
//! stop once enough groups clear the variance filter or the generation cap
//! is hit. The surviving groups yield advantages, a critic update, and (past
//! warmup) a score-function update of a Gaussian coordinate policy.

use std::collections::BTreeMap;
use std::fmt::Write;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::action::{emit_action, parse_action, Action, ActionClass, ActionTaxonomy, ActionType, PixelPoint};
use crate::advantage::{
    dapo_filter, gae, group_relative, kl_penalty, mean, population_std, propagate_returns, AdvantageConfig, Estimator,
};
use crate::casc::{build_history, CompressedHistory, CoordSource, CoordinateHistory, PastStep, RoiMemory, RoiParams};
use crate::corpus::CorpusParams;
use crate::env::{
    run_trajectory, EnvConfig, EnvError, Episode, EpisodeScreens, EpisodeTrace, Observation, OraclePolicy, Policy,
    RolloutSeeds, SimSettings, Taxonomies,
};
use crate::geometry::BBox;
use crate::reward::{CoordReward, RewardConfig};
use crate::rng;
use crate::screen::TokenModel;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("config error: {0}")]
    Config(String),
    #[error("corpus error: {0}")]
    Corpus(String),
    #[error(transparent)]
    Env(#[from] EnvError),
}

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Per-type parameters `[bias_x, bias_y, log_sigma]`.
pub type TypeParams = [f64; 3];

/// Emits the gold action type with every gold coordinate shifted by a
/// per-type bias plus isotropic Gaussian noise (normalized units). Samples
/// are not clamped, so [`Policy::log_prob`] is the exact density of the
/// emitted point. Gold actions without coordinates are emitted verbatim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianCoordPolicy {
    params: BTreeMap<ActionType, TypeParams>,
    log_sigma_min: f64,
}

/// Log-density of a sample and its gradient with respect to the parameters
/// of the gold action's type.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Score {
    pub action_type: ActionType,
    pub log_prob: f64,
    pub grad: TypeParams,
}

impl GaussianCoordPolicy {
    pub fn new(init_bias: [f64; 2], sigma: f64, sigma_min: f64) -> Self {
        assert!(sigma > 0.0 && sigma_min > 0.0, "sigma must be positive");
        let init = [init_bias[0], init_bias[1], sigma.max(sigma_min).ln()];
        Self {
            params: ActionType::ALL.iter().map(|&t| (t, init)).collect(),
            log_sigma_min: sigma_min.ln(),
        }
    }

    pub fn params(&self, t: ActionType) -> TypeParams {
        self.params[&t]
    }

    pub fn sigma(&self, t: ActionType) -> f64 {
        self.params[&t][2].exp()
    }

    pub fn bias(&self, t: ActionType) -> [f64; 2] {
        let p = self.params[&t];
        [p[0], p[1]]
    }

    /// All parameters, types in [`ActionType::ALL`] order.
    pub fn flat(&self) -> Vec<f64> {
        ActionType::ALL.iter().flat_map(|t| self.params[t]).collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) {
        for (t, chunk) in ActionType::ALL.iter().zip(values.chunks_exact(3)) {
            self.params.insert(*t, [chunk[0], chunk[1], chunk[2]]);
        }
    }

    fn mean_point(&self, t: ActionType, gold: PixelPoint, dims: (u32, u32)) -> [f64; 2] {
        let p = self.params[&t];
        [gold.x / f64::from(dims.0) + p[0], gold.y / f64::from(dims.1) + p[1]]
    }

    pub fn sample(&self, gold: &Action, dims: (u32, u32), rng: &mut ChaCha8Rng) -> Action {
        let t = gold.action_type;
        let sigma = self.sigma(t);
        let mut jitter = |p: PixelPoint| {
            let mu = self.mean_point(t, p, dims);
            let zx: f64 = StandardNormal.sample(rng);
            let zy: f64 = StandardNormal.sample(rng);
            PixelPoint::new(
                (mu[0] + sigma * zx) * f64::from(dims.0),
                (mu[1] + sigma * zy) * f64::from(dims.1),
            )
        };
        let mut a = gold.clone();
        a.coordinate = a.coordinate.map(&mut jitter);
        a.coordinate2 = a.coordinate2.map(&mut jitter);
        a
    }

    /// Density of `pred` under this policy for a step whose gold is `gold`.
    /// `None` when `pred` could not have been sampled (wrong point count or
    /// a different payload on a coordinate-free gold).
    pub fn score(&self, pred: &Action, gold: &Action, dims: (u32, u32)) -> Option<Score> {
        let t = gold.action_type;
        let gold_pts: Vec<PixelPoint> = gold.points().collect();
        let pred_pts: Vec<PixelPoint> = pred.points().collect();
        if gold_pts.is_empty() {
            return (pred == gold).then_some(Score {
                action_type: t,
                log_prob: 0.0,
                grad: [0.0; 3],
            });
        }
        if pred_pts.len() != gold_pts.len() || pred.action_type != t {
            return None;
        }
        let p = self.params[&t];
        let sigma = p[2].exp();
        let mut score = Score {
            action_type: t,
            log_prob: 0.0,
            grad: [0.0; 3],
        };
        for (g, x) in gold_pts.iter().zip(&pred_pts) {
            let mu = self.mean_point(t, *g, dims);
            let obs = [x.x / f64::from(dims.0), x.y / f64::from(dims.1)];
            for axis in 0..2 {
                let u = (obs[axis] - mu[axis]) / sigma;
                score.log_prob += -0.5 * u * u - p[2] - 0.5 * LN_2PI;
                score.grad[axis] += u / sigma;
                score.grad[2] += u * u - 1.0;
            }
        }
        Some(score)
    }

    /// Closed-form `KL(self ‖ other)` summed over types.
    pub fn kl_to(&self, other: &GaussianCoordPolicy) -> f64 {
        self.params
            .iter()
            .map(|(t, p)| {
                let q = other.params[t];
                let (s, r) = (p[2].exp(), q[2].exp());
                (0..2)
                    .map(|a| (q[2] - p[2]) + (s * s + (p[a] - q[a]).powi(2)) / (2.0 * r * r) - 0.5)
                    .sum::<f64>()
            })
            .sum()
    }

    fn clamp_sigma(&mut self) {
        for p in self.params.values_mut() {
            p[2] = p[2].max(self.log_sigma_min);
        }
    }
}

impl Policy for GaussianCoordPolicy {
    fn act(&self, obs: &Observation<'_>, rng: &mut ChaCha8Rng) -> String {
        let step = obs.step();
        emit_action(&self.sample(&step.gold, step.dims(), rng))
    }

    fn log_prob(&self, response: &str, obs: &Observation<'_>) -> Option<f64> {
        let step = obs.step();
        let pred = parse_action(response).ok()?;
        self.score(&pred, &step.gold, step.dims()).map(|s| s.log_prob)
    }
}

/// A sampled action with its advantage, gold action and screen size.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSample {
    pub action: Action,
    pub gold: Action,
    pub dims: (u32, u32),
    pub advantage: f64,
}

/// Surrogate `mean_i A_i · log π(a_i)` over frozen samples.
pub fn surrogate(policy: &GaussianCoordPolicy, samples: &[ScoredSample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let total: f64 = samples
        .iter()
        .filter_map(|s| {
            policy
                .score(&s.action, &s.gold, s.dims)
                .map(|sc| s.advantage * sc.log_prob)
        })
        .sum();
    total / samples.len() as f64
}

/// Gradient of [`surrogate`], flattened like [`GaussianCoordPolicy::flat`].
pub fn surrogate_grad(policy: &GaussianCoordPolicy, samples: &[ScoredSample]) -> Vec<f64> {
    let mut grad = BTreeMap::new();
    for s in samples {
        if let Some(sc) = policy.score(&s.action, &s.gold, s.dims) {
            accumulate(&mut grad, sc.action_type, sc.grad, s.advantage);
        }
    }
    let n = samples.len().max(1) as f64;
    ActionType::ALL
        .iter()
        .flat_map(|t| grad.get(t).copied().unwrap_or([0.0; 3]).map(|g| g / n))
        .collect()
}

fn accumulate(grad: &mut BTreeMap<ActionType, TypeParams>, t: ActionType, g: TypeParams, weight: f64) {
    let e = grad.entry(t).or_insert([0.0; 3]);
    for (a, b) in e.iter_mut().zip(g) {
        *a += weight * b;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainPolicy {
    Gaussian,
    /// Samples the gold action; parameters still exist but never move.
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    /// Episodes per mini-batch.
    pub batch_episodes: usize,
    /// Groups kept per step (the batch size the filter truncates to).
    pub group_budget: usize,
    pub max_generations: usize,
    /// Steps during which only the critic learns.
    pub critic_warmup: usize,
    pub critic_eta: f64,
    pub lr: f64,
    pub lr_sigma: f64,
    pub sigma_init: f64,
    pub sigma_min: f64,
    pub learn_sigma: bool,
    pub init_bias: [f64; 2],
    /// Precondition by the inverse Fisher information of the Gaussian.
    pub natural_gradient: bool,
    /// PPO-style ratio clip; off by default.
    pub ratio_clip: Option<f64>,
    pub policy: TrainPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_episodes: 8,
            group_budget: 16,
            max_generations: 4,
            critic_warmup: 0,
            critic_eta: 0.1,
            lr: 0.75,
            lr_sigma: 0.75,
            sigma_init: 0.15,
            sigma_min: 0.005,
            learn_sigma: true,
            init_bias: [0.4, -0.4],
            natural_gradient: true,
            ratio_clip: None,
            policy: TrainPolicy::Gaussian,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.batch_episodes == 0 || self.group_budget == 0 || self.max_generations == 0 {
            return Err("batch_episodes, group_budget and max_generations must be positive".into());
        }
        if !(self.sigma_init.is_finite() && self.sigma_init > 0.0 && self.sigma_min.is_finite() && self.sigma_min > 0.0)
        {
            return Err("sigma_init and sigma_min must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.critic_eta) {
            return Err(format!("critic_eta must lie in [0, 1], got {}", self.critic_eta));
        }
        if !self.lr.is_finite() || !self.lr_sigma.is_finite() {
            return Err("learning rates must be finite".into());
        }
        if self.ratio_clip.is_some_and(|c| c.is_nan() || c <= 0.0) {
            return Err("ratio_clip must be positive".into());
        }
        Ok(())
    }
}

/// Everything the loop reads besides the corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSetup {
    pub env: EnvConfig,
    pub roi: RoiParams,
    pub tokens: TokenModel,
    pub reward: RewardConfig,
    pub advantage: AdvantageConfig,
    pub train: TrainConfig,
    pub seed: u64,
}

impl TrainSetup {
    /// Seeded toy setup used by the convergence check: latest-round ROI memory
    /// and a DAPO cutoff scaled to the small spread of `r_total` at these weights.
    pub fn reference(coord_reward: CoordReward, seed: u64) -> Self {
        Self {
            env: EnvConfig::default(),
            roi: RoiParams {
                memory: RoiMemory::LatestRound,
                ..RoiParams::default()
            },
            tokens: TokenModel::default(),
            reward: RewardConfig {
                coord_reward,
                ..RewardConfig::default()
            },
            advantage: AdvantageConfig {
                dapo_threshold: 0.01,
                ..AdvantageConfig::default()
            },
            train: TrainConfig::default(),
            seed,
        }
    }
}

/// Corpus for [`TrainSetup::reference`]: 16 android_control episodes on a small screen.
pub fn reference_corpus(seed: u64) -> CorpusParams {
    CorpusParams {
        episodes: 16,
        steps: 6,
        seed,
        preset: "android_control".into(),
        width: 270,
        height: 600,
    }
}

/// Per-step-index value table.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Critic {
    pub values: Vec<f64>,
}

impl Critic {
    /// Value of 1-based step `t` (zero if never updated).
    pub fn value(&self, t: usize) -> f64 {
        self.values.get(t - 1).copied().unwrap_or(0.0)
    }
}

/// `V_t ← (1 − η)·V_t + η·mean(R_t)` for every step index present in `batch`
/// (pairs of 1-based step and return).
pub fn update_critic(batch: &[(usize, f64)], critic: &mut Critic, eta: f64) {
    let mut by_step: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for &(t, r) in batch {
        by_step.entry(t).or_default().push(r);
    }
    for (t, rs) in by_step {
        if critic.values.len() < t {
            critic.values.resize(t, 0.0);
        }
        let v = &mut critic.values[t - 1];
        *v = (1.0 - eta) * *v + eta * mean(&rs);
    }
}

/// Histories the policy sees at each turn when the past actions are the gold
/// ones, under the given coordinate history.
pub fn prepare_batch(
    episode: &Episode,
    tax: &ActionTaxonomy,
    screens: &EpisodeScreens,
    coords: &CoordinateHistory,
    env: &EnvConfig,
    roi: &RoiParams,
) -> Result<Vec<CompressedHistory>, EnvError> {
    let mut past = Vec::with_capacity(episode.steps.len());
    let mut out = Vec::with_capacity(episode.steps.len());
    for (i, step) in episode.steps.iter().enumerate() {
        out.push(build_history(&past, coords, env.window, env.variant, roi));
        past.push(PastStep {
            index: i + 1,
            action: step.gold.clone(),
            class: tax.classify(&step.gold).expect("validated episode"),
            screen: screens.get(episode, i + 1)?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: usize,
    pub policy: GaussianCoordPolicy,
    pub reference: GaussianCoordPolicy,
    pub critic: Critic,
    /// Coordinate history per corpus episode, carried across steps.
    pub coords: Vec<CoordinateHistory>,
    /// Generation rounds completed per corpus episode.
    pub rounds: Vec<u32>,
    pub seed: u64,
    pub setup: TrainSetup,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub rounds: usize,
    pub groups: usize,
    pub retained: usize,
    pub mean_reward: f64,
    /// Over sampled rollouts on distance-scored steps; `None` if there were none.
    pub mean_d_norm: Option<f64>,
    pub sigma: f64,
    pub bias_norm: f64,
    pub grad_norm: f64,
    pub kl_ref: f64,
    pub tokens_compressed: u64,
    pub tokens_original: u64,
    pub actor_updated: bool,
}

impl StepMetrics {
    pub fn compression_rate(&self) -> f64 {
        crate::metrics::compression_rate(self.tokens_original, self.tokens_compressed)
    }
}

/// ROI bookkeeping across the whole run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoiLog {
    /// ROI area after each round that touched `(episode, step)`.
    pub areas: BTreeMap<(usize, usize), Vec<f64>>,
    pub coords_checked: usize,
    pub coords_outside: usize,
}

impl RoiLog {
    /// Fraction of round-to-round transitions, from round `after + 1` on,
    /// whose area did not grow.
    pub fn non_increasing_fraction(&self, after: usize) -> f64 {
        let (mut ok, mut total) = (0usize, 0usize);
        for seq in self.areas.values() {
            for k in after..seq.len() {
                if k == 0 {
                    continue;
                }
                total += 1;
                ok += usize::from(seq[k] <= seq[k - 1] + 1e-12);
            }
        }
        if total == 0 {
            1.0
        } else {
            ok as f64 / total as f64
        }
    }

    /// Fraction of steps whose whole area sequence after round `after` never grows.
    pub fn monotone_step_fraction(&self, after: usize) -> f64 {
        let seqs: Vec<&Vec<f64>> = self.areas.values().filter(|s| s.len() > after + 1).collect();
        if seqs.is_empty() {
            return 1.0;
        }
        let ok = seqs
            .iter()
            .filter(|s| s[after..].windows(2).all(|w| w[1] <= w[0] + 1e-12))
            .count();
        ok as f64 / seqs.len() as f64
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<StepMetrics>,
    pub roi: RoiLog,
}

impl TrainLog {
    /// Mean of the last `window` defined `mean_d_norm` values.
    pub fn final_d_norm(&self, window: usize) -> Option<f64> {
        let vals: Vec<f64> = self.rows.iter().filter_map(|r| r.mean_d_norm).collect();
        let tail = &vals[vals.len().saturating_sub(window)..];
        (!tail.is_empty()).then(|| mean(tail))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "step,rounds,groups,retained,mean_reward,mean_d_norm,sigma,bias_norm,grad_norm,kl_ref,\
             tokens_compressed,tokens_original,compression_rate,actor_updated\n",
        );
        for r in &self.rows {
            let d = r.mean_d_norm.map(|d| format!("{d:.6}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{:.6},{},{:.6},{:.6},{:.6},{:.6},{},{},{:.4},{}",
                r.step,
                r.rounds,
                r.groups,
                r.retained,
                r.mean_reward,
                d,
                r.sigma,
                r.bias_norm,
                r.grad_norm,
                r.kl_ref,
                r.tokens_compressed,
                r.tokens_original,
                r.compression_rate(),
                r.actor_updated
            );
        }
        out
    }
}

/// One rollout group: the `N` responses at one turn of one trajectory.
struct Group {
    key: (usize, usize, usize),
    episode: usize,
    t: usize,
    rewards: Vec<f64>,
    returns: Vec<f64>,
    /// Path-level GAE term for this turn (zero for group-relative).
    path_advantage: f64,
    actions: Vec<Option<Action>>,
    old_logp: Vec<Option<f64>>,
}

pub struct Trainer<'a> {
    corpus: &'a [Episode],
    taxes: Vec<&'a ActionTaxonomy>,
    screens: Vec<EpisodeScreens>,
    pub state: TrainState,
    pub log: TrainLog,
}

impl<'a> Trainer<'a> {
    pub fn new(corpus: &'a [Episode], taxonomies: &'a Taxonomies, setup: TrainSetup) -> Result<Self, TrainError> {
        setup.train.validate().map_err(TrainError::Config)?;
        setup.advantage.validate().map_err(TrainError::Config)?;
        setup.reward.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        if corpus.is_empty() {
            return Err(TrainError::Corpus("no episodes".into()));
        }
        let taxes = corpus
            .iter()
            .map(|e| {
                taxonomies
                    .get(&e.preset)
                    .map_err(|err| TrainError::Corpus(err.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let t = &setup.train;
        let policy = GaussianCoordPolicy::new(t.init_bias, t.sigma_init, t.sigma_min);
        let state = TrainState {
            step: 0,
            reference: policy.clone(),
            policy,
            critic: Critic::default(),
            coords: vec![CoordinateHistory::new(); corpus.len()],
            rounds: vec![0; corpus.len()],
            seed: setup.seed,
            setup,
        };
        Ok(Self {
            corpus,
            taxes,
            screens: corpus.iter().map(EpisodeScreens::new).collect(),
            state,
            log: TrainLog::default(),
        })
    }

    /// Episode indices for global step `s`: consecutive slices of a per-epoch
    /// seeded permutation.
    fn batch(&self, s: usize) -> Vec<usize> {
        let n = self.corpus.len();
        let b = self.state.setup.train.batch_episodes.min(n);
        let per_epoch = n / b;
        let (epoch, slot) = (s / per_epoch, s % per_epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(
            self.state.seed,
            &[rng::hash_str("epoch"), epoch as u64],
        ));
        order[slot * b..(slot + 1) * b].to_vec()
    }

    pub fn run(&mut self) -> Result<(), TrainError> {
        while self.state.step < self.state.setup.train.steps {
            self.step()?;
        }
        Ok(())
    }

    /// One global step of the loop.
    pub fn step(&mut self) -> Result<StepMetrics, TrainError> {
        let setup = self.state.setup.clone();
        let (adv_cfg, train) = (&setup.advantage, &setup.train);
        let s = self.state.step;
        let batch = self.batch(s);

        let mut groups: Vec<Group> = Vec::new();
        let mut rounds = 0;
        let (mut tokens_c, mut tokens_o) = (0u64, 0u64);
        let (mut d_sum, mut d_n, mut r_sum, mut r_n) = (0.0, 0usize, 0.0, 0usize);
        for k in 0..train.max_generations {
            rounds += 1;
            let traces = self.generate(&batch, s, k)?;
            for (pos, (&e, trace)) in batch.iter().zip(&traces).enumerate() {
                for turn in &trace.turns {
                    tokens_c += turn.screen_tokens + turn.history_tokens;
                    tokens_o += turn.screen_tokens + turn.original_history_tokens;
                    for r in &turn.rollouts {
                        r_sum += r.reward.r_total;
                        r_n += 1;
                        if let Some(d) = r.d_norm {
                            d_sum += d;
                            d_n += 1;
                        }
                    }
                }
                groups.extend(self.groups_of(e, (k, pos), trace, adv_cfg));
            }
            for (&e, trace) in batch.iter().zip(traces) {
                self.absorb(e, trace.coords);
            }
            if !adv_cfg.dapo_enabled {
                break;
            }
            let passing = groups
                .iter()
                .filter(|g| population_std(&g.returns) >= adv_cfg.dapo_threshold)
                .count();
            if passing >= train.group_budget {
                break;
            }
        }

        let n_groups = groups.len();
        let retained: Vec<&Group> = if adv_cfg.dapo_enabled {
            let keyed: Vec<((usize, usize, usize), Vec<f64>)> =
                groups.iter().map(|g| (g.key, g.returns.clone())).collect();
            let out = dapo_filter(&keyed, adv_cfg.dapo_threshold, Some(train.group_budget));
            let keep: std::collections::BTreeSet<_> = out.retained.into_iter().collect();
            groups.iter().filter(|g| keep.contains(&g.key)).collect()
        } else {
            groups.iter().take(train.group_budget).collect()
        };

        let mut samples = Vec::new();
        let mut critic_batch = Vec::new();
        for g in &retained {
            let adv: Vec<f64> = match adv_cfg.estimator {
                Estimator::GroupRelative => group_relative(&g.returns, adv_cfg.normalize_std),
                Estimator::Gae => {
                    let m = mean(&g.rewards);
                    g.rewards.iter().map(|r| r - m + g.path_advantage).collect()
                }
            };
            let step = &self.corpus[g.episode].steps[g.t - 1];
            for ((a, logp_old), adv) in g.actions.iter().zip(&g.old_logp).zip(adv) {
                if let Some(action) = a {
                    samples.push((
                        ScoredSample {
                            action: action.clone(),
                            gold: step.gold.clone(),
                            dims: step.dims(),
                            advantage: adv,
                        },
                        *logp_old,
                    ));
                }
            }
            critic_batch.extend(g.returns.iter().map(|&r| (g.t, r)));
        }
        let n_samples: usize = retained.iter().map(|g| g.actions.len()).sum();

        update_critic(&critic_batch, &mut self.state.critic, train.critic_eta);

        let grad = self.policy_gradient(&samples, n_samples, train.ratio_clip);
        let grad_norm = grad.values().flat_map(|g| g.iter()).map(|x| x * x).sum::<f64>().sqrt();
        let actor_updated = s >= train.critic_warmup && train.policy == TrainPolicy::Gaussian;
        if actor_updated {
            self.apply_gradient(&grad, train);
        }

        let p = self.state.policy.params(ActionType::Click);
        let row = StepMetrics {
            step: s + 1,
            rounds,
            groups: n_groups,
            retained: retained.len(),
            mean_reward: if r_n == 0 { 0.0 } else { r_sum / r_n as f64 },
            mean_d_norm: (d_n > 0).then(|| d_sum / d_n as f64),
            sigma: p[2].exp(),
            bias_norm: p[0].hypot(p[1]),
            grad_norm,
            kl_ref: self.state.policy.kl_to(&self.state.reference),
            tokens_compressed: tokens_c,
            tokens_original: tokens_o,
            actor_updated,
        };
        self.log.rows.push(row);
        self.state.step += 1;
        Ok(row)
    }

    fn generate(&self, batch: &[usize], s: usize, k: usize) -> Result<Vec<EpisodeTrace>, TrainError> {
        let setup = &self.state.setup;
        let seeds = RolloutSeeds {
            run_seed: self.state.seed,
            salt: ((s as u64) << 16) | k as u64,
        };
        let settings = SimSettings {
            env: &setup.env,
            roi: &setup.roi,
            tokens: &setup.tokens,
            reward: &setup.reward,
            seeds,
        };
        let policy: &dyn Policy = match setup.train.policy {
            TrainPolicy::Gaussian => &self.state.policy,
            TrainPolicy::Oracle => &OraclePolicy,
        };
        batch
            .par_iter()
            .map(|&e| {
                let prior = &self.state.coords[e];
                run_trajectory(
                    &self.corpus[e],
                    self.taxes[e],
                    policy,
                    &self.screens[e],
                    &settings,
                    Some(prior),
                    self.state.rounds[e],
                )
                .map_err(TrainError::from)
            })
            .collect()
    }

    fn groups_of(&self, e: usize, key: (usize, usize), trace: &EpisodeTrace, adv: &AdvantageConfig) -> Vec<Group> {
        let step_of = |t: usize| &self.corpus[e].steps[t - 1];
        let mut rewards: Vec<Vec<f64>> = Vec::with_capacity(trace.turns.len());
        let mut old_logp = Vec::with_capacity(trace.turns.len());
        for turn in &trace.turns {
            let step = step_of(turn.t);
            let scores: Vec<(Option<f64>, f64)> = turn
                .rollouts
                .iter()
                .map(|r| {
                    let old = r
                        .action
                        .as_ref()
                        .and_then(|a| self.state.policy.score(a, &step.gold, step.dims()))
                        .map(|s| s.log_prob);
                    let reference = r
                        .action
                        .as_ref()
                        .and_then(|a| self.state.reference.score(a, &step.gold, step.dims()))
                        .map(|s| s.log_prob);
                    (old, reference.or(old).unwrap_or(0.0))
                })
                .collect();
            let logp: Vec<f64> = scores.iter().map(|(o, _)| o.unwrap_or(0.0)).collect();
            let ref_logp: Vec<f64> = scores.iter().map(|(_, r)| *r).collect();
            let penalty = kl_penalty(&logp, &ref_logp, adv.kl_coef).expect("equal lengths");
            rewards.push(
                turn.rollouts
                    .iter()
                    .zip(penalty)
                    .map(|(r, p)| r.reward.r_total - p)
                    .collect(),
            );
            old_logp.push(scores.into_iter().map(|(o, _)| o).collect::<Vec<_>>());
        }
        let path: Vec<f64> = rewards.iter().map(|r| mean(r)).collect();
        let path_returns = propagate_returns(&path, adv.reward_discount);
        let path_adv = match adv.estimator {
            Estimator::Gae => {
                let mut values: Vec<f64> = trace.turns.iter().map(|t| self.state.critic.value(t.t)).collect();
                values.push(0.0);
                gae(&path, &values, adv.gae_gamma, adv.gae_lambda).expect("values sized to rewards")
            }
            Estimator::GroupRelative => vec![0.0; path.len()],
        };
        trace
            .turns
            .iter()
            .enumerate()
            .zip(rewards.into_iter().zip(old_logp))
            .map(|((i, turn), (rs, logp))| {
                let next = path_returns.get(i + 1).copied().unwrap_or(0.0);
                Group {
                    key: (key.0, key.1, turn.t),
                    episode: e,
                    t: turn.t,
                    returns: rs.iter().map(|r| r + adv.reward_discount * next).collect(),
                    rewards: rs,
                    path_advantage: path_adv[i],
                    actions: turn.rollouts.iter().map(|r| r.action.clone()).collect(),
                    old_logp: logp,
                }
            })
            .collect()
    }

    /// Merges one round's coordinates into the episode's history and logs
    /// the resulting ROIs.
    fn absorb(&mut self, e: usize, fresh: CoordinateHistory) {
        let touched: Vec<usize> = fresh.steps().map(|(t, _)| t).collect();
        self.state.coords[e].merge(fresh);
        self.state.rounds[e] += 1;
        let roi = self.state.setup.roi;
        let tax = self.taxes[e];
        let history = &self.state.coords[e];
        for t in touched {
            if tax.classify(&self.corpus[e].steps[t - 1].gold) != Ok(ActionClass::Wc) {
                continue;
            }
            let Ok(b) = history.aggregate(t, &roi) else {
                continue;
            };
            let coords = history.step(t).expect("touched step");
            for c in coords.contributing(roi.memory) {
                self.log.roi.coords_checked += 1;
                if !contains_with_tol(&b, c.x, c.y) {
                    self.log.roi.coords_outside += 1;
                }
            }
            self.log.roi.areas.entry((e, t)).or_default().push(b.area());
        }
    }

    fn policy_gradient(
        &self,
        samples: &[(ScoredSample, Option<f64>)],
        n: usize,
        clip: Option<f64>,
    ) -> BTreeMap<ActionType, TypeParams> {
        let mut grad = BTreeMap::new();
        for (s, logp_old) in samples {
            let Some(sc) = self.state.policy.score(&s.action, &s.gold, s.dims) else {
                continue;
            };
            let ratio = logp_old.map_or(1.0, |old| (sc.log_prob - old).exp());
            let clipped = clip.is_some_and(|eps| {
                (s.advantage > 0.0 && ratio > 1.0 + eps) || (s.advantage < 0.0 && ratio < 1.0 - eps)
            });
            if !clipped {
                accumulate(&mut grad, sc.action_type, sc.grad, s.advantage * ratio);
            }
        }
        let n = n.max(1) as f64;
        for g in grad.values_mut() {
            for x in g.iter_mut() {
                *x /= n;
            }
        }
        grad
    }

    fn apply_gradient(&mut self, grad: &BTreeMap<ActionType, TypeParams>, train: &TrainConfig) {
        let policy = &mut self.state.policy;
        for (t, g) in grad {
            let p = policy.params.get_mut(t).expect("all types present");
            let var = (2.0 * p[2]).exp();
            let (scale_b, scale_s) = if train.natural_gradient {
                (var, 0.25)
            } else {
                (1.0, 1.0)
            };
            p[0] += train.lr * scale_b * g[0];
            p[1] += train.lr * scale_b * g[1];
            if train.learn_sigma {
                p[2] += train.lr_sigma * scale_s * g[2];
            }
        }
        policy.clamp_sigma();
    }
}

fn contains_with_tol(b: &BBox, x: f64, y: f64) -> bool {
    const TOL: f64 = 1e-12;
    x >= b.x1 - TOL && x <= b.x2 + TOL && y >= b.y1 - TOL && y <= b.y2 + TOL
}

/// Runs the whole loop.
pub fn train(
    corpus: &[Episode],
    taxonomies: &Taxonomies,
    setup: TrainSetup,
) -> Result<(TrainState, TrainLog), TrainError> {
    let mut trainer = Trainer::new(corpus, taxonomies, setup)?;
    trainer.run()?;
    Ok((trainer.state, trainer.log))
}

/// Annotated coordinates only, as the CASC round-1 input for an episode.
pub fn annotated_history(episode: &Episode, tax: &ActionTaxonomy) -> CoordinateHistory {
    let mut h = CoordinateHistory::new();
    for (i, s) in episode.steps.iter().enumerate() {
        if let Ok(class) = tax.classify(&s.gold) {
            h.track(
                i + 1,
                CoordSource::Annotated,
                &s.gold,
                class,
                s.dims(),
                s.element_coordinate,
                s.target_box,
            )
            .expect("validated dims");
        }
    }
    h
}
