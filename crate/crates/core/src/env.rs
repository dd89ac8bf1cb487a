//! Scripted GUI environment: episode corpus, policy interface, multi-rollout
//! turns and semi-online advancement with ground-truth patching.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::action::{
    emit_action, parse_action, Action, ActionClass, ActionTaxonomy, ActionType, Button, PixelPoint, Status,
    TaxonomyError,
};
use crate::casc::{
    build_history, history_tokens, CompressVariant, CompressedHistory, CoordSource, CoordinateHistory, PastStep,
    RoiParams,
};
use crate::geometry::{normalize, BBox, Coordinate};
use crate::reward::{score_step, RewardConfig, StepReward, StepTarget};
use crate::rng;
use crate::screen::{render_synthetic, token_count, ScreenError, Screenshot, TokenModel};

#[derive(Debug, thiserror::Error)]
pub enum EnvError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: parse error: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: invalid `{field}`: {msg}")]
    Validation { line: usize, field: String, msg: String },
    #[error(transparent)]
    Screen(#[from] ScreenError),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
}

/// How a step's screenshot is produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum ScreenSpec {
    Synthetic { seed: u64, width: u32, height: u32 },
    Png { png: PathBuf, width: u32, height: u32 },
}

impl ScreenSpec {
    pub fn dims(&self) -> (u32, u32) {
        match self {
            ScreenSpec::Synthetic { width, height, .. } | ScreenSpec::Png { width, height, .. } => (*width, *height),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Step {
    pub screen: ScreenSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_box: Option<BBox>,
    pub gold: Action,
    /// Element position for coordinate-class actions without a wire coordinate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub element_coordinate: Option<PixelPoint>,
}

impl Step {
    pub fn dims(&self) -> (u32, u32) {
        self.screen.dims()
    }

    pub fn target(&self) -> StepTarget<'_> {
        let (width, height) = self.dims();
        StepTarget {
            gold: &self.gold,
            anchor: self.element_coordinate,
            gt_box: self.target_box,
            width,
            height,
        }
    }

    pub fn render(&self) -> Result<Screenshot, ScreenError> {
        match &self.screen {
            ScreenSpec::Synthetic { seed, width, height } => render_synthetic(*seed, *width, *height, self.target_box),
            ScreenSpec::Png { png, width, height } => {
                let s = Screenshot::load_png(png)?;
                if s.dims() != (*width, *height) {
                    return Err(ScreenError::UnsupportedPng(format!(
                        "{} is {}x{}, corpus says {width}x{height}",
                        png.display(),
                        s.width(),
                        s.height()
                    )));
                }
                Ok(s)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Episode {
    pub id: String,
    pub instruction: String,
    pub preset: String,
    pub steps: Vec<Step>,
}

/// Built-in presets plus user-defined taxonomies, by name.
#[derive(Debug, Clone)]
pub struct Taxonomies {
    map: BTreeMap<String, ActionTaxonomy>,
}

impl Default for Taxonomies {
    fn default() -> Self {
        Self::with_custom(Vec::new()).expect("presets are valid")
    }
}

impl Taxonomies {
    pub fn with_custom(custom: Vec<ActionTaxonomy>) -> Result<Self, TaxonomyError> {
        let mut map = BTreeMap::new();
        for name in crate::action::PRESETS {
            map.insert(name.to_string(), ActionTaxonomy::preset(name)?);
        }
        for tax in custom {
            tax.validate()?;
            map.insert(tax.name.clone(), tax);
        }
        Ok(Self { map })
    }

    pub fn get(&self, name: &str) -> Result<&ActionTaxonomy, TaxonomyError> {
        self.map
            .get(name)
            .ok_or_else(|| TaxonomyError::UnknownPreset(name.to_string()))
    }
}

impl Episode {
    /// Checks the invariants a loaded episode must satisfy. Errors name the field.
    pub fn validate(&self, taxonomies: &Taxonomies) -> Result<(), (String, String)> {
        let tax = taxonomies
            .get(&self.preset)
            .map_err(|e| ("preset".to_string(), e.to_string()))?;
        if self.steps.is_empty() {
            return Err(("steps".into(), "episode needs at least one step".into()));
        }
        for (i, step) in self.steps.iter().enumerate() {
            let field = |f: &str| format!("steps[{i}].{f}");
            let (w, h) = step.dims();
            if w == 0 || h == 0 {
                return Err((field("screen"), "dimensions must be positive".into()));
            }
            let class = tax.classify(&step.gold).map_err(|e| (field("gold"), e.to_string()))?;
            if class == ActionClass::Wc {
                if step.target_box.is_none() {
                    return Err((field("target_box"), "coordinate actions need a target box".into()));
                }
                if step.gold.coordinate.is_none() && step.element_coordinate.is_none() {
                    return Err((
                        field("element_coordinate"),
                        format!(
                            "`{}` carries no coordinate; the element position is required",
                            step.gold.action_type
                        ),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Reads a JSONL corpus. Blank lines are skipped; relative PNG paths resolve
/// against the corpus file's directory.
pub fn load_episodes(path: &Path, taxonomies: &Taxonomies) -> Result<Vec<Episode>, EnvError> {
    let io_err = |source| EnvError::Io {
        path: path.display().to_string(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let mut ep: Episode = serde_json::from_str(&line).map_err(|e| EnvError::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        ep.validate(taxonomies).map_err(|(field, msg)| EnvError::Validation {
            line: line_no,
            field,
            msg,
        })?;
        for step in &mut ep.steps {
            if let ScreenSpec::Png { png, .. } = &mut step.screen {
                if png.is_relative() {
                    *png = base.join(&*png);
                }
            }
        }
        out.push(ep);
    }
    Ok(out)
}

pub fn write_episodes(path: &Path, episodes: &[Episode]) -> Result<(), EnvError> {
    let io_err = |source| EnvError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    for ep in episodes {
        let line = serde_json::to_string(ep).expect("episodes serialize");
        writeln!(w, "{line}").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Lazily rendered screenshots of one episode.
#[derive(Debug, Default)]
pub struct EpisodeScreens {
    cells: Vec<OnceLock<Arc<Screenshot>>>,
}

impl EpisodeScreens {
    pub fn new(episode: &Episode) -> Self {
        Self {
            cells: (0..episode.steps.len()).map(|_| OnceLock::new()).collect(),
        }
    }

    /// Screenshot of 1-based step `t`.
    pub fn get(&self, episode: &Episode, t: usize) -> Result<Arc<Screenshot>, ScreenError> {
        let cell = &self.cells[t - 1];
        if let Some(s) = cell.get() {
            return Ok(Arc::clone(s));
        }
        let s = Arc::new(episode.steps[t - 1].render()?);
        Ok(Arc::clone(cell.get_or_init(|| s)))
    }
}

/// What a policy sees at one turn.
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    pub episode: &'a Episode,
    /// 1-based.
    pub t: usize,
    pub screen: &'a Screenshot,
    pub history: &'a CompressedHistory,
    pub taxonomy: &'a ActionTaxonomy,
}

impl Observation<'_> {
    pub fn step(&self) -> &Step {
        &self.episode.steps[self.t - 1]
    }
}

/// A response generator. Implementations must be deterministic given the
/// observation and RNG state.
pub trait Policy: Sync {
    fn act(&self, obs: &Observation<'_>, rng: &mut ChaCha8Rng) -> String;

    /// Log-likelihood of `response`; `None` for policies without a density.
    fn log_prob(&self, _response: &str, _obs: &Observation<'_>) -> Option<f64> {
        None
    }
}

/// Emits the annotated action verbatim.
#[derive(Debug, Clone, Copy, Default)]
pub struct OraclePolicy;

impl Policy for OraclePolicy {
    fn act(&self, obs: &Observation<'_>, _rng: &mut ChaCha8Rng) -> String {
        emit_action(&obs.step().gold)
    }
}

/// Annotated action with isotropic Gaussian noise (normalized units) on
/// every coordinate, clamped to the frame.
#[derive(Debug, Clone, Copy)]
pub struct NoisyOracle {
    pub sigma: f64,
}

impl Policy for NoisyOracle {
    fn act(&self, obs: &Observation<'_>, rng: &mut ChaCha8Rng) -> String {
        let step = obs.step();
        let mut action = step.gold.clone();
        if self.sigma > 0.0 {
            let (w, h) = step.dims();
            let noise = Normal::new(0.0, self.sigma).expect("sigma is finite and nonnegative");
            let mut jitter = |p: PixelPoint| {
                let c = normalize(p, w, h).expect("validated dims");
                let moved = Coordinate::new(c.x + noise.sample(rng), c.y + noise.sample(rng)).clamped();
                moved.to_pixels(w, h)
            };
            action.coordinate = action.coordinate.map(&mut jitter);
            action.coordinate2 = action.coordinate2.map(&mut jitter);
        }
        emit_action(&action)
    }
}

/// Uniform over the taxonomy's tags, with uniform coordinates and payloads.
#[derive(Debug, Clone, Copy, Default)]
pub struct UniformRandom;

const RANDOM_TEXT: [&str; 5] = ["hello", "search", "Maps", "Gmail", "settings"];

impl Policy for UniformRandom {
    fn act(&self, obs: &Observation<'_>, rng: &mut ChaCha8Rng) -> String {
        let tags = obs.taxonomy.tags();
        let tag = tags[rng.random_range(0..tags.len())];
        let (w, h) = obs.step().dims();
        let mut point = || PixelPoint::new(rng.random_range(0..w) as f64, rng.random_range(0..h) as f64);
        let action = match tag {
            ActionType::Swipe | ActionType::Scroll => {
                let a = point();
                let b = point();
                Action {
                    action_type: tag,
                    ..Action::swipe(a, b)
                }
            }
            t if t.carries_coordinate() => {
                let p = point();
                Action::pointed(t, p.x, p.y)
            }
            ActionType::Wait => Action::wait(f64::from(rng.random_range(1..=3u8))),
            ActionType::SystemButton => Action::system_button(Button::ALL[rng.random_range(0..Button::ALL.len())]),
            ActionType::Terminate => Action::terminate(if rng.random_bool(0.5) {
                Status::Success
            } else {
                Status::Failure
            }),
            t => Action::with_text(t, RANDOM_TEXT[rng.random_range(0..RANDOM_TEXT.len())]),
        };
        emit_action(&action)
    }
}

/// One scored response of one rollout at one turn.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutStep {
    pub rollout_id: u32,
    pub t: usize,
    pub raw: String,
    pub action: Option<Action>,
    pub reward: StepReward,
    /// Normalized distance to the gold point, for coordinate-scored steps.
    pub d_norm: Option<f64>,
    pub correct: bool,
    pub patched: bool,
    pub log_prob: Option<f64>,
}

/// Root seed plus a caller-chosen salt (round, training step, ...).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RolloutSeeds {
    pub run_seed: u64,
    pub salt: u64,
}

impl RolloutSeeds {
    pub fn stream(&self, episode_id: &str, t: usize, rollout: u32) -> ChaCha8Rng {
        rng::stream(
            self.run_seed,
            &[rng::hash_str(episode_id), t as u64, self.salt, u64::from(rollout)],
        )
    }
}

/// Samples `n` responses against the same observation (hence the same
/// history) and scores each one.
pub fn rollout_turn(
    obs: &Observation<'_>,
    policy: &dyn Policy,
    n: usize,
    seeds: &RolloutSeeds,
    reward: &RewardConfig,
) -> Vec<RolloutStep> {
    let step = obs.step();
    let target = step.target();
    (0..n as u32)
        .into_par_iter()
        .map(|i| {
            let mut rng = seeds.stream(&obs.episode.id, obs.t, i);
            let raw = policy.act(obs, &mut rng);
            let action = parse_action(&raw).ok();
            let reward_v = score_step(&raw, &target, reward, obs.taxonomy);
            let coord_scored = target.uses_coordinate_branch(obs.taxonomy);
            let d_norm = action
                .as_ref()
                .filter(|_| coord_scored)
                .and_then(|a| target.distance(a));
            let correct = action
                .as_ref()
                .is_some_and(|a| target.is_correct(a, obs.taxonomy, reward.tau_min));
            let log_prob = policy.log_prob(&raw, obs);
            RolloutStep {
                rollout_id: i,
                t: obs.t,
                raw,
                action,
                reward: reward_v,
                d_norm,
                correct,
                patched: false,
                log_prob,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminateReason {
    Done,
    Mismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Advance {
    Continue { next: usize, patched: bool },
    Terminate(TerminateReason),
}

/// Semi-online transition: a correct step continues; an incorrect one is
/// patched with the gold action while patches remain, otherwise the episode
/// ends.
pub fn advance(
    episode: &Episode,
    t: usize,
    step: &RolloutStep,
    patches_used: usize,
    patch_threshold: usize,
) -> Advance {
    let patched = !step.correct;
    if patched && patches_used >= patch_threshold {
        return Advance::Terminate(TerminateReason::Mismatch);
    }
    if t >= episode.steps.len() {
        Advance::Terminate(TerminateReason::Done)
    } else {
        Advance::Continue { next: t + 1, patched }
    }
}

/// Highest-reward rollout of a turn; ties go to the lowest id.
pub fn representative(steps: &[RolloutStep]) -> Option<&RolloutStep> {
    steps.iter().reduce(|best, s| {
        if s.reward.r_total > best.reward.r_total {
            s
        } else {
            best
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub rollouts: usize,
    pub patch_threshold: usize,
    /// Number of historical screenshots kept (the `n` of nAO).
    pub window: usize,
    pub variant: CompressVariant,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            rollouts: 8,
            patch_threshold: 1,
            window: 3,
            variant: CompressVariant::Max,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TurnRecord {
    pub t: usize,
    pub rollouts: Vec<RolloutStep>,
    pub history_digest: u64,
    pub history_tokens: u64,
    /// Tokens the same history would hold uncropped.
    pub original_history_tokens: u64,
    pub screen_tokens: u64,
    /// Whether the recorded action is the patched gold action.
    pub patched: bool,
    pub recorded: Action,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTrace {
    pub episode_id: String,
    pub turns: Vec<TurnRecord>,
    pub coords: CoordinateHistory,
    pub patches_used: usize,
    pub outcome: TerminateReason,
}

/// Everything [`simulate_episode`] needs besides the episode and policy.
#[derive(Debug, Clone, Copy)]
pub struct SimSettings<'a> {
    pub env: &'a EnvConfig,
    pub roi: &'a RoiParams,
    pub tokens: &'a TokenModel,
    pub reward: &'a RewardConfig,
    pub seeds: RolloutSeeds,
}

/// Runs one episode turn by turn. After each turn the annotated coordinate
/// and every rollout's coordinates are tracked, so the next turn's history
/// crops that step.
pub fn simulate_episode(
    episode: &Episode,
    tax: &ActionTaxonomy,
    policy: &dyn Policy,
    screens: &EpisodeScreens,
    settings: &SimSettings<'_>,
) -> Result<EpisodeTrace, EnvError> {
    run_trajectory(episode, tax, policy, screens, settings, None, 0)
}

/// Runs one episode turn by turn, tagging rollout coordinates with `round`.
///
/// With `prior = None` coordinates are tracked live: turn `t`'s history
/// already crops steps `< t` of this run. With `Some(prior)` histories are
/// built from `prior` alone and this run's coordinates are only returned in
/// the trace, to be merged by the caller before the next round.
pub fn run_trajectory(
    episode: &Episode,
    tax: &ActionTaxonomy,
    policy: &dyn Policy,
    screens: &EpisodeScreens,
    settings: &SimSettings<'_>,
    prior: Option<&CoordinateHistory>,
    round: u32,
) -> Result<EpisodeTrace, EnvError> {
    let mut coords = CoordinateHistory::new();
    let mut past: Vec<PastStep> = Vec::new();
    let mut turns = Vec::new();
    let mut patches_used = 0;
    let mut t = 1;
    let (window, variant) = (settings.env.window, settings.env.variant);
    let outcome = loop {
        let step = &episode.steps[t - 1];
        let screen = screens.get(episode, t)?;
        let source = prior.unwrap_or(&coords);
        let history = build_history(&past, source, window, variant, settings.roi);
        let original = build_history(&past, source, window, CompressVariant::Orig, settings.roi);
        let obs = Observation {
            episode,
            t,
            screen: &screen,
            history: &history,
            taxonomy: tax,
        };
        let rollouts = rollout_turn(
            &obs,
            policy,
            settings.env.rollouts.max(1),
            &settings.seeds,
            settings.reward,
        );
        let rep = representative(&rollouts).expect("at least one rollout").clone();
        let next = advance(episode, t, &rep, patches_used, settings.env.patch_threshold);

        let class = tax.classify(&step.gold).expect("validated episode");
        let dims = step.dims();
        coords
            .track(
                t,
                CoordSource::Annotated,
                &step.gold,
                class,
                dims,
                step.element_coordinate,
                step.target_box,
            )
            .expect("validated dims");
        for r in &rollouts {
            if let Some(a) = &r.action {
                if let Ok(c) = tax.classify(a) {
                    let source = CoordSource::Rollout {
                        round,
                        rollout: r.rollout_id,
                    };
                    coords.track(t, source, a, c, dims, None, None).expect("validated dims");
                }
            }
        }

        let patched = !rep.correct && !matches!(next, Advance::Terminate(TerminateReason::Mismatch));
        let recorded = match (&rep.action, rep.correct) {
            (Some(a), true) => a.clone(),
            _ => step.gold.clone(),
        };
        if patched {
            patches_used += 1;
        }
        turns.push(TurnRecord {
            t,
            history_digest: history.digest(),
            history_tokens: history_tokens(&history, settings.tokens),
            original_history_tokens: history_tokens(&original, settings.tokens),
            screen_tokens: token_count(screen.width(), screen.height(), settings.tokens),
            rollouts,
            patched,
            recorded: recorded.clone(),
        });
        past.push(PastStep {
            index: t,
            action: recorded,
            class,
            screen,
        });
        match next {
            Advance::Continue { next, .. } => t = next,
            Advance::Terminate(reason) => break reason,
        }
    };
    Ok(EpisodeTrace {
        episode_id: episode.id.clone(),
        turns,
        coords,
        patches_used,
        outcome,
    })
}

/// Prompt-level visual token totals for one trajectory: the current
/// screenshot plus the historical visuals, summed over turns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenTally {
    pub original: u64,
    pub compressed: u64,
}

impl EpisodeTrace {
    /// Replays the recorded trajectory under `variant` with an `window`-frame
    /// history and tallies tokens against the uncompressed baseline.
    #[allow(clippy::too_many_arguments)]
    pub fn token_tally(
        &self,
        episode: &Episode,
        tax: &ActionTaxonomy,
        screens: &EpisodeScreens,
        variant: CompressVariant,
        window: usize,
        roi: &RoiParams,
        tm: &TokenModel,
    ) -> Result<TokenTally, EnvError> {
        let mut past = Vec::with_capacity(self.turns.len());
        let mut tally = TokenTally::default();
        for turn in &self.turns {
            let cur = turn.screen_tokens;
            let orig = build_history(&past, &self.coords, window, CompressVariant::Orig, roi);
            let comp = build_history(&past, &self.coords, window, variant, roi);
            tally.original += cur + history_tokens(&orig, tm);
            tally.compressed += cur + history_tokens(&comp, tm);
            let step = &episode.steps[turn.t - 1];
            past.push(PastStep {
                index: turn.t,
                action: turn.recorded.clone(),
                class: tax.classify(&step.gold).expect("validated episode"),
                screen: screens.get(episode, turn.t)?,
            });
        }
        Ok(tally)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action::ActionType;
    use crate::geometry::d_norm;

    pub(crate) fn click_episode(n_steps: usize) -> Episode {
        let steps = (0..n_steps)
            .map(|i| {
                let x = 200.0 + 100.0 * i as f64;
                Step {
                    screen: ScreenSpec::Synthetic {
                        seed: i as u64,
                        width: 1000,
                        height: 1000,
                    },
                    target_box: BBox::new(x / 1000.0 - 0.02, 0.48, x / 1000.0 + 0.02, 0.52).ok(),
                    gold: Action::click(x, 500.0),
                    element_coordinate: None,
                }
            })
            .collect();
        Episode {
            id: "ep".into(),
            instruction: "tap things".into(),
            preset: "android_control".into(),
            steps,
        }
    }

    fn obs_for<'a>(
        ep: &'a Episode,
        screen: &'a Screenshot,
        h: &'a CompressedHistory,
        tax: &'a ActionTaxonomy,
    ) -> Observation<'a> {
        Observation {
            episode: ep,
            t: 1,
            screen,
            history: h,
            taxonomy: tax,
        }
    }

    #[test]
    fn oracle_turn_is_perfect_and_identical() {
        let ep = click_episode(2);
        let tax = ActionTaxonomy::preset("android_control").unwrap();
        let screen = ep.steps[0].render().unwrap();
        let h = CompressedHistory::default();
        let cfg = RewardConfig::default();
        let seeds = RolloutSeeds { run_seed: 1, salt: 0 };
        let out = rollout_turn(&obs_for(&ep, &screen, &h, &tax), &OraclePolicy, 8, &seeds, &cfg);
        assert_eq!(out.len(), 8);
        for r in &out {
            assert!((r.reward.r_total - cfg.max_total()).abs() < 1e-15);
            assert!(r.correct);
            assert_eq!(r.raw, out[0].raw);
        }
        let one = rollout_turn(&obs_for(&ep, &screen, &h, &tax), &OraclePolicy, 1, &seeds, &cfg);
        assert_eq!(one.len(), 1);
    }

    #[test]
    fn noisy_rollouts_use_separate_streams() {
        let ep = click_episode(1);
        let tax = ActionTaxonomy::preset("android_control").unwrap();
        let screen = ep.steps[0].render().unwrap();
        let h = CompressedHistory::default();
        let seeds = RolloutSeeds { run_seed: 1, salt: 0 };
        let out = rollout_turn(
            &obs_for(&ep, &screen, &h, &tax),
            &NoisyOracle { sigma: 0.1 },
            2,
            &seeds,
            &RewardConfig::default(),
        );
        assert_ne!(out[0].action, out[1].action);
        let again = rollout_turn(
            &obs_for(&ep, &screen, &h, &tax),
            &NoisyOracle { sigma: 0.1 },
            2,
            &seeds,
            &RewardConfig::default(),
        );
        assert_eq!(out, again);
    }

    #[test]
    fn zero_noise_equals_oracle() {
        let ep = click_episode(1);
        let tax = ActionTaxonomy::preset("android_control").unwrap();
        let screen = ep.steps[0].render().unwrap();
        let h = CompressedHistory::default();
        let o = obs_for(&ep, &screen, &h, &tax);
        let mut rng = rng::stream(0, &[]);
        assert_eq!(
            NoisyOracle { sigma: 0.0 }.act(&o, &mut rng),
            OraclePolicy.act(&o, &mut rng)
        );
    }

    #[test]
    fn noisy_mean_distance_matches_rayleigh_mean() {
        // Mean of the radial distance of a 2-D isotropic Gaussian is σ·√(π/2).
        let ep = click_episode(4);
        let tax = ActionTaxonomy::preset("android_control").unwrap();
        let screen = ep.steps[3].render().unwrap();
        let h = CompressedHistory::default();
        let obs = Observation {
            t: 4,
            ..obs_for(&ep, &screen, &h, &tax)
        };
        let gold = Coordinate::new(0.5, 0.5);
        let policy = NoisyOracle { sigma: 0.1 };
        let mut rng = rng::stream(3, &[]);
        let n = 4000;
        let total: f64 = (0..n)
            .map(|_| {
                let a = parse_action(&policy.act(&obs, &mut rng)).unwrap();
                d_norm(normalize(a.coordinate.unwrap(), 1000, 1000).unwrap(), gold)
            })
            .sum();
        let expected = 0.1 * (std::f64::consts::PI / 2.0).sqrt();
        let mean = total / n as f64;
        assert!((mean - expected).abs() < 0.1 * expected, "{mean} vs {expected}");
    }

    fn step_with(correct: bool) -> RolloutStep {
        RolloutStep {
            rollout_id: 0,
            t: 1,
            raw: String::new(),
            action: None,
            reward: StepReward::default(),
            d_norm: None,
            correct,
            patched: false,
            log_prob: None,
        }
    }

    #[test]
    fn advance_rules() {
        let ep = click_episode(3);
        assert_eq!(
            advance(&ep, 1, &step_with(true), 0, 1),
            Advance::Continue {
                next: 2,
                patched: false
            }
        );
        assert_eq!(
            advance(&ep, 2, &step_with(false), 0, 1),
            Advance::Continue { next: 3, patched: true }
        );
        assert_eq!(
            advance(&ep, 2, &step_with(false), 1, 1),
            Advance::Terminate(TerminateReason::Mismatch)
        );
        assert_eq!(
            advance(&ep, 3, &step_with(true), 1, 1),
            Advance::Terminate(TerminateReason::Done)
        );
    }

    #[test]
    fn simulate_oracle_runs_to_completion() {
        let ep = click_episode(4);
        let tax = ActionTaxonomy::preset("android_control").unwrap();
        let screens = EpisodeScreens::new(&ep);
        let settings = SimSettings {
            env: &EnvConfig::default(),
            roi: &RoiParams::default(),
            tokens: &TokenModel::default(),
            reward: &RewardConfig::default(),
            seeds: RolloutSeeds { run_seed: 7, salt: 0 },
        };
        let trace = simulate_episode(&ep, &tax, &OraclePolicy, &screens, &settings).unwrap();
        assert_eq!(trace.turns.len(), 4);
        assert_eq!(trace.outcome, TerminateReason::Done);
        assert_eq!(trace.patches_used, 0);
        // history tokens at turn 2 are one cropped frame
        assert!(trace.turns[1].history_tokens < trace.turns[1].screen_tokens);
    }

    #[test]
    fn simulate_random_patches_then_stops() {
        let ep = click_episode(6);
        let tax = ActionTaxonomy::preset("android_control").unwrap();
        let screens = EpisodeScreens::new(&ep);
        let env = EnvConfig {
            rollouts: 1,
            ..EnvConfig::default()
        };
        let settings = SimSettings {
            env: &env,
            roi: &RoiParams::default(),
            tokens: &TokenModel::default(),
            reward: &RewardConfig::default(),
            seeds: RolloutSeeds { run_seed: 7, salt: 0 },
        };
        let trace = simulate_episode(&ep, &tax, &UniformRandom, &screens, &settings).unwrap();
        assert!(trace.patches_used <= 1);
        assert_eq!(trace.outcome, TerminateReason::Mismatch);
        assert!(trace
            .turns
            .iter()
            .filter(|t| t.patched)
            .all(|t| t.recorded == ep.steps[t.t - 1].gold));
    }

    #[test]
    fn episodes_round_trip_through_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let eps = vec![click_episode(2), click_episode(3)];
        write_episodes(&path, &eps).unwrap();
        assert_eq!(load_episodes(&path, &Taxonomies::default()).unwrap(), eps);
    }

    #[test]
    fn load_errors_carry_context() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(load_episodes(&path, &Taxonomies::default()).unwrap().is_empty());

        let mut ep = click_episode(2);
        ep.steps[1].target_box = None;
        write_episodes(&path, &[click_episode(1), ep]).unwrap();
        match load_episodes(&path, &Taxonomies::default()) {
            Err(EnvError::Validation { line, field, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(field, "steps[1].target_box");
            }
            other => panic!("{other:?}"),
        }

        let mut ep = click_episode(1);
        ep.preset = "unknown".into();
        write_episodes(&path, &[ep]).unwrap();
        assert!(matches!(
            load_episodes(&path, &Taxonomies::default()),
            Err(EnvError::Validation { .. })
        ));

        std::fs::write(&path, "{\"id\": 3}\n").unwrap();
        assert!(matches!(
            load_episodes(&path, &Taxonomies::default()),
            Err(EnvError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn uniform_random_stays_in_taxonomy() {
        let ep = click_episode(1);
        let tax = ActionTaxonomy::preset("aitw").unwrap();
        let screen = ep.steps[0].render().unwrap();
        let h = CompressedHistory::default();
        let o = obs_for(&ep, &screen, &h, &tax);
        let mut rng = rng::stream(5, &[]);
        for _ in 0..200 {
            let a = parse_action(&UniformRandom.act(&o, &mut rng)).unwrap();
            assert!(tax.contains(a.action_type));
            assert_ne!(a.action_type, ActionType::LongPress);
        }
    }
}
