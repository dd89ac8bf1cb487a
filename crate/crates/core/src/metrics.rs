//! Step-level evaluation (TM/GR/SR), compression accounting and report
//! rendering.

use std::collections::BTreeMap;
use std::fmt::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::action::{parse_action, ActionClass, ActionTaxonomy};
use crate::casc::{build_history, CompressVariant, CompressedHistory, PastStep, RoiParams};
use crate::env::{
    simulate_episode, EnvConfig, EnvError, Episode, EpisodeScreens, Observation, OraclePolicy, Policy, RolloutSeeds,
    SimSettings, Taxonomies, TokenTally,
};
use crate::reward::RewardConfig;
use crate::screen::TokenModel;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("predictions do not align with the corpus: {0}")]
    Alignment(String),
    #[error(transparent)]
    Env(#[from] EnvError),
}

/// How `type`-style payload text is compared for step success.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextMatch {
    /// Trimmed, case-insensitive equality.
    #[default]
    Normalized,
    /// Byte equality.
    Exact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub text_match: TextMatch,
    /// History windows swept by the compression report.
    pub windows: Vec<usize>,
    pub variants: Vec<CompressVariant>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            text_match: TextMatch::Normalized,
            windows: vec![1, 2, 3, 4],
            variants: vec![CompressVariant::Max, CompressVariant::Min, CompressVariant::Orig],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tm: f64,
    pub gr: f64,
    pub sr: f64,
    pub n_steps: usize,
    /// Coordinate-class gold steps with a wire coordinate (GR denominator).
    pub n_wc_steps: usize,
}

/// Scores raw responses against the corpus. `predictions[e][t]` answers step
/// `t` of episode `e`. GR is taken over coordinate steps whose gold carries a
/// coordinate and is 1.0 when there are none.
pub fn evaluate(
    predictions: &[Vec<String>],
    corpus: &[Episode],
    taxonomies: &Taxonomies,
    reward: &RewardConfig,
    text_match: TextMatch,
) -> Result<EvalReport, MetricsError> {
    if corpus.is_empty() {
        return Err(MetricsError::Alignment("empty corpus".into()));
    }
    if predictions.len() != corpus.len() {
        return Err(MetricsError::Alignment(format!(
            "{} prediction sequences for {} episodes",
            predictions.len(),
            corpus.len()
        )));
    }
    let (mut tm, mut gr, mut sr, mut n, mut n_wc) = (0usize, 0usize, 0usize, 0usize, 0usize);
    for (preds, ep) in predictions.iter().zip(corpus) {
        if preds.len() != ep.steps.len() {
            return Err(MetricsError::Alignment(format!(
                "episode {}: {} predictions for {} steps",
                ep.id,
                preds.len(),
                ep.steps.len()
            )));
        }
        let tax = taxonomies
            .get(&ep.preset)
            .map_err(|e| MetricsError::Alignment(e.to_string()))?;
        for (raw, step) in preds.iter().zip(&ep.steps) {
            n += 1;
            let target = step.target();
            let coord_step = target.uses_coordinate_branch(tax);
            n_wc += usize::from(coord_step);
            let Ok(pred) = parse_action(raw) else {
                continue;
            };
            tm += usize::from(tax.same_type(pred.action_type, step.gold.action_type));
            if coord_step && target.grounded(&pred, reward.tau_min) {
                gr += 1;
            }
            let text_ok = text_match == TextMatch::Normalized || pred.text == step.gold.text;
            sr += usize::from(text_ok && target.is_correct(&pred, tax, reward.tau_min));
        }
    }
    let frac = |k: usize, d: usize| if d == 0 { 1.0 } else { k as f64 / d as f64 };
    Ok(EvalReport {
        tm: frac(tm, n),
        gr: frac(gr, n_wc),
        sr: frac(sr, n),
        n_steps: n,
        n_wc_steps: n_wc,
    })
}

/// Teacher-forced responses: at every step the history holds the gold past
/// actions, and the policy answers once.
pub fn teacher_forced(
    corpus: &[Episode],
    taxonomies: &Taxonomies,
    policy: &dyn Policy,
    env: &EnvConfig,
    roi: &RoiParams,
    seeds: RolloutSeeds,
) -> Result<Vec<Vec<String>>, MetricsError> {
    corpus
        .par_iter()
        .map(|ep| {
            let tax = taxonomies.get(&ep.preset).map_err(EnvError::from)?;
            let screens = EpisodeScreens::new(ep);
            let mut coords = crate::casc::CoordinateHistory::new();
            let mut past = Vec::with_capacity(ep.steps.len());
            let mut out = Vec::with_capacity(ep.steps.len());
            for (i, step) in ep.steps.iter().enumerate() {
                let t = i + 1;
                let screen = screens.get(ep, t).map_err(EnvError::from)?;
                let history: CompressedHistory = if env.window == 0 {
                    CompressedHistory::default()
                } else {
                    build_history(&past, &coords, env.window, env.variant, roi)
                };
                let obs = Observation {
                    episode: ep,
                    t,
                    screen: &screen,
                    history: &history,
                    taxonomy: tax,
                };
                let mut rng = seeds.stream(&ep.id, t, 0);
                out.push(policy.act(&obs, &mut rng));
                let class = tax.classify(&step.gold).map_err(|e| EnvError::Validation {
                    line: 0,
                    field: format!("{}.steps[{i}].gold", ep.id),
                    msg: e.to_string(),
                })?;
                coords
                    .track(
                        t,
                        crate::casc::CoordSource::Annotated,
                        &step.gold,
                        class,
                        step.dims(),
                        step.element_coordinate,
                        step.target_box,
                    )
                    .expect("validated dims");
                past.push(PastStep {
                    index: t,
                    action: step.gold.clone(),
                    class,
                    screen,
                });
            }
            Ok(out)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub variant: CompressVariant,
    pub window: usize,
    pub tokens_original: u64,
    pub tokens_compressed: u64,
    pub compression_rate: f64,
}

pub fn compression_rate(tokens_original: u64, tokens_compressed: u64) -> f64 {
    if tokens_original == 0 {
        0.0
    } else {
        1.0 - tokens_compressed as f64 / tokens_original as f64
    }
}

pub fn compression_report(tallies: &[TokenTally], variant: CompressVariant, window: usize) -> CompressionReport {
    let tokens_original = tallies.iter().map(|t| t.original).sum();
    let tokens_compressed = tallies.iter().map(|t| t.compressed).sum();
    CompressionReport {
        variant,
        window,
        tokens_original,
        tokens_compressed,
        compression_rate: compression_rate(tokens_original, tokens_compressed),
    }
}

/// Per-episode tallies for every (variant, window) pair, plus the pooled
/// reports in the order the pairs were requested.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressionStudy {
    pub reports: Vec<CompressionReport>,
    pub per_episode: Vec<BTreeMap<(CompressVariant, usize), TokenTally>>,
}

/// Runs oracle rollouts over the corpus and tallies history tokens for each
/// requested variant and window.
#[allow(clippy::too_many_arguments)]
pub fn compression_study(
    corpus: &[Episode],
    taxonomies: &Taxonomies,
    env: &EnvConfig,
    roi: &RoiParams,
    tokens: &TokenModel,
    reward: &RewardConfig,
    seed: u64,
    variants: &[CompressVariant],
    windows: &[usize],
) -> Result<CompressionStudy, MetricsError> {
    let settings = SimSettings {
        env,
        roi,
        tokens,
        reward,
        seeds: RolloutSeeds {
            run_seed: seed,
            salt: 0,
        },
    };
    let per_episode = corpus
        .par_iter()
        .map(|ep| {
            let tax = taxonomies.get(&ep.preset).map_err(EnvError::from)?;
            let screens = EpisodeScreens::new(ep);
            let trace = simulate_episode(ep, tax, &OraclePolicy, &screens, &settings)?;
            let mut tallies = BTreeMap::new();
            for &variant in variants {
                for &window in windows {
                    let tally = trace.token_tally(ep, tax, &screens, variant, window, roi, tokens)?;
                    tallies.insert((variant, window), tally);
                }
            }
            Ok(tallies)
        })
        .collect::<Result<Vec<_>, MetricsError>>()?;
    let mut reports = Vec::new();
    for &variant in variants {
        for &window in windows {
            let tallies: Vec<TokenTally> = per_episode.iter().map(|m| m[&(variant, window)]).collect();
            reports.push(compression_report(&tallies, variant, window));
        }
    }
    Ok(CompressionStudy { reports, per_episode })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Markdown,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(Self::Csv),
            "markdown" | "md" => Ok(Self::Markdown),
            other => Err(format!("unknown report format `{other}`")),
        }
    }
}

fn percent(rate: f64) -> String {
    format!("{:.1}%", rate * 100.0)
}

pub fn render_report(reports: &[CompressionReport], format: ReportFormat) -> String {
    let mut out = String::new();
    match format {
        ReportFormat::Csv => {
            out.push_str("variant,window,tokens_original,tokens_compressed,compression_rate\n");
            for r in reports {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{}",
                    r.variant.as_str(),
                    r.window,
                    r.tokens_original,
                    r.tokens_compressed,
                    percent(r.compression_rate)
                );
            }
        }
        ReportFormat::Markdown => {
            out.push_str("| Variant | History | Original tokens | Compressed tokens | Compression rate |\n");
            out.push_str("|---|---|---:|---:|---:|\n");
            for r in reports {
                let _ = writeln!(
                    out,
                    "| {} | {}AO | {} | {} | {} |",
                    r.variant.as_str(),
                    r.window,
                    r.tokens_original,
                    r.tokens_compressed,
                    percent(r.compression_rate)
                );
            }
        }
    }
    out
}

/// Whether every WC gold step of the episode is scored on distance.
pub fn all_coordinate_steps(ep: &Episode, tax: &ActionTaxonomy) -> bool {
    ep.steps
        .iter()
        .all(|s| tax.classify(&s.gold) == Ok(ActionClass::Wc) && s.gold.coordinate.is_some())
}
