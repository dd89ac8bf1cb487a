//! Command-line driver for corpus generation, compression analysis,
//! simulation, toy training and evaluation.
//!
//! Exit codes: 0 on success, 1 when a run violates one of its checked
//! invariants (or fails at runtime), 2 for usage and configuration errors.

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use guirl_core::casc::CompressVariant;
use guirl_core::corpus::{gen_corpus, CorpusParams};
use guirl_core::env::{
    load_episodes, simulate_episode, write_episodes, EnvError, Episode, EpisodeScreens, RolloutSeeds, SimSettings,
    TerminateReason,
};
use guirl_core::metrics::{compression_study, evaluate, render_report, teacher_forced, ReportFormat};
use guirl_core::trainer::train;
use serde::Serialize;

pub use config::{ConfigError, PolicyKind, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "guirl",
    version,
    about = "Coordinate-aware history compression and distance-based RL for GUI agents"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded synthetic corpus as JSONL
    GenCorpus(GenCorpusArgs),
    /// Report history token compression per variant and window
    Compress(CompressArgs),
    /// Run the progressive training loop on the toy policy
    Train(RunArgs),
    /// Score a policy with teacher forcing (TM / GR / SR)
    Eval(EvalArgs),
    /// Roll out a policy over the corpus without updates
    Simulate(RunArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML run config; defaults apply when omitted
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. --set trainer.lr=0.3 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let cfg = RunConfig::load(self.config.as_deref(), &self.overrides)?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct GenCorpusArgs {
    /// Output JSONL path
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub episodes: usize,
    #[arg(long, default_value_t = 6)]
    pub steps: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// android_control, gui_odyssey, aitw or mind2web
    #[arg(long, default_value = "android_control")]
    pub preset: String,
    #[arg(long, default_value_t = 1092)]
    pub width: u32,
    #[arg(long, default_value_t = 2408)]
    pub height: u32,
}

#[derive(Debug, Args)]
pub struct CompressArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// MAX, MIN or ORIG; defaults to metrics.variants
    #[arg(long)]
    pub variant: Option<CompressVariant>,
    /// History window; defaults to metrics.windows
    #[arg(long)]
    pub n: Option<usize>,
    /// Report format on stdout: csv or markdown
    #[arg(long, default_value = "csv")]
    pub format: ReportFormat,
    /// Also write the CSV report here
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output directory for metrics files
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Policy to score; defaults to env.policy
    #[arg(long, value_enum)]
    pub policy: Option<PolicyKind>,
    /// Also write the JSON report here
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// A run finished but broke one of its checked invariants.
#[derive(Debug, thiserror::Error)]
#[error("invariant violated: {0}")]
pub struct Violation(pub String);

/// Maps an error returned by [`run`] onto the process exit code.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<ConfigError>().is_some() || err.downcast_ref::<UsageError>().is_some() {
        2
    } else {
        1
    }
}

/// Bad input that is not a config-file problem (missing corpus, bad preset).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus(a) => cmd_gen_corpus(&a),
        Command::Compress(a) => cmd_compress(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Simulate(a) => cmd_simulate(&a),
    }
}

pub fn cmd_gen_corpus(a: &GenCorpusArgs) -> Result<()> {
    let params = CorpusParams {
        episodes: a.episodes,
        steps: a.steps,
        seed: a.seed,
        preset: a.preset.clone(),
        width: a.width,
        height: a.height,
    };
    if params.episodes == 0 || params.steps == 0 || params.width == 0 || params.height == 0 {
        return Err(UsageError("episodes, steps, width and height must be positive".into()).into());
    }
    let episodes = gen_corpus(&params).map_err(|e| UsageError(e.to_string()))?;
    write_episodes(&a.out, &episodes).with_context(|| format!("writing {}", a.out.display()))?;
    Ok(())
}

/// Loads `env.corpus`, or generates the `[corpus]` section when it is unset.
pub fn load_corpus(cfg: &RunConfig) -> Result<Vec<Episode>> {
    let taxes = cfg.taxonomies()?;
    match cfg.corpus_path() {
        Some(path) => load_episodes(&path, &taxes).map_err(|e| match e {
            EnvError::Io { .. } | EnvError::Parse { .. } | EnvError::Validation { .. } => {
                UsageError(format!("env.corpus: {e}")).into()
            }
            other => anyhow::Error::from(other).context("env.corpus"),
        }),
        None => gen_corpus(&CorpusParams::from(&cfg.corpus)).map_err(|e| UsageError(format!("corpus: {e}")).into()),
    }
}

pub fn cmd_compress(a: &CompressArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let corpus = load_corpus(&cfg)?;
    let variants = a.variant.map_or_else(|| cfg.metrics.variants.clone(), |v| vec![v]);
    let windows = a.n.map_or_else(|| cfg.metrics.windows.clone(), |n| vec![n]);
    let study = compression_study(
        &corpus,
        &cfg.taxonomies()?,
        &cfg.env_config(),
        &cfg.roi(),
        &cfg.tokens(),
        &cfg.reward,
        cfg.seed,
        &variants,
        &windows,
    )?;
    print!("{}", render_report(&study.reports, a.format));
    if let Some(out) = &a.out {
        write(out, &render_report(&study.reports, ReportFormat::Csv))?;
    }
    for r in &study.reports {
        if r.variant == CompressVariant::Orig && r.compression_rate != 0.0 {
            return Err(Violation(format!("ORIG rate at n={} is {}", r.window, r.compression_rate)).into());
        }
    }
    for (ep, tallies) in corpus.iter().zip(&study.per_episode) {
        for &n in &windows {
            if let (Some(max), Some(min)) = (
                tallies.get(&(CompressVariant::Max, n)),
                tallies.get(&(CompressVariant::Min, n)),
            ) {
                if min.compressed < max.compressed {
                    return Err(Violation(format!("{}: MIN compresses more than MAX at n={n}", ep.id)).into());
                }
            }
        }
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct TrainSummary<'a> {
    seed: u64,
    steps: usize,
    final_mean_d_norm: Option<f64>,
    final_mean_reward: Option<f64>,
    roi_non_increasing_fraction: f64,
    coords_checked: usize,
    coords_outside: usize,
    policy: &'a guirl_core::trainer::GaussianCoordPolicy,
}

pub fn cmd_train(a: &RunArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let corpus = load_corpus(&cfg)?;
    let (state, log) = train(&corpus, &cfg.taxonomies()?, cfg.train_setup())?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write(&a.out.join("metrics.csv"), &log.to_csv())?;
    let summary = TrainSummary {
        seed: cfg.seed,
        steps: state.step,
        final_mean_d_norm: log.final_d_norm(10),
        final_mean_reward: log.rows.last().map(|r| r.mean_reward),
        roi_non_increasing_fraction: log.roi.non_increasing_fraction(2),
        coords_checked: log.roi.coords_checked,
        coords_outside: log.roi.coords_outside,
        policy: &state.policy,
    };
    write(
        &a.out.join("summary.json"),
        &(serde_json::to_string_pretty(&summary)? + "\n"),
    )?;
    if log.roi.coords_outside > 0 {
        return Err(Violation(format!(
            "{} of {} tracked coordinates fell outside their ROI",
            log.roi.coords_outside, log.roi.coords_checked
        ))
        .into());
    }
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let corpus = load_corpus(&cfg)?;
    let taxes = cfg.taxonomies()?;
    let policy = cfg.policy(a.policy.unwrap_or(cfg.env.policy));
    let seeds = RolloutSeeds {
        run_seed: cfg.seed,
        salt: 0,
    };
    let preds = teacher_forced(&corpus, &taxes, policy.as_ref(), &cfg.env_config(), &cfg.roi(), seeds)?;
    let report = evaluate(&preds, &corpus, &taxes, &cfg.reward, cfg.metrics.text_match)?;
    let json = serde_json::to_string_pretty(&report)? + "\n";
    print!("{json}");
    if let Some(out) = &a.out {
        write(out, &json)?;
    }
    if report.sr > report.tm + 1e-12 {
        return Err(Violation(format!("SR {} exceeds TM {}", report.sr, report.tm)).into());
    }
    Ok(())
}

#[derive(Debug, Default, Serialize)]
struct SimSummary {
    episodes: usize,
    turns: usize,
    rollouts: usize,
    done: usize,
    mismatch: usize,
    patches: usize,
    mean_r_total: f64,
    mean_d_norm: Option<f64>,
    history_tokens: u64,
    original_history_tokens: u64,
}

pub fn cmd_simulate(a: &RunArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let corpus = load_corpus(&cfg)?;
    let taxes = cfg.taxonomies()?;
    let policy = cfg.policy(cfg.env.policy);
    let (env, roi, tokens) = (cfg.env_config(), cfg.roi(), cfg.tokens());
    let settings = SimSettings {
        env: &env,
        roi: &roi,
        tokens: &tokens,
        reward: &cfg.reward,
        seeds: RolloutSeeds {
            run_seed: cfg.seed,
            salt: 0,
        },
    };
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut rollouts = csv::Writer::from_path(a.out.join("rollouts.csv"))?;
    rollouts.write_record([
        "episode", "t", "rollout", "raw", "r_format", "r_type", "r_acc", "r_total", "d_norm", "correct",
    ])?;
    let mut turns = csv::Writer::from_path(a.out.join("turns.csv"))?;
    turns.write_record([
        "episode",
        "t",
        "history_digest",
        "history_tokens",
        "original_history_tokens",
        "screen_tokens",
        "patched",
        "recorded",
    ])?;
    let mut summary = SimSummary::default();
    let (mut r_sum, mut d_sum, mut d_n) = (0.0, 0.0, 0usize);
    for ep in &corpus {
        let tax = taxes.get(&ep.preset)?;
        let screens = EpisodeScreens::new(ep);
        let trace = simulate_episode(ep, tax, policy.as_ref(), &screens, &settings)?;
        summary.episodes += 1;
        summary.patches += trace.patches_used;
        match trace.outcome {
            TerminateReason::Done => summary.done += 1,
            TerminateReason::Mismatch => summary.mismatch += 1,
        }
        for turn in &trace.turns {
            if turn.history_tokens > turn.original_history_tokens {
                return Err(Violation(format!("{} t={}: compressed history exceeds original", ep.id, turn.t)).into());
            }
            summary.turns += 1;
            summary.history_tokens += turn.history_tokens;
            summary.original_history_tokens += turn.original_history_tokens;
            turns.write_record([
                ep.id.clone(),
                turn.t.to_string(),
                format!("{:016x}", turn.history_digest),
                turn.history_tokens.to_string(),
                turn.original_history_tokens.to_string(),
                turn.screen_tokens.to_string(),
                turn.patched.to_string(),
                guirl_core::emit_action(&turn.recorded),
            ])?;
            for r in &turn.rollouts {
                summary.rollouts += 1;
                r_sum += r.reward.r_total;
                if let Some(d) = r.d_norm {
                    d_sum += d;
                    d_n += 1;
                }
                rollouts.write_record([
                    ep.id.clone(),
                    r.t.to_string(),
                    r.rollout_id.to_string(),
                    r.raw.clone(),
                    format!("{:.6}", r.reward.r_format),
                    format!("{:.6}", r.reward.r_type),
                    format!("{:.6}", r.reward.r_acc),
                    format!("{:.6}", r.reward.r_total),
                    r.d_norm.map(|d| format!("{d:.6}")).unwrap_or_default(),
                    r.correct.to_string(),
                ])?;
            }
        }
    }
    rollouts.flush()?;
    turns.flush()?;
    if summary.rollouts > 0 {
        summary.mean_r_total = r_sum / summary.rollouts as f64;
    }
    summary.mean_d_norm = (d_n > 0).then(|| d_sum / d_n as f64);
    write(
        &a.out.join("summary.json"),
        &(serde_json::to_string_pretty(&summary)? + "\n"),
    )?;
    Ok(())
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
