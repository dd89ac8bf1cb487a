//! Acceptance suite: one PASS/FAIL line per criterion, run in order.
//!
//! Reference corpus: 200 android_control episodes × 6 steps, seed 42,
//! 1092×2408 screens. Reference training run: 16 episodes on 270×600 screens,
//! seed 42, 200 steps, Gaussian policy with σ₀ = 0.15.

use std::collections::BTreeSet;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::time::{Duration, Instant};

use guirl_core::advantage::{dapo_filter, gae, group_relative, population_std};
use guirl_core::casc::{CompressVariant, RoiParams};
use guirl_core::corpus::{gen_corpus, CorpusParams};
use guirl_core::env::{
    simulate_episode, EnvConfig, EpisodeScreens, NoisyOracle, OraclePolicy, RolloutSeeds, SimSettings, Taxonomies,
};
use guirl_core::geometry::Coordinate;
use guirl_core::metrics::{compression_rate, compression_study, evaluate, teacher_forced, TextMatch};
use guirl_core::reward::{r_acc_coord, CoordReward, RewardConfig};
use guirl_core::screen::TokenModel;
use guirl_core::trainer::{reference_corpus, train, TrainLog, TrainSetup};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

struct Suite {
    failures: Vec<String>,
}

impl Suite {
    fn check(&mut self, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let result = match (result, limit) {
            (Ok(_), Some(l)) if elapsed > l => Err(format!("took {elapsed:.2?}, limit {l:?}")),
            (r, _) => r,
        };
        let secs = elapsed.as_secs_f64();
        match result {
            Ok(detail) => println!("PASS  {name:<28} {secs:>7.2}s  {detail}"),
            Err(detail) => {
                println!("FAIL  {name:<28} {secs:>7.2}s  {detail}");
                self.failures.push(name.to_string());
            }
        }
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn reward_correctness() -> Outcome {
    let cfg = RewardConfig::default();
    let target = Coordinate::new(0.2, 0.3);
    // Independent form of the piecewise decay: w_min + (1 − w_min)·clamp(ramp).
    let oracle = |d: f64| {
        let ramp = ((cfg.tau_max - d) / (cfg.tau_max - cfg.tau_min)).clamp(0.0, 1.0);
        cfg.w_min + (1.0 - cfg.w_min) * ramp
    };
    let mut samples = Vec::with_capacity(10_000);
    let mut max_err = 0.0f64;
    for i in 0..100 {
        for j in 0..100 {
            let p = Coordinate::new(i as f64 / 99.0, j as f64 / 99.0);
            let d = (p.x - target.x).hypot(p.y - target.y);
            let got = r_acc_coord(p, target, &cfg);
            max_err = max_err.max((got - oracle(d)).abs());
            samples.push((d, got));
        }
    }
    ensure(max_err <= 1e-12, || format!("max error {max_err:e}"))?;
    let origin = Coordinate::new(0.0, 0.0);
    let at_min = r_acc_coord(Coordinate::new(cfg.tau_min, 0.0), origin, &cfg);
    let at_max = r_acc_coord(Coordinate::new(cfg.tau_max, 0.0), origin, &cfg);
    ensure(at_min == 1.0 && at_max == cfg.w_min, || {
        format!("boundaries {at_min} / {at_max}")
    })?;
    samples.sort_by(|a, b| a.0.total_cmp(&b.0));
    let monotone = samples
        .windows(2)
        .all(|w| w[1].1 <= w[0].1 || (w[1].0 == w[0].0 && w[1].1 == w[0].1));
    ensure(monotone, || "not monotone in d".into())?;
    Ok(format!(
        "10000 grid points, max err {max_err:.1e}, boundaries exact, monotone"
    ))
}

fn gae_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut max_err = 0.0f64;
    for _ in 0..500 {
        let t = rng.random_range(1..=16usize);
        let rewards: Vec<f64> = (0..t).map(|_| rng.random_range(-1.0..1.0)).collect();
        let values: Vec<f64> = (0..=t).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (gamma, lambda) = (rng.random_range(0.0..=1.0), rng.random_range(0.0..=1.0));
        let got = gae(&rewards, &values, gamma, lambda).map_err(|e| e.to_string())?;
        let delta: Vec<f64> = (0..t).map(|k| rewards[k] + gamma * values[k + 1] - values[k]).collect();
        ensure(got.len() == t, || format!("{} advantages for {t} rewards", got.len()))?;
        for (s, a) in got.iter().enumerate() {
            let brute: f64 = (s..t).map(|k| (gamma * lambda).powi((k - s) as i32) * delta[k]).sum();
            max_err = max_err.max((a - brute).abs());
        }
    }
    ensure(max_err <= 1e-12, || format!("max error {max_err:e}"))?;
    Ok(format!("500 instances, max err {max_err:.1e}"))
}

fn group_invariances() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut zero_sum, mut shift, mut scale) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..500 {
        let n = rng.random_range(1..=16usize);
        let g: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let c = rng.random_range(-10.0..10.0);
        let k = rng.random_range(0.1..10.0);
        for normalize in [false, true] {
            let a = group_relative(&g, normalize);
            zero_sum = zero_sum.max(a.iter().sum::<f64>().abs());
            let shifted: Vec<f64> = g.iter().map(|x| x + c).collect();
            let a_shift = group_relative(&shifted, normalize);
            shift = shift.max(a.iter().zip(&a_shift).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
            if normalize {
                let scaled: Vec<f64> = g.iter().map(|x| x * k).collect();
                let a_scale = group_relative(&scaled, true);
                scale = scale.max(a.iter().zip(&a_scale).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
            }
        }
    }
    ensure(zero_sum <= 1e-12, || format!("zero-sum error {zero_sum:e}"))?;
    ensure(shift <= 1e-9, || format!("shift error {shift:e}"))?;
    ensure(scale <= 1e-9, || format!("scale error {scale:e}"))?;
    Ok(format!(
        "500 groups, sum {zero_sum:.1e}, shift {shift:.1e}, scale {scale:.1e}"
    ))
}

fn compression_trend() -> Outcome {
    let corpus = gen_corpus(&CorpusParams::default()).map_err(|e| e.to_string())?;
    let variants = [CompressVariant::Max, CompressVariant::Min];
    let windows = [1, 2, 3, 4];
    let study = compression_study(
        &corpus,
        &Taxonomies::default(),
        &EnvConfig::default(),
        &RoiParams::default(),
        &TokenModel::default(),
        &RewardConfig::default(),
        42,
        &variants,
        &windows,
    )
    .map_err(|e| e.to_string())?;
    let rate = |v: CompressVariant, n: usize| {
        study
            .reports
            .iter()
            .find(|r| r.variant == v && r.window == n)
            .map(|r| r.compression_rate)
            .expect("requested pair")
    };
    let max: Vec<f64> = windows.iter().map(|&n| rate(CompressVariant::Max, n)).collect();
    let pct = |r: f64| format!("{:.1}%", 100.0 * r);
    let summary = format!(
        "MAX n1..4 = {}, {}, {}, {}",
        pct(max[0]),
        pct(max[1]),
        pct(max[2]),
        pct(max[3])
    );
    ensure(max[2] - max[0] >= 0.08, || format!("n3 − n1 below 8pp: {summary}"))?;
    ensure(max[3] >= max[2], || format!("n4 below n3: {summary}"))?;
    let all: Vec<f64> = study.reports.iter().map(|r| r.compression_rate).collect();
    ensure(all.iter().all(|r| (0.25..=0.70).contains(r)), || {
        format!("rate outside [25%, 70%]: {all:?}")
    })?;
    for (ep, tallies) in corpus.iter().zip(&study.per_episode) {
        for n in windows {
            let (mx, mn) = (tallies[&(CompressVariant::Max, n)], tallies[&(CompressVariant::Min, n)]);
            let (r_max, r_min) = (
                compression_rate(mx.original, mx.compressed),
                compression_rate(mn.original, mn.compressed),
            );
            ensure(r_min <= r_max, || format!("{} n={n}: MIN {r_min} > MAX {r_max}", ep.id))?;
        }
    }
    Ok(format!("{summary}; MIN ≤ MAX on all {} trajectories", corpus.len()))
}

fn reference_training(mode: CoordReward) -> Result<(TrainLog, Duration), String> {
    let corpus = gen_corpus(&reference_corpus(42)).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let (_, log) =
        train(&corpus, &Taxonomies::default(), TrainSetup::reference(mode, 42)).map_err(|e| e.to_string())?;
    Ok((log, start.elapsed()))
}

fn roi_soundness(distance: &TrainLog) -> Outcome {
    // Noisy rollouts over the reference corpus: every tracked coordinate must
    // lie in its step's ROI.
    let corpus = gen_corpus(&CorpusParams {
        episodes: 50,
        ..CorpusParams::default()
    })
    .map_err(|e| e.to_string())?;
    let taxes = Taxonomies::default();
    let (env, roi, tokens, reward) = (
        EnvConfig::default(),
        RoiParams::default(),
        TokenModel::default(),
        RewardConfig::default(),
    );
    let settings = SimSettings {
        env: &env,
        roi: &roi,
        tokens: &tokens,
        reward: &reward,
        seeds: RolloutSeeds { run_seed: 42, salt: 0 },
    };
    let policy = NoisyOracle { sigma: 0.05 };
    let mut checked = 0usize;
    for ep in &corpus {
        let tax = taxes.get(&ep.preset).map_err(|e| e.to_string())?;
        let trace =
            simulate_episode(ep, tax, &policy, &EpisodeScreens::new(ep), &settings).map_err(|e| e.to_string())?;
        for (step, coords) in trace.coords.steps() {
            let b = trace.coords.aggregate(step, &roi).map_err(|e| e.to_string())?;
            for c in coords.contributing(roi.memory) {
                checked += 1;
                ensure(b.contains(c), || format!("{} step {step}: {c:?} outside {b:?}", ep.id))?;
            }
            if let Some(gt) = coords.gt_box {
                ensure(b.contains_box(&gt), || {
                    format!("{} step {step}: box outside ROI", ep.id)
                })?;
            }
        }
    }
    let r = &distance.roi;
    ensure(r.coords_outside == 0, || {
        format!(
            "{} of {} training coordinates outside",
            r.coords_outside, r.coords_checked
        )
    })?;
    let frac = r.non_increasing_fraction(2);
    ensure(frac >= 0.9, || {
        format!("non-increasing after round 2 on {:.1}% of transitions", 100.0 * frac)
    })?;
    Ok(format!(
        "{} simulated + {} training coordinates inside; area non-increasing on {:.1}% after round 2",
        checked,
        r.coords_checked,
        100.0 * frac
    ))
}

fn training_convergence(distance: &(TrainLog, Duration), binary: &(TrainLog, Duration)) -> Outcome {
    let d = distance.0.final_d_norm(10).ok_or("no coordinate samples")?;
    let b = binary.0.final_d_norm(10).ok_or("no coordinate samples")?;
    let total = distance.1 + binary.1;
    ensure(total < Duration::from_secs(60), || format!("runs took {total:.2?}"))?;
    ensure(d < 0.05, || format!("distance reward mean d_norm {d:.4}"))?;
    ensure(b > d, || format!("binary {b:.4} not above distance {d:.4}"))?;
    Ok(format!(
        "d_norm at step 200: distance {d:.4}, binary {b:.4} (runs {:.2?} + {:.2?})",
        distance.1, binary.1
    ))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let small = [
        "--set",
        "corpus.episodes=16",
        "--set",
        "corpus.width=270",
        "--set",
        "corpus.height=600",
    ];
    let run = |cmd: &str, out: &str, extra: &[&str]| -> Result<(), String> {
        let status = Command::new(env!("CARGO_BIN_EXE_guirl"))
            .arg(cmd)
            .args(["--out", dir.path().join(out).to_str().unwrap()])
            .args(small)
            .args(extra)
            .output()
            .map_err(|e| e.to_string())?;
        ensure(status.status.success(), || {
            String::from_utf8_lossy(&status.stderr).into_owned()
        })
    };
    let train_args = ["--set", "trainer.steps=30", "--set", "casc.memory=latest_round"];
    let sim_args = ["--set", "env.policy=noisy_oracle"];
    for tag in ["a", "b"] {
        run("train", &format!("train-{tag}"), &train_args)?;
        run("simulate", &format!("sim-{tag}"), &sim_args)?;
    }
    let read = |p: &str| fs::read(dir.path().join(p)).map_err(|e| e.to_string());
    for f in ["train-{}/metrics.csv", "sim-{}/rollouts.csv", "sim-{}/turns.csv"] {
        let (a, b) = (read(&f.replace("{}", "a"))?, read(&f.replace("{}", "b"))?);
        ensure(!a.is_empty() && a == b, || format!("{f} differs between runs"))?;
    }
    Ok("train metrics.csv and simulate CSVs byte-identical".into())
}

fn dapo_filtering() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut constant_seen = 0usize;
    for _ in 0..500 {
        let n_groups = rng.random_range(1..=12usize);
        let groups: Vec<(usize, Vec<f64>)> = (0..n_groups)
            .map(|k| {
                let n = rng.random_range(1..=16usize);
                let rewards = if rng.random_bool(0.4) {
                    vec![rng.random_range(-5.0..5.0); n]
                } else {
                    (0..n).map(|_| rng.random_range(0.0..1.0)).collect()
                };
                (k, rewards)
            })
            .collect();
        let constant: BTreeSet<usize> = groups
            .iter()
            .filter(|(_, r)| r.iter().all(|x| *x == r[0]))
            .map(|(k, _)| *k)
            .collect();
        constant_seen += constant.len();
        for budget in [None, Some(rng.random_range(1..=n_groups))] {
            let kept = dapo_filter(&groups, 0.1, budget).retained;
            ensure(kept.iter().all(|k| !constant.contains(k)), || {
                "constant group retained at τ=0.1".into()
            })?;
            let (t1, t2) = {
                let a: f64 = rng.random_range(0.0..0.5);
                let b: f64 = rng.random_range(0.0..0.5);
                (a.min(b), a.max(b))
            };
            let low: BTreeSet<usize> = dapo_filter(&groups, t1, budget).retained.into_iter().collect();
            let high: BTreeSet<usize> = dapo_filter(&groups, t2, budget).retained.into_iter().collect();
            ensure(high.is_subset(&low), || {
                format!("retained set grew from τ={t1} to τ={t2}")
            })?;
            for k in &high {
                ensure(population_std(&groups[*k].1) >= t2, || {
                    "group below threshold retained".into()
                })?;
            }
        }
    }
    Ok(format!(
        "500 batches, {constant_seen} constant groups all dropped, monotone in τ"
    ))
}

fn oracle_ceiling() -> Outcome {
    let corpus = gen_corpus(&CorpusParams::default()).map_err(|e| e.to_string())?;
    let taxes = Taxonomies::default();
    let preds = teacher_forced(
        &corpus,
        &taxes,
        &OraclePolicy,
        &EnvConfig::default(),
        &RoiParams::default(),
        RolloutSeeds { run_seed: 42, salt: 0 },
    )
    .map_err(|e| e.to_string())?;
    let r = evaluate(&preds, &corpus, &taxes, &RewardConfig::default(), TextMatch::Normalized)
        .map_err(|e| e.to_string())?;
    ensure(r.tm == 1.0 && r.gr == 1.0 && r.sr == 1.0, || format!("{r:?}"))?;
    Ok(format!(
        "TM=GR=SR=1.0 over {} steps ({} coordinate)",
        r.n_steps, r.n_wc_steps
    ))
}

fn main() {
    let mut suite = Suite { failures: Vec::new() };
    let second = Some(Duration::from_secs(1));
    suite.check("reward correctness", second, reward_correctness);
    suite.check("gae oracle equivalence", second, gae_oracle);
    suite.check("group-relative invariances", None, group_invariances);
    suite.check("compression trend", Some(Duration::from_secs(30)), compression_trend);

    let distance = reference_training(CoordReward::Distance);
    let binary = reference_training(CoordReward::Binary);
    suite.check("roi soundness", None, || match &distance {
        Ok((log, _)) => roi_soundness(log),
        Err(e) => Err(e.clone()),
    });
    suite.check("toy training convergence", None, || match (&distance, &binary) {
        (Ok(d), Ok(b)) => training_convergence(d, b),
        (Err(e), _) | (_, Err(e)) => Err(e.clone()),
    });
    suite.check("determinism", None, determinism);
    suite.check("dapo filtering", None, dapo_filtering);
    suite.check("oracle ceiling", None, oracle_ceiling);

    if !suite.failures.is_empty() {
        eprintln!("failed criteria: {:?}", suite.failures);
        std::process::exit(1);
    }
    println!("all primary criteria passed");
}
