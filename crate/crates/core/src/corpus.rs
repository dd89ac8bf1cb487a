//! Seeded synthetic corpora: per-episode clusters of coordinate targets
//! interleaved with non-coordinate steps at a preset-specific mix.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::action::{Action, ActionTaxonomy, ActionType, Button, PixelPoint, Status, TaxonomyError};
use crate::env::{Episode, ScreenSpec, Step};
use crate::geometry::{BBox, Coordinate};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusParams {
    pub episodes: usize,
    pub steps: usize,
    pub seed: u64,
    pub preset: String,
    pub width: u32,
    pub height: u32,
}

impl Default for CorpusParams {
    fn default() -> Self {
        Self {
            episodes: 200,
            steps: 6,
            seed: 42,
            preset: "android_control".into(),
            width: 1092,
            height: 2408,
        }
    }
}

/// Type mix for one preset. Weights are relative within each class.
struct Mix {
    wc_share: f64,
    wc: &'static [(ActionType, f64)],
    nc: &'static [(ActionType, f64)],
}

fn mix(preset: &str) -> Option<Mix> {
    use ActionType::*;
    Some(match preset {
        "android_control" => Mix {
            wc_share: 0.75,
            wc: &[(Click, 0.8), (LongPress, 0.05), (Scroll, 0.15)],
            nc: &[(TypeText, 0.35), (SystemButton, 0.2), (Open, 0.3), (Wait, 0.15)],
        },
        "gui_odyssey" => Mix {
            wc_share: 0.83,
            wc: &[(Click, 0.8), (LongPress, 0.05), (Scroll, 0.15)],
            nc: &[(TypeText, 0.5), (SystemButton, 0.4), (Terminate, 0.1)],
        },
        "aitw" => Mix {
            wc_share: 0.67,
            wc: &[(Click, 0.85), (Scroll, 0.15)],
            nc: &[(TypeText, 0.5), (SystemButton, 0.4), (Terminate, 0.1)],
        },
        "mind2web" => Mix {
            wc_share: 1.0,
            wc: &[
                (Click, 0.6),
                (TypeText, 0.2),
                (Select, 0.1),
                (Hover, 0.05),
                (SystemButton, 0.05),
            ],
            nc: &[],
        },
        _ => return None,
    })
}

fn pick(weights: &[(ActionType, f64)], rng: &mut ChaCha8Rng) -> ActionType {
    let total: f64 = weights.iter().map(|(_, w)| w).sum();
    let mut u = rng.random::<f64>() * total;
    for &(t, w) in weights {
        if u < w {
            return t;
        }
        u -= w;
    }
    weights[weights.len() - 1].0
}

const WORDS: [&str; 8] = [
    "coffee",
    "weather today",
    "Maps",
    "Gmail",
    "alarm 7am",
    "Clock",
    "news",
    "Settings",
];
const APPS: [&str; 5] = ["Chrome", "Gmail", "Maps", "Clock", "Settings"];

/// Generates `params.episodes` episodes. Output depends only on `params`.
pub fn gen_corpus(params: &CorpusParams) -> Result<Vec<Episode>, TaxonomyError> {
    let tax = ActionTaxonomy::preset(&params.preset)?;
    let mix = mix(&params.preset).ok_or_else(|| TaxonomyError::UnknownPreset(params.preset.clone()))?;
    let episodes = (0..params.episodes)
        .map(|i| gen_episode(params, &tax, &mix, i))
        .collect();
    Ok(episodes)
}

fn gen_episode(params: &CorpusParams, tax: &ActionTaxonomy, mix: &Mix, index: usize) -> Episode {
    let mut rng = rng::stream(params.seed, &[index as u64]);
    let (w, h) = (params.width, params.height);
    let center = Coordinate::new(rng.random_range(0.25..0.75), rng.random_range(0.25..0.75));
    let spread = Normal::new(0.0, 0.06).expect("valid std");
    let steps = (0..params.steps)
        .map(|t| {
            let screen = ScreenSpec::Synthetic {
                seed: rng::derive_seed(params.seed, &[index as u64, t as u64]),
                width: w,
                height: h,
            };
            let is_wc = mix.nc.is_empty() || rng.random_bool(mix.wc_share);
            if !is_wc {
                let gold = nc_action(pick(mix.nc, &mut rng), &mut rng);
                return Step {
                    screen,
                    target_box: None,
                    gold,
                    element_coordinate: None,
                };
            }
            let kind = pick(mix.wc, &mut rng);
            let c = Coordinate::new(
                (center.x + spread.sample(&mut rng)).clamp(0.08, 0.92),
                (center.y + spread.sample(&mut rng)).clamp(0.08, 0.92),
            );
            let (hw, hh) = (rng.random_range(0.03..0.07), rng.random_range(0.012..0.03));
            let target_box = BBox::new(c.x - hw, c.y - hh, c.x + hw, c.y + hh).expect("box inside frame");
            let p = PixelPoint::new((c.x * f64::from(w)).round(), (c.y * f64::from(h)).round());
            let (gold, element_coordinate) = wc_action(kind, p, h, &mut rng);
            debug_assert!(tax.contains(gold.action_type));
            Step {
                screen,
                target_box: Some(target_box),
                gold,
                element_coordinate,
            }
        })
        .collect();
    Episode {
        id: format!("{}-{}-{index:05}", params.preset, params.seed),
        instruction: format!("synthetic task {index}"),
        preset: params.preset.clone(),
        steps,
    }
}

fn wc_action(kind: ActionType, p: PixelPoint, height: u32, rng: &mut ChaCha8Rng) -> (Action, Option<PixelPoint>) {
    match kind {
        ActionType::Scroll => {
            let dy = (f64::from(height) * rng.random_range(0.05..0.12)).round();
            let to = PixelPoint::new(p.x, (p.y - dy).max(0.0));
            (Action::scroll(p, to), None)
        }
        ActionType::TypeText => (
            Action::with_text(kind, WORDS[rng.random_range(0..WORDS.len())]),
            Some(p),
        ),
        ActionType::SystemButton => (Action::system_button(Button::Enter), Some(p)),
        ActionType::Select => {
            let mut a = Action::pointed(kind, p.x, p.y);
            a.text = Some(WORDS[rng.random_range(0..WORDS.len())].to_string());
            (a, None)
        }
        t => (Action::pointed(t, p.x, p.y), None),
    }
}

fn nc_action(kind: ActionType, rng: &mut ChaCha8Rng) -> Action {
    match kind {
        ActionType::SystemButton => Action::system_button(if rng.random_bool(0.7) {
            Button::Back
        } else {
            Button::Home
        }),
        ActionType::Open => Action::with_text(kind, APPS[rng.random_range(0..APPS.len())]),
        ActionType::Wait => Action::wait(f64::from(rng.random_range(1..=3u8))),
        ActionType::Terminate => Action::terminate(Status::Success),
        t => Action::with_text(t, WORDS[rng.random_range(0..WORDS.len())]),
    }
}
