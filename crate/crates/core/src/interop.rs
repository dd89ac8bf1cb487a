//! Flat, host-friendly entry points for foreign trainer stacks.
//!
//! Complex payloads travel as JSON, hot paths as plain `f64` slices. Every
//! function here is a thin shim over the corresponding core routine and must
//! return bit-identical numbers.

use serde::{Deserialize, Serialize};

use crate::action::{Action, ActionTaxonomy, PixelPoint, TaxonomyError};
use crate::advantage::{gae, AdvantageError};
use crate::geometry::{pad_and_clamp, union_box, BBox, Coordinate, GeometryError};
use crate::reward::{score_step, RewardConfig, RewardConfigError, StepReward, StepTarget};
use crate::screen::TokenModel;

#[derive(Debug, thiserror::Error)]
pub enum InteropError {
    #[error("invalid request json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Reward(#[from] RewardConfigError),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Advantage(#[from] AdvantageError),
    #[error("output buffer has {got} slots, expected {expected}")]
    OutputLength { got: usize, expected: usize },
}

impl InteropError {
    /// Stable numeric code for host-side exception mapping.
    pub fn code(&self) -> i32 {
        match self {
            Self::Json(_) => 1,
            Self::Reward(_) => 2,
            Self::Taxonomy(_) => 3,
            Self::Geometry(_) => 4,
            Self::Advantage(_) => 5,
            Self::OutputLength { .. } => 6,
        }
    }
}

/// Immutable scoring context shared across calls and threads.
#[derive(Debug, Clone)]
pub struct Handle {
    reward: RewardConfig,
    tokens: TokenModel,
    taxonomy: ActionTaxonomy,
}

impl Handle {
    pub fn new(reward: RewardConfig, tokens: TokenModel, taxonomy: ActionTaxonomy) -> Result<Self, InteropError> {
        reward.validate()?;
        taxonomy.validate()?;
        Ok(Self {
            reward,
            tokens,
            taxonomy,
        })
    }

    pub fn reward(&self) -> &RewardConfig {
        &self.reward
    }

    pub fn tokens(&self) -> &TokenModel {
        &self.tokens
    }

    pub fn taxonomy(&self) -> &ActionTaxonomy {
        &self.taxonomy
    }

    /// Scores `raw` against a gold step described by `gold_json`.
    pub fn score_step(&self, raw: &str, gold_json: &str) -> Result<StepReward, InteropError> {
        let gold: GoldStep = serde_json::from_str(gold_json)?;
        let gt_box = gold
            .gt_box
            .map(|[x1, y1, x2, y2]| BBox::new(x1, y1, x2, y2))
            .transpose()?;
        let target = StepTarget {
            gold: &gold.action,
            anchor: gold.element_coordinate,
            gt_box,
            width: gold.width,
            height: gold.height,
        };
        Ok(score_step(raw, &target, &self.reward, &self.taxonomy))
    }
}

/// Gold step payload accepted by [`Handle::score_step`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoldStep {
    pub action: Action,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub gt_box: Option<[f64; 4]>,
    #[serde(default)]
    pub element_coordinate: Option<PixelPoint>,
}

/// Padded union of normalized points and boxes, as `[x1, y1, x2, y2]`.
pub fn aggregate_roi(
    points: &[[f64; 2]],
    boxes: &[[f64; 4]],
    pad: f64,
    min_side: f64,
) -> Result<[f64; 4], InteropError> {
    let points: Vec<Coordinate> = points.iter().map(|&[x, y]| Coordinate::new(x, y)).collect();
    let boxes = boxes
        .iter()
        .map(|&[x1, y1, x2, y2]| BBox::new(x1, y1, x2, y2))
        .collect::<Result<Vec<_>, _>>()?;
    let b = pad_and_clamp(union_box(&points, &boxes)?, pad, min_side);
    Ok([b.x1, b.y1, b.x2, b.y2])
}

/// GAE into a caller-owned buffer of `rewards.len()` slots.
pub fn gae_into(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64, out: &mut [f64]) -> Result<(), InteropError> {
    if out.len() != rewards.len() {
        return Err(InteropError::OutputLength {
            got: out.len(),
            expected: rewards.len(),
        });
    }
    out.copy_from_slice(&gae(rewards, values, gamma, lambda)?);
    Ok(())
}
