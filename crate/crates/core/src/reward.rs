//! Step reward `r = α·r_format + β·r_type + γ·r_acc`.
//!
//! `r_acc` decays linearly with normalized distance for coordinate actions
//! and is an exact-match indicator for everything else. A format failure
//! zeroes the whole step; a type mismatch zeroes `r_acc`.

use serde::{Deserialize, Serialize};

use crate::action::{parse_action, Action, ActionClass, ActionTaxonomy, PixelPoint};
use crate::geometry::{d_norm, normalize, BBox, Coordinate};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RewardConfigError {
    #[error("reward weights must be finite and nonnegative")]
    NegativeWeight,
    #[error("need 0 <= tau_min < tau_max <= sqrt(2), got tau_min={0}, tau_max={1}")]
    Tolerance(f64, f64),
    #[error("w_min must lie in [0, 1), got {0}")]
    MinWeight(f64),
}

/// Shape of the coordinate accuracy term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoordReward {
    /// Piecewise-linear decay between `tau_min` and `tau_max`.
    Distance,
    /// 1 inside `tau_min`, 0 outside.
    Binary,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub tau_min: f64,
    pub tau_max: f64,
    pub w_min: f64,
    pub coord_reward: CoordReward,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0 / 3.0,
            beta: 1.0 / 3.0,
            gamma: 1.0 / 3.0,
            tau_min: 0.04,
            tau_max: 0.50,
            w_min: 0.10,
            coord_reward: CoordReward::Distance,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), RewardConfigError> {
        if ![self.alpha, self.beta, self.gamma]
            .iter()
            .all(|w| w.is_finite() && *w >= 0.0)
        {
            return Err(RewardConfigError::NegativeWeight);
        }
        if !(0.0 <= self.tau_min && self.tau_min < self.tau_max && self.tau_max <= std::f64::consts::SQRT_2) {
            return Err(RewardConfigError::Tolerance(self.tau_min, self.tau_max));
        }
        if !(0.0..1.0).contains(&self.w_min) {
            return Err(RewardConfigError::MinWeight(self.w_min));
        }
        Ok(())
    }

    pub fn max_total(&self) -> f64 {
        self.alpha + self.beta + self.gamma
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepReward {
    pub r_format: f64,
    pub r_type: f64,
    pub r_acc: f64,
    pub r_total: f64,
}

pub fn r_format(raw: &str) -> f64 {
    indicator(parse_action(raw).is_ok())
}

pub fn r_type(pred: &Action, gold: &Action, tax: &ActionTaxonomy) -> f64 {
    indicator(tax.same_type(pred.action_type, gold.action_type))
}

/// Piecewise coordinate accuracy: 1 within `tau_min`, `w_min` beyond
/// `tau_max`, linear in between.
pub fn r_acc_coord(predicted: Coordinate, target: Coordinate, cfg: &RewardConfig) -> f64 {
    let d = d_norm(predicted, target);
    match cfg.coord_reward {
        CoordReward::Binary => indicator(d <= cfg.tau_min),
        CoordReward::Distance => distance_weight(d, cfg),
    }
}

fn distance_weight(d: f64, cfg: &RewardConfig) -> f64 {
    if d <= cfg.tau_min {
        1.0
    } else if d >= cfg.tau_max {
        cfg.w_min
    } else {
        1.0 - (d - cfg.tau_min) / (cfg.tau_max - cfg.tau_min) * (1.0 - cfg.w_min)
    }
}

fn norm_text(s: &str) -> String {
    s.trim().to_lowercase()
}

/// Exact payload match; text compares trimmed and case-insensitively.
pub fn payload_matches(pred: &Action, gold: &Action, tax: &ActionTaxonomy) -> bool {
    tax.same_type(pred.action_type, gold.action_type)
        && pred.coordinate == gold.coordinate
        && pred.coordinate2 == gold.coordinate2
        && pred.text.as_deref().map(norm_text) == gold.text.as_deref().map(norm_text)
        && pred.time_s == gold.time_s
        && pred.button == gold.button
        && pred.status == gold.status
}

pub fn r_acc_nc(pred: &Action, gold: &Action, tax: &ActionTaxonomy) -> f64 {
    indicator(payload_matches(pred, gold, tax))
}

/// Everything needed to score a response against one annotated step.
#[derive(Debug, Clone, Copy)]
pub struct StepTarget<'a> {
    pub gold: &'a Action,
    /// Element position for coordinate-class gold actions that carry none on the wire.
    pub anchor: Option<PixelPoint>,
    pub gt_box: Option<BBox>,
    pub width: u32,
    pub height: u32,
}

impl StepTarget<'_> {
    /// Normalized gold coordinate, if the gold action (or its anchor) has one.
    pub fn gold_point(&self) -> Option<Coordinate> {
        self.gold
            .coordinate
            .or(self.anchor)
            .and_then(|p| normalize(p, self.width, self.height).ok())
    }

    fn pred_point(&self, pred: &Action) -> Option<Coordinate> {
        pred.coordinate.and_then(|p| normalize(p, self.width, self.height).ok())
    }

    /// Distance of the prediction's primary coordinate to the gold point.
    pub fn distance(&self, pred: &Action) -> Option<f64> {
        Some(d_norm(self.pred_point(pred)?, self.gold_point()?))
    }

    /// Prediction lands inside the ground-truth box or within `tau_min`.
    pub fn grounded(&self, pred: &Action, tau_min: f64) -> bool {
        let Some(p) = self.pred_point(pred) else {
            return false;
        };
        self.gt_box.is_some_and(|b| b.contains(p)) || self.distance(pred).is_some_and(|d| d <= tau_min)
    }

    /// Whether the gold action is scored on distance.
    pub fn uses_coordinate_branch(&self, tax: &ActionTaxonomy) -> bool {
        tax.classify(self.gold) == Ok(ActionClass::Wc) && self.gold.coordinate.is_some()
    }

    /// Step-level correctness: matching type and, for coordinate actions,
    /// grounding; otherwise exact payload.
    pub fn is_correct(&self, pred: &Action, tax: &ActionTaxonomy, tau_min: f64) -> bool {
        if !tax.same_type(pred.action_type, self.gold.action_type) {
            return false;
        }
        if self.uses_coordinate_branch(tax) {
            self.grounded(pred, tau_min)
        } else {
            payload_matches(pred, self.gold, tax)
        }
    }
}

/// Scores a raw response. Never fails: unparseable output scores zero.
pub fn score_step(raw: &str, target: &StepTarget<'_>, cfg: &RewardConfig, tax: &ActionTaxonomy) -> StepReward {
    match parse_action(raw) {
        Ok(pred) => score_action(&pred, target, cfg, tax),
        Err(_) => StepReward::default(),
    }
}

/// Scores an already-parsed (hence well-formatted) action.
pub fn score_action(pred: &Action, target: &StepTarget<'_>, cfg: &RewardConfig, tax: &ActionTaxonomy) -> StepReward {
    let r_format = 1.0;
    let r_type = r_type(pred, target.gold, tax);
    let r_acc = if r_type == 0.0 {
        0.0
    } else if target.uses_coordinate_branch(tax) {
        match (target.pred_point(pred), target.gold_point()) {
            (Some(p), Some(g)) => r_acc_coord(p, g, cfg),
            _ => 0.0,
        }
    } else {
        r_acc_nc(pred, target.gold, tax)
    };
    StepReward {
        r_format,
        r_type,
        r_acc,
        r_total: cfg.alpha * r_format + cfg.beta * r_type + cfg.gamma * r_acc,
    }
}

fn indicator(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}
