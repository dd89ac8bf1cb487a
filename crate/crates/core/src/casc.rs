//! Coordinate-aware spatial compression of the visual history.
//!
//! Three stages run between generation rounds:
//!
//! 1. **Tracking** records the coordinates of coordinate-related actions, from
//!    annotations and from every rollout, per history step.
//! 2. **Aggregation** folds a step's coordinates (plus its ground-truth box,
//!    when the episode has one) into one padded region of interest.
//! 3. **Cropping** replaces each retained historical screenshot with its ROI.
//!
//! The resulting [`CompressedHistory`] is an immutable snapshot shared by all
//! rollouts of a turn.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::action::{emit_action, Action, ActionClass, PixelPoint};
use crate::geometry::{normalize, pad_and_clamp, union_box, BBox, Coordinate, GeometryError};
use crate::rng::mix64;
use crate::screen::{crop, token_count, Screenshot, TokenModel};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CascError {
    #[error("step {0} has no tracked coordinates")]
    NoCoordinates(usize),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// How non-coordinate visuals are treated; coordinate visuals are always
/// cropped except under `Orig`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum CompressVariant {
    /// Keep only coordinate-action visuals, cropped.
    Max,
    /// Crop coordinate-action visuals, keep the rest untouched.
    Min,
    /// No compression.
    Orig,
}

impl CompressVariant {
    pub const ALL: [CompressVariant; 3] = [CompressVariant::Max, CompressVariant::Min, CompressVariant::Orig];

    pub fn as_str(self) -> &'static str {
        match self {
            CompressVariant::Max => "MAX",
            CompressVariant::Min => "MIN",
            CompressVariant::Orig => "ORIG",
        }
    }
}

impl std::str::FromStr for CompressVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "MAX" => Ok(CompressVariant::Max),
            "MIN" => Ok(CompressVariant::Min),
            "ORIG" => Ok(CompressVariant::Orig),
            other => Err(format!("unknown variant `{other}` (expected MAX, MIN or ORIG)")),
        }
    }
}

/// Which rollout rounds contribute predictions to a step's ROI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoiMemory {
    /// Every round seen so far.
    Accumulate,
    /// Only the most recent round.
    LatestRound,
}

/// Where a tracked coordinate came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum CoordSource {
    Annotated,
    Rollout { round: u32, rollout: u32 },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepCoords {
    pub annotated: Vec<Coordinate>,
    /// Keyed by `(round, rollout)`.
    pub predicted: BTreeMap<(u32, u32), Vec<Coordinate>>,
    pub gt_box: Option<BBox>,
}

impl StepCoords {
    fn is_empty(&self) -> bool {
        self.annotated.is_empty() && self.predicted.is_empty() && self.gt_box.is_none()
    }

    fn latest_round(&self) -> Option<u32> {
        self.predicted.keys().map(|&(round, _)| round).max()
    }

    /// Coordinates that feed the ROI under the given memory policy.
    pub fn contributing(&self, memory: RoiMemory) -> Vec<Coordinate> {
        let latest = self.latest_round();
        let preds = self
            .predicted
            .iter()
            .filter(|((round, _), _)| memory == RoiMemory::Accumulate || Some(*round) == latest)
            .flat_map(|(_, cs)| cs.iter().copied());
        self.annotated.iter().copied().chain(preds).collect()
    }
}

/// Per-step coordinate record for one trajectory (steps are 1-based).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CoordinateHistory {
    steps: BTreeMap<usize, StepCoords>,
}

impl CoordinateHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step(&self, step: usize) -> Option<&StepCoords> {
        self.steps.get(&step)
    }

    pub fn steps(&self) -> impl Iterator<Item = (usize, &StepCoords)> {
        self.steps.iter().map(|(k, v)| (*k, v))
    }

    /// Records the coordinates of `action` at `step`. Non-coordinate actions
    /// leave the history untouched. `anchor` supplies the element position for
    /// coordinate-class actions whose wire form carries none.
    #[allow(clippy::too_many_arguments)]
    pub fn track(
        &mut self,
        step: usize,
        source: CoordSource,
        action: &Action,
        class: ActionClass,
        dims: (u32, u32),
        anchor: Option<PixelPoint>,
        gt_box: Option<BBox>,
    ) -> Result<(), GeometryError> {
        if class == ActionClass::Nc {
            return Ok(());
        }
        let mut points = action.points().peekable();
        let coords: Vec<Coordinate> = if points.peek().is_some() {
            points.map(|p| normalize(p, dims.0, dims.1)).collect::<Result<_, _>>()?
        } else {
            anchor
                .map(|p| normalize(p, dims.0, dims.1))
                .transpose()?
                .into_iter()
                .collect()
        };
        let entry = self.steps.entry(step).or_default();
        match source {
            CoordSource::Annotated => entry.annotated.extend(coords),
            CoordSource::Rollout { round, rollout } => {
                entry.predicted.entry((round, rollout)).or_default().extend(coords)
            }
        }
        if gt_box.is_some() {
            entry.gt_box = gt_box;
        }
        Ok(())
    }

    /// Union of the step's contributing coordinates and ground-truth box,
    /// padded and clamped into the frame.
    pub fn aggregate(&self, step: usize, roi: &RoiParams) -> Result<BBox, CascError> {
        let coords = self
            .steps
            .get(&step)
            .filter(|s| !s.is_empty())
            .ok_or(CascError::NoCoordinates(step))?;
        let points = coords.contributing(roi.memory);
        let boxes: Vec<BBox> = coords.gt_box.into_iter().collect();
        let union = union_box(&points, &boxes).map_err(|_| CascError::NoCoordinates(step))?;
        Ok(pad_and_clamp(union, roi.pad, roi.min_side))
    }

    /// Drops the given round's predictions everywhere (annotations stay).
    pub fn forget_round(&mut self, round: u32) {
        for s in self.steps.values_mut() {
            s.predicted.retain(|&(r, _), _| r != round);
        }
    }

    /// Moves everything in `other` into `self`.
    pub fn merge(&mut self, other: CoordinateHistory) {
        for (step, coords) in other.steps {
            let entry = self.steps.entry(step).or_default();
            entry.annotated.extend(coords.annotated);
            for (k, v) in coords.predicted {
                entry.predicted.entry(k).or_default().extend(v);
            }
            if coords.gt_box.is_some() {
                entry.gt_box = coords.gt_box;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoiParams {
    pub pad: f64,
    pub min_side: f64,
    pub memory: RoiMemory,
}

impl Default for RoiParams {
    fn default() -> Self {
        Self {
            pad: 0.05,
            min_side: 0.20,
            memory: RoiMemory::Accumulate,
        }
    }
}

/// One already-executed step offered to [`build_history`].
#[derive(Debug, Clone)]
pub struct PastStep {
    /// 1-based step index.
    pub index: usize,
    /// Action recorded in the trajectory (prediction or patched gold).
    pub action: Action,
    pub class: ActionClass,
    pub screen: Arc<Screenshot>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryEntry {
    pub step: usize,
    pub action_text: String,
    pub visual: Option<Arc<Screenshot>>,
    /// ROI the visual was cropped to; `None` for uncropped visuals.
    pub roi: Option<BBox>,
}

/// Coordinate-augmented history `ch_t`: every past action, at most `n` visuals.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CompressedHistory {
    pub entries: Vec<HistoryEntry>,
}

impl CompressedHistory {
    pub fn visual_count(&self) -> usize {
        self.entries.iter().filter(|e| e.visual.is_some()).count()
    }

    /// Content fingerprint used to check that a turn's rollouts saw the same history.
    pub fn digest(&self) -> u64 {
        let mut h = mix64(self.entries.len() as u64);
        for e in &self.entries {
            h = mix64(h ^ e.step as u64);
            h = mix64(h ^ crate::rng::hash_str(&e.action_text));
            if let Some(v) = &e.visual {
                h = mix64(h ^ (u64::from(v.width()) << 32 | u64::from(v.height())));
            }
            if let Some(r) = e.roi {
                for c in <[f64; 4]>::from(r) {
                    h = mix64(h ^ c.to_bits());
                }
            }
        }
        h
    }
}

/// Builds `ch_t` from the steps before `t`. Action texts are kept for every
/// step; visuals only for the last `window` steps, filtered and cropped per
/// `variant`. A coordinate step without tracked coordinates is cropped to
/// the full frame.
pub fn build_history(
    past: &[PastStep],
    coords: &CoordinateHistory,
    window: usize,
    variant: CompressVariant,
    roi: &RoiParams,
) -> CompressedHistory {
    let first_visual = past.len().saturating_sub(window);
    let entries = past
        .iter()
        .enumerate()
        .map(|(i, step)| {
            let action_text = emit_action(&step.action);
            let (visual, roi_box) = if i < first_visual {
                (None, None)
            } else {
                match (variant, step.class) {
                    (CompressVariant::Orig, _) | (CompressVariant::Min, ActionClass::Nc) => {
                        (Some(Arc::clone(&step.screen)), None)
                    }
                    (CompressVariant::Max, ActionClass::Nc) => (None, None),
                    (_, ActionClass::Wc) => {
                        let b = coords.aggregate(step.index, roi).unwrap_or(BBox::FULL);
                        (Some(Arc::new(crop(&step.screen, &b))), Some(b))
                    }
                }
            };
            HistoryEntry {
                step: step.index,
                action_text,
                visual,
                roi: roi_box,
            }
        })
        .collect();
    CompressedHistory { entries }
}

/// Visual tokens held by the history.
pub fn history_tokens(history: &CompressedHistory, tm: &TokenModel) -> u64 {
    history
        .entries
        .iter()
        .filter_map(|e| e.visual.as_ref())
        .map(|v| token_count(v.width(), v.height(), tm))
        .sum()
}
