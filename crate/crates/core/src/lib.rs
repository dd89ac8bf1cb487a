//! Coordinate-aware history compression and distance-based rewards for GUI
//! agent reinforcement learning, at desk scale.
//!
//! The crate is organized bottom-up:
//!
//! - [`action`], [`geometry`], [`screen`]: wire format, normalized geometry,
//!   screenshots and token accounting.
//! - [`casc`]: coordinate tracking, ROI aggregation and history cropping.
//! - [`reward`], [`advantage`]: step scoring and advantage estimation.
//! - [`env`], [`corpus`]: scripted episodes, policies and rollouts.
//! - [`trainer`], [`metrics`]: the progressive training loop and evaluation.
//! - [`interop`]: flat entry points for foreign callers.
//!
//! All randomness flows from explicit seeds through [`rng::stream`].

pub mod action;
pub mod advantage;
pub mod casc;
pub mod corpus;
pub mod env;
pub mod geometry;
pub mod interop;
pub mod metrics;
pub mod reward;
pub mod rng;
pub mod screen;
pub mod trainer;

pub use action::{emit_action, parse_action, Action, ActionClass, ActionTaxonomy, ActionType, PixelPoint};
pub use advantage::{AdvantageConfig, Estimator};
pub use casc::{build_history, CompressVariant, CompressedHistory, CoordinateHistory, RoiMemory, RoiParams};
pub use corpus::{gen_corpus, CorpusParams};
pub use env::{EnvConfig, Episode, Policy, Step, Taxonomies};
pub use geometry::{BBox, Coordinate};
pub use metrics::{CompressionReport, EvalReport, MetricsConfig, ReportFormat, TextMatch};
pub use reward::{score_step, CoordReward, RewardConfig, StepReward, StepTarget};
pub use screen::{Screenshot, TokenModel};
pub use trainer::{train, TrainConfig, TrainLog, TrainSetup, TrainState};
