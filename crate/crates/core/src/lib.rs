//! Flocking simulation, a centralized expert controller, decentralized
//! observations and spatio-temporal graph policies trained by imitation.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod dynamics;
mod error;
pub mod eval;
pub mod expert;
pub mod export;
pub mod model;
pub mod observation;
pub mod swarm;
pub mod train;

pub use config::{ExpertWeights, Obstacle, SwarmConfig};
pub use dynamics::{clamp_per_axis, step, EpisodeStatus, StepOutcome};
pub use error::{Error, Result};
pub use eval::{
    aggregate_metrics, rollout_closed_loop, EpisodeMetrics, EpisodeRecord, MetricsReport, Policy,
};
pub use expert::{expert_control, BetaRobot, ExpertControl};
pub use model::{ModelInput, ModelSpec, StgnnModel, Variant};
pub use observation::{build_frame, History, ObservationFrame};
pub use swarm::{leader_at, LeaderState, SwarmState};
