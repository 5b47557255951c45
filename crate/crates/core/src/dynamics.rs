use ndarray::{Array1, Array2, ArrayView1, Zip};
use serde::{Deserialize, Serialize};

use crate::config::SwarmConfig;
use crate::error::{Error, Result};
use crate::swarm::{surface_distance, SwarmState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EpisodeStatus {
    Running,
    CompletedEpisode,
    FailedRobotCollision,
    FailedObstacleCollision,
}

impl EpisodeStatus {
    pub fn is_terminal(self) -> bool {
        self != EpisodeStatus::Running
    }

    pub fn is_failure(self) -> bool {
        matches!(
            self,
            EpisodeStatus::FailedRobotCollision | EpisodeStatus::FailedObstacleCollision
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EpisodeStatus::Running => "running",
            EpisodeStatus::CompletedEpisode => "completed",
            EpisodeStatus::FailedRobotCollision => "robot_collision",
            EpisodeStatus::FailedObstacleCollision => "obstacle_collision",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub next_state: SwarmState,
    pub status: EpisodeStatus,
}

pub fn clamp_per_axis(x: ArrayView1<f64>, bound: f64) -> Array1<f64> {
    x.mapv(|v| v.clamp(-bound, bound))
}

/// Semi-implicit Euler update of the double integrator with per-axis
/// acceleration and velocity limits.
pub fn step(
    state: &SwarmState,
    controls: &Array2<f64>,
    config: &SwarmConfig,
) -> Result<StepOutcome> {
    if controls.dim() != state.positions.dim() {
        return Err(Error::Shape(format!(
            "controls {:?} vs state {:?}",
            controls.dim(),
            state.positions.dim()
        )));
    }
    if let Some((robot, _)) = controls
        .rows()
        .into_iter()
        .enumerate()
        .find(|(_, r)| r.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::NonFiniteControl { robot });
    }
    let ts = config.sample_period;
    let mut velocities = state.velocities.clone();
    Zip::from(&mut velocities).and(controls).for_each(|v, &u| {
        let u = u.clamp(-config.u_max, config.u_max);
        *v = (*v + u * ts).clamp(-config.v_max, config.v_max);
    });
    let positions = &state.positions + &(&velocities * ts);
    let next_state = SwarmState::new(
        state.time_step + 1,
        positions,
        velocities,
        config.comm_range,
    )?;

    let status =
        if next_state.n_robots() > 1 && next_state.min_pairwise_distance() < config.safety_dist {
            EpisodeStatus::FailedRobotCollision
        } else if next_state.positions.rows().into_iter().any(|p| {
            config
                .obstacles
                .iter()
                .any(|o| surface_distance(p, o) < 0.0)
        }) {
            EpisodeStatus::FailedObstacleCollision
        } else if next_state.time_step >= config.episode_steps {
            EpisodeStatus::CompletedEpisode
        } else {
            EpisodeStatus::Running
        };
    Ok(StepOutcome { next_state, status })
}
