use ndarray::{Array1, Array2, ArrayView1};

use crate::config::{Obstacle, SwarmConfig};
use crate::error::{Error, Result};
use crate::swarm::{distance, LeaderState, SwarmState};

/// Output of the centralized expert. The three terms are kept unweighted.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertControl {
    pub u: Array2<f64>,
    pub alpha_term: Array2<f64>,
    pub beta_term: Array2<f64>,
    pub gamma_term: Array2<f64>,
}

/// Projection of a robot onto an obstacle surface.
#[derive(Clone, Debug, PartialEq)]
pub struct BetaRobot {
    pub position: Array1<f64>,
    pub velocity: Array1<f64>,
    pub mu: f64,
    pub a_k: Array1<f64>,
    pub projector: Array2<f64>,
}

/// Pair potential `1/r^2 + ln r^2`.
pub fn potential(r: f64) -> f64 {
    1.0 / (r * r) + (r * r).ln()
}

/// Gradient of the pair potential with respect to `p_i`.
pub fn potential_gradient(p_i: ArrayView1<f64>, p_j: ArrayView1<f64>) -> Result<Array1<f64>> {
    let diff = &p_i - &p_j;
    let r = diff.dot(&diff).sqrt();
    if r == 0.0 {
        return Err(Error::CoincidentPoints);
    }
    let du_dr = -2.0 / (r * r * r) + 2.0 / r;
    Ok(diff * (du_dr / r))
}

pub fn alpha_control(state: &SwarmState, config: &SwarmConfig) -> Result<Array2<f64>> {
    let n = state.n_robots();
    let v = &state.velocities;
    // sum_j (v_i - v_j) = N v_i - sum_j v_j
    let v_sum = v.sum_axis(ndarray::Axis(0));
    let mut out = &v_sum - &(v * n as f64);
    for i in 0..n {
        for j in i + 1..n {
            let (pi, pj) = (state.positions.row(i), state.positions.row(j));
            let r = distance(pi, pj);
            if r == 0.0 {
                return Err(Error::CoincidentRobots { i, j });
            }
            if r < config.comm_range {
                let g = potential_gradient(pi, pj)?;
                let mut oi = out.row_mut(i);
                oi -= &g;
                let mut oj = out.row_mut(j);
                oj += &g;
            }
        }
    }
    Ok(out)
}

pub fn project_onto_obstacle(
    p_i: ArrayView1<f64>,
    v_i: ArrayView1<f64>,
    obstacle: &Obstacle,
) -> Result<BetaRobot> {
    let c = ArrayView1::from(obstacle.center.as_slice());
    let diff = &p_i - &c;
    let d = diff.dot(&diff).sqrt();
    if !(d > obstacle.radius) {
        return Err(Error::CoincidentPoints);
    }
    let mu = obstacle.radius / d;
    let position = &p_i * mu + &c * (1.0 - mu);
    let a_k = diff / d;
    let dim = a_k.len();
    let mut projector = Array2::eye(dim);
    for r in 0..dim {
        for s in 0..dim {
            projector[[r, s]] -= a_k[r] * a_k[s];
        }
    }
    let velocity = projector.dot(&v_i) * mu;
    Ok(BetaRobot {
        position,
        velocity,
        mu,
        a_k,
        projector,
    })
}

/// Every β-robot of robot `i` that lies strictly within communication range,
/// with the index of its obstacle.
pub fn beta_robots_in_range(
    state: &SwarmState,
    i: usize,
    config: &SwarmConfig,
) -> Result<Vec<(usize, BetaRobot)>> {
    let (p, v) = (state.positions.row(i), state.velocities.row(i));
    let mut out = Vec::new();
    for (k, o) in config.obstacles.iter().enumerate() {
        let b = project_onto_obstacle(p, v, o).map_err(|_| Error::InsideObstacle {
            robot: i,
            obstacle: k,
        })?;
        if distance(p, b.position.view()) < config.comm_range {
            out.push((k, b));
        }
    }
    Ok(out)
}

pub fn beta_control(state: &SwarmState, config: &SwarmConfig) -> Result<Array2<f64>> {
    let mut out = Array2::zeros(state.positions.raw_dim());
    for i in 0..state.n_robots() {
        let (p, v) = (state.positions.row(i), state.velocities.row(i));
        for (_, b) in beta_robots_in_range(state, i, config)? {
            let g = potential_gradient(p, b.position.view())?;
            let mut row = out.row_mut(i);
            row -= &(&v - &b.velocity);
            row -= &g;
        }
    }
    Ok(out)
}

pub fn gamma_control(
    state: &SwarmState,
    leader: &LeaderState,
    config: &SwarmConfig,
) -> Array2<f64> {
    let c1 = config.weights.c1;
    let c2 = config.weights.c2();
    let dp = &state.positions - &leader.position;
    let dv = &state.velocities - &leader.velocity;
    dp * (-c1) - dv * c2
}

pub fn expert_control(
    state: &SwarmState,
    leader: &LeaderState,
    config: &SwarmConfig,
) -> Result<ExpertControl> {
    let alpha_term = alpha_control(state, config)?;
    let beta_term = beta_control(state, config)?;
    let gamma_term = gamma_control(state, leader, config);
    let w = &config.weights;
    let u = &alpha_term * w.c_alpha + &beta_term * w.c_beta + &gamma_term * w.c_gamma;
    Ok(ExpertControl {
        u,
        alpha_term,
        beta_term,
        gamma_term,
    })
}
