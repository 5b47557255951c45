use std::collections::VecDeque;

use ndarray::{s, Array1, Array2, ArrayView1};

use crate::config::SwarmConfig;
use crate::error::{Error, Result};
use crate::expert::beta_robots_in_range;
use crate::swarm::{LeaderState, SwarmState};

/// Distances below this count as coincidence with the virtual leader.
pub const LEADER_DISTANCE_FLOOR: f64 = 1e-6;

/// Local observations of every robot at one time step.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationFrame {
    pub time_step: usize,
    /// `N x 9D`: alpha, beta and gamma blocks of width `3D` each.
    pub features: Array2<f64>,
    pub edges: Vec<(usize, usize)>,
}

impl ObservationFrame {
    pub fn n_robots(&self) -> usize {
        self.features.nrows()
    }
}

/// `[v_i - v_j, d / r, d / r^2]` with `d = p_i - p_j`.
pub fn relative_state(
    p_i: ArrayView1<f64>,
    v_i: ArrayView1<f64>,
    p_j: ArrayView1<f64>,
    v_j: ArrayView1<f64>,
) -> Result<Array1<f64>> {
    let d = &p_i - &p_j;
    let r = d.dot(&d).sqrt();
    if r == 0.0 {
        return Err(Error::CoincidentPoints);
    }
    Ok(assemble(&(&v_i - &v_j), &d, r))
}

fn assemble(dv: &Array1<f64>, d: &Array1<f64>, r: f64) -> Array1<f64> {
    let dim = d.len();
    let mut out = Array1::zeros(3 * dim);
    out.slice_mut(s![..dim]).assign(dv);
    if r > 0.0 {
        out.slice_mut(s![dim..2 * dim]).assign(&(d / r));
        out.slice_mut(s![2 * dim..]).assign(&(d / (r * r)));
    }
    out
}

/// Mean relative state over graph neighbors; zero for isolated robots.
pub fn aggregate_alpha(state: &SwarmState) -> Result<Array2<f64>> {
    let n = state.n_robots();
    let mut out = Array2::zeros((n, 3 * state.dim()));
    let mut count = vec![0usize; n];
    for &(i, j) in &state.edges {
        let (pi, vi) = (state.positions.row(i), state.velocities.row(i));
        let (pj, vj) = (state.positions.row(j), state.velocities.row(j));
        let x = relative_state(pi, vi, pj, vj).map_err(|_| Error::CoincidentRobots { i, j })?;
        let mut oi = out.row_mut(i);
        oi += &x;
        let mut oj = out.row_mut(j);
        oj -= &x;
        count[i] += 1;
        count[j] += 1;
    }
    for (i, &c) in count.iter().enumerate() {
        if c > 0 {
            out.row_mut(i).mapv_inplace(|x| x / c as f64);
        }
    }
    Ok(out)
}

/// Sum of relative states to every in-range β-robot.
pub fn aggregate_beta(state: &SwarmState, config: &SwarmConfig) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((state.n_robots(), 3 * state.dim()));
    for i in 0..state.n_robots() {
        let (p, v) = (state.positions.row(i), state.velocities.row(i));
        for (_, b) in beta_robots_in_range(state, i, config)? {
            let x = relative_state(p, v, b.position.view(), b.velocity.view())?;
            let mut row = out.row_mut(i);
            row += &x;
        }
    }
    Ok(out)
}

/// Relative state to the leader. Position blocks are zero when a robot is
/// within [`LEADER_DISTANCE_FLOOR`] of it.
pub fn leader_observation(state: &SwarmState, leader: &LeaderState) -> Array2<f64> {
    let mut out = Array2::zeros((state.n_robots(), 3 * state.dim()));
    for i in 0..state.n_robots() {
        let d = &state.positions.row(i) - &leader.position;
        let dv = &state.velocities.row(i) - &leader.velocity;
        let r = d.dot(&d).sqrt();
        let r = if r < LEADER_DISTANCE_FLOOR { 0.0 } else { r };
        out.row_mut(i).assign(&assemble(&dv, &d, r));
    }
    out
}

pub fn build_frame(
    state: &SwarmState,
    leader: &LeaderState,
    config: &SwarmConfig,
) -> Result<ObservationFrame> {
    let w = 3 * state.dim();
    let mut features = Array2::zeros((state.n_robots(), 3 * w));
    features
        .slice_mut(s![.., ..w])
        .assign(&aggregate_alpha(state)?);
    features
        .slice_mut(s![.., w..2 * w])
        .assign(&aggregate_beta(state, config)?);
    features
        .slice_mut(s![.., 2 * w..])
        .assign(&leader_observation(state, leader));
    Ok(ObservationFrame {
        time_step: state.time_step,
        features,
        edges: state.edges.clone(),
    })
}

/// The last `horizon + 1` frames of an episode, oldest first.
#[derive(Clone, Debug)]
pub struct History {
    frames: VecDeque<ObservationFrame>,
    horizon: usize,
}

impl History {
    /// Starts a history by replicating `first` `horizon + 1` times.
    pub fn new(first: ObservationFrame, horizon: usize) -> Self {
        let frames = std::iter::repeat_n(first, horizon + 1).collect();
        Self { frames, horizon }
    }

    pub fn push(&mut self, frame: ObservationFrame) -> Result<()> {
        let expected = self.current().time_step + 1;
        if frame.time_step != expected {
            return Err(Error::NonConsecutiveFrame {
                expected,
                got: frame.time_step,
            });
        }
        self.frames.pop_front();
        self.frames.push_back(frame);
        Ok(())
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn frames(&self) -> impl ExactSizeIterator<Item = &ObservationFrame> {
        self.frames.iter()
    }

    pub fn current(&self) -> &ObservationFrame {
        self.frames.back().expect("history is never empty")
    }
}
