use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{Obstacle, SwarmConfig};
use crate::error::{Error, Result};

/// Draw limit for rejection sampling of initial positions.
pub const MAX_INIT_ATTEMPTS: usize = 10_000;

/// Positions and velocities of every robot at one time step, together with
/// the communication graph they induce.
#[derive(Clone, Debug, PartialEq)]
pub struct SwarmState {
    pub time_step: usize,
    pub positions: Array2<f64>,
    pub velocities: Array2<f64>,
    /// Undirected edges `(i, j)` with `i < j`, sorted.
    pub edges: Vec<(usize, usize)>,
}

impl SwarmState {
    pub fn new(
        time_step: usize,
        positions: Array2<f64>,
        velocities: Array2<f64>,
        comm_range: f64,
    ) -> Result<Self> {
        if positions.dim() != velocities.dim() {
            return Err(Error::Shape(format!(
                "positions {:?} vs velocities {:?}",
                positions.dim(),
                velocities.dim()
            )));
        }
        let edges = build_neighbor_graph(&positions, comm_range);
        Ok(Self {
            time_step,
            positions,
            velocities,
            edges,
        })
    }

    pub fn n_robots(&self) -> usize {
        self.positions.nrows()
    }

    pub fn dim(&self) -> usize {
        self.positions.ncols()
    }

    /// Sorted neighbor lists derived from `edges`.
    pub fn neighbor_lists(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_robots()];
        for &(i, j) in &self.edges {
            out[i].push(j);
            out[j].push(i);
        }
        for l in &mut out {
            l.sort_unstable();
        }
        out
    }

    pub fn min_pairwise_distance(&self) -> f64 {
        min_pairwise_distance(&self.positions)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LeaderState {
    pub position: Array1<f64>,
    pub velocity: Array1<f64>,
}

/// Uniform placement in the initial box, redrawn as a whole until every
/// pair is farther apart than `safety_dist`.
pub fn init_positions<R: Rng>(config: &SwarmConfig, rng: &mut R) -> Result<Array2<f64>> {
    let side = config.init_box_side();
    let (n, d) = (config.n_robots, config.dim);
    for _ in 0..MAX_INIT_ATTEMPTS {
        let p = Array2::from_shape_simple_fn((n, d), || rng.random_range(0.0..=side));
        if n < 2 || min_pairwise_distance(&p) > config.safety_dist {
            return Ok(p);
        }
    }
    Err(Error::InfeasibleInit {
        robots: n,
        safety: config.safety_dist,
        attempts: MAX_INIT_ATTEMPTS,
    })
}

/// Initial state for an episode: random safe positions at rest.
pub fn initial_state<R: Rng>(config: &SwarmConfig, rng: &mut R) -> Result<SwarmState> {
    let p = init_positions(config, rng)?;
    let v = Array2::zeros(p.raw_dim());
    SwarmState::new(0, p, v, config.comm_range)
}

/// Pairs `(i, j)`, `i < j`, strictly closer than `comm_range`.
pub fn build_neighbor_graph(positions: &Array2<f64>, comm_range: f64) -> Vec<(usize, usize)> {
    let n = positions.nrows();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if distance(positions.row(i), positions.row(j)) < comm_range {
                edges.push((i, j));
            }
        }
    }
    edges
}

pub fn leader_at(t: usize, config: &SwarmConfig) -> LeaderState {
    let mut velocity = Array1::zeros(config.dim);
    velocity[0] = config.leader_speed;
    let start = Array1::from(config.leader_start());
    let position = &start + &(&velocity * (t as f64 * config.sample_period));
    LeaderState { position, velocity }
}

/// Signed distance from `p` to the obstacle surface; negative inside.
pub fn surface_distance(p: ArrayView1<f64>, obstacle: &Obstacle) -> f64 {
    let c = ArrayView1::from(obstacle.center.as_slice());
    distance(p, c) - obstacle.radius
}

pub fn distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub fn min_pairwise_distance(positions: &Array2<f64>) -> f64 {
    let n = positions.nrows();
    let mut best = f64::INFINITY;
    for i in 0..n {
        for j in i + 1..n {
            best = best.min(distance(positions.row(i), positions.row(j)));
        }
    }
    best
}

/// Independent sub-seed number `stream` of `base`.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(stream);
    rng.next_u64()
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
