use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};
use swarmnet_nn::Scalar;

use crate::config::SwarmConfig;
use crate::dynamics::{step, EpisodeStatus};
use crate::error::{Error, Result};
use crate::expert::{expert_control, ExpertControl};
use crate::model::StgnnModel;
use crate::observation::{build_frame, History, ObservationFrame};
use crate::swarm::{
    derive_seed, distance, initial_state, leader_at, seeded_rng, LeaderState, SwarmState,
};

/// Everything a controller may look at when choosing the next controls.
pub struct PolicyInput<'a> {
    pub state: &'a SwarmState,
    pub leader: &'a LeaderState,
    pub config: &'a SwarmConfig,
    pub history: &'a History,
    pub expert: &'a ExpertControl,
}

pub trait Policy {
    fn name(&self) -> String;

    /// Number of past frames kept besides the current one.
    fn horizon(&self) -> usize {
        0
    }

    fn act(&mut self, input: &PolicyInput<'_>) -> Result<Array2<f64>>;
}

/// The centralized expert itself.
#[derive(Clone, Copy, Debug, Default)]
pub struct ExpertPolicy;

impl Policy for ExpertPolicy {
    fn name(&self) -> String {
        "expert".into()
    }

    fn act(&mut self, input: &PolicyInput<'_>) -> Result<Array2<f64>> {
        Ok(input.expert.u.clone())
    }
}

/// A trained network acting on its local observation history.
pub struct ModelPolicy<T> {
    pub model: StgnnModel<T>,
}

impl<T: Scalar> Policy for ModelPolicy<T> {
    fn name(&self) -> String {
        self.model.spec().label()
    }

    fn horizon(&self) -> usize {
        self.model.spec().horizon
    }

    fn act(&mut self, input: &PolicyInput<'_>) -> Result<Array2<f64>> {
        self.model.predict_history(input.history)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub state: SwarmState,
    pub leader: LeaderState,
    /// Controls emitted by the policy, before clamping.
    pub control: Array2<f64>,
    pub expert: ExpertControl,
    pub frame: ObservationFrame,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub config: SwarmConfig,
    pub seed: u64,
    pub policy: String,
    pub steps: Vec<StepRecord>,
    pub final_state: SwarmState,
    pub final_leader: LeaderState,
    pub status: EpisodeStatus,
}

impl EpisodeRecord {
    /// States after each executed step, paired with the leader at that time.
    pub fn post_step_states(&self) -> impl Iterator<Item = (&SwarmState, &LeaderState)> {
        self.steps
            .iter()
            .skip(1)
            .map(|s| (&s.state, &s.leader))
            .chain(std::iter::once((&self.final_state, &self.final_leader)))
    }
}

/// Runs one episode from the initial state drawn with `seed`.
pub fn rollout_closed_loop<P: Policy + ?Sized>(
    policy: &mut P,
    config: &SwarmConfig,
    seed: u64,
) -> Result<EpisodeRecord> {
    config.validate()?;
    let mut state = initial_state(config, &mut seeded_rng(seed))?;
    let mut leader = leader_at(0, config);
    let mut frame = build_frame(&state, &leader, config)?;
    let mut history = History::new(frame.clone(), policy.horizon());
    let mut steps = Vec::with_capacity(config.episode_steps);
    let status = loop {
        let expert = expert_control(&state, &leader, config)?;
        let control = policy.act(&PolicyInput {
            state: &state,
            leader: &leader,
            config,
            history: &history,
            expert: &expert,
        })?;
        let outcome = step(&state, &control, config)?;
        steps.push(StepRecord {
            state,
            leader,
            control,
            expert,
            frame,
        });
        state = outcome.next_state;
        leader = leader_at(state.time_step, config);
        if outcome.status.is_terminal() {
            break outcome.status;
        }
        frame = build_frame(&state, &leader, config)?;
        history.push(frame.clone())?;
    };
    Ok(EpisodeRecord {
        config: config.clone(),
        seed,
        policy: policy.name(),
        steps,
        final_state: state,
        final_leader: leader,
        status,
    })
}

/// `(1/N) sum_i |v_i - mean(v)|^2`.
pub fn metric_velocity_variance(state: &SwarmState) -> f64 {
    let v = &state.velocities;
    let mean = v.mean_axis(Axis(0)).expect("at least one robot");
    let dev = v - &mean;
    dev.mapv(|x| x * x).sum() / v.nrows() as f64
}

/// Mean robot-to-leader distance over robots and post-step states.
pub fn metric_tau(record: &EpisodeRecord) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (s, l) in record.post_step_states() {
        for p in s.positions.rows() {
            total += distance(p, l.position.view());
            count += 1;
        }
    }
    total / count as f64
}

/// Mean absolute difference between policy output and expert control at the
/// visited states.
pub fn episode_mae(record: &EpisodeRecord) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for s in &record.steps {
        total += (&s.control - &s.expert.u).mapv(f64::abs).sum();
        count += s.control.len();
    }
    total / count as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub seed: u64,
    pub status: EpisodeStatus,
    pub steps: usize,
    pub mae: f64,
    pub velocity_variance: f64,
    pub tau: f64,
}

impl EpisodeMetrics {
    pub fn from_record(record: &EpisodeRecord) -> Self {
        Self {
            seed: record.seed,
            status: record.status,
            steps: record.steps.len(),
            mae: episode_mae(record),
            velocity_variance: metric_velocity_variance(&record.final_state),
            tau: metric_tau(record),
        }
    }

    pub fn completed(&self) -> bool {
        self.status == EpisodeStatus::CompletedEpisode
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population mean and standard deviation; `None` when empty.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Some(Self {
            mean,
            std: var.sqrt(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_trials: usize,
    pub n_completed: usize,
    pub completion_rate: f64,
    pub mae: Option<MeanStd>,
    pub velocity_variance: Option<MeanStd>,
    pub tau: Option<MeanStd>,
}

/// Completion over all episodes; the other metrics over completed ones only.
pub fn aggregate_metrics(episodes: &[EpisodeMetrics]) -> Result<MetricsReport> {
    if episodes.is_empty() {
        return Err(Error::Shape("no episodes to aggregate".into()));
    }
    let done: Vec<_> = episodes.iter().filter(|e| e.completed()).collect();
    let pick =
        |f: fn(&EpisodeMetrics) -> f64| MeanStd::of(&done.iter().map(|e| f(e)).collect::<Vec<_>>());
    Ok(MetricsReport {
        n_trials: episodes.len(),
        n_completed: done.len(),
        completion_rate: done.len() as f64 / episodes.len() as f64,
        mae: pick(|e| e.mae),
        velocity_variance: pick(|e| e.velocity_variance),
        tau: pick(|e| e.tau),
    })
}

/// Seed of evaluation trial `trial` under base seed `base`.
pub fn trial_seed(base: u64, trial: usize) -> u64 {
    derive_seed(base, trial as u64)
}

/// Runs `trials` episodes with derived seeds and keeps per-episode metrics.
pub fn evaluate_policy<P: Policy + ?Sized>(
    policy: &mut P,
    config: &SwarmConfig,
    base_seed: u64,
    trials: usize,
) -> Result<Vec<EpisodeMetrics>> {
    (0..trials)
        .map(|k| {
            let rec = rollout_closed_loop(policy, config, trial_seed(base_seed, k))?;
            Ok(EpisodeMetrics::from_record(&rec))
        })
        .collect()
}
