use ndarray::{s, Array1, Array2};
use proptest::prelude::*;
use swarmnet::config::{Obstacle, SwarmConfig};
use swarmnet::dynamics::step;
use swarmnet::expert::{expert_control, potential, potential_gradient, project_onto_obstacle};
use swarmnet::observation::build_frame;
use swarmnet::swarm::{
    build_neighbor_graph, distance, initial_state, leader_at, seeded_rng, LeaderState, SwarmState,
};
use swarmnet::EpisodeStatus;

fn cases(n: u32) -> ProptestConfig {
    ProptestConfig::with_cases(n)
}

fn matrix(n: usize, d: usize, lo: f64, hi: f64) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(lo..hi, n * d)
        .prop_map(move |v| Array2::from_shape_vec((n, d), v).unwrap())
}

fn vector(d: usize, lo: f64, hi: f64) -> impl Strategy<Value = Array1<f64>> {
    prop::collection::vec(lo..hi, d).prop_map(Array1::from)
}

/// A scenario with robots strictly outside one obstacle and no coincident
/// points.
#[derive(Clone, Debug)]
struct Scene {
    config: SwarmConfig,
    state: SwarmState,
    leader: LeaderState,
}

fn scene() -> impl Strategy<Value = Scene> {
    (1usize..7, 2usize..4)
        .prop_flat_map(|(n, d)| {
            (
                matrix(n, d, -3.0, 3.0),
                matrix(n, d, -2.0, 2.0),
                vector(d, -3.0, 3.0),
                vector(d, -1.0, 1.0),
                vector(d, -3.0, 3.0),
                0.2f64..0.8,
            )
        })
        .prop_filter_map(
            "robots too close or inside the obstacle",
            |(p, v, lp, lv, oc, r)| {
                let dim = p.ncols();
                let obstacle = Obstacle::new(oc.to_vec(), r);
                if p.rows()
                    .into_iter()
                    .any(|x| distance(x, oc.view()) <= r + 1e-3)
                {
                    return None;
                }
                let n = p.nrows();
                for i in 0..n {
                    for j in i + 1..n {
                        if distance(p.row(i), p.row(j)) < 1e-3 {
                            return None;
                        }
                    }
                }
                let config = SwarmConfig {
                    n_robots: n,
                    dim,
                    obstacles: vec![obstacle],
                    leader_start: Some(vec![0.0; dim]),
                    ..SwarmConfig::default()
                };
                let state = SwarmState::new(0, p, v, config.comm_range).ok()?;
                Some(Scene {
                    config,
                    state,
                    leader: LeaderState {
                        position: lp,
                        velocity: lv,
                    },
                })
            },
        )
}

fn assert_close(a: &Array2<f64>, b: &Array2<f64>, tol: f64) -> Result<(), TestCaseError> {
    prop_assert_eq!(a.dim(), b.dim());
    for (x, y) in a.iter().zip(b) {
        prop_assert!(
            (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())),
            "{} vs {}",
            x,
            y
        );
    }
    Ok(())
}

proptest! {
    #![proptest_config(cases(200))]

    #[test]
    fn neighbor_graph_is_symmetric_and_complete(p in (1usize..10).prop_flat_map(|n| matrix(n, 2, -2.0, 2.0)), range in 0.3f64..2.0) {
        let edges = build_neighbor_graph(&p, range);
        let state = SwarmState::new(0, p.clone(), Array2::zeros(p.raw_dim()), range).unwrap();
        let lists = state.neighbor_lists();
        for (i, li) in lists.iter().enumerate() {
            for &j in li {
                prop_assert!(lists[j].contains(&i));
            }
        }
        for i in 0..p.nrows() {
            for j in 0..p.nrows() {
                let expect = i != j && distance(p.row(i), p.row(j)) < range;
                let (a, b) = (i.min(j), i.max(j));
                prop_assert_eq!(edges.contains(&(a, b)), expect);
            }
        }
    }

    #[test]
    fn step_respects_limits(sc in scene(), u in matrix(6, 3, -100.0, 100.0)) {
        let Scene { config, state, .. } = sc;
        let u = u.slice(s![..state.n_robots(), ..state.dim()]).to_owned();
        let next = step(&state, &u, &config).unwrap().next_state;
        let ts = config.sample_period;
        for (v1, v0) in next.velocities.iter().zip(&state.velocities) {
            prop_assert!(v1.abs() <= config.v_max);
            prop_assert!((v1 - v0).abs() <= config.u_max * ts * (1.0 + 1e-12));
        }
        let again = step(&state, &u, &config).unwrap().next_state;
        prop_assert_eq!(next, again);
    }

    #[test]
    fn zero_control_motion_is_affine(sc in scene(), steps in 1usize..50) {
        let Scene { mut config, state, .. } = sc;
        config.obstacles.clear();
        config.safety_dist = 0.0;
        let zero = Array2::zeros(state.positions.raw_dim());
        let mut s = state.clone();
        for _ in 0..steps {
            s = step(&s, &zero, &config).unwrap().next_state;
        }
        prop_assert_eq!(&s.velocities, &state.velocities);
        let expect = &state.positions + &(&state.velocities * (steps as f64 * config.sample_period));
        assert_close(&s.positions, &expect, 1e-12)?;
    }

    #[test]
    fn expert_is_weighted_sum_of_terms(sc in scene(), w in prop::array::uniform4(0.1f64..5.0)) {
        let Scene { mut config, state, leader } = sc;
        config.weights.c_alpha = w[0];
        config.weights.c_beta = w[1];
        config.weights.c_gamma = w[2];
        config.weights.c1 = w[3];
        let e = expert_control(&state, &leader, &config).unwrap();
        let sum = &e.alpha_term * w[0] + &e.beta_term * w[1] + &e.gamma_term * w[2];
        assert_close(&e.u, &sum, 1e-15)?;
    }

    #[test]
    fn potential_gradient_matches_central_differences(dir in vector(3, -1.0, 1.0), r in 0.2f64..0.99) {
        let norm = dir.dot(&dir).sqrt();
        prop_assume!(norm > 1e-3);
        let p = &dir * (r / norm);
        let o = Array1::zeros(3);
        let g = potential_gradient(p.view(), o.view()).unwrap();
        let h = 1e-6;
        for k in 0..3 {
            let (mut a, mut b) = (p.clone(), p.clone());
            a[k] += h;
            b[k] -= h;
            let fd = (potential(a.dot(&a).sqrt()) - potential(b.dot(&b).sqrt())) / (2.0 * h);
            let scale = g.dot(&g).sqrt();
            prop_assert!((fd - g[k]).abs() <= 1e-5 * scale, "axis {}: fd {} analytic {}", k, fd, g[k]);
        }
    }

    #[test]
    fn beta_robot_lies_on_surface(p in vector(3, -4.0, 4.0), v in vector(3, -3.0, 3.0), c in vector(3, -2.0, 2.0), r in 0.1f64..1.5) {
        let o = Obstacle::new(c.to_vec(), r);
        prop_assume!(distance(p.view(), c.view()) > r * (1.0 + 1e-6));
        let b = project_onto_obstacle(p.view(), v.view(), &o).unwrap();
        let on = distance(b.position.view(), c.view());
        prop_assert!((on - r).abs() <= 1e-12 * r.max(1.0), "{} vs {}", on, r);
        prop_assert!(b.velocity.dot(&b.a_k).abs() <= 1e-12 * (1.0 + v.dot(&v).sqrt()));
    }

    #[test]
    fn observations_are_translation_invariant(sc in scene(), shift in vector(3, -50.0, 50.0)) {
        let Scene { config, state, leader } = sc;
        let shift = shift.slice(s![..state.dim()]).to_owned();
        let mut moved_cfg = config.clone();
        for o in &mut moved_cfg.obstacles {
            o.center = (&Array1::from(o.center.clone()) + &shift).to_vec();
        }
        let moved = SwarmState::new(0, &state.positions + &shift, state.velocities.clone(), config.comm_range).unwrap();
        prop_assume!(moved.edges == state.edges);
        let moved_leader = LeaderState { position: &leader.position + &shift, velocity: leader.velocity.clone() };
        let a = build_frame(&state, &leader, &config).unwrap();
        let b = build_frame(&moved, &moved_leader, &moved_cfg).unwrap();
        prop_assert_eq!(a.features.ncols(), 9 * state.dim());
        prop_assert_eq!(&a.edges, &b.edges);
        assert_close(&a.features, &b.features, 1e-9)?;
    }

    #[test]
    fn velocity_shift_only_moves_velocity_blocks(sc in scene(), shift in vector(3, -5.0, 5.0)) {
        let Scene { config, state, leader } = sc;
        let d = state.dim();
        let shift = shift.slice(s![..d]).to_owned();
        let fast = SwarmState::new(0, state.positions.clone(), &state.velocities + &shift, config.comm_range).unwrap();
        let fast_leader = LeaderState { position: leader.position.clone(), velocity: &leader.velocity + &shift };
        let a = build_frame(&state, &leader, &config).unwrap();
        let b = build_frame(&fast, &fast_leader, &config).unwrap();
        for block in 0..3 {
            let pos = s![.., 3 * d * block + d..3 * d * (block + 1)];
            prop_assert_eq!(a.features.slice(pos), b.features.slice(pos));
        }
        // Relative velocities to other robots and to the leader are unchanged.
        for block in [0, 2] {
            let vel = s![.., 3 * d * block..3 * d * block + d];
            assert_close(&a.features.slice(vel).to_owned(), &b.features.slice(vel).to_owned(), 1e-9)?;
        }
    }
}

#[test]
fn initial_placements_respect_safety_distance() {
    let config = SwarmConfig::default();
    for seed in 0..1000 {
        let s = initial_state(&config, &mut seeded_rng(seed)).unwrap();
        assert!(
            s.min_pairwise_distance() > config.safety_dist,
            "seed {seed}"
        );
        assert!(s.velocities.iter().all(|&v| v == 0.0));
    }
}

#[test]
fn lone_robot_converges_to_leader() {
    let mut config = SwarmConfig {
        n_robots: 1,
        obstacles: vec![],
        leader_start: Some(vec![0.0, 0.0]),
        ..SwarmConfig::default()
    };
    config.weights.c1 = 1.0;
    let mut state = SwarmState::new(
        0,
        ndarray::array![[-1.5, 1.0]],
        ndarray::array![[0.0, 0.0]],
        1.0,
    )
    .unwrap();
    let initial = distance(
        state.positions.row(0),
        leader_at(0, &config).position.view(),
    );
    let mut status = EpisodeStatus::Running;
    while status == EpisodeStatus::Running {
        let leader = leader_at(state.time_step, &config);
        let u = expert_control(&state, &leader, &config).unwrap().u;
        let out = step(&state, &u, &config).unwrap();
        state = out.next_state;
        status = out.status;
    }
    assert_eq!(status, EpisodeStatus::CompletedEpisode);
    assert_eq!(state.time_step, 1200);
    let leader = leader_at(1200, &config);
    let gap = distance(state.positions.row(0), leader.position.view());
    let dv = &state.velocities.row(0) - &leader.velocity;
    assert!(gap < initial, "{gap} >= {initial}");
    assert!(dv.dot(&dv).sqrt() < 0.1);
}
