//! Brute-force references for the spatio-temporal model, shared by the core
//! model tests and the acceptance suite.
#![allow(dead_code)]

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use swarmnet::model::{FrameRef, ModelInput, ModelSpec, StgnnModel, Variant};

/// Random per-frame graphs and features for one swarm window.
#[derive(Clone, Debug)]
pub struct Instance {
    pub n: usize,
    pub frames: Vec<Array2<f64>>,
    pub edges: Vec<Vec<(usize, usize)>>,
}

impl Instance {
    pub fn random(rng: &mut ChaCha8Rng, n: usize, horizon: usize, width: usize) -> Self {
        let p = rng.random_range(0.2..0.8);
        let frames = (0..=horizon)
            .map(|_| Array2::from_shape_simple_fn((n, width), || rng.random_range(-1.0..1.0)))
            .collect();
        let edges = (0..=horizon)
            .map(|_| {
                let mut e = Vec::new();
                for i in 0..n {
                    for j in i + 1..n {
                        if rng.random_bool(p) {
                            e.push((i, j));
                        }
                    }
                }
                e
            })
            .collect();
        Self { n, frames, edges }
    }

    pub fn input(&self) -> ModelInput<f64> {
        let window: Vec<_> = self
            .frames
            .iter()
            .zip(&self.edges)
            .map(|(f, e)| FrameRef {
                features: f.view(),
                edges: e.as_slice(),
            })
            .collect();
        ModelInput::from_windows(&[window]).unwrap()
    }

    /// Relabels node `i` as `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let frames = self
            .frames
            .iter()
            .map(|f| {
                let mut g = Array2::zeros(f.raw_dim());
                for (i, &p) in perm.iter().enumerate() {
                    g.row_mut(p).assign(&f.row(i));
                }
                g
            })
            .collect();
        let edges = self
            .edges
            .iter()
            .map(|es| {
                es.iter()
                    .map(|&(a, b)| (perm[a].min(perm[b]), perm[a].max(perm[b])))
                    .collect()
            })
            .collect();
        Self {
            n: self.n,
            frames,
            edges,
        }
    }
}

pub fn neighbors(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); n];
    for &(a, b) in edges {
        if a != b && !out[a].contains(&b) {
            out[a].push(b);
            out[b].push(a);
        }
    }
    out
}

pub fn small_spec(variant: Variant, horizon: usize) -> ModelSpec {
    ModelSpec {
        embed_width: 8,
        heads: 2,
        ff_width: 8,
        head_hidden: 8,
        linear_graph: true,
        ..ModelSpec::new(variant, horizon, 2)
    }
}

fn vec_mat(x: &Array1<f64>, m: &Array2<f64>) -> Array1<f64> {
    Array1::from_shape_fn(m.ncols(), |c| {
        (0..m.nrows()).map(|r| x[r] * m[[r, c]]).sum()
    })
}

/// Spatial token `l` of every node, as an explicit sum over delayed paths.
///
/// A path starts at node `i` on the newest graph and walks one graph older
/// per hop, either staying put (weight `W_self`) or moving to one of the
/// current neighbours (weight `W_nbr / degree`). It ends on the embedding of
/// the frame `l` steps old. Graph biases must be zero.
pub fn delayed_path_tokens(
    embeddings: &[Array2<f64>],
    edges: &[Vec<(usize, usize)>],
    w_self: &Array2<f64>,
    w_nbr: &Array2<f64>,
) -> Vec<Array2<f64>> {
    let last = embeddings.len() - 1;
    let n = embeddings[0].nrows();
    let nbrs: Vec<_> = edges.iter().map(|e| neighbors(n, e)).collect();
    (0..=last)
        .map(|l| {
            let mut out = Array2::zeros(embeddings[0].raw_dim());
            for i in 0..n {
                let mut acc = Array1::zeros(embeddings[0].ncols());
                // Graphs from newest to oldest: last, last - 1, ..., last - l.
                let mut stack = vec![(i, last, Vec::<(bool, usize)>::new())];
                while let Some((node, k, hops)) = stack.pop() {
                    let step_here = |mv: bool| {
                        let mut h = hops.clone();
                        h.push((mv, nbrs[k][node].len()));
                        h
                    };
                    let mut next = vec![(node, step_here(false))];
                    for &w in &nbrs[k][node] {
                        next.push((w, step_here(true)));
                    }
                    for (w, h) in next {
                        if k == last - l {
                            // Apply the oldest graph first.
                            let mut x = embeddings[k].row(w).to_owned();
                            for &(mv, deg) in h.iter().rev() {
                                x = if mv {
                                    vec_mat(&x, w_nbr) / deg as f64
                                } else {
                                    vec_mat(&x, w_self)
                                };
                            }
                            acc += &x;
                        } else {
                            stack.push((w, k - 1, h));
                        }
                    }
                }
                out.row_mut(i).assign(&acc);
            }
            out
        })
        .collect()
}

fn relative_gap(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / (1.0 + x.abs().max(y.abs())))
        .fold(0.0, f64::max)
}

/// Compares `spatial_expand` against path enumeration on random graphs with
/// random and with identity graph weights. Returns the worst relative gap.
pub fn check_spatial_oracle(trials: usize, seed: u64, tol: f64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0f64;
    for trial in 0..trials {
        let n = rng.random_range(1..=6);
        let horizon = rng.random_range(0..=3);
        let spec = small_spec(Variant::Stgnn, horizon);
        let mut model = StgnnModel::<f64>::new(spec, rng.random()).unwrap();
        let identity = trial % 2 == 1;
        let width = model.spec().embed_width;
        for name in ["graph.self.weight", "graph.nbr.weight"] {
            if identity {
                model.params_mut().by_name_mut(name).unwrap().value = Array2::eye(width);
            }
        }
        model
            .params_mut()
            .by_name_mut("graph.nbr.bias")
            .unwrap()
            .value
            .fill(0.0);
        let inst = Instance::random(&mut rng, n, horizon, model.spec().obs_width());
        let emb = model.encode_frames(&inst.input()).unwrap();
        let got = model.spatial_expand(&emb).unwrap();
        let ws = model
            .params()
            .by_name("graph.self.weight")
            .unwrap()
            .value
            .clone();
        let wn = model
            .params()
            .by_name("graph.nbr.weight")
            .unwrap()
            .value
            .clone();
        let want = delayed_path_tokens(&emb.embeddings, &inst.edges, &ws, &wn);
        for (l, (g, w)) in got.iter().zip(&want).enumerate() {
            let gap = relative_gap(g, w);
            worst = worst.max(gap);
            if gap > tol {
                return Err(format!(
                    "trial {trial}: hop {l} differs by {gap:e} (n={n}, L={horizon})"
                ));
            }
        }
    }
    Ok(worst)
}

/// `cone[k][j]`: whether node `j`'s frame-`k` features can reach node `i`'s
/// prediction, i.e. backward closed-neighbourhood reachability from `i`
/// through the graphs of frames `L, L-1, ..., k`.
pub fn causal_cone(n: usize, edges: &[Vec<(usize, usize)>], i: usize) -> Vec<Vec<bool>> {
    let last = edges.len() - 1;
    let mut cone = vec![vec![false; n]; last + 1];
    let mut reach = vec![false; n];
    reach[i] = true;
    for k in (0..=last).rev() {
        let nb = neighbors(n, &edges[k]);
        let mut grown = reach.clone();
        for u in 0..n {
            if reach[u] {
                for &w in &nb[u] {
                    grown[w] = true;
                }
            }
        }
        reach = grown;
        cone[k] = reach.clone();
    }
    cone
}

/// Zeroes every feature outside node `i`'s causal cone and requires node
/// `i`'s prediction to be bit-identical. Also requires that the cone is a
/// strict subset for at least one instance, so the check is not vacuous.
pub fn check_decentralization_cone(trials: usize, seed: u64) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pruned = 0usize;
    for trial in 0..trials {
        let n = rng.random_range(2..=6);
        let horizon = rng.random_range(1..=3);
        let variant = Variant::ALL[trial % 3];
        let model =
            StgnnModel::<f64>::new(ModelSpec::new(variant, horizon, 2), rng.random()).unwrap();
        let inst = Instance::random(&mut rng, n, horizon, model.spec().obs_width());
        let full = model.predict(&inst.input()).unwrap();
        let i = rng.random_range(0..n);
        let cone = causal_cone(n, &inst.edges, i);
        let mut masked = inst.clone();
        for (k, f) in masked.frames.iter_mut().enumerate() {
            for j in 0..n {
                if !cone[k][j] {
                    f.row_mut(j).fill(0.0);
                    pruned += 1;
                }
            }
        }
        let cut = model.predict(&masked.input()).unwrap();
        if full.row(i) != cut.row(i) {
            return Err(format!(
                "trial {trial} ({variant} L{horizon}, n={n}, node {i}): {} vs {}",
                full.row(i),
                cut.row(i)
            ));
        }
    }
    if pruned == 0 {
        return Err("no instance had features outside the cone".into());
    }
    Ok(pruned)
}

/// Relabels nodes and edges and requires predictions to follow the
/// relabelling. Returns the worst absolute deviation.
pub fn check_permutation_equivariance(trials: usize, seed: u64, tol: f64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0f64;
    for trial in 0..trials {
        let n = rng.random_range(1..=7);
        let horizon = rng.random_range(0..=3);
        let variant = Variant::ALL[trial % 3];
        let model =
            StgnnModel::<f64>::new(ModelSpec::new(variant, horizon, 2), rng.random()).unwrap();
        let inst = Instance::random(&mut rng, n, horizon, model.spec().obs_width());
        let mut perm: Vec<usize> = (0..n).collect();
        for a in (1..n).rev() {
            perm.swap(a, rng.random_range(0..=a));
        }
        let y = model.predict(&inst.input()).unwrap();
        let yp = model.predict(&inst.permuted(&perm).input()).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            for c in 0..y.ncols() {
                let d = (y[[i, c]] - yp[[p, c]]).abs();
                worst = worst.max(d);
                if d > tol {
                    return Err(format!(
                        "trial {trial}: node {i} -> {p} axis {c} differs by {d:e}"
                    ));
                }
            }
        }
    }
    Ok(worst)
}
