//! Central finite-difference checks for tape gradients.
//!
//! The numeric side re-runs the forward closure with perturbed values and
//! never touches [`Tape::backward`], so it is an independent reference.

use ndarray::Array2;

use crate::{ParamStore, Result, Tape, Var};

/// Outcome of one gradient check. `rel_error` is the norm-wise relative
/// difference `|g_tape - g_fd| / (|g_tape| + |g_fd|)` over every checked
/// parameter and input entry.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub rel_error: f64,
    pub max_abs_error: f64,
    pub analytic_norm: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.rel_error.is_finite() && self.rel_error < tol
    }
}

/// Compares tape gradients of the scalar built by `loss_fn` against central
/// differences with step `eps`, for every parameter in `store` and every
/// entry of `inputs`. `store` gradients are reset on return.
pub fn check<F>(
    store: &mut ParamStore<f64>,
    inputs: &[Array2<f64>],
    eps: f64,
    loss_fn: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>, &[Var]) -> Result<Var>,
{
    let eval = |store: &ParamStore<f64>, inputs: &[Array2<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.input(x.clone())).collect();
        let loss = loss_fn(&mut tape, store, &vars)?;
        Ok(tape.value(loss)[[0, 0]])
    };

    store.zero_grad();
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.input(x.clone())).collect();
    let loss = loss_fn(&mut tape, store, &vars)?;
    let grads = tape.backward(loss, store)?;
    let input_grads: Vec<Array2<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| {
            grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Array2::zeros(x.raw_dim()))
        })
        .collect();

    let mut pairs: Vec<(f64, f64)> = Vec::new();
    for pi in 0..store.len() {
        let analytic = store.iter().nth(pi).unwrap().grad.clone();
        let shape = analytic.raw_dim();
        for idx in ndarray::indices(shape) {
            let tensor = store.iter_mut().nth(pi).unwrap();
            let orig = tensor.value[idx];
            tensor.value[idx] = orig + eps;
            let up = eval(store, inputs)?;
            store.iter_mut().nth(pi).unwrap().value[idx] = orig - eps;
            let down = eval(store, inputs)?;
            store.iter_mut().nth(pi).unwrap().value[idx] = orig;
            pairs.push((analytic[idx], (up - down) / (2.0 * eps)));
        }
    }
    let mut perturbed = inputs.to_vec();
    for (k, analytic) in input_grads.iter().enumerate() {
        for idx in ndarray::indices(analytic.raw_dim()) {
            let orig = perturbed[k][idx];
            perturbed[k][idx] = orig + eps;
            let up = eval(store, &perturbed)?;
            perturbed[k][idx] = orig - eps;
            let down = eval(store, &perturbed)?;
            perturbed[k][idx] = orig;
            pairs.push((analytic[idx], (up - down) / (2.0 * eps)));
        }
    }
    store.zero_grad();

    let diff = pairs
        .iter()
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = pairs.iter().map(|(a, _)| a * a).sum::<f64>().sqrt();
    let nn = pairs.iter().map(|(_, n)| n * n).sum::<f64>().sqrt();
    let max_abs_error = pairs.iter().map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
    let denom = na + nn;
    Ok(GradCheckReport {
        rel_error: if denom == 0.0 { 0.0 } else { diff / denom },
        max_abs_error,
        analytic_norm: na,
        checked: pairs.len(),
    })
}

/// Worst result for one layer kind across a batch of random instances.
#[derive(Clone, Debug)]
pub struct LayerCheck {
    pub layer: &'static str,
    pub instances: usize,
    pub worst_rel_error: f64,
}

/// Layer kinds covered by [`layer_suite`].
pub const LAYER_KINDS: [&str; 8] = [
    "dense",
    "mlp",
    "graph_agg",
    "attention",
    "layer_norm",
    "feedforward",
    "transformer_layer",
    "transformer_last_token",
];

/// Runs `instances` random toy checks (widths <= 8, at most 6 rows) for every
/// layer kind in [`LAYER_KINDS`].
pub fn layer_suite(instances: usize, seed: u64, eps: f64) -> Result<Vec<LayerCheck>> {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::layers::*;
    use crate::Adjacency;
    use std::sync::Arc;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (k, &kind) in LAYER_KINDS.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for _ in 0..instances {
            let mut r = ChaCha8Rng::seed_from_u64(rng.random());
            let mut store = ParamStore::<f64>::new();
            let rows = r.random_range(2..=6);
            let seq_len = r.random_range(1..=3);
            let heads = 2;
            let width = 2 * r.random_range(1..=4);
            let rand_mat = |r: &mut ChaCha8Rng, m: usize, n: usize| {
                Array2::from_shape_simple_fn((m, n), || r.random_range(-1.5..1.5))
            };
            let report = match k {
                0 => {
                    let out_w = r.random_range(1..=5);
                    let l = Linear::new(&mut store, "l", width, out_w, true, &mut r)?;
                    let probe = rand_mat(&mut r, rows, out_w);
                    let x = rand_mat(&mut r, rows, width);
                    check(&mut store, &[x], eps, |t, s, v| {
                        let y = l.forward(t, s, v[0])?;
                        t.dot_with(y, probe.clone())
                    })?
                }
                1 => {
                    let out_w = r.random_range(1..=3);
                    let m = Mlp2::new(&mut store, "m", width, 6, out_w, &mut r)?;
                    let target = rand_mat(&mut r, rows, out_w);
                    let x = rand_mat(&mut r, rows, width);
                    check(&mut store, &[x], eps, |t, s, v| {
                        let y = m.forward(t, s, v[0])?;
                        t.mse(y, target.clone())
                    })?
                }
                2 => {
                    let g = GraphAgg::new(&mut store, "g", width, Activation::Relu, &mut r)?;
                    let edges: Vec<(usize, usize)> = (0..rows)
                        .flat_map(|i| (i + 1..rows).map(move |j| (i, j)))
                        .filter(|_| r.random_bool(0.5))
                        .collect();
                    let adj = Arc::new(Adjacency::from_edges(rows, &edges)?);
                    let probe = rand_mat(&mut r, rows, width);
                    let x = rand_mat(&mut r, rows, width);
                    check(&mut store, &[x], eps, |t, s, v| {
                        let y = g.forward(t, s, v[0], &adj)?;
                        t.dot_with(y, probe.clone())
                    })?
                }
                3 => {
                    let a = MultiHeadAttention::new(&mut store, "a", width, heads, &mut r)?;
                    let n = rows * seq_len;
                    let probe = rand_mat(&mut r, n, width);
                    let x = rand_mat(&mut r, n, width);
                    check(&mut store, &[x], eps, |t, s, v| {
                        let y = a.forward(t, s, v[0], v[0], seq_len, seq_len)?;
                        t.dot_with(y, probe.clone())
                    })?
                }
                4 => {
                    let ln = LayerNorm::new(&mut store, "ln", width)?;
                    // Move scale/shift off their trivial init.
                    store.get_mut(ln.gamma).value = rand_mat(&mut r, 1, width);
                    store.get_mut(ln.beta).value = rand_mat(&mut r, 1, width);
                    let probe = rand_mat(&mut r, rows, width);
                    let x = rand_mat(&mut r, rows, width);
                    check(&mut store, &[x], eps, |t, s, v| {
                        let y = ln.forward(t, s, v[0])?;
                        t.dot_with(y, probe.clone())
                    })?
                }
                5 => {
                    let ff = FeedForward::new(&mut store, "ff", width, 16, &mut r)?;
                    let probe = rand_mat(&mut r, rows, width);
                    let x = rand_mat(&mut r, rows, width);
                    check(&mut store, &[x], eps, |t, s, v| {
                        let y = ff.forward(t, s, v[0])?;
                        t.dot_with(y, probe.clone())
                    })?
                }
                6 => {
                    let tl = TransformerLayer::new(&mut store, "tl", width, heads, 16, &mut r)?;
                    let n = rows * seq_len;
                    let probe = rand_mat(&mut r, n, width);
                    let x = rand_mat(&mut r, n, width);
                    check(&mut store, &[x], eps, |t, s, v| {
                        let y = tl.forward(t, s, v[0], seq_len)?;
                        t.dot_with(y, probe.clone())
                    })?
                }
                _ => {
                    let enc =
                        TransformerEncoder::new(&mut store, "enc", 2, width, heads, 16, &mut r)?;
                    let probe = rand_mat(&mut r, rows, width);
                    let x = rand_mat(&mut r, rows * seq_len, width);
                    check(&mut store, &[x], eps, |t, s, v| {
                        let y = enc.forward_last(t, s, v[0], seq_len)?;
                        t.dot_with(y, probe.clone())
                    })?
                }
            };
            worst = worst.max(if report.rel_error.is_finite() {
                report.rel_error
            } else {
                f64::INFINITY
            });
        }
        out.push(LayerCheck {
            layer: kind,
            instances,
            worst_rel_error: worst,
        });
    }
    Ok(out)
}
