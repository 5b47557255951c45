//! Layers built on [`Tape`] ops.
//!
//! A layer only holds [`ParamId`]s; the values live in a [`ParamStore`] so
//! one store can be saved, cast or optimized as a unit. Every layer exposes
//! a recording `forward` and a convenience `apply` for inference on plain
//! arrays.

use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;

use crate::{Adjacency, NnError, ParamId, ParamStore, Result, Scalar, Tape, Var};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Dense layer `x W + b` with `W` stored as `in x out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_width: usize,
    pub out_width: usize,
}

impl Linear {
    /// Weights and bias drawn uniformly from `±sqrt(1/in_width)`.
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_width: usize,
        out_width: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = (1.0 / in_width as f64).sqrt();
        let weight =
            store.add_uniform(format!("{name}.weight"), in_width, out_width, bound, rng)?;
        let bias = if bias {
            Some(store.add_uniform(format!("{name}.bias"), 1, out_width, bound, rng)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_width,
            out_width,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

/// `linear -> ReLU -> linear`.
#[derive(Clone, Debug)]
pub struct Mlp2 {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp2 {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_width: usize,
        hidden: usize,
        out_width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            first: Linear::new(store, &format!("{name}.0"), in_width, hidden, true, rng)?,
            second: Linear::new(store, &format!("{name}.1"), hidden, out_width, true, rng)?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let h = self.first.forward(tape, store, x)?;
        let h = tape.relu(h);
        self.second.forward(tape, store, h)
    }

    pub fn apply<T: Scalar>(&self, store: &ParamStore<T>, x: &Array2<T>) -> Result<Array2<T>> {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let y = self.forward(&mut tape, store, xv)?;
        Ok(tape.value(y).clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Relu,
    /// No nonlinearity; used to compare aggregation against closed forms.
    Identity,
}

impl Activation {
    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }

    fn apply<T: Scalar>(self, tape: &mut Tape<T>, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Identity => x,
        }
    }
}

/// Mean-aggregation graph layer:
/// `h_i' = act(h_i W_self + mean_{j in N(i)} h_j W_nbr + b)`.
#[derive(Clone, Debug)]
pub struct GraphAgg {
    pub w_self: Linear,
    pub w_nbr: Linear,
    pub activation: Activation,
}

impl GraphAgg {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            w_self: Linear::new(store, &format!("{name}.self"), width, width, false, rng)?,
            w_nbr: Linear::new(store, &format!("{name}.nbr"), width, width, true, rng)?,
            activation,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        h: Var,
        adj: &Arc<Adjacency>,
    ) -> Result<Var> {
        let own = self.w_self.forward(tape, store, h)?;
        let mean = tape.mean_agg(h, adj)?;
        let nbr = self.w_nbr.forward(tape, store, mean)?;
        let sum = tape.add(own, nbr)?;
        Ok(self.activation.apply(tape, sum))
    }

    pub fn apply<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        h: &Array2<T>,
        adj: &Adjacency,
    ) -> Result<Array2<T>> {
        let mut tape = Tape::new();
        let hv = tape.input(h.clone());
        let y = self.forward(&mut tape, store, hv, &Arc::new(adj.clone()))?;
        Ok(tape.value(y).clone())
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Array2::ones((1, width)))?,
            beta: store.add(format!("{name}.beta"), Array2::zeros((1, width)))?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }
}

/// Multi-head self-attention with bias-free Q/K/V/output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(NnError::Heads { heads, width });
        }
        Ok(Self {
            wq: Linear::new(store, &format!("{name}.wq"), width, width, false, rng)?,
            wk: Linear::new(store, &format!("{name}.wk"), width, width, false, rng)?,
            wv: Linear::new(store, &format!("{name}.wv"), width, width, false, rng)?,
            wo: Linear::new(store, &format!("{name}.wo"), width, width, false, rng)?,
            heads,
        })
    }

    /// `queries` has `S * q_len` rows, `context` has `S * kv_len` rows.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        queries: Var,
        context: Var,
        q_len: usize,
        kv_len: usize,
    ) -> Result<Var> {
        let q = self.wq.forward(tape, store, queries)?;
        let k = self.wk.forward(tape, store, context)?;
        let v = self.wv.forward(tape, store, context)?;
        let a = tape.attention(q, k, v, q_len, kv_len, self.heads)?;
        self.wo.forward(tape, store, a)
    }
}

/// Position-wise `d -> ff -> d` block with ReLU.
#[derive(Clone, Debug)]
pub struct FeedForward(pub Mlp2);

impl FeedForward {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        ff: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self(Mlp2::new(store, name, width, ff, width, rng)?))
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        self.0.forward(tape, store, x)
    }
}

/// Post-norm encoder layer: `x1 = LN(x + MHA(x))`, `out = LN(x1 + FF(x1))`.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub attention: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ff: FeedForward,
    pub norm2: LayerNorm,
}

impl TransformerLayer {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        heads: usize,
        ff: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            attention: MultiHeadAttention::new(store, &format!("{name}.attn"), width, heads, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), width)?,
            ff: FeedForward::new(store, &format!("{name}.ff"), width, ff, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), width)?,
        })
    }

    /// Full layer over `S` sequences of `seq_len` rows each.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        seq_len: usize,
    ) -> Result<Var> {
        let a = self
            .attention
            .forward(tape, store, x, x, seq_len, seq_len)?;
        self.finish(tape, store, x, a)
    }

    /// Same as [`Self::forward`] but only evaluates the final position of
    /// each sequence; returns `S` rows.
    pub fn forward_last<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        seq_len: usize,
    ) -> Result<Var> {
        let rows = tape.value(x).nrows();
        let last: Vec<usize> = (seq_len - 1..rows).step_by(seq_len).collect();
        let xl = tape.gather_rows(x, &last)?;
        let a = self.attention.forward(tape, store, xl, x, 1, seq_len)?;
        self.finish(tape, store, xl, a)
    }

    fn finish<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        a: Var,
    ) -> Result<Var> {
        let r1 = tape.add(x, a)?;
        let x1 = self.norm1.forward(tape, store, r1)?;
        let f = self.ff.forward(tape, store, x1)?;
        let r2 = tape.add(x1, f)?;
        self.norm2.forward(tape, store, r2)
    }
}

/// Stack of encoder layers without positional encoding.
#[derive(Clone, Debug)]
pub struct TransformerEncoder {
    pub layers: Vec<TransformerLayer>,
}

impl TransformerEncoder {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        depth: usize,
        width: usize,
        heads: usize,
        ff: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let layers = (0..depth)
            .map(|i| TransformerLayer::new(store, &format!("{name}.{i}"), width, heads, ff, rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        mut x: Var,
        seq_len: usize,
    ) -> Result<Var> {
        for l in &self.layers {
            x = l.forward(tape, store, x, seq_len)?;
        }
        Ok(x)
    }

    /// Encoder output at the last position of every sequence. Equal to
    /// selecting those rows from [`Self::forward`], without computing the
    /// discarded positions in the final layer.
    pub fn forward_last<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        mut x: Var,
        seq_len: usize,
    ) -> Result<Var> {
        let Some((last, rest)) = self.layers.split_last() else {
            let rows = tape.value(x).nrows();
            let idx: Vec<usize> = (seq_len - 1..rows).step_by(seq_len).collect();
            return tape.gather_rows(x, &idx);
        };
        for l in rest {
            x = l.forward(tape, store, x, seq_len)?;
        }
        last.forward_last(tape, store, x, seq_len)
    }

    pub fn apply<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        seq: &Array2<T>,
        seq_len: usize,
    ) -> Result<Array2<T>> {
        let mut tape = Tape::new();
        let x = tape.input(seq.clone());
        let y = self.forward(&mut tape, store, x, seq_len)?;
        Ok(tape.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_give_bias() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp2::new(&mut store, "m", 3, 4, 2, &mut rng).unwrap();
        for name in ["m.0.weight", "m.0.bias", "m.1.weight"] {
            store.by_name_mut(name).unwrap().value.fill(0.0);
        }
        store.by_name_mut("m.1.bias").unwrap().value = array![[0.7, -1.1]];
        let y = mlp
            .apply(&store, &array![[1.0, 2.0, 3.0], [-4.0, 5.0, 0.0]])
            .unwrap();
        assert_eq!(y, array![[0.7, -1.1], [0.7, -1.1]]);
    }

    #[test]
    fn scalar_mlp_hand_value() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp2::new(&mut store, "m", 1, 1, 1, &mut rng).unwrap();
        store.by_name_mut("m.0.weight").unwrap().value = array![[2.0]];
        store.by_name_mut("m.1.weight").unwrap().value = array![[3.0]];
        store.by_name_mut("m.0.bias").unwrap().value = array![[0.0]];
        store.by_name_mut("m.1.bias").unwrap().value = array![[0.0]];
        assert_eq!(mlp.apply(&store, &array![[1.0]]).unwrap(), array![[6.0]]);
    }

    #[test]
    fn encoder_width_18_to_128() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mlp = Mlp2::new(&mut store, "enc", 18, 128, 128, &mut rng).unwrap();
        let y = mlp.apply(&store, &Array2::ones((5, 18))).unwrap();
        assert_eq!(y.dim(), (5, 128));
        assert!(mlp.apply(&store, &Array2::ones((5, 17))).is_err());
    }

    fn scalar_graph_agg(w_self: f64, w_nbr: f64) -> (ParamStore<f64>, GraphAgg) {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = GraphAgg::new(&mut store, "g", 1, Activation::Relu, &mut rng).unwrap();
        store.by_name_mut("g.self.weight").unwrap().value = array![[w_self]];
        store.by_name_mut("g.nbr.weight").unwrap().value = array![[w_nbr]];
        store.by_name_mut("g.nbr.bias").unwrap().value = array![[0.0]];
        (store, g)
    }

    #[test]
    fn graph_agg_swaps_neighbor_means() {
        let (store, g) = scalar_graph_agg(0.0, 1.0);
        let adj = Adjacency::from_edges(2, &[(0, 1)]).unwrap();
        let y = g.apply(&store, &array![[2.0], [4.0]], &adj).unwrap();
        assert_eq!(y, array![[4.0], [2.0]]);
    }

    #[test]
    fn graph_agg_isolated_identity() {
        let (store, g) = scalar_graph_agg(1.0, -3.0);
        let adj = Adjacency::empty(3);
        let h = array![[0.5], [2.0], [0.0]];
        assert_eq!(g.apply(&store, &h, &adj).unwrap(), h);
    }

    #[test]
    fn encoder_preserves_shape_and_single_token() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let enc = TransformerEncoder::new(&mut store, "tf", 2, 8, 4, 16, &mut rng).unwrap();
        let seq = Array2::from_shape_fn((6, 8), |(i, j)| ((i * 3 + j) as f64).sin());
        assert_eq!(enc.apply(&store, &seq, 3).unwrap().dim(), (6, 8));
        // With a single token the attention output is a linear map of that token,
        // so each row transforms independently of the others.
        let one = enc
            .apply(&store, &seq.slice(ndarray::s![0..1, ..]).to_owned(), 1)
            .unwrap();
        let all = enc.apply(&store, &seq, 1).unwrap();
        assert_eq!(one.row(0), all.row(0));
    }

    #[test]
    fn forward_last_matches_full_forward() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = TransformerEncoder::new(&mut store, "tf", 2, 8, 4, 16, &mut rng).unwrap();
        let seq = Array2::from_shape_fn((12, 8), |(i, j)| ((i * 7 + j * 3) as f64 * 0.37).cos());
        let full = enc.apply(&store, &seq, 4).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(seq);
        let last = enc.forward_last(&mut tape, &store, x, 4).unwrap();
        let last = tape.value(last);
        for s in 0..3 {
            for c in 0..8 {
                assert!((last[[s, c]] - full[[s * 4 + 3, c]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut tape = Tape::<f64>::new();
        let x = Array2::from_shape_fn((9, 8), |(i, j)| ((i * 5 + j) as f64 * 0.91).sin() * 3.0);
        let q = tape.input(x);
        let out = tape.attention(q, q, q, 3, 3, 4).unwrap();
        let w = tape.attention_weights(out).unwrap();
        assert_eq!(w.len(), 3 * 4 * 3 * 3);
        for row in w.chunks(3) {
            assert!(row.iter().all(|&p| p >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
