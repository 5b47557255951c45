//! Spatio-temporal graph policy and its spatial-only and temporal-only
//! ablations.
//!
//! Every frame of a history is embedded by a shared MLP. Temporal token `k`
//! is one graph aggregation of frame `k` over that frame's graph. Spatial
//! token `l` starts from temporal token `L - l` and is forwarded through the
//! graphs of the `l` newer frames, so a node only ever combines messages its
//! neighbors held at the previous step. Each token sequence is fused by a
//! transformer encoder and the last position feeds the control head.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use swarmnet_nn::{
    Activation, Adjacency, GraphAgg, Mlp2, ParamStore, Scalar, Tape, TransformerEncoder, Var,
};

use crate::error::{Error, Result};
use crate::observation::History;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Variant {
    Stgnn,
    Dgnn,
    Tgnn,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Stgnn, Variant::Dgnn, Variant::Tgnn];

    pub fn uses_spatial(self) -> bool {
        self != Variant::Tgnn
    }

    pub fn uses_temporal(self) -> bool {
        self != Variant::Dgnn
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Stgnn => "STGNN",
            Variant::Dgnn => "DGNN",
            Variant::Tgnn => "TGNN",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "STGNN" => Ok(Variant::Stgnn),
            "DGNN" => Ok(Variant::Dgnn),
            "TGNN" => Ok(Variant::Tgnn),
            _ => Err(format!(
                "unknown model variant `{s}` (expected stgnn, dgnn or tgnn)"
            )),
        }
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub variant: Variant,
    pub horizon: usize,
    pub dim: usize,
    pub embed_width: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub encoder_layers: usize,
    pub head_hidden: usize,
    /// Drops the graph layer nonlinearity; used to compare against closed
    /// forms.
    #[serde(default)]
    pub linear_graph: bool,
}

impl ModelSpec {
    pub fn new(variant: Variant, horizon: usize, dim: usize) -> Self {
        Self {
            variant,
            horizon,
            dim,
            embed_width: 128,
            heads: 4,
            ff_width: 16,
            encoder_layers: 2,
            head_hidden: 128,
            linear_graph: false,
        }
    }

    pub fn obs_width(&self) -> usize {
        9 * self.dim
    }

    pub fn head_input(&self) -> usize {
        match self.variant {
            Variant::Stgnn => 2 * self.embed_width,
            Variant::Dgnn | Variant::Tgnn => self.embed_width,
        }
    }

    pub fn seq_len(&self) -> usize {
        self.horizon + 1
    }

    pub fn label(&self) -> String {
        format!("{} L{}", self.variant, self.horizon)
    }
}

/// One frame of a batch: features and the graph they were observed on.
#[derive(Clone, Copy, Debug)]
pub struct FrameRef<'a, S> {
    pub features: ArrayView2<'a, S>,
    pub edges: &'a [(usize, usize)],
}

/// Stacked histories: frame `k` of every window concatenated row-wise, with
/// the block-diagonal union of their graphs.
#[derive(Clone, Debug)]
pub struct ModelInput<T> {
    pub frames: Vec<Array2<T>>,
    pub adjacency: Vec<Arc<Adjacency>>,
}

impl<T: Scalar> ModelInput<T> {
    /// Each window lists `L + 1` frames, oldest first.
    pub fn from_windows<S: Scalar>(windows: &[Vec<FrameRef<'_, S>>]) -> Result<Self> {
        let len = windows.first().map_or(0, Vec::len);
        if len == 0 || windows.iter().any(|w| w.len() != len) {
            return Err(Error::Shape(
                "windows must be nonempty and equally long".into(),
            ));
        }
        let mut frames = Vec::with_capacity(len);
        let mut adjacency = Vec::with_capacity(len);
        for k in 0..len {
            let views: Vec<_> = windows.iter().map(|w| w[k].features).collect();
            let stacked = concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
            frames.push(stacked.mapv(|x| T::from_f64(x.to_f64())));
            let parts = windows
                .iter()
                .map(|w| Adjacency::from_edges(w[k].features.nrows(), w[k].edges))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            adjacency.push(Arc::new(Adjacency::block_diagonal(&parts)));
        }
        Ok(Self { frames, adjacency })
    }

    pub fn from_history(history: &History) -> Result<Self> {
        Self::from_windows(&[history_window(history)])
    }

    pub fn nodes(&self) -> usize {
        self.frames.first().map_or(0, Array2::nrows)
    }
}

/// Frames of a history as a model input window.
pub fn history_window(history: &History) -> Vec<FrameRef<'_, f64>> {
    history
        .frames()
        .map(|f| FrameRef {
            features: f.features.view(),
            edges: &f.edges,
        })
        .collect()
}

/// Per-frame node embeddings with the graph of each frame.
#[derive(Clone, Debug)]
pub struct DelayedEmbeddings<T> {
    pub embeddings: Vec<Array2<T>>,
    pub adjacency: Vec<Arc<Adjacency>>,
}

#[derive(Clone, Debug)]
pub struct StgnnModel<T> {
    spec: ModelSpec,
    seed: u64,
    params: ParamStore<T>,
    encoder: Mlp2,
    graph: GraphAgg,
    spatial: Option<TransformerEncoder>,
    temporal: Option<TransformerEncoder>,
    head: Mlp2,
}

impl<T: Scalar> StgnnModel<T> {
    /// Fresh model with uniform `±sqrt(1/fan_in)` initialization.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        if spec.embed_width == 0 || spec.embed_width % spec.heads.max(1) != 0 || spec.heads == 0 {
            return Err(Error::Shape(format!(
                "{} heads do not divide width {}",
                spec.heads, spec.embed_width
            )));
        }
        if !(spec.dim == 2 || spec.dim == 3) {
            return Err(Error::Shape(format!(
                "dim must be 2 or 3, got {}",
                spec.dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let d = spec.embed_width;
        let encoder = Mlp2::new(&mut p, "encoder", spec.obs_width(), d, d, &mut rng)?;
        let act = if spec.linear_graph {
            Activation::Identity
        } else {
            Activation::Relu
        };
        let graph = GraphAgg::new(&mut p, "graph", d, act, &mut rng)?;
        let mut branch = |name: &str, on: bool, p: &mut ParamStore<T>| -> Result<_> {
            Ok(if on {
                Some(TransformerEncoder::new(
                    p,
                    name,
                    spec.encoder_layers,
                    d,
                    spec.heads,
                    spec.ff_width,
                    &mut rng,
                )?)
            } else {
                None
            })
        };
        let spatial = branch("spatial", spec.variant.uses_spatial(), &mut p)?;
        let temporal = branch("temporal", spec.variant.uses_temporal(), &mut p)?;
        let head = Mlp2::new(
            &mut p,
            "head",
            spec.head_input(),
            spec.head_hidden,
            spec.dim,
            &mut rng,
        )?;
        Ok(Self {
            spec,
            seed,
            params: p,
            encoder,
            graph,
            spatial,
            temporal,
            head,
        })
    }

    /// Rebuilds the layer topology for `spec` and adopts `params`, which
    /// must match it tensor by tensor.
    pub fn from_params(spec: ModelSpec, seed: u64, params: ParamStore<T>) -> Result<Self> {
        let mut model = Self::new(spec, seed)?;
        if params.len() != model.params.len() {
            return Err(Error::Shape(format!(
                "{} tensors supplied, architecture has {}",
                params.len(),
                model.params.len()
            )));
        }
        for (want, got) in model.params.iter().zip(params.iter()) {
            if want.name != got.name || want.shape() != got.shape() {
                return Err(Error::Shape(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    got.name,
                    got.shape(),
                    want.name,
                    want.shape()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn cast<U: Scalar>(&self) -> StgnnModel<U> {
        StgnnModel {
            spec: self.spec.clone(),
            seed: self.seed,
            params: self.params.cast(),
            encoder: self.encoder.clone(),
            graph: self.graph.clone(),
            spatial: self.spatial.clone(),
            temporal: self.temporal.clone(),
            head: self.head.clone(),
        }
    }

    fn check_input(&self, input: &ModelInput<T>) -> Result<()> {
        if input.frames.len() != self.spec.seq_len() || input.adjacency.len() != self.spec.seq_len()
        {
            return Err(Error::Shape(format!(
                "model expects {} frames, got {}",
                self.spec.seq_len(),
                input.frames.len()
            )));
        }
        let n = input.nodes();
        for (f, a) in input.frames.iter().zip(&input.adjacency) {
            if f.dim() != (n, self.spec.obs_width()) || a.num_nodes() != n {
                return Err(Error::Shape(format!(
                    "frame {:?} with {} graph nodes, expected {n}x{}",
                    f.dim(),
                    a.num_nodes(),
                    self.spec.obs_width()
                )));
            }
        }
        Ok(())
    }

    /// Records the embedding of every frame.
    pub fn record_embeddings(&self, tape: &mut Tape<T>, input: &ModelInput<T>) -> Result<Vec<Var>> {
        self.check_input(input)?;
        input
            .frames
            .iter()
            .map(|f| {
                let x = tape.input(f.clone());
                Ok(self.encoder.forward(tape, &self.params, x)?)
            })
            .collect()
    }

    /// Temporal tokens, oldest first.
    pub fn record_temporal(
        &self,
        tape: &mut Tape<T>,
        embeddings: &[Var],
        adjacency: &[Arc<Adjacency>],
    ) -> Result<Vec<Var>> {
        embeddings
            .iter()
            .zip(adjacency)
            .map(|(&e, a)| Ok(self.graph.forward(tape, &self.params, e, a)?))
            .collect()
    }

    /// Spatial tokens `[hop 0, ..., hop L]` built from the temporal tokens.
    pub fn record_spatial(
        &self,
        tape: &mut Tape<T>,
        temporal: &[Var],
        adjacency: &[Arc<Adjacency>],
    ) -> Result<Vec<Var>> {
        let last = temporal.len() - 1;
        (0..=last)
            .map(|l| {
                let mut x = temporal[last - l];
                for a in &adjacency[last - l + 1..] {
                    x = self.graph.forward(tape, &self.params, x, a)?;
                }
                Ok(x)
            })
            .collect()
    }

    /// Runs the enabled transformer branches and the head.
    pub fn record_fusion(
        &self,
        tape: &mut Tape<T>,
        spatial: Option<&[Var]>,
        temporal: Option<&[Var]>,
    ) -> Result<Var> {
        let seq_len = self.spec.seq_len();
        let mut read =
            |enc: &Option<TransformerEncoder>, tokens: Option<&[Var]>| -> Result<Option<Var>> {
                match (enc, tokens) {
                    (Some(enc), Some(t)) => {
                        let seq = tape.interleave(t)?;
                        Ok(Some(enc.forward_last(tape, &self.params, seq, seq_len)?))
                    }
                    (None, _) => Ok(None),
                    (Some(_), None) => Err(Error::Shape(format!(
                        "{} needs both token branches it was built with",
                        self.spec.variant
                    ))),
                }
            };
        let s = read(&self.spatial, spatial)?;
        let t = read(&self.temporal, temporal)?;
        let fused = match (s, t) {
            (Some(s), Some(t)) => tape.concat_cols(s, t)?,
            (Some(x), None) | (None, Some(x)) => x,
            (None, None) => unreachable!("every variant has a branch"),
        };
        Ok(self.head.forward(tape, &self.params, fused)?)
    }

    /// Records the full forward pass; returns the `nodes x D` prediction.
    pub fn record(&self, tape: &mut Tape<T>, input: &ModelInput<T>) -> Result<Var> {
        let emb = self.record_embeddings(tape, input)?;
        let temporal = self.record_temporal(tape, &emb, &input.adjacency)?;
        let spatial = if self.spec.variant.uses_spatial() {
            Some(self.record_spatial(tape, &temporal, &input.adjacency)?)
        } else {
            None
        };
        let temporal = self.spec.variant.uses_temporal().then_some(temporal);
        self.record_fusion(tape, spatial.as_deref(), temporal.as_deref())
    }

    pub fn predict(&self, input: &ModelInput<T>) -> Result<Array2<T>> {
        let mut tape = Tape::new();
        let y = self.record(&mut tape, input)?;
        Ok(tape.value(y).clone())
    }

    /// Control prediction for the current step of one swarm.
    pub fn predict_history(&self, history: &History) -> Result<Array2<f64>> {
        if history.horizon() != self.spec.horizon {
            return Err(Error::Shape(format!(
                "history horizon {} vs model horizon {}",
                history.horizon(),
                self.spec.horizon
            )));
        }
        let input = ModelInput::from_history(history)?;
        Ok(self.predict(&input)?.mapv(|x| x.to_f64()))
    }

    pub fn encode_frames(&self, input: &ModelInput<T>) -> Result<DelayedEmbeddings<T>> {
        let mut tape = Tape::new();
        let emb = self.record_embeddings(&mut tape, input)?;
        Ok(DelayedEmbeddings {
            embeddings: emb.iter().map(|&v| tape.value(v).clone()).collect(),
            adjacency: input.adjacency.clone(),
        })
    }

    pub fn temporal_expand(&self, emb: &DelayedEmbeddings<T>) -> Result<Vec<Array2<T>>> {
        let mut tape = Tape::new();
        let e: Vec<_> = emb
            .embeddings
            .iter()
            .map(|x| tape.input(x.clone()))
            .collect();
        let t = self.record_temporal(&mut tape, &e, &emb.adjacency)?;
        Ok(t.iter().map(|&v| tape.value(v).clone()).collect())
    }

    pub fn spatial_expand(&self, emb: &DelayedEmbeddings<T>) -> Result<Vec<Array2<T>>> {
        let mut tape = Tape::new();
        let e: Vec<_> = emb
            .embeddings
            .iter()
            .map(|x| tape.input(x.clone()))
            .collect();
        let t = self.record_temporal(&mut tape, &e, &emb.adjacency)?;
        let s = self.record_spatial(&mut tape, &t, &emb.adjacency)?;
        Ok(s.iter().map(|&v| tape.value(v).clone()).collect())
    }

    /// Fusion and head applied to precomputed token matrices.
    pub fn fuse_and_predict(
        &self,
        spatial: Option<&[Array2<T>]>,
        temporal: Option<&[Array2<T>]>,
    ) -> Result<Array2<T>> {
        let mut tape = Tape::new();
        let mut load = |t: Option<&[Array2<T>]>| {
            t.map(|ts| ts.iter().map(|x| tape.input(x.clone())).collect::<Vec<_>>())
        };
        let s = load(spatial);
        let t = load(temporal);
        let y = self.record_fusion(&mut tape, s.as_deref(), t.as_deref())?;
        Ok(tape.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::observation::ObservationFrame;
    use ndarray::Array2;

    fn frame(t: usize, n: usize, val: f64, edges: Vec<(usize, usize)>) -> ObservationFrame {
        ObservationFrame {
            time_step: t,
            features: Array2::from_shape_fn((n, 18), |(i, j)| {
                val + 0.1 * i as f64 - 0.03 * j as f64
            }),
            edges,
        }
    }

    #[test]
    fn spec_widths() {
        assert_eq!(ModelSpec::new(Variant::Stgnn, 2, 2).head_input(), 256);
        assert_eq!(ModelSpec::new(Variant::Dgnn, 2, 2).head_input(), 128);
        assert_eq!(ModelSpec::new(Variant::Tgnn, 2, 2).head_input(), 128);
        assert_eq!("dgnn".parse::<Variant>().unwrap(), Variant::Dgnn);
        assert!("gcn".parse::<Variant>().is_err());
    }

    #[test]
    fn output_shape_and_determinism() {
        for v in Variant::ALL {
            let m = StgnnModel::<f64>::new(ModelSpec::new(v, 2, 2), 5).unwrap();
            let mut h = History::new(frame(0, 4, 0.5, vec![(0, 1)]), 2);
            h.push(frame(1, 4, 0.7, vec![(1, 2), (0, 1)])).unwrap();
            let a = m.predict_history(&h).unwrap();
            assert_eq!(a.dim(), (4, 2));
            assert_eq!(a, m.predict_history(&h).unwrap());
        }
    }

    #[test]
    fn identical_frames_give_identical_embeddings() {
        let m = StgnnModel::<f64>::new(ModelSpec::new(Variant::Stgnn, 2, 2), 1).unwrap();
        let h = History::new(frame(0, 3, 0.2, vec![(0, 2)]), 2);
        let emb = m
            .encode_frames(&ModelInput::from_history(&h).unwrap())
            .unwrap();
        assert_eq!(emb.embeddings[0].ncols(), 128);
        assert_eq!(emb.embeddings[0], emb.embeddings[2]);
        let t = m.temporal_expand(&emb).unwrap();
        assert_eq!(t[0], t[1]);
        assert_eq!(t[1], t[2]);
    }

    #[test]
    fn horizon_zero_branches_agree() {
        let m = StgnnModel::<f64>::new(ModelSpec::new(Variant::Stgnn, 0, 2), 3).unwrap();
        let h = History::new(frame(0, 3, 0.2, vec![(0, 1), (1, 2)]), 0);
        let emb = m
            .encode_frames(&ModelInput::from_history(&h).unwrap())
            .unwrap();
        assert_eq!(
            m.spatial_expand(&emb).unwrap(),
            m.temporal_expand(&emb).unwrap()
        );
    }

    #[test]
    fn batch_matches_single() {
        let m = StgnnModel::<f64>::new(ModelSpec::new(Variant::Stgnn, 1, 2), 9).unwrap();
        let mut h1 = History::new(frame(0, 3, 0.1, vec![(0, 1)]), 1);
        h1.push(frame(1, 3, 0.3, vec![(1, 2)])).unwrap();
        let h2 = History::new(frame(0, 2, -0.4, vec![(0, 1)]), 1);
        let both =
            ModelInput::<f64>::from_windows(&[history_window(&h1), history_window(&h2)]).unwrap();
        let y = m.predict(&both).unwrap();
        let y1 = m.predict_history(&h1).unwrap();
        let y2 = m.predict_history(&h2).unwrap();
        let diff = (&y.slice(ndarray::s![..3, ..]) - &y1).mapv(f64::abs).sum()
            + (&y.slice(ndarray::s![3.., ..]) - &y2).mapv(f64::abs).sum();
        assert!(diff < 1e-12);
    }

    #[test]
    fn wrong_history_length_rejected() {
        let m = StgnnModel::<f64>::new(ModelSpec::new(Variant::Tgnn, 2, 2), 0).unwrap();
        let h = History::new(frame(0, 2, 0.0, vec![]), 1);
        assert!(m.predict_history(&h).is_err());
    }

    #[test]
    fn from_params_checks_layout() {
        let a = StgnnModel::<f32>::new(ModelSpec::new(Variant::Stgnn, 1, 2), 0).unwrap();
        let b = StgnnModel::<f32>::new(ModelSpec::new(Variant::Dgnn, 1, 2), 0).unwrap();
        assert!(StgnnModel::from_params(a.spec().clone(), 0, b.params().clone()).is_err());
        assert!(StgnnModel::from_params(a.spec().clone(), 0, a.params().clone()).is_ok());
    }
}
