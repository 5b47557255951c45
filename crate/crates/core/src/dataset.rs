//! Expert-labelled episodes.
//!
//! File layout: a version line, a one-line JSON header, then one block per
//! episode. A block holds, for every step, the `N x 9D` features and the
//! `N x D` labels as little-endian `f32`, the robot positions and velocities
//! as little-endian `f64`, an edge count and the edges as `u32` pairs.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::split_line;
use crate::config::SwarmConfig;
use crate::error::{Error, Result};
use crate::eval::{rollout_closed_loop, ExpertPolicy};
use crate::model::FrameRef;
use crate::swarm::derive_seed;

pub const DATASET_MAGIC: &str = "SWARMNET-DATASET";
pub const DATASET_VERSION: u32 = 1;
/// Attempts per episode before generation gives up.
pub const MAX_EPISODE_ATTEMPTS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub seed: u64,
    pub split: Split,
    pub steps: usize,
    /// Failed expert runs discarded before this one.
    pub rejected: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub config: SwarmConfig,
    pub config_hash: String,
    pub base_seed: u64,
    pub episodes: Vec<EpisodeMeta>,
    pub payload_bytes: usize,
    pub payload_sha256: String,
}

/// One expert episode. Index `t` of every vector is the state before step
/// `t` was applied.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeData {
    pub features: Vec<Array2<f32>>,
    pub labels: Vec<Array2<f32>>,
    pub positions: Vec<Array2<f64>>,
    pub velocities: Vec<Array2<f64>>,
    pub edges: Vec<Vec<(usize, usize)>>,
}

impl EpisodeData {
    pub fn steps(&self) -> usize {
        self.features.len()
    }

    /// The `horizon + 1` frames ending at step `t`, with the first frame
    /// repeated before the episode start.
    pub fn window(&self, t: usize, horizon: usize) -> Vec<FrameRef<'_, f32>> {
        (0..=horizon)
            .map(|k| {
                let i = (t + k).saturating_sub(horizon);
                FrameRef {
                    features: self.features[i].view(),
                    edges: &self.edges[i],
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub episodes: Vec<EpisodeData>,
}

impl Dataset {
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.header
            .episodes
            .iter()
            .enumerate()
            .filter(|(_, m)| m.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn num_samples(&self) -> usize {
        self.episodes
            .iter()
            .map(|e| e.steps() * e.features.first().map_or(0, |f| f.nrows()))
            .sum()
    }
}

/// Rolls the expert for `n_train + n_val` episodes. Episodes that end in a
/// collision are discarded and redrawn with a fresh seed.
pub fn generate_dataset(
    config: &SwarmConfig,
    n_train: usize,
    n_val: usize,
    seed: u64,
) -> Result<Dataset> {
    config.validate()?;
    let mut metas = Vec::new();
    let mut episodes = Vec::new();
    for e in 0..n_train + n_val {
        let split = if e < n_train {
            Split::Train
        } else {
            Split::Val
        };
        let stream = derive_seed(seed, e as u64);
        let mut found = None;
        for attempt in 0..MAX_EPISODE_ATTEMPTS {
            let ep_seed = derive_seed(stream, attempt as u64);
            let rec = rollout_closed_loop(&mut ExpertPolicy, config, ep_seed)?;
            if rec.status.is_failure() {
                continue;
            }
            let data = EpisodeData {
                features: rec
                    .steps
                    .iter()
                    .map(|s| s.frame.features.mapv(|x| x as f32))
                    .collect(),
                labels: rec
                    .steps
                    .iter()
                    .map(|s| s.expert.u.mapv(|x| x as f32))
                    .collect(),
                positions: rec
                    .steps
                    .iter()
                    .map(|s| s.state.positions.clone())
                    .collect(),
                velocities: rec
                    .steps
                    .iter()
                    .map(|s| s.state.velocities.clone())
                    .collect(),
                edges: rec.steps.iter().map(|s| s.state.edges.clone()).collect(),
            };
            metas.push(EpisodeMeta {
                seed: ep_seed,
                split,
                steps: data.steps(),
                rejected: attempt,
            });
            found = Some(data);
            break;
        }
        episodes.push(found.ok_or_else(|| {
            Error::Generation(format!(
                "episode {e}: expert failed {MAX_EPISODE_ATTEMPTS} times in a row"
            ))
        })?);
    }
    let payload = encode_payload(&episodes);
    Ok(Dataset {
        header: DatasetHeader {
            config: config.clone(),
            config_hash: config.hash(),
            base_seed: seed,
            episodes: metas,
            payload_bytes: payload.len(),
            payload_sha256: hex::encode(Sha256::digest(&payload)),
        },
        episodes,
    })
}

fn encode_payload(episodes: &[EpisodeData]) -> Vec<u8> {
    let mut out = Vec::new();
    for ep in episodes {
        for t in 0..ep.steps() {
            out.extend(ep.features[t].iter().flat_map(|x| x.to_le_bytes()));
            out.extend(ep.labels[t].iter().flat_map(|x| x.to_le_bytes()));
            out.extend(ep.positions[t].iter().flat_map(|x| x.to_le_bytes()));
            out.extend(ep.velocities[t].iter().flat_map(|x| x.to_le_bytes()));
            out.extend((ep.edges[t].len() as u32).to_le_bytes());
            for &(i, j) in &ep.edges[t] {
                out.extend((i as u32).to_le_bytes());
                out.extend((j as u32).to_le_bytes());
            }
        }
    }
    out
}

pub fn encode_dataset(ds: &Dataset) -> Vec<u8> {
    let mut out = format!("{DATASET_MAGIC} {DATASET_VERSION}\n").into_bytes();
    out.extend(serde_json::to_vec(&ds.header).expect("header serializes"));
    out.push(b'\n');
    out.extend(encode_payload(&ds.episodes));
    out
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, encode_dataset(ds))
        .map_err(|e| Error::io(format!("writing dataset {}", path.display()), e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn f32s(&mut self, n: usize) -> Option<Vec<f32>> {
        Some(
            self.take(4 * n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )
    }

    fn f64s(&mut self, n: usize) -> Option<Vec<f64>> {
        Some(
            self.take(8 * n)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn shape<T>(rows: usize, cols: usize, v: Vec<T>) -> Array2<T> {
    Array2::from_shape_vec((rows, cols), v).expect("reader returns the requested length")
}

pub fn decode_dataset(bytes: &[u8], path: &Path) -> Result<Dataset> {
    let corrupt = |reason: String| Error::Corrupt {
        kind: "dataset",
        path: path.to_path_buf(),
        reason,
    };
    let (head, rest) = split_line(bytes).ok_or_else(|| corrupt("missing header line".into()))?;
    let head = std::str::from_utf8(head).map_err(|_| corrupt("header is not text".into()))?;
    let version = head
        .strip_prefix(DATASET_MAGIC)
        .and_then(|v| v.trim().parse::<u32>().ok())
        .ok_or_else(|| corrupt(format!("unrecognized header `{head}`")))?;
    if version != DATASET_VERSION {
        return Err(Error::Version {
            kind: "dataset",
            path: path.to_path_buf(),
            found: version,
            expected: DATASET_VERSION,
        });
    }
    let (json, payload) = split_line(rest).ok_or_else(|| corrupt("missing header".into()))?;
    let header: DatasetHeader =
        serde_json::from_slice(json).map_err(|e| corrupt(format!("bad header: {e}")))?;
    if payload.len() != header.payload_bytes
        || hex::encode(Sha256::digest(payload)) != header.payload_sha256
    {
        return Err(corrupt("payload does not match its recorded hash".into()));
    }
    header.config.validate()?;
    let (n, d, f) = (
        header.config.n_robots,
        header.config.dim,
        header.config.obs_width(),
    );
    let mut r = Reader {
        bytes: payload,
        pos: 0,
    };
    let short = || corrupt("payload ends early".into());
    let mut episodes = Vec::with_capacity(header.episodes.len());
    for meta in &header.episodes {
        let mut ep = EpisodeData {
            features: Vec::with_capacity(meta.steps),
            labels: Vec::with_capacity(meta.steps),
            positions: Vec::with_capacity(meta.steps),
            velocities: Vec::with_capacity(meta.steps),
            edges: Vec::with_capacity(meta.steps),
        };
        for _ in 0..meta.steps {
            ep.features
                .push(shape(n, f, r.f32s(n * f).ok_or_else(short)?));
            ep.labels
                .push(shape(n, d, r.f32s(n * d).ok_or_else(short)?));
            ep.positions
                .push(shape(n, d, r.f64s(n * d).ok_or_else(short)?));
            ep.velocities
                .push(shape(n, d, r.f64s(n * d).ok_or_else(short)?));
            let m = r.u32().ok_or_else(short)? as usize;
            let mut edges = Vec::with_capacity(m);
            for _ in 0..m {
                let i = r.u32().ok_or_else(short)? as usize;
                let j = r.u32().ok_or_else(short)? as usize;
                if i >= n || j >= n {
                    return Err(corrupt(format!("edge ({i}, {j}) out of range")));
                }
                edges.push((i, j));
            }
            ep.edges.push(edges);
        }
        episodes.push(ep);
    }
    if r.pos != payload.len() {
        return Err(corrupt("trailing bytes after last episode".into()));
    }
    Ok(Dataset { header, episodes })
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::io(format!("reading dataset {}", path.display()), e))?;
    decode_dataset(&bytes, path)
}
