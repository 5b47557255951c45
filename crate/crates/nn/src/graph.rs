use ndarray::{Array2, ArrayView2};

use crate::error::shape_err;
use crate::{NnError, Result, Scalar};

/// Undirected neighbor lists in compressed-row form.
///
/// Neighbor lists are sorted, so aggregation order is a function of the
/// graph alone.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Adjacency {
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
}

impl Adjacency {
    /// Builds the symmetric adjacency of `n` nodes from undirected pairs.
    /// Self-loops and duplicate pairs are ignored.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut lists = vec![Vec::new(); n];
        for &(i, j) in edges {
            for idx in [i, j] {
                if idx >= n {
                    return Err(NnError::NodeIndex {
                        index: idx,
                        nodes: n,
                    });
                }
            }
            if i != j {
                lists[i].push(j);
                lists[j].push(i);
            }
        }
        let mut offsets = Vec::with_capacity(n + 1);
        let mut neighbors = Vec::new();
        offsets.push(0);
        for mut l in lists {
            l.sort_unstable();
            l.dedup();
            neighbors.extend(l);
            offsets.push(neighbors.len());
        }
        Ok(Self { offsets, neighbors })
    }

    /// Graph with `n` isolated nodes.
    pub fn empty(n: usize) -> Self {
        Self {
            offsets: vec![0; n + 1],
            neighbors: Vec::new(),
        }
    }

    /// Disjoint union; node indices of part `k` are shifted by the sizes of
    /// the parts before it.
    pub fn block_diagonal<'a>(parts: impl IntoIterator<Item = &'a Adjacency>) -> Self {
        let mut offsets = vec![0];
        let mut neighbors = Vec::new();
        let mut shift = 0;
        for p in parts {
            for i in 0..p.num_nodes() {
                neighbors.extend(p.neighbors(i).iter().map(|&j| j + shift));
                offsets.push(neighbors.len());
            }
            shift += p.num_nodes();
        }
        Self { offsets, neighbors }
    }

    pub fn num_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn num_directed_edges(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    /// Row `i` of the result is the mean of the rows of `x` indexed by the
    /// neighbors of `i`; nodes without neighbors get a zero row.
    pub fn mean_aggregate<T: Scalar>(&self, x: ArrayView2<T>) -> Result<Array2<T>> {
        let n = self.num_nodes();
        if x.nrows() != n {
            return Err(shape_err(
                "mean_aggregate",
                format!("{n} rows"),
                format!("{} rows", x.nrows()),
            ));
        }
        let mut out = Array2::zeros((n, x.ncols()));
        for i in 0..n {
            let nb = self.neighbors(i);
            if nb.is_empty() {
                continue;
            }
            let mut row = out.row_mut(i);
            for &j in nb {
                row += &x.row(j);
            }
            let inv = T::one() / T::from_f64(nb.len() as f64);
            row.mapv_inplace(|v| v * inv);
        }
        Ok(out)
    }

    /// Adjoint of [`Self::mean_aggregate`]: scatters `grad_out` back onto the
    /// source rows.
    pub(crate) fn mean_aggregate_adjoint<T: Scalar>(&self, grad_out: ArrayView2<T>) -> Array2<T> {
        let n = self.num_nodes();
        let mut out = Array2::zeros((n, grad_out.ncols()));
        for i in 0..n {
            let nb = self.neighbors(i);
            if nb.is_empty() {
                continue;
            }
            let inv = T::one() / T::from_f64(nb.len() as f64);
            let g = grad_out.row(i).mapv(|v| v * inv);
            for &j in nb {
                let mut row = out.row_mut(j);
                row += &g;
            }
        }
        out
    }
}
