//! The streamline multigraph: one node per point, edges between consecutive
//! points of the same streamline.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::streamline::Tractogram;

#[derive(Debug, Clone)]
pub struct StreamlineGraph {
    coords: DMatrix<f64>,
    edges: Vec<(usize, usize)>,
    membership: Vec<usize>,
    // CSR adjacency, neighbours sorted ascending
    offsets: Vec<usize>,
    adjacency: Vec<usize>,
    points_per_streamline: usize,
}

impl StreamlineGraph {
    pub fn num_nodes(&self) -> usize {
        self.membership.len()
    }

    pub fn num_streamlines(&self) -> usize {
        self.num_nodes() / self.points_per_streamline
    }

    pub fn points_per_streamline(&self) -> usize {
        self.points_per_streamline
    }

    /// Node coordinates as a (nodes × 3) matrix.
    pub fn coords(&self) -> &DMatrix<f64> {
        &self.coords
    }

    /// Undirected edges as `(lower, higher)` node index pairs.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Streamline index of every node.
    pub fn membership(&self) -> &[usize] {
        &self.membership
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.adjacency[self.offsets[node]..self.offsets[node + 1]]
    }

    pub fn degree(&self, node: usize) -> usize {
        self.offsets[node + 1] - self.offsets[node]
    }
}

/// Builds the multigraph of a resampled patch.
pub fn build_graph(patch: &Tractogram) -> Result<StreamlineGraph> {
    let p = patch.points_per_streamline().ok_or_else(|| {
        Error::InvalidArgument(
            "graph construction needs every streamline resampled to the same point count"
                .to_string(),
        )
    })?;
    let n = patch.len();
    let nodes = n * p;
    let mut edges = Vec::with_capacity(n * (p - 1));
    let mut membership = Vec::with_capacity(nodes);
    let mut offsets = Vec::with_capacity(nodes + 1);
    let mut adjacency = Vec::with_capacity(2 * n * (p - 1));
    offsets.push(0);
    for s in 0..n {
        let base = s * p;
        for i in 0..p {
            membership.push(s);
            if i > 0 {
                adjacency.push(base + i - 1);
            }
            if i + 1 < p {
                adjacency.push(base + i + 1);
                edges.push((base + i, base + i + 1));
            }
            offsets.push(adjacency.len());
        }
    }
    Ok(StreamlineGraph {
        coords: patch.coordinate_matrix(),
        edges,
        membership,
        offsets,
        adjacency,
        points_per_streamline: p,
    })
}
