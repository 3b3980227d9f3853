use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::Point3;
use crate::graph::{build_graph, StreamlineGraph};
use crate::net::layers::{
    dense_backward, dense_forward, edge_conv, edge_conv_backward, feature_block,
    feature_block_backward, EdgeConvCache, FeatureCache,
};
use crate::net::prob::{
    bayes_backward, bayes_normalize, expectation_backward, generalized_softmax,
    keypoint_expectation, softmax_backward, PointProbabilities,
};
use crate::net::{KeypointSet, ModelParams};
use crate::streamline::Tractogram;

/// Streamlines per chunk in [`detect_keypoints`]. Fixed so that the
/// reduction order never depends on the thread count.
const DETECT_CHUNK: usize = 512;

/// Everything the forward pass over one graph produced.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    feature: FeatureCache,
    edges: Vec<EdgeConvCache>,
    head_input: DMatrix<f64>,
    probs: PointProbabilities,
    normalized: DMatrix<f64>,
    column_sums: Vec<f64>,
    coords: DMatrix<f64>,
    keypoints: Vec<Point3>,
}

impl ForwardCache {
    pub fn keypoints(&self) -> &[Point3] {
        &self.keypoints
    }

    /// `p(k | x_p)` for every node.
    pub fn probabilities(&self) -> &PointProbabilities {
        &self.probs
    }

    /// `p(x_p | k)` for every node.
    pub fn normalized(&self) -> &DMatrix<f64> {
        &self.normalized
    }

    /// Parameter gradients of a scalar loss given its gradient with respect
    /// to each keypoint.
    pub fn backward(&self, params: &ModelParams, d_keypoints: &[Point3]) -> Result<ModelParams> {
        if d_keypoints.len() != self.keypoints.len() {
            return Err(Error::Shape(format!(
                "{} keypoint gradients for {} keypoints",
                d_keypoints.len(),
                self.keypoints.len()
            )));
        }
        let d_norm = expectation_backward(&self.coords, d_keypoints);
        let d_probs = bayes_backward(&self.normalized, &self.column_sums, &d_norm);
        let d_logits = softmax_backward(&self.probs, &d_probs, params.config.temperature);

        let mut grads = ModelParams::zeros(params.config);
        let (head, mut d_h) = dense_backward(&self.head_input, &params.head, &d_logits);
        grads.head = head;
        for (l, cache) in self.edges.iter().enumerate().rev() {
            let (g, d_in) = edge_conv_backward(cache, &params.edge[l], &d_h);
            grads.edge[l] = g;
            d_h = d_in;
        }
        grads.feature = feature_block_backward(&self.feature, &params.feature, &d_h);
        Ok(grads)
    }
}

fn hidden_features(
    params: &ModelParams,
    graph: &StreamlineGraph,
) -> Result<(DMatrix<f64>, FeatureCache, Vec<EdgeConvCache>)> {
    let (mut h, feature) =
        feature_block(graph.coords(), &params.feature, params.config.input_scale)?;
    let mut edges = Vec::with_capacity(params.edge.len());
    for layer in &params.edge {
        let (next, cache) = edge_conv(graph, &h, layer)?;
        edges.push(cache);
        h = next;
    }
    Ok((h, feature, edges))
}

/// Per-node classifier logits (before the temperature softmax).
pub fn point_logits(params: &ModelParams, graph: &StreamlineGraph) -> Result<DMatrix<f64>> {
    let (h, _, _) = hidden_features(params, graph)?;
    dense_forward(&h, &params.head)
}

/// Full forward pass over one graph, keeping every activation for
/// [`ForwardCache::backward`].
pub fn forward(params: &ModelParams, graph: &StreamlineGraph) -> Result<ForwardCache> {
    let (h, feature, edges) = hidden_features(params, graph)?;
    let logits = dense_forward(&h, &params.head)?;
    let probs = generalized_softmax(&logits, params.config.temperature)?;
    let (normalized, column_sums) = bayes_normalize(&probs)?;
    let coords = graph.coords().clone();
    let keypoints = keypoint_expectation(&coords, &normalized)?;
    Ok(ForwardCache {
        feature,
        edges,
        head_input: h,
        probs,
        normalized,
        column_sums,
        coords,
        keypoints,
    })
}

/// Expected keypoint locations for a whole tractogram.
///
/// Streamlines are processed in fixed-size chunks; each chunk contributes
/// its column sums `sum_p p(k|x_p)` and weighted sums `sum_p p(k|x_p) x_p`,
/// which are reduced in chunk order. This equals normalising the full
/// probability matrix first without ever storing it.
pub fn detect_keypoints(t: &Tractogram, params: &ModelParams) -> Result<KeypointSet> {
    params.validate()?;
    if t.points_per_streamline().is_none() {
        return Err(Error::InvalidArgument(
            "keypoint detection needs a resampled tractogram".to_string(),
        ));
    }
    let k = params.config.keypoints;
    let chunks: Vec<&[crate::streamline::Streamline]> =
        t.streamlines().chunks(DETECT_CHUNK).collect();
    let partials = chunks
        .par_iter()
        .map(|chunk| -> Result<(Vec<f64>, Vec<[f64; 3]>)> {
            let patch = Tractogram::new(chunk.to_vec())?;
            let graph = build_graph(&patch)?;
            let logits = point_logits(params, &graph)?;
            let probs = generalized_softmax(&logits, params.config.temperature)?;
            let s = probs.as_matrix();
            let coords = graph.coords();
            let mut sums = vec![0.0; k];
            let mut weighted = vec![[0.0; 3]; k];
            for c in 0..k {
                for p in 0..s.nrows() {
                    let w = s[(p, c)];
                    sums[c] += w;
                    weighted[c][0] += w * coords[(p, 0)];
                    weighted[c][1] += w * coords[(p, 1)];
                    weighted[c][2] += w * coords[(p, 2)];
                }
            }
            Ok((sums, weighted))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut sums = vec![0.0; k];
    let mut weighted = vec![[0.0; 3]; k];
    for (s, w) in partials {
        for c in 0..k {
            sums[c] += s[c];
            for d in 0..3 {
                weighted[c][d] += w[c][d];
            }
        }
    }
    let points = (0..k)
        .map(|c| {
            if !(sums[c] > 0.0) {
                return Err(Error::NonFinite(format!("keypoint {c} has no probability mass")));
            }
            Ok(Point3::from_array(weighted[c].map(|v| v / sums[c])))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(KeypointSet::new(points))
}
