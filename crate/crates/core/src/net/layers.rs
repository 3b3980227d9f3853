//! Feature block, edge convolution and the dense head, each with its
//! reverse-mode pass.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::graph::StreamlineGraph;
use crate::net::{Dense, EdgeConvParams};

/// Negative-side slope of the leaky rectifier.
pub const LEAKY_SLOPE: f64 = 0.2;
/// Variance floor of the per-point normalisation.
pub const NORM_EPS: f64 = 1e-5;

#[inline]
pub fn leaky_relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

#[inline]
fn leaky_relu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

fn add_bias(m: &mut DMatrix<f64>, bias: &DMatrix<f64>) {
    for (c, mut col) in m.column_iter_mut().enumerate() {
        let b = bias[(0, c)];
        col.iter_mut().for_each(|v| *v += b);
    }
}

fn column_sums(m: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(1, m.ncols(), |_, c| m.column(c).iter().sum())
}

pub fn dense_forward(x: &DMatrix<f64>, layer: &Dense) -> Result<DMatrix<f64>> {
    if x.ncols() != layer.weight.nrows() {
        return Err(Error::Shape(format!(
            "dense layer expects {} inputs, got {}",
            layer.weight.nrows(),
            x.ncols()
        )));
    }
    let mut y = x * &layer.weight;
    add_bias(&mut y, &layer.bias);
    Ok(y)
}

/// Returns parameter gradients and the gradient with respect to `x`.
pub fn dense_backward(x: &DMatrix<f64>, layer: &Dense, d_out: &DMatrix<f64>) -> (Dense, DMatrix<f64>) {
    let grads = Dense {
        weight: x.transpose() * d_out,
        bias: column_sums(d_out),
    };
    (grads, d_out * layer.weight.transpose())
}

/// Activations kept for [`feature_block_backward`].
#[derive(Debug, Clone)]
pub struct FeatureCache {
    input: DMatrix<f64>,
    pre: DMatrix<f64>,
    out: DMatrix<f64>,
    inv_std: Vec<f64>,
}

/// Linear map, leaky rectifier, then normalisation of each point's feature
/// vector to zero mean and unit variance.
pub fn feature_block(
    coords: &DMatrix<f64>,
    layer: &Dense,
    input_scale: f64,
) -> Result<(DMatrix<f64>, FeatureCache)> {
    if coords.ncols() != 3 {
        return Err(Error::Shape(format!(
            "feature block takes 3 coordinates per point, got {}",
            coords.ncols()
        )));
    }
    if coords.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("input coordinate".to_string()));
    }
    let input = coords * input_scale;
    let pre = dense_forward(&input, layer)?;
    let (n, h) = pre.shape();
    let mut out = pre.map(leaky_relu);
    // per-row statistics accumulated column by column (storage is
    // column-major)
    let mut mean = vec![0.0; n];
    for col in out.column_iter() {
        mean.iter_mut().zip(col.iter()).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= h as f64);
    let mut var = vec![0.0; n];
    for col in out.column_iter() {
        for ((s, v), m) in var.iter_mut().zip(col.iter()).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s / h as f64 + NORM_EPS).sqrt()).collect();
    for mut col in out.column_iter_mut() {
        for ((v, m), inv) in col.iter_mut().zip(&mean).zip(&inv_std) {
            *v = (*v - m) * inv;
        }
    }
    let cache = FeatureCache {
        input,
        pre,
        out: out.clone(),
        inv_std,
    };
    Ok((out, cache))
}

pub fn feature_block_backward(cache: &FeatureCache, layer: &Dense, d_out: &DMatrix<f64>) -> Dense {
    let (n, h) = cache.out.shape();
    let mut mean_g = vec![0.0; n];
    let mut mean_gy = vec![0.0; n];
    for (g, y) in d_out.column_iter().zip(cache.out.column_iter()) {
        for i in 0..n {
            mean_g[i] += g[i];
            mean_gy[i] += g[i] * y[i];
        }
    }
    mean_g.iter_mut().for_each(|v| *v /= h as f64);
    mean_gy.iter_mut().for_each(|v| *v /= h as f64);
    let mut d_pre = DMatrix::<f64>::zeros(n, h);
    for c in 0..h {
        let (g, y, pre) = (d_out.column(c), cache.out.column(c), cache.pre.column(c));
        let mut dst = d_pre.column_mut(c);
        for i in 0..n {
            let d_act = cache.inv_std[i] * (g[i] - mean_g[i] - y[i] * mean_gy[i]);
            dst[i] = d_act * leaky_relu_grad(pre[i]);
        }
    }
    dense_backward(&cache.input, layer, &d_pre).0
}

/// Activations and max-aggregation routing kept for
/// [`edge_conv_backward`].
#[derive(Debug, Clone)]
pub struct EdgeConvCache {
    input: DMatrix<f64>,
    // winning neighbour per (node, channel), column-major like the features
    argmax: Vec<u32>,
    pre: DMatrix<f64>,
}

/// Edge convolution along streamlines: for each node `i` and channel `c`,
/// the maximum over neighbours `j` of
/// `leaky_relu([h_i, h_j - h_i] . theta_c + b_c)`. Ties go to the lower
/// neighbour index.
pub fn edge_conv(
    graph: &StreamlineGraph,
    features: &DMatrix<f64>,
    layer: &EdgeConvParams,
) -> Result<(DMatrix<f64>, EdgeConvCache)> {
    let n = graph.num_nodes();
    if features.nrows() != n {
        return Err(Error::Shape(format!(
            "{} feature rows for {n} graph nodes",
            features.nrows()
        )));
    }
    if features.ncols() != layer.w_node.nrows() {
        return Err(Error::Shape(format!(
            "edge conv expects {} channels, got {}",
            layer.w_node.nrows(),
            features.ncols()
        )));
    }
    if let Some(i) = (0..n).find(|&i| graph.degree(i) == 0) {
        return Err(Error::InvalidArgument(format!("node {i} has no neighbours")));
    }
    // [h_i, h_j - h_i] theta = h_i (W_node - W_diff) + h_j W_diff
    let node_part = features * &layer.w_node;
    let diff_part = features * &layer.w_diff;
    let h = layer.w_node.ncols();
    let mut pre = DMatrix::<f64>::zeros(n, h);
    let mut argmax = vec![0u32; n * h];
    for c in 0..h {
        let b = layer.bias[(0, c)];
        let s = node_part.column(c);
        let d = diff_part.column(c);
        for i in 0..n {
            let base = s[i] - d[i] + b;
            let mut best = f64::NEG_INFINITY;
            let mut best_j = 0usize;
            for &j in graph.neighbors(i) {
                let m = base + d[j];
                if m > best {
                    best = m;
                    best_j = j;
                }
            }
            pre[(i, c)] = best;
            argmax[c * n + i] = best_j as u32;
        }
    }
    let out = pre.map(leaky_relu);
    let cache = EdgeConvCache {
        input: features.clone(),
        argmax,
        pre,
    };
    Ok((out, cache))
}

/// Parameter gradients and the gradient with respect to the layer input.
/// The upstream gradient of each (node, channel) flows only through the
/// winning neighbour.
pub fn edge_conv_backward(
    cache: &EdgeConvCache,
    layer: &EdgeConvParams,
    d_out: &DMatrix<f64>,
) -> (EdgeConvParams, DMatrix<f64>) {
    let (n, h) = cache.pre.shape();
    let mut d_node = DMatrix::<f64>::zeros(n, h);
    let mut d_diff = DMatrix::<f64>::zeros(n, h);
    let mut d_bias = DMatrix::<f64>::zeros(1, h);
    for c in 0..h {
        let mut bsum = 0.0;
        for i in 0..n {
            let g = d_out[(i, c)] * leaky_relu_grad(cache.pre[(i, c)]);
            if g == 0.0 {
                continue;
            }
            let j = cache.argmax[c * n + i] as usize;
            d_node[(i, c)] += g;
            d_diff[(j, c)] += g;
            d_diff[(i, c)] -= g;
            bsum += g;
        }
        d_bias[(0, c)] = bsum;
    }
    let xt = cache.input.transpose();
    let grads = EdgeConvParams {
        w_node: &xt * &d_node,
        w_diff: &xt * &d_diff,
        bias: d_bias,
    };
    let d_input = &d_node * layer.w_node.transpose() + &d_diff * layer.w_diff.transpose();
    (grads, d_input)
}
