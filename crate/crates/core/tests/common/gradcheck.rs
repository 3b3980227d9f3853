//! Analytic gradients against central finite differences. Each check
//! returns `(name, relative error)` pairs.

use super::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use streamreg::graph::build_graph;
use streamreg::metrics::{chamfer_loss_with_grad, chamfer_loss_view, StreamlineView};
use streamreg::net::layers::{
    dense_backward, dense_forward, edge_conv, edge_conv_backward, feature_block,
    feature_block_backward,
};
use streamreg::net::prob::{
    bayes_backward, bayes_normalize, expectation_backward, generalized_softmax, keypoint_expectation,
    softmax_backward,
};
use streamreg::net::{Dense, EdgeConvParams, ModelParams};
use streamreg::tps::solve_tps_cached;
use streamreg::train::{pair_loss, pair_loss_and_grad};
use streamreg::{KeypointPairs, Point3, Tractogram};

fn weighted_sum(m: &DMatrix<f64>, g: &DMatrix<f64>) -> f64 {
    m.component_mul(g).sum()
}

pub type Report = Vec<(&'static str, f64)>;

fn check(out: &mut Report, name: &'static str, analytic: &[f64], numeric: &[f64]) {
    out.push((name, relative_error(analytic, numeric)));
}

pub fn dense_layer() -> Report {
    let mut out = Report::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_matrix(&mut rng, 6, 4, 1.0);
    let layer = Dense {
        weight: random_matrix(&mut rng, 4, 3, 1.0),
        bias: random_matrix(&mut rng, 1, 3, 1.0),
    };
    let g = random_matrix(&mut rng, 6, 3, 1.0);
    let (grads, dx) = dense_backward(&x, &layer, &g);
    let num_w = numeric_grad(layer.weight.as_slice(), |w| {
        let l = Dense {
            weight: DMatrix::from_column_slice(4, 3, w),
            bias: layer.bias.clone(),
        };
        weighted_sum(&dense_forward(&x, &l).unwrap(), &g)
    });
    check(&mut out, "dense weight", grads.weight.as_slice(), &num_w);
    let num_x = numeric_grad(x.as_slice(), |v| {
        weighted_sum(&dense_forward(&DMatrix::from_column_slice(6, 4, v), &layer).unwrap(), &g)
    });
    check(&mut out, "dense input", dx.as_slice(), &num_x);
    out
}

pub fn feature_block_layer() -> Report {
    let mut out = Report::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let coords = random_matrix(&mut rng, 10, 3, 50.0);
    let layer = Dense {
        weight: random_matrix(&mut rng, 3, 8, 1.0),
        bias: random_matrix(&mut rng, 1, 8, 1.0),
    };
    let g = random_matrix(&mut rng, 10, 8, 1.0);
    let (_, cache) = feature_block(&coords, &layer, 0.02).unwrap();
    let grads = feature_block_backward(&cache, &layer, &g);
    let mut packed: Vec<f64> = layer.weight.iter().copied().collect();
    packed.extend(layer.bias.iter());
    let analytic: Vec<f64> = grads.weight.iter().chain(grads.bias.iter()).copied().collect();
    let numeric = numeric_grad(&packed, |v| {
        let l = Dense {
            weight: DMatrix::from_column_slice(3, 8, &v[..24]),
            bias: DMatrix::from_column_slice(1, 8, &v[24..]),
        };
        weighted_sum(&feature_block(&coords, &l, 0.02).unwrap().0, &g)
    });
    check(&mut out, "feature block", &analytic, &numeric);
    out
}

pub fn edge_conv_layer() -> Report {
    let mut out = Report::new();
    let t = random_tractogram(3, 5, 5);
    let graph = build_graph(&t).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let h = random_matrix(&mut rng, graph.num_nodes(), 8, 1.0);
    let layer = EdgeConvParams {
        w_node: random_matrix(&mut rng, 8, 8, 0.5),
        w_diff: random_matrix(&mut rng, 8, 8, 0.5),
        bias: random_matrix(&mut rng, 1, 8, 0.5),
    };
    let g = random_matrix(&mut rng, graph.num_nodes(), 8, 1.0);
    let (_, cache) = edge_conv(&graph, &h, &layer).unwrap();
    let (grads, dh) = edge_conv_backward(&cache, &layer, &g);

    let mut packed: Vec<f64> = layer.w_node.iter().copied().collect();
    packed.extend(layer.w_diff.iter());
    packed.extend(layer.bias.iter());
    let analytic: Vec<f64> = grads
        .w_node
        .iter()
        .chain(grads.w_diff.iter())
        .chain(grads.bias.iter())
        .copied()
        .collect();
    let numeric = numeric_grad(&packed, |v| {
        let l = EdgeConvParams {
            w_node: DMatrix::from_column_slice(8, 8, &v[..64]),
            w_diff: DMatrix::from_column_slice(8, 8, &v[64..128]),
            bias: DMatrix::from_column_slice(1, 8, &v[128..]),
        };
        weighted_sum(&edge_conv(&graph, &h, &l).unwrap().0, &g)
    });
    check(&mut out, "edge conv params", &analytic, &numeric);

    let n = graph.num_nodes();
    let numeric = numeric_grad(h.as_slice(), |v| {
        weighted_sum(&edge_conv(&graph, &DMatrix::from_column_slice(n, 8, v), &layer).unwrap().0, &g)
    });
    check(&mut out, "edge conv input", dh.as_slice(), &numeric);
    out
}

pub fn probability_head() -> Report {
    let mut out = Report::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (n, k) = (12, 4);
    let logits = random_matrix(&mut rng, n, k, 2.0);
    let coords = random_matrix(&mut rng, n, 3, 30.0);
    let g: Vec<Point3> = (0..k)
        .map(|_| Point3::new(1.0, -0.5, 0.25) * (1.0 + rand::Rng::random::<f64>(&mut rng)))
        .collect();
    let objective = |z: &DMatrix<f64>| {
        let s = generalized_softmax(z, 0.6).unwrap();
        let (w, _) = bayes_normalize(&s).unwrap();
        let kp = keypoint_expectation(&coords, &w).unwrap();
        kp.iter().zip(&g).map(|(a, b)| a.dot(*b)).sum::<f64>()
    };
    let s = generalized_softmax(&logits, 0.6).unwrap();
    let (w, sums) = bayes_normalize(&s).unwrap();
    let d_w = expectation_backward(&coords, &g);
    let d_s = bayes_backward(&w, &sums, &d_w);
    let d_z = softmax_backward(&s, &d_s, 0.6);
    let numeric = numeric_grad(logits.as_slice(), |v| objective(&DMatrix::from_column_slice(n, k, v)));
    check(&mut out, "softmax, normalisation and expectation", d_z.as_slice(), &numeric);
    out
}

fn tiny_pair() -> (Tractogram, Tractogram) {
    let moving = random_tractogram(5, 5, 5);
    let fixed = moving
        .map_points(|p| Point3::new(1.05 * p.r + 2.0, p.a - 0.03 * p.s, p.s + 1.5 + 0.01 * p.r))
        .unwrap();
    (moving, fixed)
}

pub fn tps_solve_and_warp() -> Report {
    let mut out = Report::new();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let p = unflatten_points(random_matrix(&mut rng, 6, 3, 30.0).transpose().as_slice());
    let q: Vec<Point3> = p.iter().map(|x| *x + Point3::new(1.0, 2.0, -1.0)).collect();
    let q: Vec<Point3> = q
        .iter()
        .enumerate()
        .map(|(i, x)| *x + Point3::new(0.5 * i as f64, -0.3, 0.2 * (i % 2) as f64))
        .collect();
    let xs = unflatten_points(random_matrix(&mut rng, 20, 3, 35.0).transpose().as_slice());
    let up = unflatten_points(random_matrix(&mut rng, 20, 3, 1.0).transpose().as_slice());
    let lambda = 0.3;
    let objective = |pv: &[f64], qv: &[f64]| {
        let pairs = KeypointPairs::new(unflatten_points(pv), unflatten_points(qv)).unwrap();
        let (t, _) = solve_tps_cached(&pairs, lambda).unwrap();
        t.apply(&xs).unwrap().iter().zip(&up).map(|(a, b)| a.dot(*b)).sum::<f64>()
    };
    let pairs = KeypointPairs::new(p.clone(), q.clone()).unwrap();
    let (_, cache) = solve_tps_cached(&pairs, lambda).unwrap();
    let (dp, dq) = cache.backward(&xs, &up).unwrap();
    let pv = flatten_points(&p);
    let qv = flatten_points(&q);
    check(&mut out, "tps moving", &flatten_points(&dp), &numeric_grad(&pv, |v| objective(v, &qv)));
    check(&mut out, "tps fixed", &flatten_points(&dq), &numeric_grad(&qv, |v| objective(&pv, v)));
    out
}

pub fn chamfer_gradient() -> Report {
    let mut out = Report::new();
    let (moving, fixed) = tiny_pair();
    let m = flatten_points(&moving.points().copied().collect::<Vec<_>>());
    let f: Vec<Point3> = fixed.points().copied().collect();
    let fv = StreamlineView::new(&f, 5).unwrap();
    let pts = unflatten_points(&m);
    let (_, g) = chamfer_loss_with_grad(&StreamlineView::new(&pts, 5).unwrap(), &fv).unwrap();
    let numeric = numeric_grad(&m, |v| {
        let p = unflatten_points(v);
        chamfer_loss_view(&StreamlineView::new(&p, 5).unwrap(), &fv).unwrap()
    });
    check(&mut out, "chamfer", &flatten_points(&g), &numeric);
    out
}

pub fn end_to_end_through_solve() -> Report {
    let mut out = Report::new();
    let (moving, fixed) = tiny_pair();
    let gm = build_graph(&moving).unwrap();
    let gf = build_graph(&fixed).unwrap();
    let params = ModelParams::init(tiny_config(), 7).unwrap();
    let lambda = 0.5;
    let (_, grads) = pair_loss_and_grad(&params, &gm, &gf, lambda).unwrap();
    let x = flatten_params(&params);
    let numeric = numeric_grad(&x, |v| pair_loss(&unflatten_params(&params, v), &gm, &gf, lambda).unwrap());
    check(&mut out, "end to end", &flatten_params(&grads), &numeric);
    out
}

/// Every check above, in order.
pub fn all() -> Report {
    [
        dense_layer(),
        feature_block_layer(),
        edge_conv_layer(),
        probability_head(),
        tps_solve_and_warp(),
        chamfer_gradient(),
        end_to_end_through_solve(),
    ]
    .concat()
}
