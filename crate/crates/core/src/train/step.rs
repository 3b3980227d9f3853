//! The differentiable registration objective for one patch pair:
//! keypoints on both patches, TPS solve, warp of the moving patch and the
//! symmetric minimum-L2,1 loss, back-propagated to the network weights.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::Point3;
use crate::graph::{build_graph, StreamlineGraph};
use crate::metrics::{chamfer_loss_view, chamfer_loss_with_grad, StreamlineView};
use crate::net::{forward, ModelParams};
use crate::streamline::{sample_patch, Tractogram};
use crate::tps::{sample_lambda, solve_tps_cached, KeypointPairs};
use crate::train::adam::{adam_step, AdamConfig, AdamState};
use crate::train::config::TrainConfig;

fn graph_points(g: &StreamlineGraph) -> Vec<Point3> {
    let c = g.coords();
    (0..c.nrows())
        .map(|i| Point3::new(c[(i, 0)], c[(i, 1)], c[(i, 2)]))
        .collect()
}

/// Loss of one patch pair without gradients.
pub fn pair_loss(
    params: &ModelParams,
    moving: &StreamlineGraph,
    fixed: &StreamlineGraph,
    lambda: f64,
) -> Result<f64> {
    let fm = forward(params, moving)?;
    let ff = forward(params, fixed)?;
    let pairs = KeypointPairs::new(fm.keypoints().to_vec(), ff.keypoints().to_vec())?;
    let (tps, _) = solve_tps_cached(&pairs, lambda)?;
    let moved = tps.apply(&graph_points(moving))?;
    let fixed_pts = graph_points(fixed);
    chamfer_loss_view(
        &StreamlineView::new(&moved, moving.points_per_streamline())?,
        &StreamlineView::new(&fixed_pts, fixed.points_per_streamline())?,
    )
}

/// Loss of one patch pair and its gradient with respect to every parameter.
pub fn pair_loss_and_grad(
    params: &ModelParams,
    moving: &StreamlineGraph,
    fixed: &StreamlineGraph,
    lambda: f64,
) -> Result<(f64, ModelParams)> {
    let fm = forward(params, moving)?;
    let ff = forward(params, fixed)?;
    let pairs = KeypointPairs::new(fm.keypoints().to_vec(), ff.keypoints().to_vec())?;
    let (tps, cache) = solve_tps_cached(&pairs, lambda)?;
    let moving_pts = graph_points(moving);
    let moved = tps.apply(&moving_pts)?;
    let fixed_pts = graph_points(fixed);
    let (loss, d_moved) = chamfer_loss_with_grad(
        &StreamlineView::new(&moved, moving.points_per_streamline())?,
        &StreamlineView::new(&fixed_pts, fixed.points_per_streamline())?,
    )?;
    let (d_p, d_q) = cache.backward(&moving_pts, &d_moved)?;
    let mut grads = fm.backward(params, &d_p)?;
    grads.add_scaled(&ff.backward(params, &d_q)?, 1.0);
    Ok((loss, grads))
}

/// Outcome of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationReport {
    pub loss: f64,
    pub lambda: f64,
    pub lr: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

fn with_context(e: Error, context: &str) -> Error {
    match e {
        Error::IllConditioned { condition, message } => Error::IllConditioned {
            condition,
            message: format!("{message} ({context})"),
        },
        Error::NonFinite(m) => Error::NonFinite(format!("{m} ({context})")),
        other => other,
    }
}

/// One training iteration on a (moving, fixed) subject pair.
///
/// Draws lambda log-uniformly and independent patches from both subjects
/// (all from `seed`), averages loss and gradients over the patch pairs,
/// clips and applies one Adam step. On error the parameters and optimizer
/// state are left untouched.
pub fn train_iteration(
    moving: &Tractogram,
    fixed: &Tractogram,
    params: &mut ModelParams,
    opt: &mut AdamState,
    config: &TrainConfig,
    lr: f64,
    seed: u64,
) -> Result<IterationReport> {
    let t = &config.train;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lambda = sample_lambda(&mut rng, t.lambda_min, t.lambda_max)?;
    let seeds: Vec<(u64, u64)> = (0..t.patches).map(|_| (rng.random(), rng.random())).collect();
    let context = format!("lambda={lambda:.6e}, iteration seed={seed}");

    let n_m = t.patch_streamlines.min(moving.len());
    let n_f = t.patch_streamlines.min(fixed.len());
    let outcomes: Vec<Result<(f64, ModelParams)>> = seeds
        .par_iter()
        .map(|&(sm, sf)| {
            let gm = build_graph(&sample_patch(moving, n_m, sm)?)?;
            let gf = build_graph(&sample_patch(fixed, n_f, sf)?)?;
            pair_loss_and_grad(params, &gm, &gf, lambda)
        })
        .collect();

    let mut loss = 0.0;
    let mut grads = ModelParams::zeros(params.config);
    for o in outcomes {
        let (l, g) = o.map_err(|e| with_context(e, &context))?;
        loss += l;
        grads.add_scaled(&g, 1.0);
    }
    let inv = 1.0 / t.patches as f64;
    loss *= inv;
    grads.scale(inv);

    let grad_norm = grads.global_norm();
    if !loss.is_finite() || !grad_norm.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss={loss}, gradient norm={grad_norm} ({context})"
        )));
    }
    if t.clip_norm > 0.0 && grad_norm > t.clip_norm {
        grads.scale(t.clip_norm / grad_norm);
    }
    let adam = AdamConfig {
        beta1: t.beta1,
        beta2: t.beta2,
        epsilon: t.epsilon,
    };
    adam_step(params, &grads, opt, lr, &adam)?;
    Ok(IterationReport {
        loss,
        lambda,
        lr,
        grad_norm,
    })
}
