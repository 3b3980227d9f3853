use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::Point3;
use crate::net::KeypointSet;
use crate::streamline::{sample_indices, Tractogram};

/// Ablation matcher: `k` points drawn uniformly without replacement from
/// the moving points, each paired with its Euclidean nearest neighbour among
/// the fixed points (ties to the lower index). Returns `(moving, fixed)` in
/// matched order.
pub fn nn_baseline_keypoints(
    moving: &Tractogram,
    fixed: &Tractogram,
    k: usize,
    seed: u64,
) -> Result<(KeypointSet, KeypointSet)> {
    let moving_pts: Vec<Point3> = moving.points().copied().collect();
    let fixed_pts: Vec<Point3> = fixed.points().copied().collect();
    if k > moving_pts.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot sample {k} keypoints from {} moving points",
            moving_pts.len()
        )));
    }
    let picks = sample_indices(moving_pts.len(), k, seed)?;
    let sampled: Vec<Point3> = picks.iter().map(|&i| moving_pts[i]).collect();
    let matched: Vec<Point3> = sampled
        .par_iter()
        .map(|q| {
            let mut best = (f64::INFINITY, 0usize);
            for (j, f) in fixed_pts.iter().enumerate() {
                let d = q.distance_squared(*f);
                if d < best.0 {
                    best = (d, j);
                }
            }
            fixed_pts[best.1]
        })
        .collect();
    Ok((KeypointSet::new(sampled), KeypointSet::new(matched)))
}
