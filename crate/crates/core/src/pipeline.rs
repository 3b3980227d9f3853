//! End-to-end registration and bundle-wise evaluation.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use log::{info, warn};

use crate::error::{Error, Result};
use crate::metrics::{abd, tract_density_map, wdice, VoxelGrid};
use crate::net::{detect_keypoints, nn_baseline_keypoints, KeypointSet, ModelParams};
use crate::streamline::{sample_indices, Tractogram};
use crate::tps::{solve_tps, KeypointPairs, TpsTransform};

/// Streamline resampling used for ABD when the inputs disagree on it.
const EVAL_POINTS: usize = 20;

/// How keypoint correspondences are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Matcher {
    /// Learned keypoints detected independently on both subjects.
    Network,
    /// Random moving points paired with their nearest fixed points.
    NearestNeighbor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegisterOptions {
    pub lambda: f64,
    /// Streamlines drawn from each subject for keypoint detection.
    pub subset: usize,
    pub subset_seed: u64,
    /// Points per streamline in the detection subset; should match training.
    pub points: usize,
    pub matcher: Matcher,
    /// Keypoint count for the nearest-neighbour matcher.
    pub nn_keypoints: usize,
}

impl Default for RegisterOptions {
    fn default() -> Self {
        RegisterOptions {
            lambda: 0.5,
            subset: 30_000,
            subset_seed: 0,
            points: 15,
            matcher: Matcher::Network,
            nn_keypoints: 512,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Registration {
    pub moved: Tractogram,
    pub transform: TpsTransform,
    pub moving_keypoints: KeypointSet,
    pub fixed_keypoints: KeypointSet,
}

fn subset_seed(seed: u64, salt: u64) -> u64 {
    seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// A resampled random subset of `t` of at most `size` streamlines.
pub fn detection_subset(t: &Tractogram, size: usize, points: usize, seed: u64) -> Result<Tractogram> {
    if size == 0 {
        return Err(Error::InvalidArgument("subset size must be positive".to_string()));
    }
    let n = if size > t.len() {
        warn!("subset of {size} exceeds {} streamlines; using all", t.len());
        t.len()
    } else {
        size
    };
    let picked = if n == t.len() {
        (0..n).collect()
    } else {
        sample_indices(t.len(), n, seed)?
    };
    t.select(&picked)?.resampled(points)
}

/// Detects learned keypoints on a subset of `t`.
pub fn keypoints(t: &Tractogram, params: &ModelParams, opts: &RegisterOptions) -> Result<KeypointSet> {
    let sub = detection_subset(t, opts.subset, opts.points, opts.subset_seed)?;
    detect_keypoints(&sub, params)
}

/// Registers `moving` onto `fixed`: keypoints on subsets of both, a TPS
/// solve at `opts.lambda`, and a warp of every original moving point.
pub fn register(
    moving: &Tractogram,
    fixed: &Tractogram,
    params: Option<&ModelParams>,
    opts: &RegisterOptions,
) -> Result<Registration> {
    let sub_m = detection_subset(moving, opts.subset, opts.points, subset_seed(opts.subset_seed, 1))?;
    let sub_f = detection_subset(fixed, opts.subset, opts.points, subset_seed(opts.subset_seed, 2))?;
    let (km, kf) = match opts.matcher {
        Matcher::Network => {
            let params = params.ok_or_else(|| {
                Error::InvalidArgument("network matcher needs a trained model".to_string())
            })?;
            (detect_keypoints(&sub_m, params)?, detect_keypoints(&sub_f, params)?)
        }
        Matcher::NearestNeighbor => {
            nn_baseline_keypoints(&sub_m, &sub_f, opts.nn_keypoints, opts.subset_seed)?
        }
    };
    let pairs = KeypointPairs::new(km.points.clone(), kf.points.clone())?;
    let transform = solve_tps(&pairs, opts.lambda)?;
    let moved = transform.apply_tractogram(moving)?;
    info!(
        "registered {} streamlines with {} keypoints (lambda {})",
        moving.len(),
        pairs.len(),
        opts.lambda
    );
    Ok(Registration {
        moved,
        transform,
        moving_keypoints: km.with_subject("moving"),
        fixed_keypoints: kf.with_subject("fixed"),
    })
}

/// Metrics for one bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct BundleMetrics {
    pub name: String,
    pub label: Option<u32>,
    pub abd: f64,
    pub wdice: f64,
    pub n_moving: usize,
    pub n_fixed: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub bundles: Vec<BundleMetrics>,
    pub voxel_size: f64,
}

impl EvaluationReport {
    pub fn mean_abd(&self) -> f64 {
        self.bundles.iter().map(|b| b.abd).sum::<f64>() / self.bundles.len() as f64
    }

    pub fn mean_wdice(&self) -> f64 {
        self.bundles.iter().map(|b| b.wdice).sum::<f64>() / self.bundles.len() as f64
    }

    pub fn bundle(&self, name: &str) -> Option<&BundleMetrics> {
        self.bundles.iter().find(|b| b.name == name)
    }

    /// `bundle,abd_mm,wdice,n_moving,n_fixed`, one row per bundle.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bundle,abd_mm,wdice,n_moving,n_fixed\n");
        for b in &self.bundles {
            let _ = writeln!(out, "{},{},{},{},{}", b.name, b.abd, b.wdice, b.n_moving, b.n_fixed);
        }
        out
    }

    /// Human-readable `key=value` lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for b in &self.bundles {
            let _ = writeln!(
                out,
                "bundle={} abd_mm={:.4} wdice={:.4} n_moving={} n_fixed={}",
                b.name, b.abd, b.wdice, b.n_moving, b.n_fixed
            );
        }
        let _ = writeln!(out, "mean_abd_mm={:.4}", self.mean_abd());
        let _ = writeln!(out, "mean_wdice={:.4}", self.mean_wdice());
        let _ = writeln!(out, "voxel_mm={}", self.voxel_size);
        out
    }
}

fn label_set(t: &Tractogram) -> BTreeSet<Option<u32>> {
    t.labels().into_iter().collect()
}

fn label_name(t: &Tractogram, label: Option<u32>) -> String {
    match label {
        Some(l) => t.bundle_name(l),
        None => "unlabeled".to_string(),
    }
}

fn same_sampling(a: &Tractogram, b: &Tractogram) -> bool {
    matches!((a.points_per_streamline(), b.points_per_streamline()), (Some(p), Some(q)) if p == q)
}

/// Per-bundle ABD and weighted Dice of `moved` against `fixed`.
///
/// Bundles are matched by label; unlabeled inputs form a single bundle
/// named `whole`. All density maps share one grid covering both inputs.
pub fn evaluate(moved: &Tractogram, fixed: &Tractogram, voxel_size: f64) -> Result<EvaluationReport> {
    let lm = label_set(moved);
    let lf = label_set(fixed);
    if lm != lf {
        let only_m: Vec<String> = lm.difference(&lf).map(|l| label_name(moved, *l)).collect();
        let only_f: Vec<String> = lf.difference(&lm).map(|l| label_name(fixed, *l)).collect();
        return Err(Error::Validation(format!(
            "bundle labels differ: only in moved [{}], only in fixed [{}]",
            only_m.join(", "),
            only_f.join(", ")
        )));
    }
    let grid = VoxelGrid::covering(&[moved, fixed], voxel_size)?;
    let whole = lm.len() == 1 && lm.contains(&None);
    let mut bundles = Vec::with_capacity(lm.len());
    for label in lm {
        let bm = moved.bundle(label).expect("label present in moved");
        let bf = fixed.bundle(label).expect("label present in fixed");
        let d = if same_sampling(&bm, &bf) {
            abd(&bm, &bf)?
        } else {
            abd(&bm.resampled(EVAL_POINTS)?, &bf.resampled(EVAL_POINTS)?)?
        };
        let w = wdice(&tract_density_map(&bm, &grid)?, &tract_density_map(&bf, &grid)?)?;
        let name = if whole {
            "whole".to_string()
        } else {
            label_name(fixed, label)
        };
        bundles.push(BundleMetrics {
            name,
            label,
            abd: d,
            wdice: w,
            n_moving: bm.len(),
            n_fixed: bf.len(),
        });
    }
    Ok(EvaluationReport {
        bundles,
        voxel_size,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_phantom, PhantomConfig};

    fn phantom() -> Tractogram {
        gen_phantom(&PhantomConfig {
            bundles: 3,
            streamlines_per_bundle: 20,
            ..PhantomConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn self_evaluation_is_perfect() {
        let t = phantom();
        let r = evaluate(&t, &t, 2.0).unwrap();
        assert_eq!(r.bundles.len(), 3);
        for b in &r.bundles {
            assert_eq!(b.abd, 0.0);
            assert_eq!(b.wdice, 1.0);
        }
    }

    #[test]
    fn unlabeled_is_whole() {
        let t = phantom().map_points(|p| *p).unwrap();
        let stripped = Tractogram::new(
            t.streamlines().iter().cloned().map(|s| s.with_label(None)).collect(),
        )
        .unwrap();
        let r = evaluate(&stripped, &stripped, 2.0).unwrap();
        assert_eq!(r.bundles.len(), 1);
        assert_eq!(r.bundles[0].name, "whole");
    }

    #[test]
    fn mismatched_labels_are_listed() {
        let t = phantom();
        let part = t.bundle(Some(0)).unwrap();
        let err = evaluate(&part, &t, 2.0).unwrap_err().to_string();
        assert!(err.contains("only in fixed"), "{err}");
    }

    #[test]
    fn nn_register_runs() {
        let t = phantom();
        let opts = RegisterOptions {
            matcher: Matcher::NearestNeighbor,
            nn_keypoints: 16,
            subset: 40,
            ..RegisterOptions::default()
        };
        let r = register(&t, &t, None, &opts).unwrap();
        assert_eq!(r.moved.len(), t.len());
    }
}
