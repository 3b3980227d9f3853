//! Shared helpers for the integration tests: finite differences, tiny
//! fixtures and brute-force reference implementations.

#![allow(dead_code)]

pub mod gradcheck;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use streamreg::net::ModelParams;
use streamreg::{ModelConfig, Point3, Streamline, Tractogram};

/// Step used by every central difference.
pub const FD_STEP: f64 = 1e-4;
/// Largest accepted relative error between analytic and numeric gradients.
pub const FD_TOLERANCE: f64 = 1e-3;

/// Central-difference gradient of `f` at `x`.
pub fn numeric_grad(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut y = x.to_vec();
    (0..x.len())
        .map(|i| {
            y[i] = x[i] + FD_STEP;
            let up = f(&y);
            y[i] = x[i] - FD_STEP;
            let down = f(&y);
            y[i] = x[i];
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|)` in the Euclidean norm; zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub fn flatten_points(p: &[Point3]) -> Vec<f64> {
    p.iter().flat_map(|q| q.to_array()).collect()
}

pub fn unflatten_points(v: &[f64]) -> Vec<Point3> {
    v.chunks(3).map(|c| Point3::new(c[0], c[1], c[2])).collect()
}

pub fn flatten_params(p: &ModelParams) -> Vec<f64> {
    p.tensors().into_iter().flat_map(|(_, t)| t.iter().copied().collect::<Vec<_>>()).collect()
}

pub fn unflatten_params(template: &ModelParams, v: &[f64]) -> ModelParams {
    let mut p = template.clone();
    let mut at = 0;
    for t in p.tensors_mut() {
        let n = t.len();
        t.copy_from_slice(&v[at..at + n]);
        at += n;
    }
    assert_eq!(at, v.len());
    p
}

pub fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-scale..scale))
}

/// A random smooth-ish streamline: a jittered segment.
pub fn random_streamline(rng: &mut ChaCha8Rng, points: usize, label: Option<u32>) -> Streamline {
    let start = Point3::new(
        rng.random_range(-40.0..40.0),
        rng.random_range(-40.0..40.0),
        rng.random_range(-40.0..40.0),
    );
    let dir = Point3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    );
    let pts = (0..points)
        .map(|i| {
            start
                + dir * (8.0 * i as f64)
                + Point3::new(
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                )
        })
        .collect();
    Streamline::new(pts, label).unwrap()
}

pub fn random_tractogram(seed: u64, n: usize, points: usize) -> Tractogram {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tractogram::new((0..n).map(|_| random_streamline(&mut rng, points, None)).collect()).unwrap()
}

/// Random tractogram with streamline lengths drawn from `min..=max` points.
pub fn random_ragged(seed: u64, n: usize, min: usize, max: usize, labels: u32) -> Tractogram {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tractogram::new(
        (0..n)
            .map(|i| {
                let p = rng.random_range(min..=max);
                random_streamline(&mut rng, p, Some(i as u32 % labels))
            })
            .collect(),
    )
    .unwrap()
}

/// The tiny gradient-check network: K = 4, H = 8, two edge layers.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        keypoints: 4,
        hidden: 8,
        layers: 2,
        temperature: 0.6,
        input_scale: 0.02,
    }
}

// ---- brute-force references -------------------------------------------

pub fn ref_l21(a: &[Point3], b: &[Point3]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        let dr = a[i].r - b[i].r;
        let da = a[i].a - b[i].a;
        let ds = a[i].s - b[i].s;
        s += (dr * dr + da * da + ds * ds).sqrt();
    }
    s / a.len() as f64
}

pub fn ref_mdf(a: &[Point3], b: &[Point3]) -> f64 {
    let flipped: Vec<Point3> = b.iter().rev().copied().collect();
    let direct = ref_l21(a, b);
    let flip = ref_l21(a, &flipped);
    if flip < direct {
        flip
    } else {
        direct
    }
}

fn ref_min_means(a: &Tractogram, b: &Tractogram, d: fn(&[Point3], &[Point3]) -> f64) -> (f64, f64) {
    let sa = a.streamlines();
    let sb = b.streamlines();
    let mut row = 0.0;
    for x in sa {
        let mut best = f64::INFINITY;
        for y in sb {
            let v = d(x.points(), y.points());
            if v < best {
                best = v;
            }
        }
        row += best;
    }
    let mut col = 0.0;
    for y in sb {
        let mut best = f64::INFINITY;
        for x in sa {
            let v = d(x.points(), y.points());
            if v < best {
                best = v;
            }
        }
        col += best;
    }
    (row / sa.len() as f64, col / sb.len() as f64)
}

pub fn ref_chamfer(a: &Tractogram, b: &Tractogram) -> f64 {
    let (r, c) = ref_min_means(a, b, ref_l21);
    r + c
}

pub fn ref_abd(a: &Tractogram, b: &Tractogram) -> f64 {
    let (r, c) = ref_min_means(a, b, ref_mdf);
    0.5 * (r + c)
}

/// Weighted Dice on a floor-binned grid with the given origin and size,
/// using a hash map of occupied voxels.
pub fn ref_wdice(a: &Tractogram, b: &Tractogram, origin: Point3, voxel: f64) -> f64 {
    use std::collections::HashMap;
    let bin = |t: &Tractogram| {
        let mut m: HashMap<[i64; 3], u64> = HashMap::new();
        for p in t.points() {
            let k = [
                ((p.r - origin.r) / voxel).floor() as i64,
                ((p.a - origin.a) / voxel).floor() as i64,
                ((p.s - origin.s) / voxel).floor() as i64,
            ];
            *m.entry(k).or_default() += 1;
        }
        m
    };
    let ma = bin(a);
    let mb = bin(b);
    let total: u64 = ma.values().sum::<u64>() + mb.values().sum::<u64>();
    let mut overlap = 0u64;
    for (k, &x) in &ma {
        if let Some(&y) = mb.get(k) {
            overlap += x + y;
        }
    }
    overlap as f64 / total as f64
}

/// Nearest point by exhaustive scan, ties to the lower index.
pub fn ref_nearest(q: Point3, pts: &[Point3]) -> usize {
    let mut best = 0;
    let mut bd = f64::INFINITY;
    for (i, p) in pts.iter().enumerate() {
        let d = (q.r - p.r).powi(2) + (q.a - p.a).powi(2) + (q.s - p.s).powi(2);
        if d < bd {
            bd = d;
            best = i;
        }
    }
    best
}

/// Distance from `q` to the convex hull of `pts`: pairwise Frank-Wolfe with
/// exact line search on `|sum w_i p_i - q|^2` over the simplex. Unlike the
/// plain variant it converges linearly on polytopes.
pub fn hull_distance(q: Point3, pts: &[Point3], iterations: usize) -> f64 {
    let mut w = vec![0.0f64; pts.len()];
    let start = ref_nearest(q, pts);
    w[start] = 1.0;
    let mut x = pts[start];
    for _ in 0..iterations {
        let g = x - q;
        if g.norm() < 1e-12 {
            return 0.0;
        }
        let (mut s, mut lo) = (0, f64::INFINITY);
        let (mut a, mut hi) = (0, f64::NEG_INFINITY);
        for (i, p) in pts.iter().enumerate() {
            let v = g.dot(*p);
            if v < lo {
                lo = v;
                s = i;
            }
            if w[i] > 0.0 && v > hi {
                hi = v;
                a = i;
            }
        }
        // duality gap bound reached
        if g.dot(x) - lo <= 1e-18 {
            break;
        }
        let d = pts[s] - pts[a];
        let dd = d.dot(d);
        if dd == 0.0 {
            break;
        }
        let gamma = (-(g.dot(d)) / dd).clamp(0.0, w[a]);
        if gamma == 0.0 {
            break;
        }
        w[a] -= gamma;
        w[s] += gamma;
        x = x + d * gamma;
    }
    (x - q).norm()
}
