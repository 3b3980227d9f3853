//! Regularised thin-plate-spline solve and warp.
//!
//! The warp maps moving space to fixed space:
//!
//! ```text
//! T(x) = A [x; 1] + sum_i W_i U(|P_i - x|),     U(r) = r^2 ln r
//! ```
//!
//! and its parameters come from the symmetric saddle-point system
//!
//! ```text
//! | K + lambda I   P~ | | W  |   | Q |
//! | P~^T           0  | | A^T| = | 0 |
//! ```
//!
//! with `K_ij = U(|P_i - P_j|)` and `P~ = [P 1]` the homogeneous control
//! points. The last four rows are the side conditions `sum W_i = 0` and
//! `sum W_i P_i^T = 0`.

use log::warn;
use nalgebra::{DMatrix, Dyn, Matrix3x4, LU};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::Point3;
use crate::streamline::Tractogram;

/// Condition estimate above which a solve logs a warning.
pub const CONDITION_WARN: f64 = 1e12;
/// Condition estimate above which a solve is refused.
pub const CONDITION_MAX: f64 = 1e14;

const APPLY_CHUNK: usize = 4096;

/// `U(r) = r^2 ln r` with `U(0) = 0`.
pub fn kernel_u(r: f64) -> Result<f64> {
    if !(r >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "kernel radius must be nonnegative, got {r}"
        )));
    }
    Ok(if r == 0.0 { 0.0 } else { r * r * r.ln() })
}

/// `U` evaluated from a squared distance: `r^2 ln r = d2 ln(d2) / 2`.
#[inline]
pub(crate) fn kernel_sq(d2: f64) -> f64 {
    if d2 > 0.0 {
        0.5 * d2 * d2.ln()
    } else {
        0.0
    }
}

/// `dU/dr / r = 2 ln r + 1`, so that `grad_x U(|x - p|) = (x - p) * factor`.
#[inline]
pub(crate) fn kernel_grad_factor(d2: f64) -> f64 {
    if d2 > 0.0 {
        d2.ln() + 1.0
    } else {
        0.0
    }
}

/// Matched control points, paired by index.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointPairs {
    moving: Vec<Point3>,
    fixed: Vec<Point3>,
}

impl KeypointPairs {
    pub fn new(moving: Vec<Point3>, fixed: Vec<Point3>) -> Result<Self> {
        if moving.len() != fixed.len() {
            return Err(Error::Shape(format!(
                "{} moving vs {} fixed keypoints",
                moving.len(),
                fixed.len()
            )));
        }
        if moving.len() < 4 {
            return Err(Error::InvalidArgument(format!(
                "a 3D thin-plate spline needs at least 4 pairs, got {}",
                moving.len()
            )));
        }
        if moving.iter().chain(&fixed).any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("keypoint coordinate".to_string()));
        }
        Ok(KeypointPairs { moving, fixed })
    }

    pub fn moving(&self) -> &[Point3] {
        &self.moving
    }

    pub fn fixed(&self) -> &[Point3] {
        &self.fixed
    }

    pub fn len(&self) -> usize {
        self.moving.len()
    }

    pub fn is_empty(&self) -> bool {
        self.moving.is_empty()
    }
}

/// A solved thin-plate-spline warp.
#[derive(Debug, Clone, PartialEq)]
pub struct TpsTransform {
    control: Vec<Point3>,
    affine: Matrix3x4<f64>,
    weights: Vec<[f64; 3]>,
    lambda: f64,
}

impl TpsTransform {
    pub fn from_parts(
        control: Vec<Point3>,
        affine: Matrix3x4<f64>,
        weights: Vec<[f64; 3]>,
        lambda: f64,
    ) -> Result<Self> {
        if control.len() != weights.len() {
            return Err(Error::Shape(format!(
                "{} control points but {} weight rows",
                control.len(),
                weights.len()
            )));
        }
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidArgument(format!("invalid lambda {lambda}")));
        }
        let finite = control.iter().all(|p| p.is_finite())
            && affine.iter().all(|v| v.is_finite())
            && weights.iter().flatten().all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("transform parameter".to_string()));
        }
        Ok(TpsTransform {
            control,
            affine,
            weights,
            lambda,
        })
    }

    /// The identity warp anchored at `control`.
    pub fn identity(control: Vec<Point3>) -> Self {
        let weights = vec![[0.0; 3]; control.len()];
        TpsTransform {
            control,
            affine: Matrix3x4::identity(),
            weights,
            lambda: 0.0,
        }
    }

    pub fn control_points(&self) -> &[Point3] {
        &self.control
    }

    /// Affine block, acting on homogeneous `[x; 1]`.
    pub fn affine(&self) -> &Matrix3x4<f64> {
        &self.affine
    }

    pub fn weights(&self) -> &[[f64; 3]] {
        &self.weights
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn num_control_points(&self) -> usize {
        self.control.len()
    }

    /// Largest absolute warp weight.
    pub fn max_abs_weight(&self) -> f64 {
        self.weights
            .iter()
            .flatten()
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn apply_point(&self, x: Point3) -> Point3 {
        let a = &self.affine;
        let mut out = [
            a[(0, 0)] * x.r + a[(0, 1)] * x.a + a[(0, 2)] * x.s + a[(0, 3)],
            a[(1, 0)] * x.r + a[(1, 1)] * x.a + a[(1, 2)] * x.s + a[(1, 3)],
            a[(2, 0)] * x.r + a[(2, 1)] * x.a + a[(2, 2)] * x.s + a[(2, 3)],
        ];
        for (c, w) in self.control.iter().zip(&self.weights) {
            let u = kernel_sq(x.distance_squared(*c));
            out[0] += w[0] * u;
            out[1] += w[1] * u;
            out[2] += w[2] * u;
        }
        Point3::from_array(out)
    }

    /// Warps every point. Runs in parallel; each output depends only on its
    /// own input, so the result does not depend on scheduling.
    pub fn apply(&self, points: &[Point3]) -> Result<Vec<Point3>> {
        let mut out = vec![Point3::ORIGIN; points.len()];
        out.par_chunks_mut(APPLY_CHUNK)
            .zip(points.par_chunks(APPLY_CHUNK))
            .for_each(|(dst, src)| {
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = self.apply_point(*s);
                }
            });
        if let Some(i) = out.iter().position(|p| !p.is_finite()) {
            return Err(Error::NonFinite(format!("warped point {i}")));
        }
        Ok(out)
    }

    pub fn apply_tractogram(&self, t: &Tractogram) -> Result<Tractogram> {
        let pts: Vec<Point3> = t.points().copied().collect();
        t.with_points(&self.apply(&pts)?)
    }
}

/// State retained from a solve for back-propagation.
#[derive(Debug, Clone)]
pub struct TpsCache {
    control: Vec<Point3>,
    lu: LU<f64, Dyn, Dyn>,
    // (K + 4) x 3: warp weights stacked over the transposed affine block
    coefficients: DMatrix<f64>,
    condition: f64,
}

impl TpsCache {
    /// Condition estimate of the equilibrated system matrix.
    pub fn condition(&self) -> f64 {
        self.condition
    }

    /// Gradients of a scalar loss with respect to the moving (`P`) and fixed
    /// (`Q`) control points, given the loss gradient `upstream` on the warped
    /// positions of `points`.
    pub fn backward(
        &self,
        points: &[Point3],
        upstream: &[Point3],
    ) -> Result<(Vec<Point3>, Vec<Point3>)> {
        if points.len() != upstream.len() {
            return Err(Error::Shape(format!(
                "{} points but {} upstream gradients",
                points.len(),
                upstream.len()
            )));
        }
        let k = self.control.len();
        let c = &self.coefficients;
        let mut d_coef = DMatrix::<f64>::zeros(k + 4, 3);
        let mut d_p = vec![Point3::ORIGIN; k];

        for (x, g) in points.iter().zip(upstream) {
            let g = g.to_array();
            for (i, p) in self.control.iter().enumerate() {
                let d2 = x.distance_squared(*p);
                let u = kernel_sq(d2);
                for d in 0..3 {
                    d_coef[(i, d)] += u * g[d];
                }
                // dL/dU(x, P_i) = g . C_i ; grad_P U(|x - P|) = (P - x) (ln d2 + 1)
                let du = g[0] * c[(i, 0)] + g[1] * c[(i, 1)] + g[2] * c[(i, 2)];
                if du != 0.0 {
                    d_p[i] = d_p[i] + (*p - *x) * (du * kernel_grad_factor(d2));
                }
            }
            let xh = [x.r, x.a, x.s, 1.0];
            for (j, xv) in xh.iter().enumerate() {
                for d in 0..3 {
                    d_coef[(k + j, d)] += xv * g[d];
                }
            }
        }

        // adjoint solve, the system matrix is symmetric
        let adj = self.lu.solve(&d_coef).ok_or_else(|| Error::IllConditioned {
            condition: self.condition,
            message: "adjoint solve failed".to_string(),
        })?;

        let d_q: Vec<Point3> = (0..k)
            .map(|i| Point3::new(adj[(i, 0)], adj[(i, 1)], adj[(i, 2)]))
            .collect();

        // dSystem = -adj * C^T, consumed blockwise without forming it
        let dl = |row: usize, col: usize| -> f64 {
            -(adj[(row, 0)] * c[(col, 0)] + adj[(row, 1)] * c[(col, 1)] + adj[(row, 2)] * c[(col, 2)])
        };
        for i in 0..k {
            let pi = self.control[i];
            let mut acc = Point3::ORIGIN;
            for j in 0..k {
                if i == j {
                    continue;
                }
                let pj = self.control[j];
                let d2 = pi.distance_squared(pj);
                let w = dl(i, j) + dl(j, i);
                acc = acc + (pi - pj) * (w * kernel_grad_factor(d2));
            }
            let homog = Point3::new(
                dl(i, k) + dl(k, i),
                dl(i, k + 1) + dl(k + 1, i),
                dl(i, k + 2) + dl(k + 2, i),
            );
            d_p[i] = d_p[i] + acc + homog;
        }
        Ok((d_p, d_q))
    }
}

fn system_matrix(control: &[Point3], lambda: f64) -> DMatrix<f64> {
    let k = control.len();
    let mut l = DMatrix::<f64>::zeros(k + 4, k + 4);
    for i in 0..k {
        for j in 0..i {
            let u = kernel_sq(control[i].distance_squared(control[j]));
            l[(i, j)] = u;
            l[(j, i)] = u;
        }
        l[(i, i)] = lambda;
        let h = [control[i].r, control[i].a, control[i].s, 1.0];
        for (c, v) in h.into_iter().enumerate() {
            l[(i, k + c)] = v;
            l[(k + c, i)] = v;
        }
    }
    l
}

/// 1-norm condition number of the symmetrically equilibrated matrix
/// `D L D`, `D_ii = 1 / sqrt(max_j |L_ij|)`. Mixed units (squared-log
/// millimetres against millimetres against ones) would otherwise dominate
/// the estimate even for well-posed control sets.
fn equilibrated_condition(l: &DMatrix<f64>) -> f64 {
    let n = l.nrows();
    let scale: Vec<f64> = (0..n)
        .map(|i| {
            let m = l.row(i).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if m > 0.0 {
                1.0 / m.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let scaled = DMatrix::from_fn(n, n, |i, j| l[(i, j)] * scale[i] * scale[j]);
    let norm1 = |m: &DMatrix<f64>| {
        m.column_iter()
            .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0f64, f64::max)
    };
    match scaled.clone().lu().try_inverse() {
        Some(inv) => {
            let c = norm1(&scaled) * norm1(&inv);
            if c.is_finite() {
                c
            } else {
                f64::INFINITY
            }
        }
        None => f64::INFINITY,
    }
}

/// Solves the regularised TPS system for `pairs`.
pub fn solve_tps(pairs: &KeypointPairs, lambda: f64) -> Result<TpsTransform> {
    solve_tps_cached(pairs, lambda).map(|(t, _)| t)
}

/// Like [`solve_tps`], also returning the factorisation for
/// [`TpsCache::backward`].
pub fn solve_tps_cached(pairs: &KeypointPairs, lambda: f64) -> Result<(TpsTransform, TpsCache)> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "lambda must be finite and nonnegative, got {lambda}"
        )));
    }
    let k = pairs.len();
    let l = system_matrix(pairs.moving(), lambda);
    let condition = equilibrated_condition(&l);
    if condition > CONDITION_MAX {
        return Err(Error::IllConditioned {
            condition,
            message: "control points are coplanar, duplicated or otherwise degenerate".to_string(),
        });
    }
    if condition > CONDITION_WARN {
        warn!("TPS system poorly conditioned: estimate {condition:.3e} (K = {k}, lambda = {lambda})");
    }

    let mut rhs = DMatrix::<f64>::zeros(k + 4, 3);
    for (i, q) in pairs.fixed().iter().enumerate() {
        rhs[(i, 0)] = q.r;
        rhs[(i, 1)] = q.a;
        rhs[(i, 2)] = q.s;
    }
    let lu = l.clone().lu();
    let mut coef = lu.solve(&rhs).ok_or_else(|| Error::IllConditioned {
        condition,
        message: "singular system matrix".to_string(),
    })?;
    // one step of iterative refinement tightens the side conditions
    let residual = &rhs - &l * &coef;
    if let Some(corr) = lu.solve(&residual) {
        coef += corr;
    }
    if coef.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("TPS coefficients".to_string()));
    }

    let weights: Vec<[f64; 3]> = (0..k)
        .map(|i| [coef[(i, 0)], coef[(i, 1)], coef[(i, 2)]])
        .collect();
    let affine = Matrix3x4::from_fn(|d, c| coef[(k + c, d)]);
    let transform = TpsTransform {
        control: pairs.moving().to_vec(),
        affine,
        weights,
        lambda,
    };
    let cache = TpsCache {
        control: pairs.moving().to_vec(),
        lu,
        coefficients: coef,
        condition,
    };
    Ok((transform, cache))
}

/// Log-uniform draw from `[min, max]`.
pub fn sample_lambda<R: Rng + ?Sized>(rng: &mut R, min: f64, max: f64) -> Result<f64> {
    if !(min > 0.0) || !(max >= min) || !max.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "lambda range [{min}, {max}] must satisfy 0 < min <= max < inf"
        )));
    }
    if min == max {
        return Ok(min);
    }
    let (lo, hi) = (min.ln(), max.ln());
    Ok(rng.random_range(lo..hi).exp().clamp(min, max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_points(n: usize, seed: u64) -> Vec<Point3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                Point3::new(
                    rng.random_range(-60.0..60.0),
                    rng.random_range(-60.0..60.0),
                    rng.random_range(-60.0..60.0),
                )
            })
            .collect()
    }

    #[test]
    fn kernel_values() {
        assert_eq!(kernel_u(1.0).unwrap(), 0.0);
        assert_eq!(kernel_u(0.0).unwrap(), 0.0);
        let e = std::f64::consts::E;
        assert!((kernel_u(e).unwrap() - 7.389056098930650).abs() < 1e-12);
        assert!(kernel_u(-1.0).is_err());
        assert!((kernel_sq(9.0) - kernel_u(3.0).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn identity_when_fixed_equals_moving() {
        let p = random_points(10, 1);
        let t = solve_tps(&KeypointPairs::new(p.clone(), p.clone()).unwrap(), 0.0).unwrap();
        assert!(t.max_abs_weight() < 1e-10);
        let id = Matrix3x4::<f64>::identity();
        assert!((t.affine() - id).abs().max() < 1e-10);
    }

    #[test]
    fn translation_goes_into_affine_block() {
        let p = random_points(12, 2);
        let d = Point3::new(3.0, -2.0, 0.5);
        let q: Vec<Point3> = p.iter().map(|&x| x + d).collect();
        let t = solve_tps(&KeypointPairs::new(p.clone(), q).unwrap(), 0.0).unwrap();
        assert!(t.max_abs_weight() < 1e-8);
        let probe = Point3::new(7.0, 8.0, -9.0);
        assert!(t.apply_point(probe).distance(probe + d) < 1e-9);
    }

    #[test]
    fn interpolates_at_zero_lambda() {
        let p = random_points(8, 3);
        let q = random_points(8, 4);
        let t = solve_tps(&KeypointPairs::new(p.clone(), q.clone()).unwrap(), 0.0).unwrap();
        for (a, b) in p.iter().zip(&q) {
            assert!(t.apply_point(*a).distance(*b) < 1e-6);
        }
    }

    #[test]
    fn coplanar_controls_rejected() {
        let mut p = random_points(9, 5);
        for x in &mut p {
            x.s = 0.0;
        }
        let err = solve_tps(&KeypointPairs::new(p.clone(), p).unwrap(), 0.0).unwrap_err();
        assert!(matches!(err, Error::IllConditioned { .. }), "{err}");
    }

    #[test]
    fn duplicated_controls_rejected() {
        let mut p = random_points(9, 6);
        p[3] = p[2];
        let err = solve_tps(&KeypointPairs::new(p.clone(), p).unwrap(), 0.0).unwrap_err();
        assert!(matches!(err, Error::IllConditioned { .. }), "{err}");
    }

    #[test]
    fn too_few_pairs() {
        let p = random_points(3, 7);
        assert!(KeypointPairs::new(p.clone(), p).is_err());
    }

    #[test]
    fn constant_lambda_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            assert_eq!(sample_lambda(&mut rng, 0.5, 0.5).unwrap(), 0.5);
        }
        assert!(sample_lambda(&mut rng, 0.0, 1.0).is_err());
        assert!(sample_lambda(&mut rng, 2.0, 1.0).is_err());
    }
}
