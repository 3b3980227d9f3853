//! Temperature softmax, Bayes column normalisation and keypoint expectation.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::geometry::Point3;

/// Largest tolerated deviation of a column sum from one in
/// [`keypoint_expectation`].
pub const COLUMN_SUM_TOLERANCE: f64 = 1e-4;

/// Row-stochastic matrix of `p(k | x_p)`, points by keypoint classes.
#[derive(Debug, Clone, PartialEq)]
pub struct PointProbabilities(DMatrix<f64>);

impl PointProbabilities {
    /// Wraps a matrix after checking every row is a strictly positive
    /// distribution (sum within 1e-6 of one).
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        for (i, row) in m.row_iter().enumerate() {
            if row.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                return Err(Error::Validation(format!("row {i} has a nonpositive entry")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::Validation(format!("row {i} sums to {s}")));
            }
        }
        Ok(PointProbabilities(m))
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }
}

/// Row-wise `softmax(logits / t)`, stabilised by subtracting the row
/// maximum. Entries that underflow are floored at the smallest positive
/// double so rows stay strictly positive.
pub fn generalized_softmax(logits: &DMatrix<f64>, temperature: f64) -> Result<PointProbabilities> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logit".to_string()));
    }
    let (n, k) = logits.shape();
    let mut max = vec![f64::NEG_INFINITY; n];
    for col in logits.column_iter() {
        max.iter_mut().zip(col.iter()).for_each(|(m, v)| *m = m.max(*v));
    }
    let mut out = DMatrix::<f64>::zeros(n, k);
    let mut sum = vec![0.0; n];
    for c in 0..k {
        let src = logits.column(c);
        let mut dst = out.column_mut(c);
        for i in 0..n {
            let e = ((src[i] - max[i]) / temperature).exp();
            dst[i] = e;
            sum[i] += e;
        }
    }
    for mut col in out.column_iter_mut() {
        for (v, s) in col.iter_mut().zip(&sum) {
            *v = (*v / s).max(f64::MIN_POSITIVE);
        }
    }
    Ok(PointProbabilities(out))
}

/// Gradient with respect to the logits: `s_i (g_i - sum_j g_j s_j) / t`.
pub fn softmax_backward(
    probs: &PointProbabilities,
    d_probs: &DMatrix<f64>,
    temperature: f64,
) -> DMatrix<f64> {
    let s = probs.as_matrix();
    let (n, k) = s.shape();
    let mut dot = vec![0.0; n];
    for (g, p) in d_probs.column_iter().zip(s.column_iter()) {
        for i in 0..n {
            dot[i] += g[i] * p[i];
        }
    }
    let mut out = DMatrix::<f64>::zeros(n, k);
    for c in 0..k {
        let (g, p) = (d_probs.column(c), s.column(c));
        let mut dst = out.column_mut(c);
        for i in 0..n {
            dst[i] = p[i] * (g[i] - dot[i]) / temperature;
        }
    }
    out
}

/// Column normalisation `p(x_p | k) = p(k | x_p) / sum_p p(k | x_p)` under a
/// uniform point prior. Returns the normalised matrix and the column sums.
pub fn bayes_normalize(probs: &PointProbabilities) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let s = probs.as_matrix();
    let mut out = s.clone();
    let mut sums = Vec::with_capacity(s.ncols());
    for (k, mut col) in out.column_iter_mut().enumerate() {
        let total: f64 = col.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::NonFinite(format!("column {k} sums to {total}")));
        }
        col.iter_mut().for_each(|v| *v /= total);
        sums.push(total);
    }
    Ok((out, sums))
}

/// Gradient through the column normalisation:
/// `(g_pk - sum_q g_qk w_qk) / c_k`.
pub fn bayes_backward(normalized: &DMatrix<f64>, sums: &[f64], d_out: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, k) = normalized.shape();
    let mut out = DMatrix::<f64>::zeros(n, k);
    for c in 0..k {
        let w = normalized.column(c);
        let g = d_out.column(c);
        let dot: f64 = w.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
        for p in 0..n {
            out[(p, c)] = (g[p] - dot) / sums[c];
        }
    }
    out
}

/// `x_k = sum_p x_p p(x_p | k)` for every column.
pub fn keypoint_expectation(coords: &DMatrix<f64>, p_xk: &DMatrix<f64>) -> Result<Vec<Point3>> {
    if coords.ncols() != 3 || coords.nrows() != p_xk.nrows() {
        return Err(Error::Shape(format!(
            "coordinates {:?} do not match probabilities {:?}",
            coords.shape(),
            p_xk.shape()
        )));
    }
    for (k, col) in p_xk.column_iter().enumerate() {
        let s: f64 = col.iter().sum();
        if (s - 1.0).abs() > COLUMN_SUM_TOLERANCE {
            return Err(Error::Validation(format!(
                "column {k} of p(x|k) sums to {s}, not 1"
            )));
        }
    }
    let kp = p_xk.transpose() * coords;
    Ok((0..kp.nrows())
        .map(|k| Point3::new(kp[(k, 0)], kp[(k, 1)], kp[(k, 2)]))
        .collect())
}

/// Gradient with respect to `p(x_p | k)` given keypoint gradients.
pub fn expectation_backward(coords: &DMatrix<f64>, d_keypoints: &[Point3]) -> DMatrix<f64> {
    let d = DMatrix::from_fn(d_keypoints.len(), 3, |k, c| d_keypoints[k].to_array()[c]);
    coords * d.transpose()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_logits_are_uniform() {
        let p = generalized_softmax(&DMatrix::zeros(3, 4), 0.6).unwrap();
        assert!(p.as_matrix().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn two_class_closed_form() {
        let l = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let p = generalized_softmax(&l, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((p.as_matrix()[(0, 0)] - e / (1.0 + e)).abs() < 1e-15);
        assert!((p.as_matrix()[(0, 1)] - 1.0 / (1.0 + e)).abs() < 1e-15);
        let cold = generalized_softmax(&l, 0.01).unwrap();
        assert!((cold.as_matrix()[(0, 0)] - 1.0).abs() < 1e-8);
        assert!(cold.as_matrix()[(0, 1)] < 1e-8 && cold.as_matrix()[(0, 1)] > 0.0);
    }

    #[test]
    fn nonpositive_temperature() {
        assert!(generalized_softmax(&DMatrix::zeros(1, 2), 0.0).is_err());
        assert!(generalized_softmax(&DMatrix::zeros(1, 2), -1.0).is_err());
    }

    #[test]
    fn bayes_on_uniform() {
        let p = PointProbabilities::new(DMatrix::from_element(5, 2, 0.5)).unwrap();
        let (w, sums) = bayes_normalize(&p).unwrap();
        assert!(w.iter().all(|&v| (v - 0.2).abs() < 1e-15));
        assert_eq!(sums, vec![2.5, 2.5]);
    }

    #[test]
    fn concentrated_column_becomes_one_hot() {
        let tiny = 1e-20;
        let m = DMatrix::from_row_slice(3, 2, &[1.0 - tiny, tiny, tiny, 1.0 - tiny, tiny, 1.0 - tiny]);
        let (w, _) = bayes_normalize(&PointProbabilities::new(m).unwrap()).unwrap();
        assert!((w[(0, 0)] - 1.0).abs() < 1e-12);
        assert!(w[(1, 0)] < 1e-12 && w[(2, 0)] < 1e-12);
    }

    #[test]
    fn expectation_of_one_hot_and_midpoint() {
        let coords = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 3.0, 4.0, 5.0]);
        let p = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 0.5]);
        let kp = keypoint_expectation(&coords, &p).unwrap();
        assert_eq!(kp[0], Point3::new(1.0, 2.0, 3.0));
        assert_eq!(kp[1], Point3::new(2.0, 3.0, 4.0));
        let bad = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.4, 0.5]);
        assert!(keypoint_expectation(&coords, &bad).is_err());
    }

    #[test]
    fn softmax_jacobian_two_classes() {
        let t = 0.7;
        let l = DMatrix::from_row_slice(1, 2, &[0.3, -0.9]);
        let s = generalized_softmax(&l, t).unwrap();
        let sv = [s.as_matrix()[(0, 0)], s.as_matrix()[(0, 1)]];
        for upstream in [[1.0, 0.0], [0.0, 1.0]] {
            let g = softmax_backward(&s, &DMatrix::from_row_slice(1, 2, &upstream), t);
            let i = if upstream[0] == 1.0 { 0 } else { 1 };
            for j in 0..2 {
                let delta = if i == j { 1.0 } else { 0.0 };
                let expected = sv[i] * (delta - sv[j]) / t;
                assert!((g[(0, j)] - expected).abs() < 1e-15);
            }
        }
    }
}
