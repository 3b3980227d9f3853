//! Streamlines, tractograms, arc-length resampling and patch sampling.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::Point3;

/// Bundle label written for streamlines without one in the binary format.
pub const UNLABELED: u32 = u32::MAX;

/// An ordered polyline of points in millimetre RAS space.
#[derive(Debug, Clone, PartialEq)]
pub struct Streamline {
    points: Vec<Point3>,
    label: Option<u32>,
}

impl Streamline {
    /// Builds a streamline, rejecting non-finite coordinates, fewer than two
    /// points and zero total arc length.
    pub fn new(points: Vec<Point3>, label: Option<u32>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::Validation(format!(
                "streamline needs at least 2 points, got {}",
                points.len()
            )));
        }
        if let Some(i) = points.iter().position(|p| !p.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite coordinate at point {i}"
            )));
        }
        if label == Some(UNLABELED) {
            return Err(Error::Validation(format!(
                "label {UNLABELED:#x} is reserved for unlabeled streamlines"
            )));
        }
        let s = Streamline { points, label };
        if s.arc_length() <= 0.0 {
            return Err(Error::Degenerate(
                "streamline has zero arc length".to_string(),
            ));
        }
        Ok(s)
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn label(&self) -> Option<u32> {
        self.label
    }

    pub fn with_label(mut self, label: Option<u32>) -> Self {
        self.label = label;
        self
    }

    /// Total polyline length in millimetres.
    pub fn arc_length(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| w[0].distance(w[1]))
            .sum()
    }

    /// The same streamline traversed in the opposite direction.
    pub fn reversed(&self) -> Streamline {
        let mut points = self.points.clone();
        points.reverse();
        Streamline {
            points,
            label: self.label,
        }
    }

    /// Applies `f` to every point. The result is re-validated.
    pub fn map_points(&self, f: impl FnMut(&Point3) -> Point3) -> Result<Streamline> {
        Streamline::new(self.points.iter().map(f).collect(), self.label)
    }
}

/// Resamples `s` to exactly `count` points equally spaced in arc length,
/// interpolating linearly between the input vertices. Endpoints are kept.
pub fn resample_streamline(s: &Streamline, count: usize) -> Result<Streamline> {
    if count < 2 {
        return Err(Error::InvalidArgument(format!(
            "resampling needs at least 2 points, got {count}"
        )));
    }
    let pts = s.points();
    let mut cumulative = Vec::with_capacity(pts.len());
    let mut acc = 0.0;
    cumulative.push(0.0);
    for w in pts.windows(2) {
        acc += w[0].distance(w[1]);
        cumulative.push(acc);
    }
    let total = acc;
    if !(total > 0.0) {
        return Err(Error::Degenerate(
            "cannot resample a streamline with zero arc length".to_string(),
        ));
    }

    let last = pts.len() - 1;
    let mut out = Vec::with_capacity(count);
    out.push(pts[0]);
    let mut seg = 0;
    for j in 1..count - 1 {
        let target = total * j as f64 / (count - 1) as f64;
        while seg + 1 < last && cumulative[seg + 1] < target {
            seg += 1;
        }
        let seg_len = cumulative[seg + 1] - cumulative[seg];
        let t = if seg_len > 0.0 {
            ((target - cumulative[seg]) / seg_len).clamp(0.0, 1.0)
        } else {
            0.0
        };
        out.push(pts[seg].lerp(pts[seg + 1], t));
    }
    out.push(pts[last]);
    Streamline::new(out, s.label())
}

/// A set of streamlines belonging to one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct Tractogram {
    streamlines: Vec<Streamline>,
    label_names: BTreeMap<u32, String>,
}

impl Tractogram {
    pub fn new(streamlines: Vec<Streamline>) -> Result<Self> {
        if streamlines.is_empty() {
            return Err(Error::Validation(
                "tractogram must contain at least one streamline".to_string(),
            ));
        }
        Ok(Tractogram {
            streamlines,
            label_names: BTreeMap::new(),
        })
    }

    pub fn with_label_names(mut self, names: BTreeMap<u32, String>) -> Self {
        self.label_names = names;
        self
    }

    pub fn streamlines(&self) -> &[Streamline] {
        &self.streamlines
    }

    pub fn into_streamlines(self) -> Vec<Streamline> {
        self.streamlines
    }

    pub fn len(&self) -> usize {
        self.streamlines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.streamlines.is_empty()
    }

    pub fn label_names(&self) -> &BTreeMap<u32, String> {
        &self.label_names
    }

    /// Display name of a bundle: the label table entry or the numeric id.
    pub fn bundle_name(&self, label: u32) -> String {
        self.label_names
            .get(&label)
            .cloned()
            .unwrap_or_else(|| label.to_string())
    }

    /// Common point count if every streamline has the same length.
    pub fn points_per_streamline(&self) -> Option<usize> {
        let p = self.streamlines[0].len();
        self.streamlines.iter().all(|s| s.len() == p).then_some(p)
    }

    pub fn total_points(&self) -> usize {
        self.streamlines.iter().map(Streamline::len).sum()
    }

    pub fn points(&self) -> impl Iterator<Item = &Point3> + '_ {
        self.streamlines.iter().flat_map(|s| s.points().iter())
    }

    /// Flattened coordinates as a (points × 3) matrix, streamline-major.
    pub fn coordinate_matrix(&self) -> DMatrix<f64> {
        let n = self.total_points();
        let mut m = DMatrix::zeros(n, 3);
        for (i, p) in self.points().enumerate() {
            m[(i, 0)] = p.r;
            m[(i, 1)] = p.a;
            m[(i, 2)] = p.s;
        }
        m
    }

    /// Distinct bundle labels in ascending order; `None` marks unlabeled
    /// streamlines and sorts first.
    pub fn labels(&self) -> Vec<Option<u32>> {
        let mut labels: Vec<Option<u32>> = self.streamlines.iter().map(|s| s.label()).collect();
        labels.sort_unstable();
        labels.dedup();
        labels
    }

    pub fn is_labeled(&self) -> bool {
        self.streamlines.iter().all(|s| s.label().is_some())
    }

    /// Streamlines carrying `label`, or `None` if there are none.
    pub fn bundle(&self, label: Option<u32>) -> Option<Tractogram> {
        let picked: Vec<Streamline> = self
            .streamlines
            .iter()
            .filter(|s| s.label() == label)
            .cloned()
            .collect();
        Tractogram::new(picked)
            .ok()
            .map(|t| t.with_label_names(self.label_names.clone()))
    }

    /// Resamples every streamline to `count` points.
    pub fn resampled(&self, count: usize) -> Result<Tractogram> {
        let streamlines = self
            .streamlines
            .iter()
            .map(|s| resample_streamline(s, count))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tractogram {
            streamlines,
            label_names: self.label_names.clone(),
        })
    }

    /// Streamlines at the given indices, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Tractogram> {
        let mut picked = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = self.streamlines.get(i).ok_or_else(|| {
                Error::InvalidArgument(format!("streamline index {i} out of range"))
            })?;
            picked.push(s.clone());
        }
        Ok(Tractogram::new(picked)?.with_label_names(self.label_names.clone()))
    }

    /// Applies a point map to every streamline, preserving labels.
    pub fn map_points(&self, mut f: impl FnMut(&Point3) -> Point3) -> Result<Tractogram> {
        let streamlines = self
            .streamlines
            .iter()
            .map(|s| s.map_points(&mut f))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tractogram {
            streamlines,
            label_names: self.label_names.clone(),
        })
    }

    /// Rebuilds the tractogram from a flat point list in streamline-major
    /// order, keeping streamline lengths and labels.
    pub fn with_points(&self, points: &[Point3]) -> Result<Tractogram> {
        if points.len() != self.total_points() {
            return Err(Error::Shape(format!(
                "expected {} points, got {}",
                self.total_points(),
                points.len()
            )));
        }
        let mut offset = 0;
        let mut streamlines = Vec::with_capacity(self.len());
        for s in &self.streamlines {
            let chunk = points[offset..offset + s.len()].to_vec();
            offset += s.len();
            streamlines.push(Streamline::new(chunk, s.label())?);
        }
        Ok(Tractogram {
            streamlines,
            label_names: self.label_names.clone(),
        })
    }
}

/// Indices of `n` streamlines drawn uniformly without replacement out of
/// `total`, in draw order.
pub fn sample_indices(total: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n > total {
        return Err(Error::InvalidArgument(format!(
            "cannot sample {n} streamlines out of {total}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rand::seq::index::sample(&mut rng, total, n).into_vec())
}

/// A random patch of `n` streamlines, deterministic in `seed`.
pub fn sample_patch(t: &Tractogram, n: usize, seed: u64) -> Result<Tractogram> {
    if n == 0 {
        return Err(Error::InvalidArgument("patch size must be positive".to_string()));
    }
    let idx = sample_indices(t.len(), n, seed)?;
    t.select(&idx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(zs: &[f64]) -> Streamline {
        Streamline::new(zs.iter().map(|&z| Point3::new(0.0, 0.0, z)).collect(), None).unwrap()
    }

    #[test]
    fn straight_line_resamples_to_unit_spacing() {
        let s = line(&[0.0, 3.7, 14.0]);
        let r = resample_streamline(&s, 15).unwrap();
        assert_eq!(r.len(), 15);
        for (i, p) in r.points().iter().enumerate() {
            assert!((p.s - i as f64).abs() < 1e-12, "{i}: {p:?}");
            assert_eq!(p.r, 0.0);
        }
    }

    #[test]
    fn endpoints_are_exact() {
        let s = Streamline::new(
            vec![
                Point3::new(0.1, 0.2, 0.3),
                Point3::new(5.0, -1.0, 2.0),
                Point3::new(7.3, 4.4, -8.1),
            ],
            Some(3),
        )
        .unwrap();
        let r = resample_streamline(&s, 7).unwrap();
        assert_eq!(r.points()[0], s.points()[0]);
        assert_eq!(r.points()[6], s.points()[2]);
        assert_eq!(r.label(), Some(3));
    }

    #[test]
    fn already_equidistant_is_unchanged() {
        let s = line(&(0..15).map(f64::from).collect::<Vec<_>>());
        let r = resample_streamline(&s, 15).unwrap();
        for (a, b) in r.points().iter().zip(s.points()) {
            assert!(a.distance(*b) < 1e-12);
        }
    }

    #[test]
    fn zero_length_is_rejected() {
        let p = Point3::new(1.0, 1.0, 1.0);
        let err = Streamline::new(vec![p, p, p], None).unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)));
    }

    #[test]
    fn nan_is_rejected() {
        let err = Streamline::new(
            vec![Point3::ORIGIN, Point3::new(f64::NAN, 0.0, 0.0)],
            None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn empty_tractogram_rejected() {
        assert!(Tractogram::new(vec![]).is_err());
    }

    #[test]
    fn full_patch_is_permutation() {
        let t = Tractogram::new((0..20).map(|i| line(&[i as f64, i as f64 + 1.0])).collect())
            .unwrap();
        let p = sample_patch(&t, 20, 7).unwrap();
        let mut a: Vec<f64> = t.streamlines().iter().map(|s| s.points()[0].s).collect();
        let mut b: Vec<f64> = p.streamlines().iter().map(|s| s.points()[0].s).collect();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert_eq!(a, b);
        assert_eq!(p, sample_patch(&t, 20, 7).unwrap());
        assert!(sample_patch(&t, 21, 7).is_err());
    }

    #[test]
    fn patches_keep_labels() {
        let t = Tractogram::new(
            (0..10)
                .map(|i| line(&[i as f64, i as f64 + 1.0]).with_label(Some(i)))
                .collect(),
        )
        .unwrap();
        let p = sample_patch(&t, 4, 1).unwrap();
        for s in p.streamlines() {
            assert_eq!(s.label(), Some(s.points()[0].s as u32));
        }
    }
}
