//! Streamline distances, the symmetric minimum-distance training loss and
//! the bundle evaluation metrics.
//!
//! Every mean here is computed as an ordered sum followed by one division,
//! and every minimum breaks ties toward the lower index, so results are
//! identical whether or not the pairwise scan runs in parallel.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::Point3;
use crate::streamline::{Streamline, Tractogram};

/// Distances below this are treated as exact matches when differentiating
/// `|a - b|`, whose direction is undefined there.
pub const GRADIENT_DEAD_ZONE: f64 = 1e-9;

/// Default voxel edge for tract density maps, in mm.
pub const DEFAULT_VOXEL_MM: f64 = 2.0;

const ROW_BLOCK: usize = 32;

/// Mean point-to-point distance between two equally sampled polylines,
/// matching point `i` with point `i`.
#[inline]
pub(crate) fn l21_points(a: &[Point3], b: &[Point3]) -> f64 {
    let mut sum = 0.0;
    for (x, y) in a.iter().zip(b) {
        sum += x.distance(*y);
    }
    sum / a.len() as f64
}

/// Same as [`l21_points`] with `b` traversed backwards.
#[inline]
pub(crate) fn l21_points_flipped(a: &[Point3], b: &[Point3]) -> f64 {
    let mut sum = 0.0;
    for (x, y) in a.iter().zip(b.iter().rev()) {
        sum += x.distance(*y);
    }
    sum / a.len() as f64
}

#[inline]
pub(crate) fn mdf_points(a: &[Point3], b: &[Point3]) -> f64 {
    l21_points(a, b).min(l21_points_flipped(a, b))
}

fn check_same_len(a: &Streamline, b: &Streamline) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "streamlines have {} and {} points",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Direct-order L2,1 distance in mm.
pub fn l21_distance(a: &Streamline, b: &Streamline) -> Result<f64> {
    check_same_len(a, b)?;
    Ok(l21_points(a.points(), b.points()))
}

/// Mean direct-flip distance: the smaller of the direct and reversed L2,1.
pub fn mdf_distance(a: &Streamline, b: &Streamline) -> Result<f64> {
    check_same_len(a, b)?;
    Ok(mdf_points(a.points(), b.points()))
}

/// A flat, equally sampled streamline set borrowed as `len * P` points.
#[derive(Debug, Clone, Copy)]
pub struct StreamlineView<'a> {
    points: &'a [Point3],
    per_streamline: usize,
}

impl<'a> StreamlineView<'a> {
    pub fn new(points: &'a [Point3], per_streamline: usize) -> Result<Self> {
        if per_streamline == 0 || points.is_empty() || points.len() % per_streamline != 0 {
            return Err(Error::Shape(format!(
                "{} points do not split into streamlines of {per_streamline}",
                points.len()
            )));
        }
        Ok(StreamlineView {
            points,
            per_streamline,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.per_streamline
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn per_streamline(&self) -> usize {
        self.per_streamline
    }

    pub fn streamline(&self, i: usize) -> &'a [Point3] {
        &self.points[i * self.per_streamline..(i + 1) * self.per_streamline]
    }
}

fn flatten(t: &Tractogram) -> Result<(Vec<Point3>, usize)> {
    let p = t.points_per_streamline().ok_or_else(|| {
        Error::Shape("streamlines must share one point count".to_string())
    })?;
    Ok((t.points().copied().collect(), p))
}

/// Row and column minima of a pairwise distance matrix, with argmins.
#[derive(Debug, Clone)]
pub struct PairwiseMinima {
    pub row: Vec<(f64, usize)>,
    pub col: Vec<(f64, usize)>,
}

#[inline]
fn better(a: (f64, usize), b: (f64, usize)) -> (f64, usize) {
    if b.0 < a.0 || (b.0 == a.0 && b.1 < a.1) {
        b
    } else {
        a
    }
}

/// Blocked parallel scan of all `rows x cols` distances keeping row and
/// column minima. The matrix itself is never stored.
pub fn pairwise_minima<F>(rows: usize, cols: usize, dist: F) -> PairwiseMinima
where
    F: Fn(usize, usize) -> f64 + Sync,
{
    let blocks: Vec<(Vec<(f64, usize)>, Vec<(f64, usize)>)> = (0..rows.div_ceil(ROW_BLOCK))
        .into_par_iter()
        .map(|b| {
            let start = b * ROW_BLOCK;
            let end = (start + ROW_BLOCK).min(rows);
            let mut row_min = Vec::with_capacity(end - start);
            let mut col_min = vec![(f64::INFINITY, usize::MAX); cols];
            for i in start..end {
                let mut best = (f64::INFINITY, usize::MAX);
                for (j, cm) in col_min.iter_mut().enumerate() {
                    let d = dist(i, j);
                    best = better(best, (d, j));
                    *cm = better(*cm, (d, i));
                }
                row_min.push(best);
            }
            (row_min, col_min)
        })
        .collect();
    let mut row = Vec::with_capacity(rows);
    let mut col = vec![(f64::INFINITY, usize::MAX); cols];
    for (r, c) in blocks {
        row.extend(r);
        for (acc, v) in col.iter_mut().zip(c) {
            *acc = better(*acc, v);
        }
    }
    PairwiseMinima { row, col }
}

fn ordered_mean(values: impl Iterator<Item = f64>) -> f64 {
    let mut n = 0usize;
    let mut sum = 0.0;
    for v in values {
        sum += v;
        n += 1;
    }
    sum / n as f64
}

fn check_views(a: &StreamlineView, b: &StreamlineView) -> Result<()> {
    if a.per_streamline() != b.per_streamline() {
        return Err(Error::Shape(format!(
            "streamline sets sampled with {} and {} points",
            a.per_streamline(),
            b.per_streamline()
        )));
    }
    Ok(())
}

/// Symmetric minimum-L2,1 loss between a warped moving set and a fixed set.
pub fn chamfer_loss(moved: &Tractogram, fixed: &Tractogram) -> Result<f64> {
    let (m, p) = flatten(moved)?;
    let (f, q) = flatten(fixed)?;
    chamfer_loss_view(&StreamlineView::new(&m, p)?, &StreamlineView::new(&f, q)?)
}

pub fn chamfer_loss_view(moved: &StreamlineView, fixed: &StreamlineView) -> Result<f64> {
    check_views(moved, fixed)?;
    let mins = pairwise_minima(moved.len(), fixed.len(), |i, j| {
        l21_points(moved.streamline(i), fixed.streamline(j))
    });
    Ok(ordered_mean(mins.row.iter().map(|v| v.0)) + ordered_mean(mins.col.iter().map(|v| v.0)))
}

/// Loss value and its gradient with respect to every moved point.
pub fn chamfer_loss_with_grad(
    moved: &StreamlineView,
    fixed: &StreamlineView,
) -> Result<(f64, Vec<Point3>)> {
    check_views(moved, fixed)?;
    let mins = pairwise_minima(moved.len(), fixed.len(), |i, j| {
        l21_points(moved.streamline(i), fixed.streamline(j))
    });
    let loss =
        ordered_mean(mins.row.iter().map(|v| v.0)) + ordered_mean(mins.col.iter().map(|v| v.0));

    let p = moved.per_streamline();
    let mut grad = vec![Point3::ORIGIN; moved.points.len()];
    let mut add = |mi: usize, fj: usize, scale: f64| {
        let ms = moved.streamline(mi);
        let fs = fixed.streamline(fj);
        for k in 0..p {
            let d = ms[k] - fs[k];
            let n = d.norm();
            if n > GRADIENT_DEAD_ZONE {
                let g = &mut grad[mi * p + k];
                *g = *g + d * (scale / n);
            }
        }
    };
    let row_scale = 1.0 / (moved.len() * p) as f64;
    for (i, &(_, j)) in mins.row.iter().enumerate() {
        add(i, j, row_scale);
    }
    let col_scale = 1.0 / (fixed.len() * p) as f64;
    for (j, &(_, i)) in mins.col.iter().enumerate() {
        add(i, j, col_scale);
    }
    Ok((loss, grad))
}

/// Average bundle distance: the mean of the two directional averages of
/// per-streamline minimum MDF.
pub fn abd(bundle_a: &Tractogram, bundle_b: &Tractogram) -> Result<f64> {
    let (a, p) = flatten(bundle_a)?;
    let (b, q) = flatten(bundle_b)?;
    abd_view(&StreamlineView::new(&a, p)?, &StreamlineView::new(&b, q)?)
}

pub fn abd_view(a: &StreamlineView, b: &StreamlineView) -> Result<f64> {
    check_views(a, b)?;
    let mins = pairwise_minima(a.len(), b.len(), |i, j| {
        mdf_points(a.streamline(i), b.streamline(j))
    });
    Ok(0.5
        * (ordered_mean(mins.row.iter().map(|v| v.0)) + ordered_mean(mins.col.iter().map(|v| v.0))))
}

/// Axis-aligned voxel grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelGrid {
    pub origin: Point3,
    pub voxel_size: f64,
    pub dims: [usize; 3],
}

impl VoxelGrid {
    pub fn new(origin: Point3, voxel_size: f64, dims: [usize; 3]) -> Result<Self> {
        if !(voxel_size > 0.0) || !voxel_size.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "voxel size must be positive, got {voxel_size}"
            )));
        }
        if !origin.is_finite() {
            return Err(Error::NonFinite("grid origin".to_string()));
        }
        Ok(VoxelGrid {
            origin,
            voxel_size,
            dims,
        })
    }

    /// Smallest voxel-aligned grid (origin snapped to multiples of the voxel
    /// size) containing every point of `tractograms`.
    pub fn covering(tractograms: &[&Tractogram], voxel_size: f64) -> Result<Self> {
        if !(voxel_size > 0.0) || !voxel_size.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "voxel size must be positive, got {voxel_size}"
            )));
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for t in tractograms {
            for p in t.points() {
                for (d, v) in p.to_array().into_iter().enumerate() {
                    lo[d] = lo[d].min(v);
                    hi[d] = hi[d].max(v);
                }
            }
        }
        if lo.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("no points to cover".to_string()));
        }
        let origin = lo.map(|v| (v / voxel_size).floor() * voxel_size);
        let dims = [0, 1, 2].map(|d| ((hi[d] - origin[d]) / voxel_size).floor() as usize + 1);
        VoxelGrid::new(Point3::from_array(origin), voxel_size, dims)
    }

    pub fn num_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// Flat voxel index of `p`; voxels are half-open `[lo, lo + size)`.
    pub fn voxel_of(&self, p: Point3) -> Option<usize> {
        let rel = (p - self.origin).to_array();
        let mut idx = [0usize; 3];
        for d in 0..3 {
            let f = (rel[d] / self.voxel_size).floor();
            if !(f >= 0.0) || f >= self.dims[d] as f64 {
                return None;
            }
            idx[d] = f as usize;
        }
        Some((idx[2] * self.dims[1] + idx[1]) * self.dims[0] + idx[0])
    }
}

/// Per-voxel counts of streamline points of one bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct TractDensityMap {
    grid: VoxelGrid,
    counts: Vec<u32>,
}

impl TractDensityMap {
    pub fn grid(&self) -> &VoxelGrid {
        &self.grid
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }
}

/// Voxelises every point of `bundle`; points outside `grid` are dropped.
pub fn tract_density_map(bundle: &Tractogram, grid: &VoxelGrid) -> Result<TractDensityMap> {
    if !(grid.voxel_size > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "voxel size must be positive, got {}",
            grid.voxel_size
        )));
    }
    let mut counts = vec![0u32; grid.num_voxels()];
    for p in bundle.points() {
        if let Some(v) = grid.voxel_of(*p) {
            counts[v] += 1;
        }
    }
    Ok(TractDensityMap {
        grid: *grid,
        counts,
    })
}

/// Density-weighted Dice: the density mass on voxels occupied by both maps
/// over the total density mass.
pub fn wdice(a: &TractDensityMap, b: &TractDensityMap) -> Result<f64> {
    if a.grid != b.grid {
        return Err(Error::Shape("density maps use different grids".to_string()));
    }
    let mut overlap = 0u64;
    let mut total = 0u64;
    for (&x, &y) in a.counts.iter().zip(&b.counts) {
        total += x as u64 + y as u64;
        if x > 0 && y > 0 {
            overlap += x as u64 + y as u64;
        }
    }
    if total == 0 {
        return Err(Error::InvalidArgument("both density maps are empty".to_string()));
    }
    Ok(overlap as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(pts: &[[f64; 3]]) -> Streamline {
        Streamline::new(pts.iter().map(|&p| Point3::from_array(p)).collect(), None).unwrap()
    }

    #[test]
    fn l21_of_offset_copy_is_offset_norm() {
        let a = s(&[[0.0, 0.0, 0.0], [1.0, 2.0, 3.0], [4.0, 4.0, 4.0]]);
        let b = a.map_points(|p| *p + Point3::new(3.0, 4.0, 0.0)).unwrap();
        assert!((l21_distance(&a, &b).unwrap() - 5.0).abs() < 1e-12);
        assert_eq!(l21_distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn mdf_absorbs_flip() {
        let a = s(&[[0.0, 0.0, 0.0], [1.0, 2.0, 3.0], [4.0, 4.0, 4.0]]);
        assert_eq!(mdf_distance(&a, &a.reversed()).unwrap(), 0.0);
        assert!(l21_distance(&a, &a.reversed()).unwrap() > 0.0);
    }

    #[test]
    fn mismatched_lengths() {
        let a = s(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let b = s(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        assert!(l21_distance(&a, &b).is_err());
        assert!(mdf_distance(&a, &b).is_err());
    }

    #[test]
    fn chamfer_single_pair() {
        let a = s(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let b = a.map_points(|p| *p + Point3::new(0.0, 0.0, 2.0)).unwrap();
        let ta = Tractogram::new(vec![a]).unwrap();
        let tb = Tractogram::new(vec![b]).unwrap();
        assert!((chamfer_loss(&ta, &tb).unwrap() - 4.0).abs() < 1e-12);
        assert_eq!(chamfer_loss(&ta, &ta).unwrap(), 0.0);
        assert!((abd(&ta, &tb).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn density_single_point() {
        let a = s(&[[0.0, 0.0, 0.0], [0.5, 0.5, 0.5]]);
        let t = Tractogram::new(vec![a]).unwrap();
        let grid = VoxelGrid::new(Point3::ORIGIN, 1.0, [2, 2, 2]).unwrap();
        let m = tract_density_map(&t, &grid).unwrap();
        assert_eq!(m.counts()[0], 2);
        assert_eq!(m.total(), 2);
        assert!(VoxelGrid::new(Point3::ORIGIN, 0.0, [1, 1, 1]).is_err());
    }

    #[test]
    fn wdice_bounds() {
        let grid = VoxelGrid::new(Point3::ORIGIN, 1.0, [4, 1, 1]).unwrap();
        let a = TractDensityMap { grid, counts: vec![1, 2, 0, 0] };
        let b = TractDensityMap { grid, counts: vec![0, 0, 3, 1] };
        assert_eq!(wdice(&a, &a).unwrap(), 1.0);
        assert_eq!(wdice(&a, &b).unwrap(), 0.0);
        let empty = TractDensityMap { grid, counts: vec![0; 4] };
        assert!(wdice(&empty, &empty).is_err());
        let other = TractDensityMap {
            grid: VoxelGrid::new(Point3::ORIGIN, 2.0, [4, 1, 1]).unwrap(),
            counts: vec![1; 4],
        };
        assert!(wdice(&a, &other).is_err());
    }
}
