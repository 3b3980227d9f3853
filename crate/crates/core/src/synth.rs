//! Synthetic bundles and bounded ground-truth deformations.
//!
//! Bundles are jittered copies of a parametric centerline. Each streamline
//! gets an offset that varies linearly between two endpoint offsets, each
//! drawn from an isotropic Gaussian and rejected beyond `3 sigma`, so every
//! point lies within `3 sigma` of the centerline point it was generated from.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Matrix3x4, Rotation3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geometry::Point3;
use crate::io::write_atomic;
use crate::streamline::{resample_streamline, Streamline, Tractogram};
use crate::tps::{solve_tps, KeypointPairs, TpsTransform};

/// Samples along the centerline before resampling to the target count.
const CENTERLINE_SAMPLES: usize = 200;
/// Redraws allowed when a warp draw violates its displacement bound.
const MAX_REDRAWS: usize = 8;
/// Random control points used for a ground-truth TPS warp.
const WARP_CONTROL_POINTS: usize = 12;
/// Probe lattice resolution per axis for the displacement bound.
const PROBE_STEPS: usize = 9;
/// Margin added around the tractogram bounds for the probe grid, mm.
const PROBE_MARGIN: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CenterlineFamily {
    /// Quarter-circle-ish arc; `extent` is the arc length.
    Arc,
    /// One helical turn; `extent` is the pitch.
    Helix,
    /// Three-quarter circle.
    CShape,
    /// Two parallel legs of length `extent` joined by a half circle.
    UShape,
}

impl CenterlineFamily {
    pub const ALL: [CenterlineFamily; 4] = [
        CenterlineFamily::Arc,
        CenterlineFamily::Helix,
        CenterlineFamily::CShape,
        CenterlineFamily::UShape,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CenterlineFamily::Arc => "arc",
            CenterlineFamily::Helix => "helix",
            CenterlineFamily::CShape => "cshape",
            CenterlineFamily::UShape => "ushape",
        }
    }

    /// Centerline point at `u` in `[0, 1]`, in the local frame where the
    /// curve lies around the origin.
    fn local(self, u: f64, radius: f64, extent: f64) -> Point3 {
        match self {
            CenterlineFamily::Arc => {
                let sweep = (extent / radius).min(2.0 * PI * 0.9);
                let th = -0.5 * sweep + u * sweep;
                Point3::new(radius * th.cos(), radius * th.sin(), 0.0)
            }
            CenterlineFamily::Helix => {
                let th = 2.0 * PI * u;
                Point3::new(radius * th.cos(), radius * th.sin(), extent * (u - 0.5))
            }
            CenterlineFamily::CShape => {
                let th = PI * 0.25 + u * 1.5 * PI;
                Point3::new(radius * th.cos(), radius * th.sin(), 0.0)
            }
            CenterlineFamily::UShape => {
                // parametrised by arc length over leg, bend, leg
                let bend = PI * radius;
                let total = 2.0 * extent + bend;
                let s = u * total;
                if s <= extent {
                    Point3::new(-radius, extent - s, 0.0)
                } else if s <= extent + bend {
                    let th = PI + (s - extent) / radius;
                    Point3::new(radius * th.cos(), radius * th.sin(), 0.0)
                } else {
                    Point3::new(radius, s - extent - bend, 0.0)
                }
            }
        }
    }
}

/// Parameters for one synthetic bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct BundleSpec {
    pub family: CenterlineFamily,
    pub center: Point3,
    /// Curvature radius, mm.
    pub radius: f64,
    /// Length-like parameter, mm; meaning depends on the family.
    pub extent: f64,
    /// Euler angles (roll, pitch, yaw) of the local frame, radians.
    pub rotation: [f64; 3],
    pub count: usize,
    /// Lateral jitter standard deviation, mm.
    pub jitter: f64,
    /// Points per generated streamline.
    pub points: usize,
    pub seed: u64,
    pub label: Option<u32>,
}

impl BundleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::InvalidArgument("bundle count must be positive".into()));
        }
        if !(self.radius > 0.0) || !(self.extent > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "bundle radius and extent must be positive, got {} and {}",
                self.radius, self.extent
            )));
        }
        if !(self.jitter >= 0.0) || !self.jitter.is_finite() {
            return Err(Error::InvalidArgument(format!("invalid jitter {}", self.jitter)));
        }
        if self.points < 2 {
            return Err(Error::InvalidArgument("streamlines need at least 2 points".into()));
        }
        let finite = self.center.is_finite() && self.rotation.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidArgument("non-finite bundle placement".into()));
        }
        Ok(())
    }

    fn frame(&self) -> Rotation3<f64> {
        let [r, p, y] = self.rotation;
        Rotation3::from_euler_angles(r, p, y)
    }

    /// The jitter-free centerline as a dense polyline in world coordinates.
    pub fn centerline(&self) -> Vec<Point3> {
        let rot = self.frame();
        (0..CENTERLINE_SAMPLES)
            .map(|i| {
                let u = i as f64 / (CENTERLINE_SAMPLES - 1) as f64;
                let l = self.family.local(u, self.radius, self.extent);
                let v = rot * nalgebra::Vector3::new(l.r, l.a, l.s);
                Point3::new(v.x, v.y, v.z) + self.center
            })
            .collect()
    }
}

fn truncated_offset(rng: &mut ChaCha8Rng, sigma: f64) -> Point3 {
    if sigma == 0.0 {
        return Point3::ORIGIN;
    }
    loop {
        let v = Point3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        if v.norm() <= 3.0 {
            return v * sigma;
        }
    }
}

/// Generates a bundle of `spec.count` jittered centerline copies.
pub fn gen_bundle(spec: &BundleSpec) -> Result<Tractogram> {
    spec.validate()?;
    let line = spec.centerline();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = line.len() as f64 - 1.0;
    let streamlines = (0..spec.count)
        .map(|_| {
            let a = truncated_offset(&mut rng, spec.jitter);
            let b = truncated_offset(&mut rng, spec.jitter);
            let pts = line
                .iter()
                .enumerate()
                .map(|(i, p)| *p + a.lerp(b, i as f64 / n))
                .collect();
            let s = Streamline::new(pts, spec.label)?;
            resample_streamline(&s, spec.points)
        })
        .collect::<Result<Vec<_>>>()?;
    Tractogram::new(streamlines)
}

/// Layout parameters for [`gen_phantom`].
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomConfig {
    pub bundles: usize,
    pub streamlines_per_bundle: usize,
    pub points: usize,
    pub jitter: f64,
    /// Minimum distance between bundle centers, mm.
    pub min_separation: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            bundles: 6,
            streamlines_per_bundle: 400,
            points: 15,
            jitter: 1.5,
            min_separation: 40.0,
            seed: 0,
        }
    }
}

fn mix(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Bundle specs for a phantom: centers on a ring in the axial plane,
/// alternating above and below it, with families cycling and randomised
/// orientation and size.
pub fn phantom_specs(config: &PhantomConfig) -> Result<Vec<BundleSpec>> {
    if config.bundles == 0 {
        return Err(Error::InvalidArgument("phantom needs at least one bundle".into()));
    }
    let n = config.bundles;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let ring = if n == 1 {
        0.0
    } else {
        // chord between ring neighbours must clear the minimum separation
        let chord = 2.0 * (PI / n as f64).sin();
        (config.min_separation / chord).max(50.0)
    };
    let specs = (0..n)
        .map(|i| {
            let phi = 2.0 * PI * i as f64 / n as f64;
            let lift = if n == 1 { 0.0 } else if i % 2 == 0 { 12.0 } else { -12.0 };
            BundleSpec {
                family: CenterlineFamily::ALL[i % CenterlineFamily::ALL.len()],
                center: Point3::new(ring * phi.cos(), ring * phi.sin(), lift),
                radius: rng.random_range(14.0..20.0),
                extent: rng.random_range(30.0..45.0),
                rotation: [
                    rng.random_range(-PI..PI),
                    rng.random_range(-0.5 * PI..0.5 * PI),
                    rng.random_range(-PI..PI),
                ],
                count: config.streamlines_per_bundle,
                jitter: config.jitter,
                points: config.points,
                seed: mix(config.seed, i as u64 + 1),
                label: Some(i as u32),
            }
        })
        .collect();
    Ok(specs)
}

/// Union of the bundles from [`phantom_specs`], labelled `0..bundles`.
pub fn gen_phantom(config: &PhantomConfig) -> Result<Tractogram> {
    let specs = phantom_specs(config)?;
    let mut all = Vec::new();
    let mut names = BTreeMap::new();
    for spec in &specs {
        all.extend(gen_bundle(spec)?.into_streamlines());
        let label = spec.label.expect("phantom bundles are labelled");
        names.insert(label, format!("{}_{label}", spec.family.name()));
    }
    Ok(Tractogram::new(all)?.with_label_names(names))
}

/// Ground-truth deformation family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WarpFamily {
    /// Random TPS warp, representable exactly by the registration model.
    #[default]
    Tps,
    /// Smooth sinusoidal field outside the TPS family.
    Sinusoidal,
}

/// The deformation that produced a moving tractogram from a fixed one.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthWarp {
    /// Fixed-to-moving TPS warp, when the family is [`WarpFamily::Tps`].
    pub transform: Option<TpsTransform>,
    /// Per-point displacement `moving - fixed`, in tractogram point order.
    pub displacements: Vec<Point3>,
    pub points_per_streamline: Vec<usize>,
}

impl GroundTruthWarp {
    pub fn max_displacement(&self) -> f64 {
        self.displacements.iter().fold(0.0f64, |m, d| m.max(d.norm()))
    }

    /// Maps the moving tractogram back onto the fixed one using the recorded
    /// per-point displacements.
    pub fn restore(&self, moving: &Tractogram) -> Result<Tractogram> {
        if moving.total_points() != self.displacements.len() {
            return Err(Error::Shape(format!(
                "{} moving points but {} recorded displacements",
                moving.total_points(),
                self.displacements.len()
            )));
        }
        let pts: Vec<Point3> = moving
            .points()
            .zip(&self.displacements)
            .map(|(p, d)| *p - *d)
            .collect();
        moving.with_points(&pts)
    }

    /// CSV with header `streamline,point,dr,da,ds`.
    pub fn displacement_csv(&self) -> String {
        let mut out = String::from("streamline,point,dr,da,ds\n");
        let mut it = self.displacements.iter();
        for (s, &n) in self.points_per_streamline.iter().enumerate() {
            for p in 0..n {
                let d = it.next().expect("displacement count matches layout");
                let _ = writeln!(out, "{s},{p},{},{},{}", d.r, d.a, d.s);
            }
        }
        out
    }

    pub fn write_displacement_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.displacement_csv().as_bytes())?;
        Ok(())
    }
}

fn bounds(points: &[Point3]) -> (Point3, Point3) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for (d, v) in p.to_array().into_iter().enumerate() {
            lo[d] = lo[d].min(v);
            hi[d] = hi[d].max(v);
        }
    }
    (Point3::from_array(lo), Point3::from_array(hi))
}

fn probe_grid(lo: Point3, hi: Point3) -> Vec<Point3> {
    let lo = lo - Point3::new(PROBE_MARGIN, PROBE_MARGIN, PROBE_MARGIN);
    let hi = hi + Point3::new(PROBE_MARGIN, PROBE_MARGIN, PROBE_MARGIN);
    let t = |i: usize| i as f64 / (PROBE_STEPS - 1) as f64;
    let mut out = Vec::with_capacity(PROBE_STEPS.pow(3));
    for i in 0..PROBE_STEPS {
        for j in 0..PROBE_STEPS {
            for k in 0..PROBE_STEPS {
                out.push(Point3::new(
                    lo.r + t(i) * (hi.r - lo.r),
                    lo.a + t(j) * (hi.a - lo.a),
                    lo.s + t(k) * (hi.s - lo.s),
                ));
            }
        }
    }
    out
}

/// Displacement field of a draw, scaled later to the requested bound.
enum Field {
    Tps(TpsTransform),
    Sine { amp: [Point3; 3], freq: [Point3; 3], phase: [f64; 3] },
}

impl Field {
    fn displacement(&self, x: Point3) -> Point3 {
        match self {
            Field::Tps(t) => t.apply_point(x) - x,
            Field::Sine { amp, freq, phase } => {
                let mut d = Point3::ORIGIN;
                for c in 0..3 {
                    d = d + amp[c] * (freq[c].dot(x) + phase[c]).sin();
                }
                d
            }
        }
    }

    /// `x + s (T(x) - x)` as a TPS, which stays in the family since the
    /// field is linear in the affine and weight parameters.
    fn scaled_tps(t: &TpsTransform, s: f64) -> Result<TpsTransform> {
        let id = Matrix3x4::<f64>::identity();
        let affine = id + (t.affine() - id) * s;
        let weights = t.weights().iter().map(|w| w.map(|v| v * s)).collect();
        TpsTransform::from_parts(t.control_points().to_vec(), affine, weights, t.lambda())
    }
}

fn draw_field(rng: &mut ChaCha8Rng, lo: Point3, hi: Point3, family: WarpFamily) -> Result<Field> {
    let span = hi - lo;
    match family {
        WarpFamily::Tps => {
            let control: Vec<Point3> = (0..WARP_CONTROL_POINTS)
                .map(|_| {
                    Point3::new(
                        lo.r + rng.random::<f64>() * span.r,
                        lo.a + rng.random::<f64>() * span.a,
                        lo.s + rng.random::<f64>() * span.s,
                    )
                })
                .collect();
            // a mild random affine on top of the local bumps
            let lin = Matrix3::from_fn(|_, _| 0.02 * rng.sample::<f64, _>(StandardNormal));
            let target = control
                .iter()
                .map(|p| {
                    let v = lin * nalgebra::Vector3::new(p.r, p.a, p.s);
                    *p + Point3::new(v.x, v.y, v.z)
                        + Point3::new(
                            rng.sample::<f64, _>(StandardNormal),
                            rng.sample::<f64, _>(StandardNormal),
                            rng.sample::<f64, _>(StandardNormal),
                        )
                })
                .collect();
            let pairs = KeypointPairs::new(control, target)?;
            Ok(Field::Tps(solve_tps(&pairs, 0.0)?))
        }
        WarpFamily::Sinusoidal => {
            let scale = span.norm().max(1.0);
            let mut unit = || {
                let v = Point3::new(
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                );
                v * (1.0 / v.norm().max(1e-12))
            };
            let amp = [unit(), unit(), unit()];
            let freq = [unit(), unit(), unit()].map(|f| f * (2.0 * PI / scale));
            let phase = [
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(0.0..2.0 * PI),
            ];
            Ok(Field::Sine { amp, freq, phase })
        }
    }
}

/// Draws a bounded random warp and applies it to `t`.
///
/// Returns `(moving, fixed, truth)` with `fixed == t` and `moving` the warped
/// copy. The largest displacement over a probe lattice around `t` and over
/// every streamline point is scaled to exactly `d_max`; a draw that still
/// violates the bound is redrawn a bounded number of times.
pub fn make_pair(
    t: &Tractogram,
    d_max: f64,
    seed: u64,
    family: WarpFamily,
) -> Result<(Tractogram, Tractogram, GroundTruthWarp)> {
    if !(d_max >= 0.0) || !d_max.is_finite() {
        return Err(Error::InvalidArgument(format!("invalid displacement bound {d_max}")));
    }
    let layout: Vec<usize> = t.streamlines().iter().map(Streamline::len).collect();
    let pts: Vec<Point3> = t.points().copied().collect();
    if d_max == 0.0 {
        let truth = GroundTruthWarp {
            transform: (family == WarpFamily::Tps).then(|| TpsTransform::identity(Vec::new())),
            displacements: vec![Point3::ORIGIN; pts.len()],
            points_per_streamline: layout,
        };
        return Ok((t.clone(), t.clone(), truth));
    }
    let (lo, hi) = bounds(&pts);
    let mut probes = probe_grid(lo, hi);
    probes.extend_from_slice(&pts);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_REDRAWS {
        let field = match draw_field(&mut rng, lo, hi, family) {
            Ok(f) => f,
            Err(e) if e.is_numerical() => continue,
            Err(e) => return Err(e),
        };
        let peak = probes
            .iter()
            .fold(0.0f64, |m, p| m.max(field.displacement(*p).norm()));
        if !(peak > 0.0) || !peak.is_finite() {
            continue;
        }
        let s = d_max / peak;
        let (moved, transform) = match &field {
            Field::Tps(tps) => {
                let scaled = Field::scaled_tps(tps, s)?;
                (scaled.apply(&pts)?, Some(scaled))
            }
            Field::Sine { .. } => (
                pts.iter().map(|p| *p + field.displacement(*p) * s).collect(),
                None,
            ),
        };
        let displacements: Vec<Point3> = moved.iter().zip(&pts).map(|(m, p)| *m - *p).collect();
        let truth = GroundTruthWarp {
            transform,
            displacements,
            points_per_streamline: layout,
        };
        // rescaling can overshoot by rounding only
        if truth.max_displacement() > d_max * (1.0 + 1e-9) {
            return Err(Error::Degenerate(format!(
                "warp exceeds bound: {} > {d_max}",
                truth.max_displacement()
            )));
        }
        return Ok((t.with_points(&moved)?, t.clone(), truth));
    }
    Err(Error::Degenerate(format!(
        "no admissible warp after {MAX_REDRAWS} draws"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::chamfer_loss;

    fn spec(family: CenterlineFamily) -> BundleSpec {
        BundleSpec {
            family,
            center: Point3::new(1.0, 2.0, 3.0),
            radius: 30.0,
            extent: 40.0,
            rotation: [0.3, -0.2, 1.1],
            count: 20,
            jitter: 1.0,
            points: 15,
            seed: 4,
            label: Some(2),
        }
    }

    #[test]
    fn zero_jitter_copies_centerline() {
        let mut s = spec(CenterlineFamily::Helix);
        s.jitter = 0.0;
        s.count = 3;
        let t = gen_bundle(&s).unwrap();
        assert_eq!(t.streamlines()[0], t.streamlines()[1]);
        assert_eq!(t.streamlines()[0], t.streamlines()[2]);
    }

    #[test]
    fn arc_stays_near_radius() {
        let s = spec(CenterlineFamily::Arc);
        let t = gen_bundle(&s).unwrap();
        for p in t.points() {
            let d = (*p - s.center).norm();
            assert!(d <= 30.0 + 3.0 * s.jitter + 1e-9, "{d}");
        }
    }

    #[test]
    fn families_generate() {
        for f in CenterlineFamily::ALL {
            let t = gen_bundle(&spec(f)).unwrap();
            assert_eq!(t.len(), 20);
            assert_eq!(t.points_per_streamline(), Some(15));
        }
    }

    #[test]
    fn phantom_defaults() {
        let t = gen_phantom(&PhantomConfig::default()).unwrap();
        assert_eq!(t.len(), 2400);
        let (lo, hi) = bounds(&t.points().copied().collect::<Vec<_>>());
        let span = hi - lo;
        assert!(span.r > 100.0 && span.r < 220.0, "{span:?}");
    }

    #[test]
    fn pair_bound_and_restore() {
        let cfg = PhantomConfig {
            streamlines_per_bundle: 30,
            ..PhantomConfig::default()
        };
        let t = gen_phantom(&cfg).unwrap();
        for family in [WarpFamily::Tps, WarpFamily::Sinusoidal] {
            let (moving, fixed, truth) = make_pair(&t, 5.0, 9, family).unwrap();
            assert_eq!(fixed, t);
            assert!(truth.max_displacement() <= 5.0 * (1.0 + 1e-9));
            assert!(truth.max_displacement() > 1.0);
            let restored = truth.restore(&moving).unwrap();
            assert!(chamfer_loss(&restored, &fixed).unwrap() < 1e-9);
            assert_eq!(moving.labels(), fixed.labels());
        }
    }

    #[test]
    fn zero_bound_is_clone() {
        let t = gen_bundle(&spec(CenterlineFamily::UShape)).unwrap();
        let (m, f, _) = make_pair(&t, 0.0, 1, WarpFamily::Tps).unwrap();
        assert_eq!(m, f);
    }
}
