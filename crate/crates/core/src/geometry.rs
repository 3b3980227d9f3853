use std::ops::{Add, Mul, Sub};

/// A point in millimetre RAS space.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point3 {
    pub r: f64,
    pub a: f64,
    pub s: f64,
}

impl Point3 {
    pub const ORIGIN: Point3 = Point3 {
        r: 0.0,
        a: 0.0,
        s: 0.0,
    };

    pub const fn new(r: f64, a: f64, s: f64) -> Self {
        Point3 { r, a, s }
    }

    pub fn from_array(v: [f64; 3]) -> Self {
        Point3::new(v[0], v[1], v[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.r, self.a, self.s]
    }

    pub fn is_finite(self) -> bool {
        self.r.is_finite() && self.a.is_finite() && self.s.is_finite()
    }

    pub fn dot(self, other: Point3) -> f64 {
        self.r * other.r + self.a * other.a + self.s * other.s
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn distance(self, other: Point3) -> f64 {
        (self - other).norm()
    }

    pub fn distance_squared(self, other: Point3) -> f64 {
        let d = self - other;
        d.dot(d)
    }

    /// Linear interpolation, `t = 0` gives `self`.
    pub fn lerp(self, other: Point3, t: f64) -> Point3 {
        self + (other - self) * t
    }
}

impl Add for Point3 {
    type Output = Point3;
    fn add(self, o: Point3) -> Point3 {
        Point3::new(self.r + o.r, self.a + o.a, self.s + o.s)
    }
}

impl Sub for Point3 {
    type Output = Point3;
    fn sub(self, o: Point3) -> Point3 {
        Point3::new(self.r - o.r, self.a - o.a, self.s - o.s)
    }
}

impl Mul<f64> for Point3 {
    type Output = Point3;
    fn mul(self, k: f64) -> Point3 {
        Point3::new(self.r * k, self.a * k, self.s * k)
    }
}

impl From<[f64; 3]> for Point3 {
    fn from(v: [f64; 3]) -> Self {
        Point3::from_array(v)
    }
}
