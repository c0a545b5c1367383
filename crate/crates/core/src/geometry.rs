//! Planar geometry: vectors, oriented rectangles, separating-axis overlap and
//! angle wrapping.

use std::f64::consts::PI;
use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn from_angle(theta: f64) -> Self {
        Self::new(theta.cos(), theta.sin())
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn distance(self, o: Vec2) -> f64 {
        (self - o).norm()
    }

    /// Left-hand normal (counter-clockwise rotation by 90 degrees).
    pub fn perp(self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }

    pub fn normalized(self) -> Vec2 {
        let n = self.norm();
        if n > 0.0 {
            self * (1.0 / n)
        } else {
            Vec2::ZERO
        }
    }

    pub fn rotate(self, theta: f64) -> Vec2 {
        let (s, c) = theta.sin_cos();
        Vec2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn angle(self) -> f64 {
        self.y.atan2(self.x)
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl AddAssign for Vec2 {
    fn add_assign(&mut self, o: Vec2) {
        self.x += o.x;
        self.y += o.y;
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, s: f64) -> Vec2 {
        Vec2::new(self.x * s, self.y * s)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(theta: f64) -> f64 {
    if theta > -PI && theta <= PI {
        return theta;
    }
    let mut r = theta.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    if r <= -PI {
        r += 2.0 * PI;
    }
    r
}

/// Smallest signed difference `a - b` on the circle, in `(-pi, pi]`.
pub fn angle_diff(a: f64, b: f64) -> f64 {
    wrap_angle(a - b)
}

/// Four corners of an oriented rectangle, counter-clockwise, starting at the
/// front-left corner.
pub fn oriented_rect(center: Vec2, yaw: f64, length: f64, width: f64) -> [Vec2; 4] {
    let hl = 0.5 * length;
    let hw = 0.5 * width;
    let (s, c) = yaw.sin_cos();
    let corner = |lx: f64, ly: f64| Vec2::new(center.x + c * lx - s * ly, center.y + s * lx + c * ly);
    [
        corner(hl, hw),
        corner(-hl, hw),
        corner(-hl, -hw),
        corner(hl, -hw),
    ]
}

/// Signed area of a simple polygon (positive for counter-clockwise winding).
pub fn signed_area(poly: &[Vec2]) -> f64 {
    let n = poly.len();
    let mut acc = 0.0;
    for i in 0..n {
        acc += poly[i].cross(poly[(i + 1) % n]);
    }
    0.5 * acc
}

fn project(poly: &[Vec2], axis: Vec2) -> (f64, f64) {
    poly.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        let d = p.dot(axis);
        (lo.min(d), hi.max(d))
    })
}

const DEGENERATE_AREA: f64 = 1e-12;

/// Separating-axis intersection test for two oriented rectangles.
///
/// Touching boundaries count as overlap. Both polygons must have non-zero area.
pub fn obb_overlap(a: &[Vec2], b: &[Vec2]) -> Result<bool> {
    for (name, poly) in [("first", a), ("second", b)] {
        if poly.len() != 4 {
            return Err(Error::Input(format!(
                "{name} polygon has {} vertices, expected 4",
                poly.len()
            )));
        }
        if poly.iter().any(|p| !p.is_finite()) {
            return Err(Error::Input(format!("{name} polygon has non-finite vertices")));
        }
        if signed_area(poly).abs() <= DEGENERATE_AREA {
            return Err(Error::Input(format!("{name} polygon is degenerate (zero area)")));
        }
    }
    Ok(sat_overlap(a, b))
}

/// Unchecked variant of [`obb_overlap`] used on hot paths where footprints are
/// known to be valid.
pub(crate) fn sat_overlap(a: &[Vec2], b: &[Vec2]) -> bool {
    for poly in [a, b] {
        for i in 0..poly.len() {
            let edge = poly[(i + 1) % poly.len()] - poly[i];
            let axis = edge.perp();
            let (a_lo, a_hi) = project(a, axis);
            let (b_lo, b_hi) = project(b, axis);
            if a_hi < b_lo || b_hi < a_lo {
                return false;
            }
        }
    }
    true
}

/// Point-in-convex-polygon test (boundary inclusive), any winding.
pub fn point_in_convex(poly: &[Vec2], p: Vec2) -> bool {
    let n = poly.len();
    let mut sign = 0.0;
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        let c = (b - a).cross(p - a);
        if c != 0.0 {
            if sign == 0.0 {
                sign = c.signum();
            } else if c.signum() != sign {
                return false;
            }
        }
    }
    true
}

/// Radius of the circle circumscribing a `length` x `width` rectangle.
pub fn bounding_radius(length: f64, width: f64) -> f64 {
    0.5 * length.hypot(width)
}
