//! Vector math shared by rendering, the light-space grid and the networks.
//!
//! Camera frame: `x` to the right, `y` up, `z` towards the viewer; the view
//! direction is `[0, 0, 1]`. A spherical light `(elevation, azimuth)` maps to
//! `(cos(el) cos(az), sin(el), cos(el) sin(az))`, so the frontal direction is
//! elevation 0, azimuth 90.

use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

pub const VIEW: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 1.0 };

impl Vec3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(self.y * o.z - self.z * o.y, self.z * o.x - self.x * o.z, self.x * o.y - self.y * o.x)
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    /// `None` for the zero vector (or anything too short to normalise).
    pub fn normalized(self) -> Option<Vec3> {
        let n = self.norm();
        (n > 1e-300 && n.is_finite()).then(|| self * (1.0 / n))
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// Light direction in degrees: elevation in `[-90, 90]`, azimuth in `[0, 180]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SphericalLight {
    pub elevation: f64,
    pub azimuth: f64,
}

impl SphericalLight {
    pub fn new(elevation: f64, azimuth: f64) -> Result<Self> {
        let s = Self { elevation, azimuth };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(-90.0..=90.0).contains(&self.elevation) {
            return Err(Error::Domain(format!("elevation {} outside [-90, 90]", self.elevation)));
        }
        if !(0.0..=180.0).contains(&self.azimuth) {
            return Err(Error::Domain(format!("azimuth {} outside [0, 180]", self.azimuth)));
        }
        Ok(())
    }
}

pub fn spherical_to_dir(s: SphericalLight) -> Result<Vec3> {
    s.validate()?;
    let (el, az) = (s.elevation.to_radians(), s.azimuth.to_radians());
    // clamp keeps z >= 0 at azimuth 180 where sin() rounds to a tiny positive anyway
    Ok(Vec3::new(el.cos() * az.cos(), el.sin(), (el.cos() * az.sin()).max(0.0)))
}

/// Inverse of [`spherical_to_dir`] for unit vectors with `z >= 0`.
pub fn dir_to_spherical(d: Vec3) -> Result<SphericalLight> {
    let d = d.normalized().ok_or_else(|| Error::Degenerate("zero light direction".into()))?;
    if d.z < -1e-9 {
        return Err(Error::Domain(format!("light {:?} below the horizon (z < 0)", d)));
    }
    let elevation = d.y.clamp(-1.0, 1.0).asin().to_degrees();
    let azimuth = if d.x.abs() < 1e-15 && d.z.abs() < 1e-15 {
        90.0
    } else {
        d.z.max(0.0).atan2(d.x).to_degrees()
    };
    SphericalLight::new(elevation, azimuth.clamp(0.0, 180.0))
}

/// Unit bisector of two unit vectors.
pub fn half_vector(l: Vec3, v: Vec3) -> Result<Vec3> {
    (l + v)
        .normalized()
        .filter(|_| (l + v).norm() > 1e-12)
        .ok_or_else(|| Error::Degenerate("light and view directions are antiparallel".into()))
}

/// `[p, gamma(p)]` where `gamma` applies `sin(2^k pi x), cos(2^k pi x)` for
/// `k = 0..m` to each scalar in turn.
pub fn positional_encode(p: &[f64], m: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(p.len() * (1 + 2 * m));
    out.extend_from_slice(p);
    for &x in p {
        for k in 0..m {
            let arg = (1u64 << k) as f64 * std::f64::consts::PI * x;
            out.push(arg.sin());
            out.push(arg.cos());
        }
    }
    out
}

/// Angle between two unit vectors, in degrees.
pub fn angular_error_deg(a: Vec3, b: Vec3) -> f64 {
    a.dot(b).clamp(-1.0, 1.0).acos().to_degrees()
}
