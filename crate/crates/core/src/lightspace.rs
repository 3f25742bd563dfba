//! Discretised upper-hemisphere light space.
//!
//! The hemisphere is cut into `n x n` bins, `n` along azimuth `[0, 180]` and
//! `n` along elevation `[-90, 90]`. With the default `n = 5` the centres are
//! azimuth `[18, 54, 90, 126, 162]` and elevation `[-72, -36, 0, 36, 72]`,
//! and any direction is at most 18 degrees from its bin centre per axis.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{dir_to_spherical, spherical_to_dir, SphericalLight, Vec3};

/// Bins per axis of the default grid.
pub const BINS_PER_AXIS: usize = 5;
/// Total bins of the default grid.
pub const NUM_BINS: usize = BINS_PER_AXIS * BINS_PER_AXIS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LightBin {
    pub az_idx: usize,
    pub el_idx: usize,
}

impl LightBin {
    pub fn new(az_idx: usize, el_idx: usize) -> Result<Self> {
        LightGrid::default().check(Self { az_idx, el_idx })
    }

    /// `5 * el_idx + az_idx` on the default grid.
    pub fn flat(self) -> usize {
        LightGrid::default().flat(self)
    }

    pub fn from_flat(i: usize) -> Result<Self> {
        LightGrid::default().from_flat(i)
    }
}

/// The bin frontal lighting (`[0, 0, 1]`) falls into.
pub const FRONTAL_BIN: LightBin = LightBin { az_idx: 2, el_idx: 2 };

/// Uniform `n x n` grid over (azimuth, elevation).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LightGrid {
    pub per_axis: usize,
}

impl Default for LightGrid {
    fn default() -> Self {
        Self { per_axis: BINS_PER_AXIS }
    }
}

impl LightGrid {
    pub fn new(per_axis: usize) -> Result<Self> {
        if per_axis == 0 {
            return Err(Error::Config("light grid needs at least one bin per axis".into()));
        }
        Ok(Self { per_axis })
    }

    pub fn num_bins(&self) -> usize {
        self.per_axis * self.per_axis
    }

    /// Width of one bin in degrees.
    pub fn width(&self) -> f64 {
        180.0 / self.per_axis as f64
    }

    pub fn azimuth_centers(&self) -> Vec<f64> {
        (0..self.per_axis).map(|i| (i as f64 + 0.5) * self.width()).collect()
    }

    pub fn elevation_centers(&self) -> Vec<f64> {
        (0..self.per_axis).map(|i| -90.0 + (i as f64 + 0.5) * self.width()).collect()
    }

    fn check(&self, b: LightBin) -> Result<LightBin> {
        if b.az_idx >= self.per_axis || b.el_idx >= self.per_axis {
            return Err(Error::Domain(format!(
                "bin ({}, {}) outside a {n}x{n} grid",
                b.az_idx,
                b.el_idx,
                n = self.per_axis
            )));
        }
        Ok(b)
    }

    pub fn flat(&self, b: LightBin) -> usize {
        self.per_axis * b.el_idx + b.az_idx
    }

    pub fn from_flat(&self, i: usize) -> Result<LightBin> {
        if i >= self.num_bins() {
            return Err(Error::Domain(format!("flat bin {i} outside [0, {})", self.num_bins())));
        }
        Ok(LightBin { az_idx: i % self.per_axis, el_idx: i / self.per_axis })
    }

    /// Bin index by flooring; values on a boundary go to the higher bin and
    /// the upper end of each axis clamps into the last bin.
    pub fn bin_of(&self, s: SphericalLight) -> Result<LightBin> {
        s.validate()?;
        let n = self.per_axis;
        let w = self.width();
        let idx = |x: f64| ((x / w).floor().max(0.0) as usize).min(n - 1);
        Ok(LightBin { az_idx: idx(s.azimuth), el_idx: idx(s.elevation + 90.0) })
    }

    pub fn center_of(&self, b: LightBin) -> Result<SphericalLight> {
        let b = self.check(b)?;
        let w = self.width();
        SphericalLight::new(-90.0 + (b.el_idx as f64 + 0.5) * w, (b.az_idx as f64 + 0.5) * w)
    }

    pub fn bin_of_dir(&self, d: Vec3) -> Result<LightBin> {
        self.bin_of(dir_to_spherical(d)?)
    }

    /// Unit vector towards the centre of `b`.
    pub fn direction_of(&self, b: LightBin) -> Result<Vec3> {
        spherical_to_dir(self.center_of(b)?)
    }

    /// `(elevation one-hot, azimuth one-hot)` classification targets.
    pub fn one_hot_targets(&self, b: LightBin) -> Result<(Vec<f64>, Vec<f64>)> {
        let b = self.check(b)?;
        let mut el = vec![0.0; self.per_axis];
        let mut az = vec![0.0; self.per_axis];
        el[b.el_idx] = 1.0;
        az[b.az_idx] = 1.0;
        Ok((el, az))
    }

    pub fn all_bins(&self) -> impl Iterator<Item = LightBin> + '_ {
        (0..self.num_bins()).map(|i| LightBin { az_idx: i % self.per_axis, el_idx: i / self.per_axis })
    }
}

pub fn bin_of(s: SphericalLight) -> Result<LightBin> {
    LightGrid::default().bin_of(s)
}

pub fn center_of(b: LightBin) -> Result<SphericalLight> {
    LightGrid::default().center_of(b)
}

pub fn one_hot_targets(b: LightBin) -> Result<(Vec<f64>, Vec<f64>)> {
    LightGrid::default().one_hot_targets(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn center_tables_match_the_default_grid() {
        let g = LightGrid::default();
        assert_eq!(g.azimuth_centers(), vec![18.0, 54.0, 90.0, 126.0, 162.0]);
        assert_eq!(g.elevation_centers(), vec![-72.0, -36.0, 0.0, 36.0, 72.0]);
    }

    #[test]
    fn bin_examples() {
        let b = bin_of(SphericalLight::new(0.0, 90.0).unwrap()).unwrap();
        assert_eq!(b, LightBin { az_idx: 2, el_idx: 2 });
        assert_eq!(b.flat(), 12);
        assert_eq!(bin_of(SphericalLight::new(-90.0, 0.0).unwrap()).unwrap(), LightBin { az_idx: 0, el_idx: 0 });
        // boundaries go up, the top clamps down
        assert_eq!(bin_of(SphericalLight::new(-54.0, 36.0).unwrap()).unwrap(), LightBin { az_idx: 1, el_idx: 1 });
        assert_eq!(bin_of(SphericalLight::new(90.0, 180.0).unwrap()).unwrap(), LightBin { az_idx: 4, el_idx: 4 });
    }

    #[test]
    fn centers_and_one_hots() {
        let c = center_of(LightBin { az_idx: 2, el_idx: 2 }).unwrap();
        assert_eq!((c.elevation, c.azimuth), (0.0, 90.0));
        let c = center_of(LightBin { az_idx: 0, el_idx: 0 }).unwrap();
        assert_eq!((c.elevation, c.azimuth), (-72.0, 18.0));
        let (el, az) = one_hot_targets(LightBin { az_idx: 2, el_idx: 2 }).unwrap();
        assert_eq!(el, vec![0.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(az, vec![0.0, 0.0, 1.0, 0.0, 0.0]);
        let (el, az) = one_hot_targets(LightBin { az_idx: 0, el_idx: 4 }).unwrap();
        assert_eq!(el, vec![0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(az, vec![1.0, 0.0, 0.0, 0.0, 0.0]);
        for b in LightGrid::default().all_bins() {
            let (el, az) = one_hot_targets(b).unwrap();
            assert_eq!(el.iter().sum::<f64>(), 1.0);
            assert_eq!(az.iter().sum::<f64>(), 1.0);
            assert_eq!(bin_of(center_of(b).unwrap()).unwrap(), b);
        }
    }

    #[test]
    fn frontal_direction_is_center_of_frontal_bin() {
        let d = LightGrid::default().direction_of(FRONTAL_BIN).unwrap();
        assert!((d - Vec3::new(0.0, 0.0, 1.0)).norm() < 1e-12);
    }

    #[test]
    fn invalid_bins_are_rejected() {
        assert!(LightBin::new(5, 0).is_err());
        assert!(LightBin::from_flat(25).is_err());
        assert!(matches!(bin_of(SphericalLight { elevation: 100.0, azimuth: 0.0 }), Err(Error::Domain(_))));
        assert_eq!(LightBin::from_flat(12).unwrap(), FRONTAL_BIN);
    }
}
