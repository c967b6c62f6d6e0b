//! Periodic computational box standing in for the whole space.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A centered periodic box `[-L/2, L/2)^n` sampled with `N` points per axis.
///
/// Physical sample `i` along an axis sits at `x = (i - N/2) * L / N`, so the
/// origin is a grid point. Spectral index `m` carries the wavenumber
/// `2*pi*m/L` with `m` folded into `[-N/2, N/2)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dim: usize,
    pub points_per_axis: usize,
    pub box_length: f64,
    #[serde(default = "default_dealias")]
    pub dealias_fraction: f64,
}

fn default_dealias() -> f64 {
    2.0 / 3.0
}

impl GridSpec {
    pub fn new(dim: usize, points_per_axis: usize, box_length: f64) -> Result<Self> {
        let g = GridSpec {
            dim,
            points_per_axis,
            box_length,
            dealias_fraction: default_dealias(),
        };
        g.validate()?;
        Ok(g)
    }

    pub fn with_dealias(mut self, fraction: f64) -> Result<Self> {
        self.dealias_fraction = fraction;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::InvalidGrid(format!("dimension {} < 2", self.dim)));
        }
        let n = self.points_per_axis;
        if n < 16 || !n.is_power_of_two() {
            return Err(Error::InvalidGrid(format!(
                "points per axis must be a power of two >= 16, got {n}"
            )));
        }
        if !(self.box_length.is_finite() && self.box_length > 0.0) {
            return Err(Error::InvalidGrid(format!(
                "box length must be positive, got {}",
                self.box_length
            )));
        }
        if !(self.dealias_fraction > 0.0 && self.dealias_fraction <= 1.0) {
            return Err(Error::InvalidGrid(format!(
                "dealias fraction must lie in (0, 1], got {}",
                self.dealias_fraction
            )));
        }
        Ok(())
    }

    /// Total number of grid points `N^n`.
    pub fn len(&self) -> usize {
        self.points_per_axis.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn spacing(&self) -> f64 {
        self.box_length / self.points_per_axis as f64
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing().powi(self.dim as i32)
    }

    /// Coordinate of sample `i` along any axis.
    pub fn coord(&self, i: usize) -> f64 {
        (i as f64 - (self.points_per_axis / 2) as f64) * self.spacing()
    }

    /// Signed integer mode number of spectral index `i`, in `[-N/2, N/2)`.
    pub fn mode(&self, i: usize) -> i64 {
        let n = self.points_per_axis as i64;
        let i = i as i64;
        if i < n / 2 {
            i
        } else {
            i - n
        }
    }

    pub fn wavenumber(&self, i: usize) -> f64 {
        2.0 * PI * self.mode(i) as f64 / self.box_length
    }

    /// Wavenumber used by odd-order derivatives; the Nyquist mode is zeroed so
    /// derivatives of real fields stay real.
    pub fn derivative_wavenumber(&self, i: usize) -> f64 {
        if i == self.points_per_axis / 2 {
            0.0
        } else {
            self.wavenumber(i)
        }
    }

    /// Largest wavenumber magnitude resolved on an axis.
    pub fn max_wavenumber(&self) -> f64 {
        PI / self.spacing()
    }

    /// Decomposes a flat row-major index into per-axis indices.
    pub fn unravel(&self, mut flat: usize, out: &mut [usize]) {
        let n = self.points_per_axis;
        for d in (0..self.dim).rev() {
            out[d] = flat % n;
            flat /= n;
        }
    }

    /// End of the time window in which the box mimics whole-space decay:
    /// `sqrt(t) <= L/8`.
    pub fn validity_time(&self) -> f64 {
        (self.box_length / 8.0).powi(2)
    }

    pub fn in_validity_window(&self, t: f64) -> bool {
        t <= self.validity_time() * (1.0 + 1e-12)
    }

    pub(crate) fn ensure_same(&self, other: &GridSpec) -> Result<()> {
        if self != other {
            return Err(Error::GridMismatch(format!("{self:?} vs {other:?}")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_grids() {
        assert!(GridSpec::new(2, 12, 1.0).is_err());
        assert!(GridSpec::new(2, 24, 1.0).is_err());
        assert!(GridSpec::new(1, 32, 1.0).is_err());
        assert!(GridSpec::new(2, 32, -1.0).is_err());
        assert!(GridSpec::new(2, 32, 1.0).unwrap().with_dealias(0.0).is_err());
    }

    #[test]
    fn origin_is_a_grid_point() {
        let g = GridSpec::new(2, 16, 8.0).unwrap();
        assert_eq!(g.coord(8), 0.0);
        assert_eq!(g.coord(0), -4.0);
        assert_eq!(g.mode(8), -8);
        assert_eq!(g.mode(15), -1);
        assert_eq!(g.derivative_wavenumber(8), 0.0);
    }

    #[test]
    fn reference_box_window() {
        let g = GridSpec::new(2, 256, 64.0).unwrap();
        assert_eq!(g.validity_time(), 64.0);
    }
}
