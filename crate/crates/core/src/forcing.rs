//! Space-time forcing `f_{kl}(x,t) = C_{kl} φ(x,t)` with `φ` a finite sum of
//! separable terms `X_i(x) θ_i(t)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridSpec;

/// Smooth compactly supported bump `exp(-1/(1-s^2))` on `|s| < 1`.
pub fn bump(s: f64) -> f64 {
    if s.abs() >= 1.0 {
        0.0
    } else {
        (-1.0 / (1.0 - s * s)).exp()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum TimeShape {
    /// Smooth bump supported on `[start, end]`.
    Bump { start: f64, end: f64 },
    /// `1` on `[start, end]`, `0` elsewhere.
    Indicator { start: f64, end: f64 },
    /// Piecewise-linear hat with nodes `left < center < right` (`left` may
    /// equal `center` for a one-sided hat at the start of a sampled profile).
    Hat { left: f64, center: f64, right: f64 },
}

impl TimeShape {
    pub fn support(&self) -> (f64, f64) {
        match *self {
            TimeShape::Bump { start, end } | TimeShape::Indicator { start, end } => (start, end),
            TimeShape::Hat { left, right, .. } => (left, right),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (a, b) = self.support();
        let ok = match *self {
            TimeShape::Hat { left, center, right } => left <= center && center <= right && left < right,
            _ => a < b,
        };
        if !ok || a < 0.0 || !b.is_finite() {
            return Err(Error::InvalidArgument(format!("bad time shape {self:?}")));
        }
        Ok(())
    }

    pub fn value(&self, t: f64) -> f64 {
        match *self {
            TimeShape::Bump { start, end } => bump((2.0 * t - start - end) / (end - start)),
            TimeShape::Indicator { start, end } => {
                if t >= start && t <= end {
                    1.0
                } else {
                    0.0
                }
            }
            TimeShape::Hat { left, center, right } => {
                if t < left || t > right {
                    0.0
                } else if t <= center {
                    if center == left {
                        1.0
                    } else {
                        (t - left) / (center - left)
                    }
                } else if right == center {
                    1.0
                } else {
                    (right - t) / (right - center)
                }
            }
        }
    }

    /// `∫θ dt`. The bump integral uses the trapezoidal rule, which converges
    /// faster than any power for functions flat at both ends.
    pub fn integral(&self) -> f64 {
        match *self {
            TimeShape::Bump { start, end } => {
                let m = 4096;
                let h = 2.0 / m as f64;
                let s: f64 = (1..m).map(|i| bump(-1.0 + i as f64 * h)).sum();
                s * h * (end - start) / 2.0
            }
            TimeShape::Indicator { start, end } => end - start,
            TimeShape::Hat { left, right, .. } => (right - left) / 2.0,
        }
    }

    /// Time-rescaled copy `θ(t / factor)`.
    pub fn stretched(&self, factor: f64) -> Self {
        match *self {
            TimeShape::Bump { start, end } => TimeShape::Bump {
                start: start * factor,
                end: end * factor,
            },
            TimeShape::Indicator { start, end } => TimeShape::Indicator {
                start: start * factor,
                end: end * factor,
            },
            TimeShape::Hat { left, center, right } => TimeShape::Hat {
                left: left * factor,
                center: center * factor,
                right: right * factor,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProfileTerm {
    /// Physical samples of `X_i` on the grid.
    pub space: Vec<f64>,
    pub shape: TimeShape,
}

/// Scalar space-time profile `φ(x,t) = Σ X_i(x) θ_i(t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpaceTimeProfile {
    grid: GridSpec,
    terms: Vec<ProfileTerm>,
}

impl SpaceTimeProfile {
    pub fn new(grid: &GridSpec, terms: Vec<ProfileTerm>) -> Result<Self> {
        for t in &terms {
            t.shape.validate()?;
            if t.space.len() != grid.len() {
                return Err(Error::InvalidArgument("profile term has wrong sample count".into()));
            }
        }
        Ok(SpaceTimeProfile {
            grid: grid.clone(),
            terms,
        })
    }

    pub fn separable(grid: &GridSpec, space: Vec<f64>, shape: TimeShape) -> Result<Self> {
        Self::new(grid, vec![ProfileTerm { space, shape }])
    }

    /// Profile sampled at time slices, linear in time between them.
    pub fn sampled(grid: &GridSpec, times: &[f64], slices: Vec<Vec<f64>>) -> Result<Self> {
        if times.len() < 2 || times.len() != slices.len() || times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument(
                "sampled profile needs at least two strictly increasing times, one slice each".into(),
            ));
        }
        let k = times.len();
        let terms = slices
            .into_iter()
            .enumerate()
            .map(|(i, space)| ProfileTerm {
                space,
                shape: TimeShape::Hat {
                    left: times[i.saturating_sub(1)],
                    center: times[i],
                    right: times[(i + 1).min(k - 1)],
                },
            })
            .collect();
        Self::new(grid, terms)
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn terms(&self) -> &[ProfileTerm] {
        &self.terms
    }

    pub fn is_zero(&self) -> bool {
        self.terms.iter().all(|t| t.space.iter().all(|&v| v == 0.0))
    }

    /// End of the time support.
    pub fn duration(&self) -> f64 {
        self.terms.iter().map(|t| t.shape.support().1).fold(0.0, f64::max)
    }

    pub fn value_at(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.grid.len()];
        for term in &self.terms {
            let w = term.shape.value(t);
            if w != 0.0 {
                for (o, &x) in out.iter_mut().zip(&term.space) {
                    *o += w * x;
                }
            }
        }
        out
    }

    /// `∫∫φ dx dt` (trapezoidal in space).
    pub fn integral(&self) -> f64 {
        let dv = self.grid.cell_volume();
        self.terms
            .iter()
            .map(|t| t.space.iter().sum::<f64>() * dv * t.shape.integral())
            .sum()
    }

    /// Upper bound for `∫∫|φ|`, exact when the terms do not overlap with
    /// opposite signs.
    pub fn abs_integral(&self) -> f64 {
        let dv = self.grid.cell_volume();
        self.terms
            .iter()
            .map(|t| t.space.iter().map(|v| v.abs()).sum::<f64>() * dv * t.shape.integral().abs())
            .sum()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let mut p = self.clone();
        for t in p.terms.iter_mut() {
            for v in t.space.iter_mut() {
                *v *= factor;
            }
        }
        p
    }
}

/// Tensor forcing `f_{kl} = coeffs[k][l] φ`.
#[derive(Clone, Debug, PartialEq)]
pub struct Forcing {
    pub coeffs: Vec<Vec<f64>>,
    pub profile: SpaceTimeProfile,
}

impl Forcing {
    pub fn new(coeffs: Vec<Vec<f64>>, profile: SpaceTimeProfile) -> Result<Self> {
        let n = profile.grid().dim;
        if coeffs.len() != n || coeffs.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidArgument("forcing coefficients must be n x n".into()));
        }
        Ok(Forcing { coeffs, profile })
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.iter().flatten().all(|&c| c == 0.0) || self.profile.is_zero()
    }

    /// `∫∫f_{kl}` for every component.
    pub fn integrals(&self) -> Vec<Vec<f64>> {
        let m = self.profile.integral();
        self.coeffs.iter().map(|r| r.iter().map(|c| c * m).collect()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_integrals() {
        let b = TimeShape::Bump { start: 0.0, end: 0.25 };
        // ∫_{-1}^{1} exp(-1/(1-s^2)) ds = 0.443993816168...
        assert!((b.integral() - 0.443_993_816_168_079_4 * 0.125).abs() < 1e-13);
        assert_eq!(TimeShape::Indicator { start: 0.5, end: 2.0 }.integral(), 1.5);
        let h = TimeShape::Hat { left: 0.0, center: 0.0, right: 1.0 };
        assert_eq!(h.value(0.0), 1.0);
        assert_eq!(h.value(0.25), 0.75);
        assert!(TimeShape::Bump { start: 1.0, end: 1.0 }.validate().is_err());
    }

    #[test]
    fn sampled_profile_interpolates_linearly() {
        let g = GridSpec::new(2, 16, 4.0).unwrap();
        let p = SpaceTimeProfile::sampled(&g, &[0.0, 1.0, 3.0], vec![vec![1.0; g.len()], vec![3.0; g.len()], vec![0.0; g.len()]]).unwrap();
        assert_eq!(p.value_at(0.5)[0], 2.0);
        assert_eq!(p.value_at(2.0)[3], 1.5);
        assert_eq!(p.duration(), 3.0);
        // Trapezoid in time of the slices: (1+3)/2*1 + (3+0)/2*2 = 5, times box area 16.
        assert!((p.integral() - 5.0 * 16.0).abs() < 1e-12);
    }
}
