//! Lebesgue norms, first moments and the localization check.
//!
//! Integrals use the trapezoidal rule on the uniform grid. Integrands with
//! kinks (`|a|` near zero crossings, `|x||a|`) converge only algebraically on
//! the sampling grid, so [`Quadrature`] can evaluate them on a band-limited
//! refinement of the data instead.

use std::fmt;

use num_complex::Complex64;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::fft::FftNd;
use crate::field::{FieldLike, VectorField};
use crate::grid::GridSpec;
use crate::spectral::Spectral;

/// Energy fraction allowed in the outer boundary band.
pub const LOCALIZATION_LIMIT: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Exponent {
    Finite(f64),
    Infinity,
}

impl Exponent {
    pub fn p(p: f64) -> Self {
        if p.is_infinite() {
            Exponent::Infinity
        } else {
            Exponent::Finite(p)
        }
    }

    pub fn value(self) -> f64 {
        match self {
            Exponent::Finite(p) => p,
            Exponent::Infinity => f64::INFINITY,
        }
    }
}

impl fmt::Display for Exponent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Exponent::Finite(p) => write!(f, "{p}"),
            Exponent::Infinity => write!(f, "inf"),
        }
    }
}

impl Serialize for Exponent {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Exponent::Finite(p) => s.serialize_f64(*p),
            Exponent::Infinity => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Exponent {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(p) => Ok(Exponent::Finite(p)),
            Raw::Text(s) if s == "inf" => Ok(Exponent::Infinity),
            Raw::Text(s) => s
                .parse::<f64>()
                .map(Exponent::Finite)
                .map_err(|_| serde::de::Error::custom(format!("bad exponent {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LpValue {
    pub p: Exponent,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormReport {
    pub lp_values: Vec<LpValue>,
    /// `∫|x||a(x)| dx`.
    pub weighted_first_moment: f64,
    /// `first_moments[k][j] = ∫ y_k a_j(y) dy`.
    pub first_moments: Vec<Vec<f64>>,
}

impl NormReport {
    pub fn lp(&self, p: f64) -> Option<f64> {
        self.lp_values
            .iter()
            .find(|e| e.p.value() == p || (e.p.value() - p).abs() < 1e-12 * p.abs())
            .map(|e| e.value)
    }
}

/// Evaluation lattice for non-smooth integrands: data are band-limited
/// interpolated onto a grid `upsample` times finer per axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quadrature {
    pub upsample: usize,
}

impl Default for Quadrature {
    fn default() -> Self {
        Quadrature { upsample: 1 }
    }
}

impl Quadrature {
    pub fn upsampled(factor: usize) -> Self {
        Quadrature { upsample: factor.max(1) }
    }
}

/// Pointwise Euclidean magnitude of a multi-component sample set.
pub fn magnitude(values: &[Vec<f64>]) -> Vec<f64> {
    let len = values.first().map_or(0, |c| c.len());
    (0..len)
        .map(|i| values.iter().map(|c| c[i] * c[i]).sum::<f64>().sqrt())
        .collect()
}

/// `(Σ m^p dV)^{1/p}`, or `max m` for `p = ∞`.
pub fn lp_of_magnitude(mag: &[f64], p: Exponent, cell_volume: f64) -> f64 {
    match p {
        Exponent::Infinity => mag.iter().copied().fold(0.0, f64::max),
        Exponent::Finite(2.0) => (mag.iter().map(|m| m * m).sum::<f64>() * cell_volume).sqrt(),
        Exponent::Finite(1.0) => mag.iter().sum::<f64>() * cell_volume,
        Exponent::Finite(p) => (mag.iter().map(|m| m.powf(p)).sum::<f64>() * cell_volume).powf(1.0 / p),
    }
}

/// Fraction of `∫|u|²` carried by points whose coordinates reach the outer
/// band of width `L/16` on any axis. Zero data give zero.
pub fn boundary_fraction(grid: &GridSpec, mag: &[f64]) -> f64 {
    let edge = grid.box_length / 2.0 - grid.box_length / 16.0;
    let mut idx = vec![0usize; grid.dim];
    let (mut band, mut total) = (0.0, 0.0);
    for (flat, &m) in mag.iter().enumerate() {
        let e = m * m;
        total += e;
        grid.unravel(flat, &mut idx);
        if idx.iter().any(|&i| grid.coord(i).abs() >= edge) {
            band += e;
        }
    }
    if total == 0.0 {
        0.0
    } else {
        band / total
    }
}

pub fn check_localized(grid: &GridSpec, mag: &[f64]) -> Result<()> {
    let fraction = boundary_fraction(grid, mag);
    if fraction > LOCALIZATION_LIMIT {
        return Err(Error::Localization {
            fraction,
            limit: LOCALIZATION_LIMIT,
        });
    }
    Ok(())
}

/// Band-limited interpolation of physical samples onto a grid refined by
/// `factor` per axis. Both lattices start at `-L/2`, so the spectrum is
/// zero-padded without phase correction; the Nyquist coefficient is split
/// evenly between `±N/2` to keep the interpolant real.
pub fn upsample(sp: &Spectral, values: &[Vec<f64>], factor: usize) -> Result<(GridSpec, Vec<Vec<f64>>)> {
    let grid = sp.grid();
    if factor <= 1 {
        return Ok((grid.clone(), values.to_vec()));
    }
    let n = grid.points_per_axis;
    let m = n * factor;
    let fine = GridSpec {
        points_per_axis: m,
        ..grid.clone()
    };
    let fine_fft = FftNd::new(m, grid.dim);
    let scale = (factor as f64).powi(grid.dim as i32);
    let mut idx = vec![0usize; grid.dim];
    let mut out = Vec::with_capacity(values.len());
    for comp in values {
        let mut c: Vec<Complex64> = comp.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        sp.fft().forward(&mut c);
        let mut big = vec![Complex64::default(); fine.len()];
        for (flat, &v) in c.iter().enumerate() {
            grid.unravel(flat, &mut idx);
            // Each Nyquist index contributes to two fine modes.
            let nyq = idx.iter().filter(|&&i| i == n / 2).count();
            let w = v * scale / (1u64 << nyq) as f64;
            for mask in 0..(1usize << nyq) {
                let mut target = 0usize;
                let mut bit = 0;
                for &i in idx.iter() {
                    let mode = if i == n / 2 {
                        let neg = mask >> bit & 1 == 1;
                        bit += 1;
                        if neg {
                            -((n / 2) as i64)
                        } else {
                            (n / 2) as i64
                        }
                    } else {
                        grid.mode(i)
                    };
                    target = target * m + mode.rem_euclid(m as i64) as usize;
                }
                big[target] += w;
            }
        }
        fine_fft.inverse(&mut big);
        out.push(big.into_iter().map(|v| v.re).collect());
    }
    Ok((fine, out))
}

/// Quick norms of physical samples on the sampling grid (no refinement, no
/// localization check); used for time series.
pub fn lp_norms(grid: &GridSpec, values: &[Vec<f64>], exponents: &[Exponent]) -> Vec<f64> {
    let mag = magnitude(values);
    exponents
        .iter()
        .map(|&p| lp_of_magnitude(&mag, p, grid.cell_volume()))
        .collect()
}

pub fn first_moments(grid: &GridSpec, values: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = grid.dim;
    let mut mom = vec![vec![0.0; values.len()]; n];
    let mut idx = vec![0usize; n];
    let dv = grid.cell_volume();
    for flat in 0..grid.len() {
        grid.unravel(flat, &mut idx);
        for k in 0..n {
            let y = grid.coord(idx[k]);
            for (j, comp) in values.iter().enumerate() {
                mom[k][j] += y * comp[flat] * dv;
            }
        }
    }
    mom
}

/// `∫|x| m(x) dx` for a magnitude sample set.
pub fn weighted_first_moment(grid: &GridSpec, mag: &[f64]) -> f64 {
    let mut idx = vec![0usize; grid.dim];
    let mut s = 0.0;
    for (flat, &m) in mag.iter().enumerate() {
        grid.unravel(flat, &mut idx);
        let r2: f64 = idx.iter().map(|&i| grid.coord(i).powi(2)).sum();
        s += r2.sqrt() * m;
    }
    s * grid.cell_volume()
}

/// L^p norms, `∫|x||a|` and the first-moment matrix of `a`, after checking
/// that `a` is contained in the box.
pub fn norms_and_moments(
    sp: &Spectral,
    a: &VectorField,
    exponents: &[Exponent],
    quad: Quadrature,
) -> Result<NormReport> {
    sp.grid().ensure_same(a.grid())?;
    let values = a.values(sp);
    check_localized(sp.grid(), &magnitude(&values))?;
    let first_moments = first_moments(sp.grid(), &values);
    let (fine, fine_values) = upsample(sp, &values, quad.upsample)?;
    let mag = magnitude(&fine_values);
    let lp_values = exponents
        .iter()
        .map(|&p| LpValue {
            p,
            value: lp_of_magnitude(&mag, p, fine.cell_volume()),
        })
        .collect();
    Ok(NormReport {
        lp_values,
        weighted_first_moment: weighted_first_moment(&fine, &mag),
        first_moments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{sample, ScalarField};
    use std::f64::consts::PI;

    #[test]
    fn exponent_serializes_infinity_as_text() {
        let s = serde_json::to_string(&[Exponent::Finite(2.0), Exponent::Infinity]).unwrap();
        assert_eq!(s, "[2.0,\"inf\"]");
        let back: Vec<Exponent> = serde_json::from_str(&s).unwrap();
        assert_eq!(back, vec![Exponent::Finite(2.0), Exponent::Infinity]);
    }

    #[test]
    fn zero_field_reports_zero() {
        let g = GridSpec::new(2, 32, 16.0).unwrap();
        let sp = Spectral::new(&g).unwrap();
        let r = norms_and_moments(&sp, &VectorField::zeros(&g), &[Exponent::Finite(1.0), Exponent::Infinity], Quadrature::default()).unwrap();
        assert!(r.lp_values.iter().all(|e| e.value == 0.0));
        assert_eq!(r.weighted_first_moment, 0.0);
    }

    #[test]
    fn unlocalized_data_rejected() {
        let g = GridSpec::new(2, 32, 16.0).unwrap();
        let sp = Spectral::new(&g).unwrap();
        let a = VectorField::from_physical(&g, vec![vec![1.0; g.len()], vec![0.0; g.len()]]).unwrap();
        assert!(matches!(
            norms_and_moments(&sp, &a, &[Exponent::Finite(2.0)], Quadrature::default()),
            Err(Error::Localization { .. })
        ));
    }

    #[test]
    fn upsampling_reproduces_band_limited_data() {
        let g = GridSpec::new(2, 64, 16.0).unwrap();
        let sp = Spectral::new(&g).unwrap();
        let s = ScalarField::from_fn(&g, |x| (-(x[0] * x[0] + 0.5 * x[1] * x[1])).exp());
        let (fine, v) = upsample(&sp, &[s.values(&sp)], 2).unwrap();
        let exact = sample(&fine, |x| (-(x[0] * x[0] + 0.5 * x[1] * x[1])).exp());
        let err = v[0].iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-6, "{err}");
        // Coarse nodes are kept exactly.
        let n = g.points_per_axis;
        assert!((v[0][(n / 2 * 2) * 2 * n + n] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn weighted_moment_of_gaussian() {
        // ∫|x| e^{-|x|²} dx = 2π ∫ r² e^{-r²} dr = π^{3/2}/2 in 2D.
        let g = GridSpec::new(2, 128, 16.0).unwrap();
        let mag = sample(&g, |x| (-(x[0] * x[0] + x[1] * x[1])).exp());
        let sp = Spectral::new(&g).unwrap();
        let (fine, v) = upsample(&sp, &[mag], 4).unwrap();
        let w = weighted_first_moment(&fine, &v[0]);
        assert!((w - PI.powf(1.5) / 2.0).abs() < 1e-5, "{w}");
    }
}
