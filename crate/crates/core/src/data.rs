//! Divergence-free initial data, built as `∇^⊥ψ` (2D) or `curl A` (3D) of
//! localized potentials so the discrete divergence vanishes to round-off.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{sample, ScalarField, VectorField};
use crate::spectral::Spectral;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSpec {
    /// Potential `ε e^{-|x|²/w²}`.
    GaussianVortex {
        #[serde(default = "one")]
        amplitude: f64,
        #[serde(default = "one")]
        width: f64,
    },
    /// Potential `ε x₁ x₂ e^{-q(x)}` (`order = 2`) or `ε x₁ e^{-q(x)}`
    /// (`order = 1`) with `q = x₁²/w² + x₂²/(αw)² + x₃²/w²`; its integral
    /// vanishes, so all first moments of the velocity vanish.
    MomentFree {
        #[serde(default = "one")]
        amplitude: f64,
        #[serde(default = "one")]
        width: f64,
        #[serde(default = "two")]
        order: u32,
        #[serde(default = "one")]
        anisotropy: f64,
    },
    /// Gaussian envelope times a few random plane waves with wavevector
    /// components in `[-band, band]`.
    RandomSolenoidal {
        #[serde(default = "one")]
        amplitude: f64,
        #[serde(default = "one")]
        width: f64,
        #[serde(default = "one")]
        band: f64,
        #[serde(default)]
        seed: u64,
    },
}

fn one() -> f64 {
    1.0
}

fn two() -> u32 {
    2
}

impl DataSpec {
    pub fn amplitude(&self) -> f64 {
        match *self {
            DataSpec::GaussianVortex { amplitude, .. }
            | DataSpec::MomentFree { amplitude, .. }
            | DataSpec::RandomSolenoidal { amplitude, .. } => amplitude,
        }
    }

    pub fn with_amplitude(&self, a: f64) -> Self {
        let mut s = self.clone();
        match &mut s {
            DataSpec::GaussianVortex { amplitude, .. }
            | DataSpec::MomentFree { amplitude, .. }
            | DataSpec::RandomSolenoidal { amplitude, .. } => *amplitude = a,
        }
        s
    }

    pub fn width(&self) -> f64 {
        match *self {
            DataSpec::GaussianVortex { width, .. }
            | DataSpec::MomentFree { width, .. }
            | DataSpec::RandomSolenoidal { width, .. } => width,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DataSpec::GaussianVortex { .. } => "gaussian_vortex",
            DataSpec::MomentFree { .. } => "moment_free",
            DataSpec::RandomSolenoidal { .. } => "random_solenoidal",
        }
    }
}

/// Potential components: one for 2D, three for 3D.
fn potential(sp: &Spectral, spec: &DataSpec) -> Result<Vec<Vec<f64>>> {
    let g = sp.grid();
    let n = g.dim;
    let w = spec.width();
    if !(w >= 4.0 * g.spacing()) {
        return Err(Error::Resolution(format!(
            "width {w} is below four grid spacings ({})",
            4.0 * g.spacing()
        )));
    }
    let comps = if n == 2 { 1 } else { 3 };
    let out = match *spec {
        DataSpec::GaussianVortex { amplitude, width } => {
            let p = sample(g, |x| amplitude * (-x.iter().map(|v| v * v).sum::<f64>() / (width * width)).exp());
            vec![p; comps]
        }
        DataSpec::MomentFree {
            amplitude,
            width,
            order,
            anisotropy,
        } => {
            if !(order == 1 || order == 2) || !(anisotropy > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "moment_free needs order 1 or 2 and anisotropy > 0 (got {order}, {anisotropy})"
                )));
            }
            let w2 = width * anisotropy;
            let p = sample(g, |x| {
                let mut q = x[0] * x[0] / (width * width) + x[1] * x[1] / (w2 * w2);
                for v in &x[2..] {
                    q += v * v / (width * width);
                }
                let poly = if order == 2 { x[0] * x[1] } else { x[0] };
                amplitude * poly * (-q).exp()
            });
            vec![p; comps]
        }
        DataSpec::RandomSolenoidal {
            amplitude,
            width,
            band,
            seed,
        } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..comps)
                .map(|_| {
                    let waves: Vec<(Vec<f64>, f64, f64)> = (0..6)
                        .map(|_| {
                            let k: Vec<f64> = (0..n).map(|_| rng.gen_range(-band..=band)).collect();
                            (k, rng.gen_range(-1.0..1.0), rng.gen_range(0.0..std::f64::consts::TAU))
                        })
                        .collect();
                    sample(g, |x| {
                        let env = (-x.iter().map(|v| v * v).sum::<f64>() / (width * width)).exp();
                        let s: f64 = waves
                            .iter()
                            .map(|(k, c, ph)| c * (k.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + ph).cos())
                            .sum();
                        amplitude * env * s
                    })
                })
                .collect()
        }
    };
    Ok(out)
}

/// Builds the velocity field described by `spec` on the grid of `sp`.
pub fn generate_data(sp: &Spectral, spec: &DataSpec) -> Result<VectorField> {
    let g = sp.grid();
    if g.dim != 2 && g.dim != 3 {
        return Err(Error::InvalidArgument(format!("data generators support n = 2, 3 (got {})", g.dim)));
    }
    let pot = potential(sp, spec)?;
    if g.dim == 2 {
        let psi = ScalarField::from_physical(g, pot.into_iter().next().expect("one component"))?;
        sp.perp_gradient(&psi)
    } else {
        sp.curl(&VectorField::from_physical(g, pot)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;
    use crate::norms::first_moments;

    #[test]
    fn random_data_is_deterministic() {
        let g = GridSpec::new(2, 32, 16.0).unwrap();
        let sp = Spectral::new(&g).unwrap();
        let spec = DataSpec::RandomSolenoidal {
            amplitude: 1.0,
            width: 2.0,
            band: 1.0,
            seed: 7,
        };
        let a = generate_data(&sp, &spec).unwrap().values(&sp);
        let b = generate_data(&sp, &spec).unwrap().values(&sp);
        assert_eq!(a, b);
    }

    #[test]
    fn first_order_moment_free_potential_has_zero_moments() {
        let g = GridSpec::new(2, 64, 16.0).unwrap();
        let sp = Spectral::new(&g).unwrap();
        let spec = DataSpec::MomentFree {
            amplitude: 1.0,
            width: 1.0,
            order: 1,
            anisotropy: 1.0,
        };
        let a = generate_data(&sp, &spec).unwrap().values(&sp);
        let m = first_moments(&g, &a);
        assert!(m.iter().flatten().all(|v| v.abs() < 1e-12), "{m:?}");
    }

    #[test]
    fn rejects_unresolved_width() {
        let g = GridSpec::new(2, 16, 16.0).unwrap();
        let sp = Spectral::new(&g).unwrap();
        assert!(generate_data(&sp, &DataSpec::GaussianVortex { amplitude: 1.0, width: 1.0 }).is_err());
    }
}
