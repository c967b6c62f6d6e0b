//! Fourier-side operators on a fixed grid: heat semigroup, Leray projector,
//! tensor divergence, the combined kernel `F = e^{tΔ} P div`, and dealiased
//! products.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fft::FftNd;
use crate::field::{Components, FieldLike, Representation, ScalarField, TensorField, VectorField};
use crate::grid::GridSpec;

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

pub struct Spectral {
    grid: GridSpec,
    fft: FftNd,
    /// `|k|^2` with full wavenumbers (heat multiplier).
    k2: Vec<f64>,
    /// Derivative wavenumbers per axis, Nyquist zeroed.
    kd: Vec<Vec<f64>>,
    /// `|kd|^2`, used by the projector.
    kd2: Vec<f64>,
    keep: Vec<bool>,
    /// `(-1)^{sum of indices}`: spectrum of a unit impulse at the origin node.
    origin_sign: Vec<f64>,
}

impl Spectral {
    pub fn new(grid: &GridSpec) -> Result<Self> {
        grid.validate()?;
        let n = grid.dim;
        let len = grid.len();
        let cutoff = grid.dealias_fraction * (grid.points_per_axis / 2) as f64;
        let mut k2 = vec![0.0; len];
        let mut kd = vec![vec![0.0; len]; n];
        let mut kd2 = vec![0.0; len];
        let mut keep = vec![true; len];
        let mut origin_sign = vec![1.0; len];
        let mut idx = vec![0usize; n];
        for flat in 0..len {
            grid.unravel(flat, &mut idx);
            let mut parity = 0;
            for (d, &i) in idx.iter().enumerate() {
                let k = grid.wavenumber(i);
                let kk = grid.derivative_wavenumber(i);
                k2[flat] += k * k;
                kd[d][flat] = kk;
                kd2[flat] += kk * kk;
                if (grid.mode(i).abs() as f64) > cutoff {
                    keep[flat] = false;
                }
                parity += i;
            }
            if parity % 2 == 1 {
                origin_sign[flat] = -1.0;
            }
        }
        Ok(Spectral {
            grid: grid.clone(),
            fft: FftNd::new(grid.points_per_axis, n),
            k2,
            kd,
            kd2,
            keep,
            origin_sign,
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn fft(&self) -> &FftNd {
        &self.fft
    }

    pub fn k2(&self) -> &[f64] {
        &self.k2
    }

    pub fn kd(&self, axis: usize) -> &[f64] {
        &self.kd[axis]
    }

    pub fn origin_sign(&self) -> &[f64] {
        &self.origin_sign
    }

    pub fn dealias_mask(&self) -> &[bool] {
        &self.keep
    }

    fn check<T: FieldLike>(&self, u: &T) -> Result<()> {
        self.grid.ensure_same(u.grid())
    }

    /// `e^{-t|k|^2}` per mode.
    pub fn heat_factor(&self, t: f64) -> Vec<f64> {
        self.k2.iter().map(|&k| (-t * k).exp()).collect()
    }

    pub fn heat_in_place(&self, comps: &mut [Vec<Complex64>], t: f64) {
        if t == 0.0 {
            return;
        }
        let e = self.heat_factor(t);
        for c in comps.iter_mut() {
            for (v, &f) in c.iter_mut().zip(&e) {
                *v *= f;
            }
        }
    }

    /// Heat semigroup `e^{tΔ}`; the output keeps the input representation.
    pub fn heat_propagate<T: FieldLike>(&self, u: &T, t: f64) -> Result<T> {
        self.check(u)?;
        if !(t >= 0.0) || !t.is_finite() {
            return Err(Error::InvalidArgument(format!("heat time must be >= 0, got {t}")));
        }
        let mut c = u.components().to_spectral(self);
        self.heat_in_place(c.data_mut(), t);
        Ok(u.with_components(c.to_repr(self, u.repr())))
    }

    /// Applies `I - ξξᵀ/|ξ|²` to spectral vector components; modes with
    /// vanishing derivative wavenumber pass through unchanged.
    pub fn leray_in_place(&self, comps: &mut [Vec<Complex64>]) {
        let n = self.grid.dim;
        let mut v = [Complex64::default(); 3];
        let mut tmp = vec![Complex64::default(); n];
        let v = if n <= 3 { &mut v[..n] } else { &mut tmp[..] };
        for flat in 0..self.grid.len() {
            let q = self.kd2[flat];
            if q == 0.0 {
                continue;
            }
            let mut dot = Complex64::default();
            for d in 0..n {
                v[d] = comps[d][flat];
                dot += v[d] * self.kd[d][flat];
            }
            let s = dot / q;
            for d in 0..n {
                comps[d][flat] = v[d] - s * self.kd[d][flat];
            }
        }
    }

    pub fn leray_project(&self, u: &VectorField) -> Result<VectorField> {
        self.check(u)?;
        let mut c = u.components().to_spectral(self);
        self.leray_in_place(c.data_mut());
        Ok(u.with_components(c.to_repr(self, u.repr())))
    }

    /// `[div f]_j = Σ_l ∂_l f_{jl}` on spectral row-major tensor components.
    pub fn tensor_divergence_spectral(&self, f: &[Vec<Complex64>]) -> Vec<Vec<Complex64>> {
        let n = self.grid.dim;
        let len = self.grid.len();
        let mut out = vec![vec![Complex64::default(); len]; n];
        for (j, o) in out.iter_mut().enumerate() {
            for l in 0..n {
                let fjl = &f[j * n + l];
                let k = &self.kd[l];
                for flat in 0..len {
                    o[flat] += I * k[flat] * fjl[flat];
                }
            }
        }
        out
    }

    pub fn tensor_divergence(&self, f: &TensorField) -> Result<VectorField> {
        self.check(f)?;
        let c = f.components().to_spectral(self);
        let out = self.tensor_divergence_spectral(c.data());
        let v = VectorField::from_spectral(&self.grid, out)?;
        Ok(match f.repr() {
            Representation::Physical => v.to_physical(self),
            Representation::Spectral => v,
        })
    }

    /// Combined multiplier `i ξ_l (δ_jk − ξ_j ξ_k/|ξ|²) e^{−t|ξ|²}` acting on
    /// `f̂_{kl}`, summed over `k, l`. `t = 0` gives `P div`.
    pub fn apply_f_spectral(&self, f: &[Vec<Complex64>], t: f64) -> Vec<Vec<Complex64>> {
        let mut out = self.tensor_divergence_spectral(f);
        self.leray_in_place(&mut out);
        self.heat_in_place(&mut out, t);
        out
    }

    /// `e^{tΔ} P div f` for `t > 0`.
    pub fn apply_f(&self, f: &TensorField, t: f64) -> Result<VectorField> {
        self.check(f)?;
        if !(t > 0.0) || !t.is_finite() {
            return Err(Error::InvalidArgument(format!("kernel time must be > 0, got {t}")));
        }
        let c = f.components().to_spectral(self);
        let out = self.apply_f_spectral(c.data(), t);
        let v = VectorField::from_spectral(&self.grid, out)?;
        Ok(match f.repr() {
            Representation::Physical => v.to_physical(self),
            Representation::Spectral => v,
        })
    }

    pub fn divergence(&self, u: &VectorField) -> Result<ScalarField> {
        self.check(u)?;
        let c = u.components().to_spectral(self);
        let len = self.grid.len();
        let mut out = vec![Complex64::default(); len];
        for (d, comp) in c.data().iter().enumerate() {
            for flat in 0..len {
                out[flat] += I * self.kd[d][flat] * comp[flat];
            }
        }
        let s = ScalarField::from_components(Components::from_spectral(&self.grid, vec![out])?)?;
        Ok(s.to_physical(self))
    }

    /// Largest pointwise `|div u|` in physical space.
    pub fn max_divergence(&self, u: &VectorField) -> Result<f64> {
        Ok(self.divergence(u)?.components().max_abs())
    }

    pub fn gradient(&self, g: &ScalarField) -> Result<VectorField> {
        self.check(g)?;
        let c = g.components().to_spectral(self);
        let base = &c.data()[0];
        let out = (0..self.grid.dim)
            .map(|d| base.iter().zip(&self.kd[d]).map(|(v, &k)| I * k * v).collect())
            .collect();
        let v = VectorField::from_spectral(&self.grid, out)?;
        Ok(match g.repr() {
            Representation::Physical => v.to_physical(self),
            Representation::Spectral => v,
        })
    }

    /// `∇^⊥ψ = (−∂₂ψ, ∂₁ψ)` for a 2D stream function.
    pub fn perp_gradient(&self, psi: &ScalarField) -> Result<VectorField> {
        if self.grid.dim != 2 {
            return Err(Error::InvalidArgument("perp_gradient needs n = 2".into()));
        }
        let g = self.gradient(&psi.to_spectral(self))?;
        let d = g.data();
        let out = vec![d[1].iter().map(|v| -v).collect(), d[0].clone()];
        Ok(VectorField::from_spectral(&self.grid, out)?.to_physical(self))
    }

    /// `curl A` for a 3D vector potential.
    pub fn curl(&self, a: &VectorField) -> Result<VectorField> {
        if self.grid.dim != 3 {
            return Err(Error::InvalidArgument("curl needs n = 3".into()));
        }
        self.check(a)?;
        let c = a.components().to_spectral(self);
        let d = c.data();
        let len = self.grid.len();
        let mut out = vec![vec![Complex64::default(); len]; 3];
        for (j, o) in out.iter_mut().enumerate() {
            let (p, q) = ((j + 1) % 3, (j + 2) % 3);
            for flat in 0..len {
                o[flat] = I * (self.kd[p][flat] * d[q][flat] - self.kd[q][flat] * d[p][flat]);
            }
        }
        Ok(VectorField::from_spectral(&self.grid, out)?.to_physical(self))
    }

    pub fn dealias_in_place(&self, comps: &mut [Vec<Complex64>]) {
        for c in comps.iter_mut() {
            for (v, &k) in c.iter_mut().zip(&self.keep) {
                if !k {
                    *v = Complex64::default();
                }
            }
        }
    }

    /// Physical values of dealias-truncated spectral components.
    fn truncated_physical(&self, comps: &[Vec<Complex64>]) -> Vec<Vec<f64>> {
        comps
            .iter()
            .map(|c| {
                let mut w: Vec<Complex64> =
                    c.iter().zip(&self.keep).map(|(&v, &k)| if k { v } else { Complex64::default() }).collect();
                self.fft.inverse(&mut w);
                w.into_iter().map(|v| v.re).collect()
            })
            .collect()
    }

    /// Dealiased spectral components of `u_k v_l`, row-major `n*n`. When
    /// `v` is `None` the product is `u ⊗ u` and the result is exactly symmetric.
    pub fn outer_spectral(
        &self,
        u: &[Vec<Complex64>],
        v: Option<&[Vec<Complex64>]>,
    ) -> Vec<Vec<Complex64>> {
        let n = self.grid.dim;
        let up = self.truncated_physical(u);
        let vp = v.map(|v| self.truncated_physical(v));
        let mut out: Vec<Vec<Complex64>> = vec![Vec::new(); n * n];
        for k in 0..n {
            for l in 0..n {
                if vp.is_none() && l < k {
                    out[k * n + l] = out[l * n + k].clone();
                    continue;
                }
                let b = vp.as_ref().map_or(&up[l], |vp| &vp[l]);
                let mut w: Vec<Complex64> =
                    up[k].iter().zip(b).map(|(&x, &y)| Complex64::new(x * y, 0.0)).collect();
                self.fft.forward(&mut w);
                for (c, &keep) in w.iter_mut().zip(&self.keep) {
                    if !keep {
                        *c = Complex64::default();
                    }
                }
                out[k * n + l] = w;
            }
        }
        out
    }

    /// `−P div(u ⊗ v)` in spectral form, without heat smoothing.
    pub fn bilinear_spectral(
        &self,
        u: &[Vec<Complex64>],
        v: Option<&[Vec<Complex64>]>,
    ) -> Vec<Vec<Complex64>> {
        let prod = self.outer_spectral(u, v);
        let mut out = self.apply_f_spectral(&prod, 0.0);
        for c in out.iter_mut() {
            for x in c.iter_mut() {
                *x = -*x;
            }
        }
        out
    }

    pub fn outer_product(&self, u: &VectorField, v: &VectorField) -> Result<TensorField> {
        self.check(u)?;
        self.check(v)?;
        let a = u.components().to_spectral(self);
        let b = v.components().to_spectral(self);
        let same = std::ptr::eq(u, v);
        let prod = self.outer_spectral(a.data(), if same { None } else { Some(b.data()) });
        let t = TensorField::from_components(Components::from_spectral(&self.grid, prod)?)?;
        Ok(t.to_physical(self))
    }

    /// Spectrum of the heat kernel `E_t` sampled on the grid (impulse of unit
    /// mass at the origin, smoothed by `e^{tΔ}`).
    pub fn heat_kernel_spectral(&self, t: f64) -> Vec<Complex64> {
        let w = 1.0 / self.grid.cell_volume();
        self.k2
            .iter()
            .zip(&self.origin_sign)
            .map(|(&k, &s)| Complex64::new(s * w * (-t * k).exp(), 0.0))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::sample;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn smooth_random_vector(sp: &Spectral, seed: u64) -> VectorField {
        let g = sp.grid();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let comps = (0..g.dim)
            .map(|_| {
                let c: Vec<f64> = (0..g.dim + 1).map(|_| rng.gen_range(-1.0..1.0)).collect();
                sample(g, |x| {
                    let r2: f64 = x.iter().map(|v| v * v).sum();
                    (c[0] + x.iter().zip(&c[1..]).map(|(a, b)| a * b).sum::<f64>()) * (-r2 / 4.0).exp()
                })
            })
            .collect();
        VectorField::from_physical(g, comps).unwrap()
    }

    fn max_diff(a: &VectorField, b: &VectorField, sp: &Spectral) -> f64 {
        let (a, b) = (a.values(sp), b.values(sp));
        a.iter()
            .zip(&b)
            .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()))
            .fold(0.0, f64::max)
    }

    #[test]
    fn heat_identity_and_semigroup() {
        let g = GridSpec::new(2, 64, 20.0).unwrap();
        let sp = Spectral::new(&g).unwrap();
        let u = smooth_random_vector(&sp, 1);
        let z = sp.heat_propagate(&u, 0.0).unwrap();
        assert!(max_diff(&u, &z, &sp) < 1e-14);
        let a = sp.heat_propagate(&sp.heat_propagate(&u, 0.3).unwrap(), 0.5).unwrap();
        let b = sp.heat_propagate(&u, 0.8).unwrap();
        assert!(max_diff(&a, &b, &sp) < 1e-12 * u.max_magnitude(&sp));
        assert!(sp.heat_propagate(&u, -1.0).is_err());
    }

    #[test]
    fn heat_of_gaussian_matches_closed_form() {
        let g = GridSpec::new(2, 128, 32.0).unwrap();
        let sp = Spectral::new(&g).unwrap();
        let s2 = 1.5;
        let t = 0.7;
        let u = ScalarField::from_fn(&g, |x| (-(x[0] * x[0] + x[1] * x[1]) / (2.0 * s2)).exp());
        let h = sp.heat_propagate(&u, t).unwrap().values(&sp);
        let v = s2 + 2.0 * t;
        let exact = sample(&g, |x| (s2 / v) * (-(x[0] * x[0] + x[1] * x[1]) / (2.0 * v)).exp());
        let err = h.iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-12, "{err}");
    }

    #[test]
    fn leray_kills_gradients_and_is_idempotent() {
        let g = GridSpec::new(2, 64, 20.0).unwrap();
        let sp = Spectral::new(&g).unwrap();
        let s = ScalarField::from_fn(&g, |x| x[0] * (-(x[0] * x[0] + 2.0 * x[1] * x[1]) / 3.0).exp());
        let grad = sp.gradient(&s).unwrap();
        let p = sp.leray_project(&grad).unwrap();
        assert!(p.max_magnitude(&sp) <= 1e-12 * grad.max_magnitude(&sp));

        let u = smooth_random_vector(&sp, 2);
        let p1 = sp.leray_project(&u).unwrap();
        let p2 = sp.leray_project(&p1).unwrap();
        assert!(max_diff(&p1, &p2, &sp) <= 1e-12 * p1.max_magnitude(&sp));
        let div = sp.max_divergence(&p1).unwrap();
        assert!(div <= 1e-10 * u.max_magnitude(&sp) * g.max_wavenumber() * 2f64.sqrt());
    }

    #[test]
    fn diagonal_tensor_divergence_is_gradient() {
        let g = GridSpec::new(2, 64, 20.0).unwrap();
        let sp = Spectral::new(&g).unwrap();
        let s = ScalarField::from_fn(&g, |x| (-(x[0] * x[0] + x[1] * x[1]) / 2.0).exp());
        let vals = s.values(&sp);
        let zero = vec![0.0; g.len()];
        let f = TensorField::from_physical(&g, vec![vals.clone(), zero.clone(), zero, vals]).unwrap();
        assert!(f.is_symmetric());
        let d = sp.tensor_divergence(&f).unwrap();
        let grad = sp.gradient(&s).unwrap();
        assert!(max_diff(&d, &grad, &sp) < 1e-14);
        let c = TensorField::from_physical(&g, vec![vec![1.0; g.len()]; 4]).unwrap();
        assert!(sp.tensor_divergence(&c).unwrap().max_magnitude(&sp) < 1e-14);
    }

    #[test]
    fn outer_product_is_symmetric() {
        let g = GridSpec::new(3, 16, 10.0).unwrap();
        let sp = Spectral::new(&g).unwrap();
        let u = smooth_random_vector(&sp, 3);
        let t = sp.outer_product(&u, &u).unwrap();
        assert!(t.is_symmetric());
    }

    #[test]
    fn apply_f_rejects_nonpositive_time() {
        let g = GridSpec::new(2, 16, 10.0).unwrap();
        let sp = Spectral::new(&g).unwrap();
        let f = TensorField::zeros(&g);
        assert!(sp.apply_f(&f, 0.0).is_err());
        assert!(sp.apply_f(&f, 1.0).is_ok());
    }
}
