//! Verification passes over finished runs: decay-slope fits, the β test,
//! the first-order profile residual, the moment-weighted heat bound, the
//! envelope constant and the forced/unforced dissipation comparison.
//!
//! Every time-asymptotic statement is replaced by a finite-window check on
//! nodes with `√t ≤ L/8`.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{FieldLike, VectorField};
use crate::forcing::Forcing;
use crate::grid::GridSpec;
use crate::norms::{self, Exponent};
use crate::solver::Trajectory;
use crate::spectral::Spectral;
use crate::synthesis::MomentMatrix;

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayReport {
    pub quantity: String,
    pub window: (f64, f64),
    pub exponent: f64,
    pub intercept: f64,
    /// Root-mean-square residual of the log-log fit.
    pub residual: f64,
    pub points: usize,
    pub window_valid: bool,
}

/// Least-squares slope of `log value` against `log t` over the points with
/// `t ∈ [t0, t1]`. Refuses windows past `L²/64` or shorter than a decade.
pub fn decay_slope(
    quantity: &str,
    series: &[(f64, f64)],
    window: (f64, f64),
    grid: &GridSpec,
) -> Result<DecayReport> {
    let (t0, t1) = window;
    if !(t0 > 0.0 && t1 > t0) {
        return Err(Error::InvalidArgument(format!("bad fit window [{t0}, {t1}]")));
    }
    if !grid.in_validity_window(t1) {
        return Err(Error::OutsideWindow {
            t: t1,
            t_max: grid.validity_time(),
        });
    }
    if t1 < 10.0 * t0 * (1.0 - 1e-12) {
        return Err(Error::InvalidArgument(format!(
            "fit window [{t0}, {t1}] spans less than one decade"
        )));
    }
    let pts: Vec<(f64, f64)> = series
        .iter()
        .filter(|(t, _)| *t >= t0 * (1.0 - 1e-12) && *t <= t1 * (1.0 + 1e-12))
        .map(|&(t, v)| {
            if v > 0.0 {
                Ok((t.ln(), v.ln()))
            } else {
                Err(Error::InvalidArgument(format!("nonpositive value {v} at t = {t}")))
            }
        })
        .collect::<Result<_>>()?;
    if pts.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "only {} points inside the fit window",
            pts.len()
        )));
    }
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residual = (pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum::<f64>() / m).sqrt();
    Ok(DecayReport {
        quantity: quantity.to_string(),
        window,
        exponent: slope,
        intercept,
        residual,
        points: pts.len(),
        window_valid: true,
    })
}

/// Nodes in the last decade of the validity window: `t ∈ [t_v/10, t_v]`
/// where `t_v` is the latest valid node.
pub fn last_valid_decade(grid: &GridSpec, times: &[f64]) -> Option<(f64, f64)> {
    let t_v = times
        .iter()
        .copied()
        .filter(|&t| t > 0.0 && grid.in_validity_window(t))
        .fold(f64::NAN, f64::max);
    if t_v.is_nan() {
        return None;
    }
    Some((t_v / 10.0, t_v))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MsReport {
    pub beta: Vec<Vec<f64>>,
    /// `tr β / n`.
    pub scalar: f64,
    /// `‖β − (tr β/n) I‖_F`.
    pub deviation: f64,
    /// Largest difference between two diagonal entries of β.
    pub diagonal_spread: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// `β = c − ∫∫f` and its distance from the scalar matrices.
pub fn ms_residual(c: &MomentMatrix, force_integrals: &[Vec<f64>], tolerance: f64) -> MsReport {
    let n = c.dim();
    let beta: Vec<Vec<f64>> = (0..n)
        .map(|k| (0..n).map(|l| c.entries[k][l] - force_integrals[k][l]).collect())
        .collect();
    let trace: f64 = (0..n).map(|k| beta[k][k]).sum();
    let scalar = trace / n as f64;
    let mut dev = 0.0;
    for k in 0..n {
        for l in 0..n {
            let d = beta[k][l] - if k == l { scalar } else { 0.0 };
            dev += d * d;
        }
    }
    let deviation = dev.sqrt();
    let diag: Vec<f64> = (0..n).map(|k| beta[k][k]).collect();
    let diagonal_spread = diag.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        - diag.iter().copied().fold(f64::INFINITY, f64::min);
    MsReport {
        pass: deviation <= tolerance * (1.0 + trace.abs()),
        beta,
        scalar,
        deviation,
        diagonal_spread,
        tolerance,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileResidualReport {
    pub q: Exponent,
    pub times: Vec<f64>,
    /// `t^{1/2 + n/2(1−1/q)} ‖residual(t)‖_q` (magnitude over components).
    pub weighted: Vec<f64>,
}

impl ProfileResidualReport {
    /// Last entry over the entry closest to one decade earlier.
    pub fn decade_ratio(&self) -> Option<f64> {
        let (&t1, &w1) = (self.times.last()?, self.weighted.last()?);
        let i = self
            .times
            .iter()
            .enumerate()
            .min_by(|a, b| ((a.1 / t1).ln() + 10f64.ln()).abs().total_cmp(&((b.1 / t1).ln() + 10f64.ln()).abs()))?
            .0;
        (self.weighted[i] > 0.0).then(|| w1 / self.weighted[i])
    }
}

/// Spectrum of `Σ_{k,l} F_{lk,j}(·,t) M_{kl}`, i.e. `e^{tΔ} P div` applied
/// to `M` times a unit impulse at the origin.
pub fn kernel_term_spectral(sp: &Spectral, m: &[Vec<f64>], t: f64) -> Vec<Vec<Complex64>> {
    let n = sp.grid().dim;
    let impulse = sp.heat_kernel_spectral(0.0);
    let f: Vec<Vec<Complex64>> = (0..n * n)
        .map(|kl| impulse.iter().map(|&d| d * m[kl / n][kl % n]).collect())
        .collect();
    sp.apply_f_spectral(&f, t)
}

/// Spectrum of `Σ_k ∂_k E_t ∫ y_k a_j dy`, with `moments[k][j] = ∫ y_k a_j`.
pub fn moment_term_spectral(sp: &Spectral, moments: &[Vec<f64>], t: f64) -> Vec<Vec<Complex64>> {
    let n = sp.grid().dim;
    let e = sp.heat_kernel_spectral(t);
    (0..n)
        .map(|j| {
            (0..e.len())
                .map(|f| {
                    let s: f64 = (0..n).map(|k| sp.kd(k)[f] * moments[k][j]).sum();
                    I * s * e[f]
                })
                .collect()
        })
        .collect()
}

fn physical(sp: &Spectral, mut c: Vec<Vec<Complex64>>) -> Vec<Vec<f64>> {
    c.iter_mut()
        .map(|x| {
            sp.fft().inverse(x);
            x.iter().map(|v| v.re).collect()
        })
        .collect()
}

/// Weighted `q`-norm of
/// `u_j(t) + Σ_k ∂_kE_t ∫y_k a_j − Σ F_{lk,j} ∫∫f_{kl} + Σ F_{lk,j} ∫∫u_l u_k`
/// at the selected snapshot nodes. `nonlinear` is the space-time Gram matrix
/// of the flow (zero for a linearized run); `forcing` may be absent.
pub fn fm_profile_residual(
    sp: &Spectral,
    tr: &Trajectory,
    a: &VectorField,
    forcing: Option<&Forcing>,
    nonlinear: &[Vec<f64>],
    q: Exponent,
    nodes: &[usize],
) -> Result<ProfileResidualReport> {
    let g = sp.grid();
    let n = g.dim;
    if !tr.has_snapshots() {
        return Err(Error::MissingArtifact("trajectory snapshots".into()));
    }
    let moments = norms::first_moments(g, &a.values(sp));
    let fint = forcing.map_or_else(|| vec![vec![0.0; n]; n], |f| f.integrals());
    let combined: Vec<Vec<f64>> = (0..n)
        .map(|k| (0..n).map(|l| nonlinear[k][l] - fint[k][l]).collect())
        .collect();
    let qv = q.value();
    let power = 0.5 + n as f64 / 2.0 * if qv.is_infinite() { 1.0 } else { 1.0 - 1.0 / qv };
    let mut times = Vec::with_capacity(nodes.len());
    let mut weighted = Vec::with_capacity(nodes.len());
    for &i in nodes {
        let t = tr.records.get(i).map(|r| r.t).ok_or_else(|| {
            Error::InvalidArgument(format!("node {i} outside the trajectory"))
        })?;
        if !(t > 0.0) || !g.in_validity_window(t) {
            return Err(Error::OutsideWindow {
                t,
                t_max: g.validity_time(),
            });
        }
        let mut r = tr.snapshots[i].components().to_spectral(sp).into_data();
        let mt = moment_term_spectral(sp, &moments, t);
        let kt = kernel_term_spectral(sp, &combined, t);
        for j in 0..n {
            for f in 0..g.len() {
                r[j][f] += mt[j][f] + kt[j][f];
            }
        }
        let values = physical(sp, r);
        times.push(t);
        weighted.push(t.powf(power) * norms::lp_norms(g, &values, &[q])[0]);
    }
    Ok(ProfileResidualReport { q, times, weighted })
}

/// Pointwise magnitude over all `n³` components `F_{lk,j}(·,t)`, accumulated
/// one `(k, l)` block at a time to bound memory on large 3D boxes.
fn kernel_magnitude(sp: &Spectral, t: f64) -> Vec<f64> {
    let n = sp.grid().dim;
    let mut sq = vec![0.0; sp.grid().len()];
    for k in 0..n {
        for l in 0..n {
            let mut m = vec![vec![0.0; n]; n];
            m[k][l] = 1.0;
            for comp in physical(sp, kernel_term_spectral(sp, &m, t)) {
                sq.iter_mut().zip(&comp).for_each(|(s, v)| *s += v * v);
            }
        }
    }
    sq.iter_mut().for_each(|s| *s = s.sqrt());
    sq
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelNormSample {
    pub t: f64,
    /// Norm of the periodized kernel on the declared box.
    pub periodic: f64,
    /// Whole-space estimate.
    pub continuum: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelNormLaw {
    pub p: Exponent,
    pub samples: Vec<KernelNormSample>,
    /// Fitted exponent of `t` in the whole-space estimate.
    pub exponent: f64,
    /// `−(n+1)/2 + n/(2p)`.
    pub expected: f64,
    /// `t^{(n+1)/2 − n/(2p)} ‖F(t)‖_p` averaged over the samples.
    pub constant: f64,
}

/// Pointwise magnitude norms of the kernel `F` at time `t`.
///
/// The periodized kernel differs from the whole-space one by its algebraic
/// tail and the images of it, a relative error of order `√t/L` in `L¹` and
/// `t/L²` in the other norms. The whole-space estimate uses boxes `2L` and
/// `4L` at the same spacing: linear extrapolation in `1/L` for `p = 1`, the
/// `4L` value otherwise.
pub fn kernel_norms(grid: &GridSpec, t: f64, exponents: &[Exponent]) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(t > 0.0) {
        return Err(Error::InvalidArgument(format!("kernel time must be > 0, got {t}")));
    }
    let at = |factor: usize| -> Result<Vec<f64>> {
        let g = GridSpec {
            points_per_axis: grid.points_per_axis * factor,
            box_length: grid.box_length * factor as f64,
            ..grid.clone()
        };
        let sp = Spectral::new(&g)?;
        let mag = kernel_magnitude(&sp, t);
        Ok(exponents.iter().map(|&p| norms::lp_of_magnitude(&mag, p, g.cell_volume())).collect())
    };
    let (base, double, quad) = (at(1)?, at(2)?, at(4)?);
    let continuum = exponents
        .iter()
        .enumerate()
        .map(|(i, p)| if p.value() == 1.0 { 2.0 * quad[i] - double[i] } else { quad[i] })
        .collect();
    Ok((base, continuum))
}

/// Measures the time scaling of `‖F(·,t)‖_p` over `times`.
pub fn kernel_norm_law(grid: &GridSpec, times: &[f64], p: Exponent) -> Result<KernelNormLaw> {
    let n = grid.dim as f64;
    let expected = -(n + 1.0) / 2.0 + if p.value().is_infinite() { 0.0 } else { n / (2.0 * p.value()) };
    let mut samples = Vec::with_capacity(times.len());
    for &t in times {
        let (base, cont) = kernel_norms(grid, t, &[p])?;
        samples.push(KernelNormSample {
            t,
            periodic: base[0],
            continuum: cont[0],
        });
    }
    if samples.len() < 2 {
        return Err(Error::InvalidArgument("need at least two kernel times".into()));
    }
    let pts: Vec<(f64, f64)> = samples.iter().map(|s| (s.t.ln(), s.continuum.ln())).collect();
    let m = pts.len() as f64;
    let mx = pts.iter().map(|q| q.0).sum::<f64>() / m;
    let my = pts.iter().map(|q| q.1).sum::<f64>() / m;
    let sxx: f64 = pts.iter().map(|q| (q.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|q| (q.0 - mx) * (q.1 - my)).sum();
    let constant = samples.iter().map(|s| s.t.powf(-expected) * s.continuum).sum::<f64>() / m;
    Ok(KernelNormLaw {
        p,
        exponent: sxy / sxx,
        expected,
        constant,
        samples,
    })
}

/// `‖∇E_1‖₂` in dimension `n` by radial quadrature of `|∇E_1|² = (r²/4) E_1²`.
pub fn grad_heat_kernel_l2(dim: usize) -> f64 {
    let n = dim as f64;
    // Surface area of the unit sphere in R^n.
    let omega = 2.0 * PI.powf(n / 2.0) / gamma_half(dim);
    let norm = (4.0 * PI).powf(-n);
    let (r_max, m) = (40.0, 400_000usize);
    let h = r_max / m as f64;
    let integrand = |r: f64| r.powf(n + 1.0) / 4.0 * (-r * r / 2.0).exp();
    let sum: f64 = (1..m).map(|i| integrand(i as f64 * h)).sum::<f64>() + 0.5 * integrand(r_max);
    (omega * norm * sum * h).sqrt()
}

/// `Γ(n/2)` for positive integers `n`.
fn gamma_half(n: usize) -> f64 {
    if n.is_multiple_of(2) {
        (1..n / 2).map(|k| k as f64).product()
    } else {
        let mut g = PI.sqrt();
        let mut x = 0.5;
        while x < n as f64 / 2.0 - 0.25 {
            g *= x;
            x += 1.0;
        }
        g
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatBoundReport {
    pub grad_kernel_l2: f64,
    pub weighted_moment: f64,
    pub times: Vec<f64>,
    /// `‖e^{tΔ}a‖₂`.
    pub left: Vec<f64>,
    /// `t^{−(n+2)/4} ‖∇E_1‖₂ ∫|y||a|`.
    pub right: Vec<f64>,
    pub max_ratio: f64,
    pub pass: bool,
}

/// Checks `‖e^{tΔ}a‖₂ ≤ t^{−(n+2)/4} ‖∇E_1‖₂ ∫|y||a(y)| dy` at the given
/// times inside the validity window.
pub fn lemma_heat2_check(sp: &Spectral, a: &VectorField, times: &[f64]) -> Result<HeatBoundReport> {
    let g = sp.grid();
    let n = g.dim as f64;
    let quad = norms::Quadrature::upsampled(if g.dim == 2 { 4 } else { 2 });
    let report = norms::norms_and_moments(sp, a, &[Exponent::Finite(2.0)], quad)?;
    let weighted = report.weighted_first_moment;
    let gk = grad_heat_kernel_l2(g.dim);
    let a_hat = a.components().to_spectral(sp);
    let mut out = HeatBoundReport {
        grad_kernel_l2: gk,
        weighted_moment: weighted,
        times: Vec::new(),
        left: Vec::new(),
        right: Vec::new(),
        max_ratio: 0.0,
        pass: true,
    };
    for &t in times.iter().filter(|&&t| t > 0.0 && g.in_validity_window(t)) {
        let e = sp.heat_factor(t);
        let scale = g.cell_volume() / g.len() as f64;
        let left: f64 = a_hat
            .data()
            .iter()
            .map(|c| c.iter().zip(&e).map(|(v, f)| v.norm_sqr() * f * f).sum::<f64>())
            .sum::<f64>()
            * scale;
        let left = left.sqrt();
        let right = t.powf(-(n + 2.0) / 4.0) * gk * weighted;
        if left > 0.0 {
            out.max_ratio = out.max_ratio.max(left / right);
        }
        out.pass &= left <= right;
        out.times.push(t);
        out.left.push(left);
        out.right.push(right);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeReport {
    pub k: f64,
    pub l2_data: f64,
    pub times: Vec<f64>,
    /// `‖u(t)‖₂ / min(‖a‖₂, K t^{−(n+2)/4})`.
    pub ratios: Vec<f64>,
    pub c_emp: f64,
    pub pass: bool,
}

/// Empirical constant in `‖u(t)‖₂ ≲ min(‖a‖₂, K(a) t^{−(n+2)/4})` over the
/// valid nodes. An empty set of nodes gives `C_emp = 0`.
pub fn wiegner_check(tr: &Trajectory, k: f64, l2_data: f64) -> EnvelopeReport {
    let n = tr.grid.dim as f64;
    let mut out = EnvelopeReport {
        k,
        l2_data,
        times: Vec::new(),
        ratios: Vec::new(),
        c_emp: 0.0,
        pass: true,
    };
    for (t, v) in tr.l2_series() {
        if t <= 0.0 || !tr.grid.in_validity_window(t) {
            continue;
        }
        let env = l2_data.min(k * t.powf(-(n + 2.0) / 4.0));
        let r = if v == 0.0 { 0.0 } else { v / env };
        out.times.push(t);
        out.ratios.push(r);
        out.c_emp = out.c_emp.max(r);
    }
    out.pass = out.c_emp.is_finite();
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DissipationReport {
    pub window: (f64, f64),
    pub times: Vec<f64>,
    /// `t^{(n+2)/4} ‖v(t)‖₂` on the forced run.
    pub forced: Vec<f64>,
    /// The same quantity on the unforced run.
    pub unforced: Vec<f64>,
    pub forced_decreasing: bool,
    /// Smallest over largest unforced value in the window.
    pub unforced_flatness: f64,
    pub unforced_plateau: bool,
    /// `‖v‖₂ / ‖u‖₂` at the last valid node; `None` when the unforced flow vanishes there.
    pub final_ratio: Option<f64>,
    pub pass: bool,
}

/// Plateau threshold for the unforced weighted norm over the last decade.
pub const PLATEAU_FLATNESS: f64 = 0.5;

/// Compares a forced run with the unforced run from the same data over the
/// last decade of valid nodes. The two runs must share their node times.
pub fn dissipation_check(forced: &Trajectory, unforced: &Trajectory) -> Result<DissipationReport> {
    forced.grid.ensure_same(&unforced.grid)?;
    let (fs, us) = (forced.l2_series(), unforced.l2_series());
    if fs.len() != us.len() || fs.iter().zip(&us).any(|(a, b)| a.0 != b.0) {
        return Err(Error::InvalidArgument("forced and unforced runs use different nodes".into()));
    }
    let times: Vec<f64> = fs.iter().map(|p| p.0).collect();
    let window = last_valid_decade(&forced.grid, &times)
        .ok_or_else(|| Error::InvalidArgument("no valid nodes".into()))?;
    let n = forced.grid.dim as f64;
    let w = |t: f64| t.powf((n + 2.0) / 4.0);
    let mut out = DissipationReport {
        window,
        times: Vec::new(),
        forced: Vec::new(),
        unforced: Vec::new(),
        forced_decreasing: true,
        unforced_flatness: 0.0,
        unforced_plateau: false,
        final_ratio: None,
        pass: false,
    };
    for (f, u) in fs.iter().zip(&us) {
        if f.0 >= window.0 * (1.0 - 1e-12) && f.0 <= window.1 {
            out.times.push(f.0);
            out.forced.push(w(f.0) * f.1);
            out.unforced.push(w(u.0) * u.1);
        }
    }
    if out.times.len() < 2 {
        return Err(Error::InvalidArgument("fewer than two nodes in the last valid decade".into()));
    }
    out.forced_decreasing = out.forced.windows(2).all(|p| p[1] < p[0]);
    let umax = out.unforced.iter().copied().fold(0.0, f64::max);
    let umin = out.unforced.iter().copied().fold(f64::INFINITY, f64::min);
    out.unforced_flatness = if umax > 0.0 { umin / umax } else { 0.0 };
    out.unforced_plateau = umin > 0.0 && out.unforced_flatness >= PLATEAU_FLATNESS;
    let last = out.times.len() - 1;
    out.final_ratio = (out.unforced[last] > 0.0).then(|| out.forced[last] / out.unforced[last]);
    out.pass = out.forced_decreasing && out.unforced_plateau && out.final_ratio.is_some_and(|r| r <= 0.5);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> GridSpec {
        GridSpec::new(2, 64, 64.0).unwrap()
    }

    #[test]
    fn exact_power_law_slope() {
        let s: Vec<(f64, f64)> = (0..40).map(|i| 10f64.powf(i as f64 / 20.0)).map(|t| (t, 3.0 / t)).collect();
        let r = decay_slope("synthetic", &s, (1.0, 60.0), &grid()).unwrap();
        assert!((r.exponent + 1.0).abs() < 1e-3);
        assert!((r.intercept - 3f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn slope_refuses_bad_windows() {
        let s: Vec<(f64, f64)> = (1..100).map(|i| (i as f64, 1.0 / i as f64)).collect();
        assert!(matches!(
            decay_slope("x", &s, (5.0, 80.0), &grid()),
            Err(Error::OutsideWindow { .. })
        ));
        assert!(decay_slope("x", &s, (5.0, 40.0), &grid()).is_err());
    }

    #[test]
    fn ms_examples() {
        let id = MomentMatrix::from_entries(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let zero = vec![vec![0.0; 2]; 2];
        let r = ms_residual(&id, &zero, 1e-9);
        assert_eq!(r.deviation, 0.0);
        assert!(r.pass);
        assert_eq!(r.beta, id.entries);
        let d = MomentMatrix::from_entries(vec![vec![1.0, 0.0], vec![0.0, 2.0]]);
        let r = ms_residual(&d, &zero, 1e-6);
        assert!((r.deviation - 0.5f64.sqrt()).abs() < 1e-15);
        assert!(!r.pass);
    }

    #[test]
    fn grad_heat_kernel_norm_2d() {
        let exact = 1.0 / (4.0 * PI.sqrt());
        assert!((grad_heat_kernel_l2(2) - exact).abs() < 1e-10);
    }

    #[test]
    fn grad_heat_kernel_norm_3d() {
        // ∫ (r²/4)(4π)^{-3} e^{-r²/2} d³x = 3 (2π)^{3/2} / (4 (4π)^3).
        let exact = (3.0 * (2.0 * PI).powf(1.5) / (4.0 * (4.0 * PI).powi(3))).sqrt();
        assert!((grad_heat_kernel_l2(3) - exact).abs() < 1e-10);
    }

    #[test]
    fn kernel_term_of_scalar_matrix_vanishes() {
        let g = GridSpec::new(2, 32, 16.0).unwrap();
        let sp = Spectral::new(&g).unwrap();
        let t = kernel_term_spectral(&sp, &[vec![2.5, 0.0], vec![0.0, 2.5]], 1.0);
        assert!(t.iter().flatten().all(|v| v.norm() < 1e-12));
    }
}
