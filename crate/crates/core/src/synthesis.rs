//! Force synthesis: moment matrices, the force recursion, profile
//! normalization and rescaling, the functionals `J, K, L`, the smallness
//! conditions, and the outer fixed-point loop.

use serde::{Deserialize, Serialize};

use crate::calibration::Constants;
use crate::error::{Error, Result};
use crate::field::{sample, FieldLike, VectorField};
use crate::forcing::{bump, Forcing, ProfileTerm, SpaceTimeProfile, TimeShape};
use crate::norms::{self, Exponent, Quadrature};
use crate::rescale::dilate;
use crate::solver::{self, SnapshotPolicy, SolverOptions, Trajectory};
use crate::spectral::Spectral;
use crate::timegrid::TimeGrid;

fn frobenius(m: &[Vec<f64>]) -> f64 {
    m.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
}

fn sub(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p - q).collect()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentMatrix {
    pub entries: Vec<Vec<f64>>,
    pub trace: f64,
    pub t_cut: f64,
    pub tail_bound: f64,
}

impl MomentMatrix {
    pub fn from_entries(entries: Vec<Vec<f64>>) -> Self {
        let trace = (0..entries.len()).map(|k| entries[k][k]).sum();
        MomentMatrix {
            entries,
            trace,
            t_cut: f64::INFINITY,
            tail_bound: 0.0,
        }
    }

    pub fn zeros(n: usize) -> Self {
        Self::from_entries(vec![vec![0.0; n]; n])
    }

    pub fn dim(&self) -> usize {
        self.entries.len()
    }

    pub fn frobenius(&self) -> f64 {
        frobenius(&self.entries)
    }

    pub fn distance(&self, other: &MomentMatrix) -> f64 {
        frobenius(&sub(&self.entries, &other.entries))
    }
}

/// `c_{kl} = ∫_0^{t_cut} ∫ u_k u_l`, with the tail beyond `t_cut` bounded by
/// `(2/n) K² t_cut^{−n/2}` where `‖u(t)‖₂ ≤ K t^{−(n+2)/4}` is fitted over the
/// last decade before `t_cut`. Fails when the tail exceeds `10⁻³ ‖c‖_F`.
pub fn moment_matrix(tr: &Trajectory, t_cut: f64) -> Result<MomentMatrix> {
    moment_matrix_with(tr, t_cut, DEFAULT_HORIZON_TOLERANCE)
}

pub const DEFAULT_HORIZON_TOLERANCE: f64 = 1e-3;

/// [`moment_matrix`] with an explicit tail tolerance relative to `‖c‖_F`.
pub fn moment_matrix_with(tr: &Trajectory, t_cut: f64, horizon_tolerance: f64) -> Result<MomentMatrix> {
    let n = tr.grid.dim as f64;
    let idx = tr
        .records
        .iter()
        .rposition(|r| r.t <= t_cut * (1.0 + 1e-12))
        .ok_or_else(|| Error::InvalidArgument(format!("trajectory has no node before t_cut = {t_cut}")))?;
    let last = &tr.records[idx];
    if last.t < t_cut * (1.0 - 1e-9) {
        return Err(Error::InvalidArgument(format!(
            "trajectory ends at t = {} before t_cut = {t_cut}",
            last.t
        )));
    }
    let t_cut = last.t;
    let i2 = tr.exponents.iter().position(|p| p.value() == 2.0).expect("L2 recorded");
    let k = tr.records[..=idx]
        .iter()
        .filter(|r| r.t >= t_cut / 10.0 && r.t > 0.0)
        .map(|r| r.t.powf((n + 2.0) / 4.0) * r.norms[i2])
        .fold(0.0, f64::max);
    let tail_bound = if t_cut > 0.0 { 2.0 / n * k * k * t_cut.powf(-n / 2.0) } else { 0.0 };
    let mut m = MomentMatrix::from_entries(last.gram.clone());
    m.t_cut = t_cut;
    m.tail_bound = tail_bound;
    let limit = horizon_tolerance * m.frobenius();
    if tail_bound > limit {
        return Err(Error::InsufficientHorizon {
            tail: tail_bound,
            limit,
            t_cut,
        });
    }
    Ok(m)
}

/// `f_{kl} = c_{kl} φ` off the diagonal and `(c_kk − c̄) φ` on it.
pub fn force_coefficients(c: &MomentMatrix) -> Vec<Vec<f64>> {
    let n = c.dim();
    (0..n)
        .map(|k| {
            (0..n)
                .map(|l| if k == l { c.entries[k][k] - c.trace } else { c.entries[k][l] })
                .collect()
        })
        .collect()
}

pub fn build_force(c: &MomentMatrix, phi: &SpaceTimeProfile) -> Result<Forcing> {
    Forcing::new(force_coefficients(c), phi.clone())
}

/// One smooth bump `w Π_i b((x_i − c_i)/h_i)` active on `[start, end]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BumpComponent {
    pub center: Vec<f64>,
    pub half_widths: Vec<f64>,
    #[serde(default = "unit")]
    pub weight: f64,
    #[serde(default)]
    pub start: f64,
    pub end: f64,
}

fn unit() -> f64 {
    1.0
}

/// Base profile `Ψ` before normalization and rescaling.
#[derive(Clone, Debug, PartialEq)]
pub enum ProfileShape {
    Bumps(Vec<BumpComponent>),
    /// Grid samples; rescaling interpolates them.
    Sampled(SpaceTimeProfile),
}

impl ProfileShape {
    /// Smooth bump on `[−1, 1]^n × [0, 1/4]`.
    pub fn default_bump(dim: usize) -> Self {
        ProfileShape::Bumps(vec![BumpComponent {
            center: vec![0.0; dim],
            half_widths: vec![1.0; dim],
            weight: 1.0,
            start: 0.0,
            end: 0.25,
        }])
    }

    /// Half-width `M` of the smallest centered cube containing the spatial support.
    pub fn half_extent(&self) -> f64 {
        match self {
            ProfileShape::Bumps(b) => b
                .iter()
                .flat_map(|c| c.center.iter().zip(&c.half_widths).map(|(x, h)| x.abs() + h))
                .fold(0.0, f64::max),
            ProfileShape::Sampled(p) => {
                let g = p.grid();
                let mut idx = vec![0usize; g.dim];
                let mut m: f64 = 0.0;
                for t in p.terms() {
                    for (flat, v) in t.space.iter().enumerate() {
                        if *v != 0.0 {
                            g.unravel(flat, &mut idx);
                            for &i in &idx {
                                m = m.max(g.coord(i).abs() + g.spacing());
                            }
                        }
                    }
                }
                m
            }
        }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if let ProfileShape::Bumps(b) = self {
            if b.is_empty() {
                return Err(Error::InvalidArgument("profile has no components".into()));
            }
            for c in b {
                if c.center.len() != dim || c.half_widths.len() != dim || c.half_widths.iter().any(|h| !(*h > 0.0)) {
                    return Err(Error::InvalidArgument(format!("bad bump component {c:?}")));
                }
                TimeShape::Bump { start: c.start, end: c.end }.validate()?;
            }
        }
        Ok(())
    }

    /// Samples of `R^{−n} Ψ(x/R, t)` on the grid of `sp`.
    fn rescaled(&self, sp: &Spectral, r: f64) -> Result<SpaceTimeProfile> {
        let g = sp.grid();
        self.validate(g.dim)?;
        let scale = r.powi(-(g.dim as i32));
        match self {
            ProfileShape::Bumps(b) => {
                let terms = b
                    .iter()
                    .map(|c| ProfileTerm {
                        space: sample(g, |x| {
                            let mut v = c.weight * scale;
                            for d in 0..g.dim {
                                v *= bump((x[d] / r - c.center[d]) / c.half_widths[d]);
                            }
                            v
                        }),
                        shape: TimeShape::Bump { start: c.start, end: c.end },
                    })
                    .collect();
                SpaceTimeProfile::new(g, terms)
            }
            ProfileShape::Sampled(p) => {
                g.ensure_same(p.grid())?;
                let spaces: Vec<Vec<f64>> = p.terms().iter().map(|t| t.space.clone()).collect();
                let dilated = if r == 1.0 { spaces } else { dilate(g, &spaces, 1.0 / r) };
                let terms = dilated
                    .into_iter()
                    .zip(p.terms())
                    .map(|(s, t)| ProfileTerm {
                        space: s.into_iter().map(|v| v * scale).collect(),
                        shape: t.shape.clone(),
                    })
                    .collect();
                SpaceTimeProfile::new(g, terms)
            }
        }
    }
}

/// Normalized profile `φ(x,t) = R^{−n} Ψ(x/R, t) / ∫∫Ψ` on a grid.
#[derive(Clone, Debug)]
pub struct ForceProfile {
    pub shape: ProfileShape,
    /// `∫∫` of the rescaled samples before normalization.
    pub normalization: f64,
    pub radius: f64,
    phi: SpaceTimeProfile,
}

/// `∫∫|Ψ|`, by trapezoidal quadrature in time over the shape knots and a
/// uniform refinement.
fn abs_space_time_integral(p: &SpaceTimeProfile) -> f64 {
    let times = time_samples(p);
    let dv = p.grid().cell_volume();
    let vals: Vec<f64> = times
        .iter()
        .map(|&t| p.value_at(t).iter().map(|v| v.abs()).sum::<f64>() * dv)
        .collect();
    times.windows(2).zip(vals.windows(2)).map(|(t, v)| 0.5 * (t[1] - t[0]) * (v[0] + v[1])).sum()
}

fn time_samples(p: &SpaceTimeProfile) -> Vec<f64> {
    let end = p.duration();
    let mut t: Vec<f64> = (0..=512).map(|i| end * i as f64 / 512.0).collect();
    for term in p.terms() {
        match term.shape {
            TimeShape::Hat { left, center, right } => t.extend([left, center, right]),
            TimeShape::Bump { start, end } | TimeShape::Indicator { start, end } => t.extend([start, end]),
        }
    }
    t.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
    t.dedup();
    t
}

impl ForceProfile {
    /// Normalizes `Ψ` at radius 1; fails when `|∫∫Ψ| < 10⁻⁸ ∫∫|Ψ|`.
    pub fn normalize(sp: &Spectral, shape: ProfileShape) -> Result<Self> {
        Self::build(sp, shape, 1.0)
    }

    pub fn with_radius(&self, sp: &Spectral, r: f64) -> Result<Self> {
        Self::build(sp, self.shape.clone(), r)
    }

    fn build(sp: &Spectral, shape: ProfileShape, r: f64) -> Result<Self> {
        if !(r > 0.0) || !r.is_finite() {
            return Err(Error::InvalidArgument(format!("radius must be positive, got {r}")));
        }
        let raw = shape.rescaled(sp, r)?;
        let integral = raw.integral();
        let threshold = 1e-8 * abs_space_time_integral(&raw);
        if !(integral.abs() >= threshold) || integral == 0.0 {
            return Err(Error::DegenerateProfile { integral, threshold });
        }
        Ok(ForceProfile {
            shape,
            normalization: integral,
            radius: r,
            phi: raw.scaled(1.0 / integral),
        })
    }

    pub fn phi(&self) -> &SpaceTimeProfile {
        &self.phi
    }

    pub fn duration(&self) -> f64 {
        self.phi.duration()
    }

    /// Spatial half-extent `R·M` of the rescaled support.
    pub fn support_half_width(&self) -> f64 {
        self.radius * self.shape.half_extent()
    }
}

/// Norms of the data entering `J`, `K`, `L` and the smallness conditions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataNorms {
    pub l1: f64,
    pub l2: f64,
    /// `‖a‖_n`.
    pub ln: f64,
    /// `‖a‖_{4n/(3+2n)}`.
    pub l_mid: f64,
    /// `∫|x||a|`.
    pub weighted: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Functionals {
    pub j: f64,
    pub k: f64,
    pub l: f64,
    pub gamma: f64,
    pub norms: DataNorms,
}

/// Refinement used for the non-smooth integrands of the functionals.
pub fn default_quadrature(dim: usize) -> Quadrature {
    Quadrature::upsampled(if dim == 2 { 4 } else { 2 })
}

pub fn data_norms(sp: &Spectral, a: &VectorField, quad: Quadrature) -> Result<DataNorms> {
    let n = sp.grid().dim as f64;
    let mid = 4.0 * n / (3.0 + 2.0 * n);
    let r = norms::norms_and_moments(
        sp,
        a,
        &[Exponent::Finite(1.0), Exponent::Finite(2.0), Exponent::Finite(n), Exponent::Finite(mid)],
        quad,
    )?;
    Ok(DataNorms {
        l1: r.lp_values[0].value,
        l2: r.lp_values[1].value,
        ln: r.lp_values[2].value,
        l_mid: r.lp_values[3].value,
        weighted: r.weighted_first_moment,
    })
}

impl Functionals {
    pub fn from_norms(dim: usize, norms: DataNorms, gamma: f64) -> Self {
        let n = dim as f64;
        let j = (norms.l1 * norms.weighted).sqrt() + norms.l_mid * norms.l_mid;
        let core = j.powf(4.0 / (n + 1.0)) * norms.l2.powf(2.0 * (n - 1.0) / (n + 1.0));
        Functionals {
            j,
            k: norms.weighted + core,
            l: gamma * core,
            gamma,
            norms,
        }
    }

    /// `J^{4/(n+1)} ‖a‖₂^{2(n−1)/(n+1)}`.
    pub fn energy_scale(&self, dim: usize) -> f64 {
        let n = dim as f64;
        self.j.powf(4.0 / (n + 1.0)) * self.norms.l2.powf(2.0 * (n - 1.0) / (n + 1.0))
    }
}

pub fn functionals(sp: &Spectral, a: &VectorField, gamma: f64, quad: Quadrature) -> Result<Functionals> {
    Ok(Functionals::from_norms(sp.grid().dim, data_norms(sp, a, quad)?, gamma))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub name: String,
    pub left: f64,
    pub right: f64,
    /// `(right − left)/right`; absent when the right side vanishes.
    pub margin: Option<f64>,
    pub pass: bool,
}

impl Condition {
    fn new(name: &str, left: f64, right: f64) -> Self {
        Condition {
            name: name.into(),
            left,
            right,
            margin: (right > 0.0).then(|| (right - left) / right),
            pass: left <= right,
        }
    }

    /// Holds with relative slack at least `m` (vacuous `0 ≤ 0` counts).
    pub fn holds_with_margin(&self, m: f64) -> bool {
        match self.margin {
            Some(x) => x >= m,
            None => self.left == 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmallnessReport {
    pub radius: f64,
    pub conditions: Vec<Condition>,
}

impl SmallnessReport {
    pub fn get(&self, name: &str) -> Option<&Condition> {
        self.conditions.iter().find(|c| c.name == name)
    }

    pub fn all_pass(&self) -> bool {
        self.conditions.iter().all(|c| c.pass)
    }

    pub fn force_conditions(&self) -> impl Iterator<Item = &Condition> {
        self.conditions.iter().filter(|c| c.name.starts_with('A'))
    }

    /// The force condition with the smallest margin.
    pub fn binding(&self) -> Option<String> {
        self.force_conditions()
            .filter(|c| c.margin.is_some())
            .min_by(|a, b| a.margin.partial_cmp(&b.margin).expect("finite margins"))
            .map(|c| c.name.clone())
    }
}

/// Time profile of `‖φ(s)‖_p` for the exponents used by the conditions.
struct PhiNorms {
    times: Vec<f64>,
    /// `values[i][s]` for exponent `i`.
    values: Vec<Vec<f64>>,
}

impl PhiNorms {
    fn new(phi: &SpaceTimeProfile, exps: &[f64]) -> Self {
        let g = phi.grid();
        let times = time_samples(phi);
        let dv = g.cell_volume();
        let norm = |v: &[f64], p: f64| norms::lp_of_magnitude(v, Exponent::Finite(p), dv);
        let values = if let [term] = phi.terms() {
            let abs: Vec<f64> = term.space.iter().map(|v| v.abs()).collect();
            exps.iter()
                .map(|&p| {
                    let base = norm(&abs, p);
                    times.iter().map(|&t| term.shape.value(t).abs() * base).collect()
                })
                .collect()
        } else {
            let mut values = vec![Vec::with_capacity(times.len()); exps.len()];
            for &t in &times {
                let abs: Vec<f64> = phi.value_at(t).into_iter().map(f64::abs).collect();
                for (i, &p) in exps.iter().enumerate() {
                    values[i].push(norm(&abs, p));
                }
            }
            values
        };
        PhiNorms { times, values }
    }

    fn sup_weighted(&self, i: usize, power: f64, below: f64) -> f64 {
        self.times
            .iter()
            .zip(&self.values[i])
            .filter(|(t, _)| **t > 0.0 && **t < below)
            .map(|(t, v)| t.powf(power) * v)
            .fold(0.0, f64::max)
    }

    fn integral(&self, i: usize) -> f64 {
        self.times
            .windows(2)
            .zip(self.values[i].windows(2))
            .map(|(t, v)| 0.5 * (t[1] - t[0]) * (v[0] + v[1]))
            .sum()
    }
}

/// Evaluates (S), (S′) and (A1)–(A6) literally, with the calibrated
/// surrogates for `δ`, `δ′`, `δ″`, `c₁` and `γ` (the latter inside `fun.l`).
pub fn check_smallness(
    sp: &Spectral,
    fun: &Functionals,
    profile: &ForceProfile,
    cal: &Constants,
) -> Result<SmallnessReport> {
    let n = sp.grid().dim as f64;
    let nm = &fun.norms;
    let exps = [2.0, n, 2.0 * n, 2.0 * n / (n - 1.0), 2.0 * n / (2.0 * n - 1.0)];
    let pn = PhiNorms::new(profile.phi(), &exps);
    let (i2, i_n, i2n, i_a5, i_a6) = (0, 1, 2, 3, 4);
    let inf = f64::INFINITY;
    let l = fun.l;
    let tail = pn.sup_weighted(i2, (n + 3.0) / 4.0, inf);
    let s_prime = nm.ln.powf(1.0 / n) * (fun.j.powf(1.0 - 1.0 / n) + nm.l2.powf(1.0 - 1.0 / n));
    let conditions = vec![
        Condition::new("S", nm.ln, cal.delta),
        Condition::new("S'", s_prime, cal.delta_prime),
        Condition::new("A1", l * pn.sup_weighted(i2n, 0.75, inf), nm.ln),
        Condition::new("A2", l * pn.sup_weighted(i_n, 0.5, inf), nm.ln),
        Condition::new("A3", cal.c1 * l * pn.sup_weighted(i2, 0.5, inf), nm.l2),
        Condition::new("A4", l * pn.sup_weighted(i2, 0.875, inf), nm.l_mid),
        Condition::new("A5", l * (pn.integral(i_a5) + tail), (nm.weighted * nm.l1).sqrt()),
        Condition::new(
            "A6",
            (pn.sup_weighted(i2, 0.5, 1.0) + pn.integral(i_a6) + tail) * nm.l_mid,
            cal.delta_double_prime,
        ),
    ];
    Ok(SmallnessReport {
        radius: profile.radius,
        conditions,
    })
}

/// Largest admissible support half-width: the box minus its boundary band.
pub fn box_capacity(sp: &Spectral) -> f64 {
    7.0 / 16.0 * sp.grid().box_length
}

#[derive(Clone, Debug)]
pub struct RadiusChoice {
    pub profile: ForceProfile,
    pub report: SmallnessReport,
    pub binding: Option<String>,
    pub tried: Vec<f64>,
}

/// Doubles `R` from 1 until (A1)–(A6) hold with 10% margin.
pub fn choose_r(sp: &Spectral, fun: &Functionals, base: &ForceProfile, cal: &Constants) -> Result<RadiusChoice> {
    let cap = box_capacity(sp);
    let m = base.shape.half_extent();
    let mut r = 1.0;
    let mut tried = Vec::new();
    loop {
        if r * m > cap {
            return Err(Error::BoxTooSmall {
                needed: r * m,
                available: cap,
                needed_box_length: 16.0 / 7.0 * r * m,
            });
        }
        tried.push(r);
        let profile = base.with_radius(sp, r)?;
        let report = check_smallness(sp, fun, &profile, cal)?;
        if report.force_conditions().all(|c| c.holds_with_margin(0.1)) {
            let binding = report.binding();
            return Ok(RadiusChoice {
                profile,
                report,
                binding,
                tried,
            });
        }
        r *= 2.0;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesisConfig {
    /// Stop when `‖c^(m) − c^(m−1)‖_F ≤ tol ‖c^(m)‖_F`.
    pub tol: f64,
    pub max_iterations: usize,
    /// Moment integrals run to this time; defaults to the end of the time grid.
    pub t_cut: Option<f64>,
    /// Largest admissible tail bound relative to `‖c‖_F`.
    pub horizon_tolerance: f64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            tol: 1e-6,
            max_iterations: 25,
            t_cut: None,
            horizon_tolerance: DEFAULT_HORIZON_TOLERANCE,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthesisState {
    /// Index of the last moment matrix, `c^(M)`.
    pub m: usize,
    pub c_history: Vec<MomentMatrix>,
    /// `‖c^(m) − c^(m−1)‖_F` for `m ≥ 1`.
    pub deltas: Vec<f64>,
    pub converged: bool,
    /// `f^(∞)`, built from `c^(M)`.
    pub forcing: Forcing,
    /// Flow driven by `f^(∞)`.
    pub trajectory: Trajectory,
    /// `moment_matrix(v)`.
    pub final_moments: MomentMatrix,
}

impl SynthesisState {
    /// Successive contraction ratios `‖Δc^(m)‖ / ‖Δc^(m−1)‖`.
    pub fn ratios(&self) -> Vec<f64> {
        self.deltas.windows(2).map(|w| if w[0] > 0.0 { w[1] / w[0] } else { 0.0 }).collect()
    }

    /// `‖moment_matrix(v) − c^(M)‖_F / ‖c^(M)‖_F`.
    pub fn consistency(&self) -> f64 {
        let c = self.c_history.last().expect("at least c^(0)");
        let d = self.final_moments.distance(c);
        if c.frobenius() > 0.0 {
            d / c.frobenius()
        } else {
            d
        }
    }

    /// `β_{kl} = c_{kl}(v) − ∫∫f^(∞)_{kl}`.
    pub fn beta(&self) -> Vec<Vec<f64>> {
        sub(&self.final_moments.entries, &self.forcing.integrals())
    }
}

/// Outer loop: solve with `f^(m)`, measure `c^(m)`, rebuild the force, until
/// the moment matrices settle. `f^(0) = 0`.
pub fn synthesize(
    sp: &Spectral,
    a: &VectorField,
    profile: &ForceProfile,
    timegrid: &TimeGrid,
    solver_opts: &SolverOptions,
    cfg: &SynthesisConfig,
) -> Result<SynthesisState> {
    sp.grid().ensure_same(a.grid())?;
    let n = sp.grid().dim;
    let t_cut = cfg.t_cut.unwrap_or(timegrid.t_end);
    let inner = SolverOptions {
        snapshots: SnapshotPolicy::NormsOnly,
        ..solver_opts.clone()
    };
    let phi = profile.phi();
    solver::check_profile_resolution(sp.grid(), phi)?;
    let solve = |c: &MomentMatrix, opts: &SolverOptions| -> Result<(Forcing, Trajectory)> {
        let f = build_force(c, phi)?;
        let tr = solver::integrate(sp, a, Some(&f), timegrid, opts)?;
        Ok((f, tr))
    };

    let (_, tr0) = solve(&MomentMatrix::zeros(n), &inner)?;
    let mut history = vec![moment_matrix_with(&tr0, t_cut, cfg.horizon_tolerance)?];
    let mut deltas: Vec<f64> = Vec::new();
    let mut converged = false;
    let mut growing = 0;
    for m in 1..=cfg.max_iterations {
        let prev = history.last().expect("nonempty");
        let (_, tr) = solve(prev, &inner)?;
        let c = moment_matrix_with(&tr, t_cut, cfg.horizon_tolerance)?;
        let delta = c.distance(prev);
        log::info!("synthesis m = {m}: |dc| = {delta:.3e}, |c| = {:.6e}", c.frobenius());
        history.push(c);
        deltas.push(delta);
        let cur = history.last().expect("nonempty");
        if delta <= cfg.tol * cur.frobenius() || delta == 0.0 {
            converged = true;
            break;
        }
        let k = deltas.len();
        if k >= 2 && deltas[k - 1] >= deltas[k - 2] {
            growing += 1;
            if growing >= 3 {
                return Err(Error::SynthesisDivergence {
                    iteration: m,
                    ratios: deltas.windows(2).map(|w| w[1] / w[0]).collect(),
                });
            }
        } else {
            growing = 0;
        }
    }
    let c_last = history.last().expect("nonempty").clone();
    let (forcing, trajectory) = solve(&c_last, solver_opts)?;
    let final_moments = moment_matrix_with(&trajectory, t_cut, cfg.horizon_tolerance)?;
    Ok(SynthesisState {
        m: history.len() - 1,
        c_history: history,
        deltas,
        converged,
        forcing,
        trajectory,
        final_moments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;

    #[test]
    fn force_coefficients_follow_the_recursion() {
        let c = MomentMatrix::from_entries(vec![vec![2.0, 1.0], vec![1.0, 3.0]]);
        assert_eq!(c.trace, 5.0);
        assert_eq!(force_coefficients(&c), vec![vec![-3.0, 1.0], vec![1.0, -2.0]]);
        let id = MomentMatrix::from_entries(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(force_coefficients(&id), vec![vec![-1.0, 0.0], vec![0.0, -1.0]]);
    }

    #[test]
    fn normalization_and_sign() {
        let g = GridSpec::new(2, 64, 16.0).unwrap();
        let sp = Spectral::new(&g).unwrap();
        let mut shape = ProfileShape::default_bump(2);
        let p = ForceProfile::normalize(&sp, shape.clone()).unwrap();
        assert!((p.phi().integral() - 1.0).abs() < 1e-12);
        if let ProfileShape::Bumps(b) = &mut shape {
            b[0].weight = -5.0;
        }
        let q = ForceProfile::normalize(&sp, shape).unwrap();
        assert!(q.normalization < 0.0);
        assert!((q.phi().integral() - 1.0).abs() < 1e-12);
        assert!(q.phi().terms()[0].space.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn canceling_profile_is_degenerate() {
        let g = GridSpec::new(2, 64, 16.0).unwrap();
        let sp = Spectral::new(&g).unwrap();
        let comp = |x: f64, w: f64| BumpComponent {
            center: vec![x, 0.0],
            half_widths: vec![1.0, 1.0],
            weight: w,
            start: 0.0,
            end: 0.1,
        };
        let shape = ProfileShape::Bumps(vec![comp(-2.0, 1.0), comp(2.0, -1.0)]);
        assert!(matches!(ForceProfile::normalize(&sp, shape), Err(Error::DegenerateProfile { .. })));
    }

    #[test]
    fn rescaling_changes_lp_norms_by_the_dilation_factor() {
        // Sample R^{-n}Φ(x/R) on a box of side 2L and Φ on a box of side L with
        // the same N, so both sample Φ at the same points.
        let g_big = GridSpec::new(2, 64, 32.0).unwrap();
        let g = GridSpec::new(2, 64, 16.0).unwrap();
        let (sp_big, sp) = (Spectral::new(&g_big).unwrap(), Spectral::new(&g).unwrap());
        let shape = ProfileShape::default_bump(2);
        let big = shape.rescaled(&sp_big, 2.0).unwrap();
        let base = shape.rescaled(&sp, 1.0).unwrap();
        let t = 0.125;
        let l2 = |p: &SpaceTimeProfile| {
            let m: Vec<f64> = p.value_at(t).iter().map(|v| v.abs()).collect();
            norms::lp_of_magnitude(&m, Exponent::Finite(2.0), p.grid().cell_volume())
        };
        // R^{-n(1-1/p)} = 1/2 for n = p = 2.
        assert!((l2(&big) / l2(&base) - 0.5).abs() < 1e-10);
        assert!((big.integral() / base.integral() - 1.0).abs() < 1e-10);
        let p = ForceProfile::normalize(&sp, shape).unwrap().with_radius(&sp, 2.0).unwrap();
        assert!((p.phi().integral() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_data_pass_all_conditions() {
        let g = GridSpec::new(2, 64, 16.0).unwrap();
        let sp = Spectral::new(&g).unwrap();
        let fun = functionals(&sp, &VectorField::zeros(&g), 1.0, Quadrature::default()).unwrap();
        assert_eq!((fun.j, fun.k, fun.l), (0.0, 0.0, 0.0));
        let p = ForceProfile::normalize(&sp, ProfileShape::default_bump(2)).unwrap();
        let cal = crate::calibration::Calibration::shipped().constants(2).unwrap();
        assert!(check_smallness(&sp, &fun, &p, &cal).unwrap().all_pass());
    }
}
