//! Mild solutions with forcing: exponential-integrator marching, Picard
//! iteration over the Duhamel form, and the norm bookkeeping shared by both.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::container::{self, FieldKind};
use crate::error::{Error, Result};
use crate::field::{Components, FieldLike, VectorField};
use crate::forcing::{Forcing, SpaceTimeProfile, TimeShape};
use crate::grid::GridSpec;
use crate::norms::{self, Exponent, LpValue};
use crate::spectral::Spectral;
use crate::timegrid::TimeGrid;

type Spec = Vec<Vec<Complex64>>;

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

/// Product-integration weights for one step `h` at rate `λ`, with `z = hλ`:
/// `E = e^{-z}`, `A = (1-E)/z`, `B = (1-E-zE)/z²`, so that
/// `∫_0^h e^{-(h-s)λ} g(s) ds = h[(A-B) g(h) + B g(0)]` for linear `g`.
pub fn step_weights(z: f64) -> (f64, f64, f64) {
    if z < 0.05 {
        // Alternating series Σ (-z)^m/(m+1)! and Σ (-z)^m/(m!(m+2)).
        let (mut a, mut b) = (0.0, 0.0);
        let mut pow_fact = 1.0; // (-z)^m / m!
        for m in 0..10 {
            a += pow_fact / (m as f64 + 1.0);
            b += pow_fact / (m as f64 + 2.0);
            pow_fact *= -z / (m as f64 + 1.0);
        }
        ((-z).exp(), a, b)
    } else {
        let e = (-z).exp();
        (e, (1.0 - e) / z, (1.0 - e - z * e) / (z * z))
    }
}

pub struct Weights {
    pub e: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl Weights {
    pub fn new(k2: &[f64], h: f64) -> Self {
        let len = k2.len();
        let (mut e, mut a, mut b) = (Vec::with_capacity(len), Vec::with_capacity(len), Vec::with_capacity(len));
        for &k in k2 {
            let (x, y, w) = step_weights(h * k);
            e.push(x);
            a.push(y);
            b.push(w);
        }
        Weights { e, a, b }
    }
}

/// Caches weights by step length; uniform stretches reuse one table.
#[derive(Default)]
struct WeightCache {
    map: HashMap<u64, Rc<Weights>>,
}

impl WeightCache {
    fn get(&mut self, k2: &[f64], h: f64) -> Rc<Weights> {
        if self.map.len() > 64 {
            self.map.clear();
        }
        self.map.entry(h.to_bits()).or_insert_with(|| Rc::new(Weights::new(k2, h))).clone()
    }
}

fn zeros(n: usize, len: usize) -> Spec {
    vec![vec![Complex64::default(); len]; n]
}

/// Internal step rule: between output nodes `t_i < t_{i+1}` the solver takes
/// equal substeps no longer than `max(h_min, fraction·t_i)` (capped by
/// `h_max`), and no longer than `force_duration / force_substeps` while the
/// force is active.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StepRule {
    pub fraction: f64,
    pub h_min: f64,
    pub h_max: f64,
    pub force_substeps: usize,
}

impl Default for StepRule {
    fn default() -> Self {
        StepRule {
            fraction: 0.02,
            h_min: 1e-3,
            h_max: 0.5,
            force_substeps: 64,
        }
    }
}

impl StepRule {
    /// Step times (starting at 0) and, for each output node, its index in the plan.
    pub fn plan(&self, grid: &TimeGrid, force_duration: f64) -> (Vec<f64>, Vec<usize>) {
        let nodes = grid.nodes();
        let mut times = vec![0.0];
        let mut at = vec![0];
        for w in nodes.windows(2) {
            let (t0, t1) = (w[0], w[1]);
            let mut cap = (self.fraction * t0).max(self.h_min).min(self.h_max);
            if t0 < force_duration {
                cap = cap.min(force_duration / self.force_substeps as f64);
            }
            let m = ((t1 - t0) / cap).ceil().max(1.0) as usize;
            for j in 1..=m {
                times.push(if j == m { t1 } else { t0 + (t1 - t0) * j as f64 / m as f64 });
            }
            at.push(times.len() - 1);
        }
        (times, at)
    }
}

/// Exact-in-space Duhamel integral of a separable force,
/// `D(t) = ∫_0^t e^{(t-s)Δ} P div f(s) ds`.
///
/// For each term `X_i θ_i` the time integral reduces to the scalar
/// `q_i(t, λ) = ∫ e^{-(t-s)λ} θ_i(s) ds` per distinct `λ = |k|²`, which is
/// marched with product-integration weights exact for piecewise-linear `θ`.
pub struct ForceDuhamel<'a> {
    sp: &'a Spectral,
    terms: Vec<(TimeShape, Spec)>,
    /// Distinct `|k|²` values and the index of each mode into them.
    lambdas: Vec<f64>,
    lambda_of: Vec<u32>,
    duration: f64,
    /// Substeps per unit time inside the force window.
    density: f64,
}

impl<'a> ForceDuhamel<'a> {
    /// Precomputes `P div(C X_i)` per term and doubles the time resolution
    /// until `D` at the end of the force window changes by less than `tol`
    /// (relative).
    pub fn new(sp: &'a Spectral, forcing: Option<&Forcing>, tol: f64) -> Result<Self> {
        let g = sp.grid();
        let n = g.dim;
        let mut terms = Vec::new();
        let mut duration: f64 = 0.0;
        if let Some(f) = forcing.filter(|f| !f.is_zero()) {
            g.ensure_same(f.profile.grid())?;
            for term in f.profile.terms() {
                check_support(g, &term.space)?;
                let mut x: Vec<Complex64> = term.space.iter().map(|&v| Complex64::new(v, 0.0)).collect();
                sp.fft().forward(&mut x);
                let mut v = zeros(n, g.len());
                for (j, vj) in v.iter_mut().enumerate() {
                    for flat in 0..g.len() {
                        let mut s = 0.0;
                        for l in 0..n {
                            s += sp.kd(l)[flat] * f.coeffs[j][l];
                        }
                        vj[flat] = I * s * x[flat];
                    }
                }
                sp.leray_in_place(&mut v);
                duration = duration.max(term.shape.support().1);
                terms.push((term.shape.clone(), v));
            }
        }
        let mut lambdas = Vec::new();
        let mut lambda_of = Vec::new();
        if !terms.is_empty() {
            let mut index: HashMap<u64, u32> = HashMap::new();
            lambda_of = sp
                .k2()
                .iter()
                .map(|&k| {
                    *index.entry(k.to_bits()).or_insert_with(|| {
                        lambdas.push(k);
                        (lambdas.len() - 1) as u32
                    })
                })
                .collect();
        }
        let mut fd = ForceDuhamel {
            sp,
            terms,
            lambdas,
            lambda_of,
            duration,
            density: 0.0,
        };
        if fd.terms.is_empty() {
            return Ok(fd);
        }
        let mut m = 64usize;
        fd.density = m as f64 / duration;
        let mut prev = fd.value_at(duration);
        loop {
            m *= 2;
            if m > 1 << 22 {
                return Err(Error::Resolution("force Duhamel integral does not converge in time".into()));
            }
            fd.density = m as f64 / duration;
            let next = fd.value_at(duration);
            let (mut diff, mut norm) = (0.0, 0.0);
            for (a, b) in next.iter().zip(&prev) {
                for (x, y) in a.iter().zip(b) {
                    diff += (x - y).norm_sqr();
                    norm += x.norm_sqr();
                }
            }
            prev = next;
            if diff.sqrt() <= tol * norm.sqrt() {
                break;
            }
        }
        log::debug!("force Duhamel: {m} substeps over the force window");
        Ok(fd)
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }

    /// `q_i(t_b) = ∫_{t_a}^{t_b} e^{-(t_b-s)λ} θ_i(s) ds` per term and distinct λ.
    fn increments(&self, ta: f64, tb: f64) -> Vec<Vec<f64>> {
        let m = ((tb - ta) * self.density).ceil().max(1.0) as usize;
        let h = (tb - ta) / m as f64;
        let w: Vec<(f64, f64, f64)> = self.lambdas.iter().map(|&l| step_weights(h * l)).collect();
        self.terms
            .iter()
            .map(|(shape, _)| {
                let theta: Vec<f64> = (0..=m)
                    .map(|j| shape.value(if j == m { tb } else { ta + h * j as f64 }))
                    .collect();
                if theta.iter().all(|&v| v == 0.0) {
                    return vec![0.0; self.lambdas.len()];
                }
                w.iter()
                    .map(|&(e, a, b)| {
                        let mut q = 0.0;
                        for j in 0..m {
                            q = q * e + h * ((a - b) * theta[j + 1] + b * theta[j]);
                        }
                        q
                    })
                    .collect()
            })
            .collect()
    }

    /// Advances `d = D(t_a)` to `D(t_b)`.
    pub fn advance(&self, d: &mut Spec, ta: f64, tb: f64) {
        if self.terms.is_empty() || tb <= ta {
            return;
        }
        let mid = tb.min(self.duration);
        if ta < mid {
            let q = self.increments(ta, mid);
            self.sp.heat_in_place(d, mid - ta);
            for ((_, v), qi) in self.terms.iter().zip(&q) {
                for (dc, vc) in d.iter_mut().zip(v) {
                    for (f, x) in dc.iter_mut().enumerate() {
                        *x += vc[f] * qi[self.lambda_of[f] as usize];
                    }
                }
            }
        }
        let rest = tb - mid.max(ta);
        if rest > 0.0 {
            self.sp.heat_in_place(d, rest);
        }
    }

    pub fn value_at(&self, t: f64) -> Spec {
        let mut d = zeros(self.sp.grid().dim, self.sp.grid().len());
        self.advance(&mut d, 0.0, t);
        d
    }
}

/// Rejects profiles with a term narrower than four cells along some axis.
pub fn check_profile_resolution(g: &GridSpec, profile: &SpaceTimeProfile) -> Result<()> {
    profile.terms().iter().try_for_each(|t| check_support(g, &t.space))
}

fn check_support(g: &GridSpec, space: &[f64]) -> Result<()> {
    let peak = space.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        return Ok(());
    }
    let mut lo = vec![usize::MAX; g.dim];
    let mut hi = vec![0usize; g.dim];
    let mut idx = vec![0usize; g.dim];
    for (flat, v) in space.iter().enumerate() {
        if v.abs() > 1e-12 * peak {
            g.unravel(flat, &mut idx);
            for d in 0..g.dim {
                lo[d] = lo[d].min(idx[d]);
                hi[d] = hi[d].max(idx[d]);
            }
        }
    }
    if let Some(d) = (0..g.dim).find(|&d| hi[d] - lo[d] + 1 < 4) {
        return Err(Error::Resolution(format!(
            "force profile spans {} cells along axis {d}; at least 4 are needed",
            hi[d] - lo[d] + 1
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SnapshotPolicy {
    #[default]
    All,
    NormsOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub nonlinear: bool,
    pub exponents: Vec<Exponent>,
    pub snapshots: SnapshotPolicy,
    pub step: StepRule,
    /// Relative convergence target for the force Duhamel integral.
    pub force_tolerance: f64,
    /// Largest admissible energy fraction in the outer spectral shell.
    pub resolution_limit: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            nonlinear: true,
            exponents: Vec::new(),
            snapshots: SnapshotPolicy::All,
            step: StepRule::default(),
            force_tolerance: 1e-8,
            resolution_limit: 1e-3,
        }
    }
}

impl SolverOptions {
    /// Exponents recorded at every node: the requested ones plus
    /// `1, 2, n, 2n, ∞`.
    pub fn resolved_exponents(&self, dim: usize) -> Vec<Exponent> {
        let mut v = vec![
            Exponent::Finite(1.0),
            Exponent::Finite(2.0),
            Exponent::Finite(dim as f64),
            Exponent::Finite(2.0 * dim as f64),
            Exponent::Infinity,
        ];
        for &p in &self.exponents {
            if !v.contains(&p) {
                v.push(p);
            }
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub t: f64,
    /// Norms in the order of [`Trajectory::exponents`].
    pub norms: Vec<f64>,
    /// Running `∫_0^t ‖u‖₂² ds`.
    pub energy_integral: f64,
    /// Running `∫_0^t ∫ u_k u_l dx ds`.
    pub gram: Vec<Vec<f64>>,
    pub max_divergence: f64,
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub grid: GridSpec,
    pub timegrid: TimeGrid,
    pub exponents: Vec<Exponent>,
    pub records: Vec<NodeRecord>,
    /// Spectral snapshots at the nodes; empty under [`SnapshotPolicy::NormsOnly`].
    pub snapshots: Vec<VectorField>,
}

impl Trajectory {
    pub fn times(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.t).collect()
    }

    fn exponent_index(&self, p: f64) -> Option<usize> {
        self.exponents.iter().position(|e| e.value() == p)
    }

    /// `(t, ‖u(t)‖_p)` at every node, if `p` was recorded.
    pub fn series(&self, p: f64) -> Option<Vec<(f64, f64)>> {
        let i = self.exponent_index(p)?;
        Some(self.records.iter().map(|r| (r.t, r.norms[i])).collect())
    }

    pub fn l2_series(&self) -> Vec<(f64, f64)> {
        self.series(2.0).expect("L2 is always recorded")
    }

    pub fn energy_integral(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.energy_integral)
    }

    pub fn gram(&self) -> Vec<Vec<f64>> {
        self.records
            .last()
            .map_or_else(|| vec![vec![0.0; self.grid.dim]; self.grid.dim], |r| r.gram.clone())
    }

    pub fn max_divergence(&self) -> f64 {
        self.records.iter().map(|r| r.max_divergence).fold(0.0, f64::max)
    }

    pub fn has_snapshots(&self) -> bool {
        !self.snapshots.is_empty()
    }
}

/// `∫ u_k u_l dx` for spectral `u` (Parseval).
pub fn gram_of(sp: &Spectral, u: &Spec) -> Vec<Vec<f64>> {
    let n = u.len();
    let w = sp.grid().cell_volume() / sp.grid().len() as f64;
    let mut g = vec![vec![0.0; n]; n];
    for k in 0..n {
        for l in k..n {
            let s: f64 = u[k].iter().zip(&u[l]).map(|(a, b)| a.re * b.re + a.im * b.im).sum();
            g[k][l] = s * w;
            g[l][k] = s * w;
        }
    }
    g
}

/// Energy fraction in modes beyond 80% of the dealiasing cutoff on any axis.
fn outer_shell_fraction(sp: &Spectral, u: &Spec) -> f64 {
    let g = sp.grid();
    let cut = 0.8 * g.dealias_fraction * (g.points_per_axis / 2) as f64;
    let mut idx = vec![0usize; g.dim];
    let (mut shell, mut total) = (0.0, 0.0);
    for flat in 0..g.len() {
        let e: f64 = u.iter().map(|c| c[flat].norm_sqr()).sum();
        if e == 0.0 {
            continue;
        }
        total += e;
        g.unravel(flat, &mut idx);
        if idx.iter().any(|&i| g.mode(i).abs() as f64 > cut) {
            shell += e;
        }
    }
    if total == 0.0 {
        0.0
    } else {
        shell / total
    }
}

fn max_divergence_spectral(sp: &Spectral, u: &Spec) -> f64 {
    let len = sp.grid().len();
    let mut d = vec![Complex64::default(); len];
    for (c, comp) in u.iter().enumerate() {
        let k = sp.kd(c);
        for f in 0..len {
            d[f] += I * k[f] * comp[f];
        }
    }
    sp.fft().inverse(&mut d);
    d.iter().map(|v| v.re.abs()).fold(0.0, f64::max)
}

/// Accumulates time integrals along a plan and emits node records.
struct Recorder<'a> {
    sp: &'a Spectral,
    exponents: Vec<Exponent>,
    keep_snapshots: bool,
    resolution_limit: f64,
    t_prev: f64,
    gram_prev: Vec<Vec<f64>>,
    gram_acc: Vec<Vec<f64>>,
    records: Vec<NodeRecord>,
    snapshots: Vec<VectorField>,
}

impl<'a> Recorder<'a> {
    fn new(sp: &'a Spectral, opts: &SolverOptions, u0: &Spec) -> Self {
        let n = sp.grid().dim;
        Recorder {
            sp,
            exponents: opts.resolved_exponents(n),
            keep_snapshots: opts.snapshots == SnapshotPolicy::All,
            resolution_limit: opts.resolution_limit,
            t_prev: 0.0,
            gram_prev: gram_of(sp, u0),
            gram_acc: vec![vec![0.0; n]; n],
            records: Vec::new(),
            snapshots: Vec::new(),
        }
    }

    fn step(&mut self, t: f64, u: &Spec) {
        let g = gram_of(self.sp, u);
        let h = t - self.t_prev;
        for (acc, (a, b)) in self.gram_acc.iter_mut().zip(self.gram_prev.iter().zip(&g)) {
            for (x, (p, q)) in acc.iter_mut().zip(a.iter().zip(b)) {
                *x += 0.5 * h * (p + q);
            }
        }
        self.gram_prev = g;
        self.t_prev = t;
    }

    fn node(&mut self, t: f64, u: &Spec) -> Result<()> {
        let finite = u.iter().flatten().all(|v| v.re.is_finite() && v.im.is_finite());
        let shell = outer_shell_fraction(self.sp, u);
        if !finite || shell > self.resolution_limit {
            return Err(Error::Resolution(format!(
                "at t = {t}: {} (outer-shell energy fraction {shell:.2e}, limit {:.1e}); refine the grid or reduce the amplitude",
                if finite { "spectrum not resolved" } else { "non-finite values" },
                self.resolution_limit
            )));
        }
        let grid = self.sp.grid();
        let values: Vec<Vec<f64>> = u
            .iter()
            .map(|c| {
                let mut w = c.clone();
                self.sp.fft().inverse(&mut w);
                w.into_iter().map(|v| v.re).collect()
            })
            .collect();
        let norms = norms::lp_norms(grid, &values, &self.exponents);
        let energy: f64 = (0..grid.dim).map(|k| self.gram_acc[k][k]).sum();
        self.records.push(NodeRecord {
            t,
            norms,
            energy_integral: energy,
            gram: self.gram_acc.clone(),
            max_divergence: max_divergence_spectral(self.sp, u),
        });
        if self.keep_snapshots {
            self.snapshots
                .push(VectorField::from_spectral(grid, u.clone()).expect("shape fixed by grid"));
        }
        Ok(())
    }

    fn finish(self, timegrid: &TimeGrid) -> Trajectory {
        Trajectory {
            grid: self.sp.grid().clone(),
            timegrid: timegrid.clone(),
            exponents: self.exponents,
            records: self.records,
            snapshots: self.snapshots,
        }
    }
}

fn spectral_data(sp: &Spectral, a: &VectorField) -> Result<Spec> {
    sp.grid().ensure_same(a.grid())?;
    let c = a.components().to_spectral(sp);
    if !c.is_finite() {
        return Err(Error::InvalidArgument("initial data not finite".into()));
    }
    let u = c.into_data();
    let scale = u.iter().flatten().map(|v| v.norm()).fold(0.0, f64::max) / sp.grid().len() as f64;
    let div = max_divergence_spectral(sp, &u);
    if div > 1e-8 * scale.max(f64::MIN_POSITIVE) * sp.grid().max_wavenumber() * sp.grid().len() as f64 {
        return Err(Error::InvalidArgument(format!("initial data not divergence-free (max |div| = {div:.3e})")));
    }
    Ok(u)
}

fn nonlinear(sp: &Spectral, u: &Spec) -> Spec {
    sp.bilinear_spectral(u, None)
}

/// Marching state shared with checkpoint files.
#[derive(Serialize, Deserialize)]
struct CheckpointIndex {
    format: String,
    grid: GridSpec,
    timegrid: TimeGrid,
    nonlinear: bool,
    exponents: Vec<Exponent>,
    records: Vec<NodeRecord>,
    gram_prev: Vec<Vec<f64>>,
    files: Vec<String>,
}

/// Where `integrate` writes node snapshots and its JSON index.
#[derive(Clone, Debug)]
pub struct Checkpoints {
    pub dir: PathBuf,
    pub resume: bool,
}

impl Checkpoints {
    pub fn index_path(&self) -> PathBuf {
        self.dir.join("index.json")
    }

    fn node_file(i: usize) -> String {
        format!("node_{i:05}.bin")
    }
}

/// Second-order exponential time differencing (ETD2RK) of
/// `u_t = Δu − P div(u⊗u) + P div f`, with the force Duhamel term carried
/// exactly alongside.
pub fn integrate(
    sp: &Spectral,
    a: &VectorField,
    forcing: Option<&Forcing>,
    timegrid: &TimeGrid,
    opts: &SolverOptions,
) -> Result<Trajectory> {
    integrate_with(sp, a, forcing, timegrid, opts, None)
}

pub fn integrate_with(
    sp: &Spectral,
    a: &VectorField,
    forcing: Option<&Forcing>,
    timegrid: &TimeGrid,
    opts: &SolverOptions,
    checkpoints: Option<&Checkpoints>,
) -> Result<Trajectory> {
    timegrid.validate()?;
    let mut u = spectral_data(sp, a)?;
    let fd = ForceDuhamel::new(sp, forcing, opts.force_tolerance)?;
    let (times, node_at) = opts.step.plan(timegrid, fd.duration());
    let k2 = sp.k2();
    let (n, len) = (sp.grid().dim, sp.grid().len());

    let mut rec = Recorder::new(sp, opts, &u);
    let mut start = 0usize;
    let mut d = zeros(n, len);
    let mut files = Vec::new();

    if let Some(cp) = checkpoints {
        fs::create_dir_all(&cp.dir)?;
        if cp.resume && cp.index_path().exists() {
            let idx: CheckpointIndex = serde_json::from_str(&fs::read_to_string(cp.index_path())?)?;
            if idx.grid != *sp.grid() || idx.timegrid != *timegrid || idx.nonlinear != opts.nonlinear {
                return Err(Error::Config("checkpoint index does not match this run".into()));
            }
            if let Some(last) = idx.records.last().cloned() {
                let k = idx.records.len() - 1;
                let (c, _) = container::read_field(&cp.dir.join(&idx.files[k]))?;
                u = c.into_data();
                if rec.keep_snapshots {
                    for f in &idx.files[..k] {
                        let (c, _) = container::read_field(&cp.dir.join(f))?;
                        rec.snapshots.push(VectorField::from_components(c)?);
                    }
                    rec.snapshots.push(VectorField::from_spectral(sp.grid(), u.clone())?);
                }
                start = node_at[k];
                d = fd.value_at(last.t);
                rec.t_prev = last.t;
                rec.gram_prev = idx.gram_prev.clone();
                rec.gram_acc = last.gram.clone();
                rec.records = idx.records;
                files = idx.files;
                log::info!("resuming from node {k} at t = {}", last.t);
            }
        }
    }

    let mut next_node = rec.records.len();
    if next_node == 0 {
        rec.node(0.0, &u)?;
        next_node = 1;
        if let Some(cp) = checkpoints {
            write_checkpoint(cp, sp, timegrid, opts, &rec, &u, &mut files)?;
        }
    }

    let mut cache = WeightCache::default();
    let mut n_u = if opts.nonlinear { Some(nonlinear(sp, &u)) } else { None };
    for s in start..times.len() - 1 {
        let (t0, t1) = (times[s], times[s + 1]);
        let h = t1 - t0;
        let w = cache.get(k2, h);
        let mut d_new = d.clone();
        fd.advance(&mut d_new, t0, t1);
        // Predictor: exact linear part, exact force increment, frozen nonlinearity.
        let mut pred = zeros(n, len);
        for c in 0..n {
            for f in 0..len {
                let mut v = u[c][f] * w.e[f] + (d_new[c][f] - d[c][f] * w.e[f]);
                if let Some(nu) = &n_u {
                    v += nu[c][f] * (h * w.a[f]);
                }
                pred[c][f] = v;
            }
        }
        if let Some(nu) = n_u.as_mut() {
            let np = nonlinear(sp, &pred);
            for c in 0..n {
                for f in 0..len {
                    pred[c][f] += (np[c][f] - nu[c][f]) * (h * (w.a[f] - w.b[f]));
                }
            }
            *nu = nonlinear(sp, &pred);
        }
        u = pred;
        d = d_new;
        rec.step(t1, &u);
        if next_node < node_at.len() && node_at[next_node] == s + 1 {
            rec.node(t1, &u)?;
            next_node += 1;
            if let Some(cp) = checkpoints {
                write_checkpoint(cp, sp, timegrid, opts, &rec, &u, &mut files)?;
            }
        }
    }
    Ok(rec.finish(timegrid))
}

fn write_checkpoint(
    cp: &Checkpoints,
    sp: &Spectral,
    timegrid: &TimeGrid,
    opts: &SolverOptions,
    rec: &Recorder,
    u: &Spec,
    files: &mut Vec<String>,
) -> Result<()> {
    let i = rec.records.len() - 1;
    let name = Checkpoints::node_file(i);
    let c = Components::from_spectral(sp.grid(), u.clone())?;
    container::write_field(&cp.dir.join(&name), &c, FieldKind::Vector, Some(rec.records[i].t))?;
    files.truncate(i);
    files.push(name);
    let idx = CheckpointIndex {
        format: "nsforce-checkpoints".into(),
        grid: sp.grid().clone(),
        timegrid: timegrid.clone(),
        nonlinear: opts.nonlinear,
        exponents: rec.exponents.clone(),
        records: rec.records.clone(),
        gram_prev: rec.gram_prev.clone(),
        files: files.clone(),
    };
    let tmp = cp.dir.join("index.json.tmp");
    fs::write(&tmp, serde_json::to_string_pretty(&idx)? + "\n")?;
    fs::rename(tmp, cp.index_path())?;
    Ok(())
}

/// Reads the node snapshots and records written by a checkpointed run.
pub fn load_checkpoints(dir: &Path) -> Result<Trajectory> {
    let path = dir.join("index.json");
    if !path.exists() {
        return Err(Error::MissingArtifact(path.display().to_string()));
    }
    let idx: CheckpointIndex = serde_json::from_str(&fs::read_to_string(&path)?)?;
    let mut snapshots = Vec::new();
    for f in &idx.files {
        let (c, _) = container::read_field(&dir.join(f))?;
        snapshots.push(VectorField::from_components(c)?);
    }
    Ok(Trajectory {
        grid: idx.grid,
        timegrid: idx.timegrid,
        exponents: idx.exponents,
        records: idx.records,
        snapshots,
    })
}

/// Duhamel contribution of the force alone, recorded at the nodes.
pub fn duhamel_force(
    sp: &Spectral,
    forcing: Option<&Forcing>,
    timegrid: &TimeGrid,
    opts: &SolverOptions,
) -> Result<Trajectory> {
    timegrid.validate()?;
    let fd = ForceDuhamel::new(sp, forcing, opts.force_tolerance)?;
    let (times, node_at) = opts.step.plan(timegrid, fd.duration());
    let mut d = zeros(sp.grid().dim, sp.grid().len());
    let mut rec = Recorder::new(sp, opts, &d);
    rec.node(0.0, &d)?;
    let mut next = 1;
    for s in 0..times.len() - 1 {
        fd.advance(&mut d, times[s], times[s + 1]);
        rec.step(times[s + 1], &d);
        if next < node_at.len() && node_at[next] == s + 1 {
            rec.node(times[s + 1], &d)?;
            next += 1;
        }
    }
    Ok(rec.finish(timegrid))
}

/// `G(u,v)(t) = −∫_0^t e^{(t−s)Δ} P div(u⊗v)(s) ds` at node `node`, by product
/// integration over the stored node snapshots (linear in `s` between nodes).
pub fn bilinear_g(sp: &Spectral, u: &Trajectory, v: &Trajectory, node: usize) -> Result<VectorField> {
    sp.grid().ensure_same(&u.grid)?;
    sp.grid().ensure_same(&v.grid)?;
    if u.timegrid != v.timegrid {
        return Err(Error::GridMismatch("trajectories have different time grids".into()));
    }
    if !u.has_snapshots() || !v.has_snapshots() {
        return Err(Error::MissingArtifact("bilinear_g needs node snapshots".into()));
    }
    if node >= u.records.len() || node >= v.records.len() {
        return Err(Error::InvalidArgument(format!("node {node} out of range")));
    }
    let (n, len) = (sp.grid().dim, sp.grid().len());
    let k2 = sp.k2();
    let term = |i: usize| -> Spec {
        let a = u.snapshots[i].data();
        let b = v.snapshots[i].data();
        sp.bilinear_spectral(a, Some(b))
    };
    let mut g = zeros(n, len);
    if node > 0 {
        let mut prev = term(0);
        for i in 0..node {
            let h = u.records[i + 1].t - u.records[i].t;
            let w = Weights::new(k2, h);
            let next = term(i + 1);
            for c in 0..n {
                for f in 0..len {
                    g[c][f] = g[c][f] * w.e[f] + (next[c][f] * (w.a[f] - w.b[f]) + prev[c][f] * w.b[f]) * h;
                }
            }
            prev = next;
        }
    }
    Ok(VectorField::from_spectral(sp.grid(), g)?.to_physical(sp))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConvergenceNorm {
    /// Discrete `sup_t t^{1/4} ‖·‖_{2n}` over the output nodes.
    #[default]
    X2n,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PicardConfig {
    pub max_iterations: usize,
    pub convergence_norm: ConvergenceNorm,
    /// Relative to the norm of the current iterate.
    pub tolerance: f64,
}

impl Default for PicardConfig {
    fn default() -> Self {
        PicardConfig {
            max_iterations: 40,
            convergence_norm: ConvergenceNorm::X2n,
            tolerance: 1e-10,
        }
    }
}

impl PicardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) || self.max_iterations == 0 {
            return Err(Error::InvalidArgument(format!("bad Picard config {self:?}")));
        }
        Ok(())
    }
}

/// `sup_{nodes, t>0} t^{1/4} ‖w(t)‖_{2n}`.
fn x2n_norm(sp: &Spectral, w: &[Spec], node_times: &[f64]) -> f64 {
    let g = sp.grid();
    let p = Exponent::Finite(2.0 * g.dim as f64);
    node_times
        .iter()
        .zip(w)
        .filter(|(t, _)| **t > 0.0)
        .map(|(&t, c)| {
            let values: Vec<Vec<f64>> = c
                .iter()
                .map(|x| {
                    let mut y = x.clone();
                    sp.fft().inverse(&mut y);
                    y.into_iter().map(|v| v.re).collect()
                })
                .collect();
            t.powf(0.25) * norms::lp_norms(g, &values, &[p])[0]
        })
        .fold(0.0, f64::max)
}

/// Fixed-point iteration `u_{k+1} = e^{tΔ}a + D_f + G(u_k, u_k)` on the step
/// plan of `timegrid`, with `G` by product integration. Returns the final
/// iterate and the history of successive differences in the X_{2n} norm.
pub fn picard_iterate(
    sp: &Spectral,
    a: &VectorField,
    forcing: Option<&Forcing>,
    timegrid: &TimeGrid,
    cfg: &PicardConfig,
    opts: &SolverOptions,
) -> Result<(Trajectory, Vec<f64>)> {
    cfg.validate()?;
    timegrid.validate()?;
    let a_hat = spectral_data(sp, a)?;
    let fd = ForceDuhamel::new(sp, forcing, opts.force_tolerance)?;
    let (times, node_at) = opts.step.plan(timegrid, fd.duration());
    let node_times: Vec<f64> = node_at.iter().map(|&i| times[i]).collect();
    let k2 = sp.k2();
    let (n, len) = (sp.grid().dim, sp.grid().len());
    let mut cache = WeightCache::default();

    // Linear part e^{tΔ}a + D_f(t) on the plan.
    let mut lin = Vec::with_capacity(times.len());
    lin.push(a_hat.clone());
    let mut d = zeros(n, len);
    for s in 0..times.len() - 1 {
        let w = cache.get(k2, times[s + 1] - times[s]);
        let mut d_new = d.clone();
        fd.advance(&mut d_new, times[s], times[s + 1]);
        let prev = &lin[s];
        let next: Spec = (0..n)
            .map(|c| (0..len).map(|f| prev[c][f] * w.e[f] + d_new[c][f] - d[c][f] * w.e[f]).collect())
            .collect();
        lin.push(next);
        d = d_new;
    }

    let mut u = lin.clone();
    let mut history: Vec<f64> = Vec::new();
    let mut growing = 0;
    let mut converged = false;
    for _ in 0..cfg.max_iterations {
        let mut next = Vec::with_capacity(times.len());
        next.push(lin[0].clone());
        let mut g = zeros(n, len);
        let mut b_prev = nonlinear(sp, &u[0]);
        for s in 0..times.len() - 1 {
            let h = times[s + 1] - times[s];
            let w = cache.get(k2, h);
            let b_next = nonlinear(sp, &u[s + 1]);
            for c in 0..n {
                for f in 0..len {
                    g[c][f] = g[c][f] * w.e[f] + (b_next[c][f] * (w.a[f] - w.b[f]) + b_prev[c][f] * w.b[f]) * h;
                }
            }
            let l = &lin[s + 1];
            next.push((0..n).map(|c| (0..len).map(|f| l[c][f] + g[c][f]).collect()).collect());
            b_prev = b_next;
        }
        let diff_nodes: Vec<Spec> = node_at
            .iter()
            .map(|&i| {
                (0..n)
                    .map(|c| (0..len).map(|f| next[i][c][f] - u[i][c][f]).collect())
                    .collect()
            })
            .collect();
        let next_nodes: Vec<Spec> = node_at.iter().map(|&i| next[i].clone()).collect();
        let diff = x2n_norm(sp, &diff_nodes, &node_times);
        let size = x2n_norm(sp, &next_nodes, &node_times);
        u = next;
        history.push(diff);
        let k = history.len();
        if !diff.is_finite() {
            break;
        }
        if diff <= cfg.tolerance * size || diff == 0.0 {
            converged = true;
            break;
        }
        if k >= 2 && diff >= history[k - 2] {
            growing += 1;
            if growing >= 3 || diff > 1e3 * history[0] {
                break;
            }
        } else {
            growing = 0;
        }
    }
    if !converged {
        let k = history.len();
        let last_ratio = if k >= 2 { history[k - 1] / history[k - 2] } else { f64::NAN };
        return Err(Error::SmallnessViolation {
            iterations: k,
            last_ratio,
            history,
        });
    }

    let mut rec = Recorder::new(sp, opts, &u[0]);
    rec.node(0.0, &u[0])?;
    let mut next_node = 1;
    for s in 1..times.len() {
        rec.step(times[s], &u[s]);
        if next_node < node_at.len() && node_at[next_node] == s {
            rec.node(times[s], &u[s])?;
            next_node += 1;
        }
    }
    Ok((rec.finish(timegrid), history))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KatoNormReport {
    /// `sup_{t>0} t^{1/2 − n/(2p)} ‖u(t)‖_p` for every recorded `p ≥ n`.
    pub x_p_norms: Vec<LpValue>,
    /// `sup_t (1+t)^{(n+1)/4} ‖u(t)‖₂`.
    pub y_norm: f64,
    /// `∫_0^{t_end} ‖u‖₂²`.
    pub energy_integral: f64,
    /// Bound for `∫_{t_end}^∞ ‖u‖₂²` from the fitted envelope.
    pub energy_tail_bound: f64,
}

pub fn kato_norms(tr: &Trajectory) -> KatoNormReport {
    let n = tr.grid.dim as f64;
    let x_p_norms = tr
        .exponents
        .iter()
        .enumerate()
        .filter(|(_, p)| p.value() >= n)
        .map(|(i, &p)| {
            let w = 0.5 - n / (2.0 * p.value());
            let value = tr
                .records
                .iter()
                .filter(|r| r.t > 0.0)
                .map(|r| r.t.powf(w) * r.norms[i])
                .fold(0.0, f64::max);
            LpValue { p, value }
        })
        .collect();
    let y_norm = tr
        .l2_series()
        .iter()
        .map(|&(t, v)| (1.0 + t).powf((n + 1.0) / 4.0) * v)
        .fold(0.0, f64::max);
    KatoNormReport {
        x_p_norms,
        y_norm,
        energy_integral: tr.energy_integral(),
        energy_tail_bound: energy_tail_bound(tr).1,
    }
}

/// Fits `‖u(t)‖₂ ≤ K t^{−(n+2)/4}` over the last decade of nodes and returns
/// `(K, (2/n) K² t_end^{−n/2})`, the bound on `∫_{t_end}^∞ ‖u‖₂²`.
pub fn energy_tail_bound(tr: &Trajectory) -> (f64, f64) {
    let n = tr.grid.dim as f64;
    let series = tr.l2_series();
    let Some(&(t_end, _)) = series.last() else {
        return (0.0, 0.0);
    };
    if t_end <= 0.0 {
        return (0.0, 0.0);
    }
    let k = series
        .iter()
        .filter(|(t, _)| *t >= t_end / 10.0 && *t > 0.0)
        .map(|&(t, v)| t.powf((n + 2.0) / 4.0) * v)
        .fold(0.0, f64::max);
    (k, 2.0 / n * k * k * t_end.powf(-n / 2.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_data, DataSpec};
    use crate::field::sample;
    use crate::forcing::SpaceTimeProfile;

    fn setup(n: usize, l: f64) -> Spectral {
        Spectral::new(&GridSpec::new(2, n, l).unwrap()).unwrap()
    }

    fn rel_l2(a: &VectorField, b: &VectorField, sp: &Spectral) -> f64 {
        let (x, y) = (a.values(sp), b.values(sp));
        let (mut d, mut s) = (0.0, 0.0);
        for (p, q) in x.iter().flatten().zip(y.iter().flatten()) {
            d += (p - q) * (p - q);
            s += q * q;
        }
        (d / s).sqrt()
    }

    #[test]
    fn weights_match_closed_form_across_series_switch() {
        for z in [1e-8, 1e-3, 0.049, 0.051, 0.5, 3.0] {
            let (e, a, b) = step_weights(z);
            let ee = (-z).exp();
            let exact_a = -(-z).exp_m1() / z;
            assert!((e - ee).abs() < 1e-15);
            assert!((a - exact_a).abs() < 1e-13, "{z}");
            // B = ∫_0^1 τ e^{-zτ} dτ by fine midpoint rule.
            let m = 20000;
            let q: f64 = (0..m).map(|i| (i as f64 + 0.5) / m as f64).map(|t| t * (-z * t).exp()).sum::<f64>() / m as f64;
            assert!((b - q).abs() < 1e-8, "{z} {b} {q}");
        }
    }

    #[test]
    fn linear_march_reproduces_heat_flow() {
        let sp = setup(64, 20.0);
        let a = generate_data(&sp, &DataSpec::GaussianVortex { amplitude: 1.0, width: 1.5 }).unwrap();
        let tg = TimeGrid::geometric(2.0, 0.01, 1.5).unwrap();
        let opts = SolverOptions {
            nonlinear: false,
            ..Default::default()
        };
        let tr = integrate(&sp, &a, None, &tg, &opts).unwrap();
        let last = tr.snapshots.last().unwrap();
        let exact = sp.heat_propagate(&a, 2.0).unwrap();
        assert!(rel_l2(last, &exact, &sp) < 1e-12);
        assert!(tr.max_divergence() < 1e-10);
    }

    #[test]
    fn separable_force_duhamel_matches_fine_quadrature() {
        let sp = setup(64, 20.0);
        let g = sp.grid().clone();
        let space = sample(&g, |x| (-(x[0] * x[0] + 2.0 * x[1] * x[1])).exp());
        let prof = SpaceTimeProfile::separable(&g, space, TimeShape::Indicator { start: 0.0, end: 0.5 }).unwrap();
        let f = Forcing::new(vec![vec![1.0, 0.3], vec![0.3, -0.5]], prof).unwrap();
        let fd = ForceDuhamel::new(&sp, Some(&f), 1e-10).unwrap();
        // Indicator force: D(t) = P div C X̂ (1 - e^{-tλ})/λ in closed form.
        let d = fd.value_at(0.5);
        let g0 = &fd.terms[0].1;
        let mut err: f64 = 0.0;
        let mut size: f64 = 0.0;
        for c in 0..2 {
            for (f, &k) in sp.k2().iter().enumerate() {
                let q = if k == 0.0 { 0.5 } else { -(-0.5 * k).exp_m1() / k };
                err = err.max((d[c][f] - g0[c][f] * q).norm());
                size = size.max(d[c][f].norm());
            }
        }
        assert!(err < 1e-12 * size, "{err} {size}");
    }
}
