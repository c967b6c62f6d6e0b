//! Scalar, vector and symmetric-tensor fields on a [`GridSpec`].

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::spectral::Spectral;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    Physical,
    Spectral,
}

/// Raw storage shared by all field kinds: one complex array per component.
///
/// In the physical representation the imaginary parts are identically zero.
#[derive(Clone, Debug)]
pub struct Components {
    grid: GridSpec,
    repr: Representation,
    data: Vec<Vec<Complex64>>,
}

impl Components {
    pub fn zeros(grid: &GridSpec, repr: Representation, count: usize) -> Self {
        Components {
            grid: grid.clone(),
            repr,
            data: vec![vec![Complex64::default(); grid.len()]; count],
        }
    }

    pub fn from_physical(grid: &GridSpec, values: Vec<Vec<f64>>) -> Result<Self> {
        let data = values
            .into_iter()
            .map(|c| {
                if c.len() != grid.len() {
                    return Err(Error::InvalidArgument(format!(
                        "component has {} samples, grid needs {}",
                        c.len(),
                        grid.len()
                    )));
                }
                Ok(c.into_iter().map(|v| Complex64::new(v, 0.0)).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Components {
            grid: grid.clone(),
            repr: Representation::Physical,
            data,
        })
    }

    pub fn from_spectral(grid: &GridSpec, data: Vec<Vec<Complex64>>) -> Result<Self> {
        if data.iter().any(|c| c.len() != grid.len()) {
            return Err(Error::InvalidArgument("spectral component length mismatch".into()));
        }
        Ok(Components {
            grid: grid.clone(),
            repr: Representation::Spectral,
            data,
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn repr(&self) -> Representation {
        self.repr
    }

    pub fn count(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[Vec<Complex64>] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Vec<Complex64>] {
        &mut self.data
    }

    pub(crate) fn data_vec_mut(&mut self) -> &mut Vec<Vec<Complex64>> {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Vec<Complex64>> {
        self.data
    }

    pub fn to_spectral(&self, sp: &Spectral) -> Components {
        match self.repr {
            Representation::Spectral => self.clone(),
            Representation::Physical => {
                let mut out = self.clone();
                for c in out.data.iter_mut() {
                    sp.fft().forward(c);
                }
                out.repr = Representation::Spectral;
                out
            }
        }
    }

    pub fn to_physical(&self, sp: &Spectral) -> Components {
        match self.repr {
            Representation::Physical => self.clone(),
            Representation::Spectral => {
                let mut out = self.clone();
                for c in out.data.iter_mut() {
                    sp.fft().inverse(c);
                    for v in c.iter_mut() {
                        v.im = 0.0;
                    }
                }
                out.repr = Representation::Physical;
                out
            }
        }
    }

    pub fn to_repr(&self, sp: &Spectral, repr: Representation) -> Components {
        match repr {
            Representation::Physical => self.to_physical(sp),
            Representation::Spectral => self.to_spectral(sp),
        }
    }

    /// Real sample values, one vector per component.
    pub fn physical_values(&self, sp: &Spectral) -> Vec<Vec<f64>> {
        self.to_physical(sp)
            .data
            .into_iter()
            .map(|c| c.into_iter().map(|v| v.re).collect())
            .collect()
    }

    pub fn scale(&mut self, factor: f64) {
        for c in self.data.iter_mut() {
            for v in c.iter_mut() {
                *v *= factor;
            }
        }
    }

    /// `self += factor * other`; both operands must share grid and representation.
    pub fn axpy(&mut self, factor: f64, other: &Components) -> Result<()> {
        self.grid.ensure_same(&other.grid)?;
        if self.repr != other.repr || self.count() != other.count() {
            return Err(Error::InvalidArgument("axpy operands differ in shape or representation".into()));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y * factor;
            }
        }
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .flat_map(|c| c.iter())
            .map(|v| v.norm())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data
            .iter()
            .flat_map(|c| c.iter())
            .all(|v| v.re.is_finite() && v.im.is_finite())
    }
}

/// Common access for the typed field wrappers.
pub trait FieldLike: Sized + Clone {
    fn components(&self) -> &Components;
    fn with_components(&self, c: Components) -> Self;

    fn grid(&self) -> &GridSpec {
        self.components().grid()
    }

    fn repr(&self) -> Representation {
        self.components().repr()
    }

    fn to_spectral(&self, sp: &Spectral) -> Self {
        self.with_components(self.components().to_spectral(sp))
    }

    fn to_physical(&self, sp: &Spectral) -> Self {
        self.with_components(self.components().to_physical(sp))
    }
}

#[derive(Clone, Debug)]
pub struct ScalarField {
    c: Components,
}

#[derive(Clone, Debug)]
pub struct VectorField {
    c: Components,
}

/// Tensor field with `n*n` components stored row-major, `(k, l) -> k*n + l`.
#[derive(Clone, Debug)]
pub struct TensorField {
    c: Components,
    symmetric: bool,
}

impl FieldLike for ScalarField {
    fn components(&self) -> &Components {
        &self.c
    }
    fn with_components(&self, c: Components) -> Self {
        ScalarField { c }
    }
}

impl FieldLike for VectorField {
    fn components(&self) -> &Components {
        &self.c
    }
    fn with_components(&self, c: Components) -> Self {
        VectorField { c }
    }
}

impl FieldLike for TensorField {
    fn components(&self) -> &Components {
        &self.c
    }
    fn with_components(&self, c: Components) -> Self {
        TensorField {
            c,
            symmetric: self.symmetric,
        }
    }
}

impl ScalarField {
    pub fn zeros(grid: &GridSpec) -> Self {
        ScalarField {
            c: Components::zeros(grid, Representation::Physical, 1),
        }
    }

    pub fn from_physical(grid: &GridSpec, values: Vec<f64>) -> Result<Self> {
        Ok(ScalarField {
            c: Components::from_physical(grid, vec![values])?,
        })
    }

    pub fn from_fn(grid: &GridSpec, f: impl Fn(&[f64]) -> f64) -> Self {
        let values = sample(grid, f);
        ScalarField {
            c: Components::from_physical(grid, vec![values]).expect("sized by grid"),
        }
    }

    pub fn from_components(c: Components) -> Result<Self> {
        if c.count() != 1 {
            return Err(Error::InvalidArgument("scalar field needs one component".into()));
        }
        Ok(ScalarField { c })
    }

    pub fn values(&self, sp: &Spectral) -> Vec<f64> {
        self.c.physical_values(sp).pop().expect("one component")
    }

    pub fn data(&self) -> &[Complex64] {
        &self.c.data()[0]
    }
}

impl VectorField {
    pub fn zeros(grid: &GridSpec) -> Self {
        VectorField {
            c: Components::zeros(grid, Representation::Physical, grid.dim),
        }
    }

    pub fn spectral_zeros(grid: &GridSpec) -> Self {
        VectorField {
            c: Components::zeros(grid, Representation::Spectral, grid.dim),
        }
    }

    pub fn from_physical(grid: &GridSpec, values: Vec<Vec<f64>>) -> Result<Self> {
        if values.len() != grid.dim {
            return Err(Error::InvalidArgument(format!(
                "vector field needs {} components, got {}",
                grid.dim,
                values.len()
            )));
        }
        Ok(VectorField {
            c: Components::from_physical(grid, values)?,
        })
    }

    pub fn from_components(c: Components) -> Result<Self> {
        if c.count() != c.grid().dim {
            return Err(Error::InvalidArgument("vector field component count".into()));
        }
        Ok(VectorField { c })
    }

    pub fn from_spectral(grid: &GridSpec, data: Vec<Vec<Complex64>>) -> Result<Self> {
        Self::from_components(Components::from_spectral(grid, data)?)
    }

    pub fn dim(&self) -> usize {
        self.c.grid().dim
    }

    pub fn values(&self, sp: &Spectral) -> Vec<Vec<f64>> {
        self.c.physical_values(sp)
    }

    pub fn data(&self) -> &[Vec<Complex64>] {
        self.c.data()
    }

    pub fn data_mut(&mut self) -> &mut [Vec<Complex64>] {
        self.c.data_mut()
    }

    pub fn into_components(self) -> Components {
        self.c
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let mut c = self.c.clone();
        c.scale(factor);
        VectorField { c }
    }

    pub fn axpy(&mut self, factor: f64, other: &VectorField) -> Result<()> {
        self.c.axpy(factor, &other.c)
    }

    /// Largest pointwise Euclidean magnitude in physical space.
    pub fn max_magnitude(&self, sp: &Spectral) -> f64 {
        let v = self.values(sp);
        (0..self.grid().len())
            .map(|i| v.iter().map(|c| c[i] * c[i]).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }
}

impl TensorField {
    pub fn zeros(grid: &GridSpec) -> Self {
        TensorField {
            c: Components::zeros(grid, Representation::Physical, grid.dim * grid.dim),
            symmetric: true,
        }
    }

    /// Builds a tensor from `n*n` physical components; symmetry is detected exactly.
    pub fn from_physical(grid: &GridSpec, values: Vec<Vec<f64>>) -> Result<Self> {
        let n = grid.dim;
        if values.len() != n * n {
            return Err(Error::InvalidArgument(format!(
                "tensor field needs {} components, got {}",
                n * n,
                values.len()
            )));
        }
        let symmetric = (0..n).all(|k| (0..n).all(|l| values[k * n + l] == values[l * n + k]));
        Ok(TensorField {
            c: Components::from_physical(grid, values)?,
            symmetric,
        })
    }

    pub fn from_components(c: Components) -> Result<Self> {
        let n = c.grid().dim;
        if c.count() != n * n {
            return Err(Error::InvalidArgument("tensor field component count".into()));
        }
        let d = c.data();
        let symmetric = (0..n).all(|k| (0..n).all(|l| d[k * n + l] == d[l * n + k]));
        Ok(TensorField { c, symmetric })
    }

    /// `coeffs[k][l] * profile` for every component; symmetric when `coeffs` is.
    pub fn from_scalar_profile(coeffs: &[Vec<f64>], profile: &ScalarField) -> Result<Self> {
        let grid = profile.grid();
        let n = grid.dim;
        if coeffs.len() != n || coeffs.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidArgument("coefficient matrix must be n x n".into()));
        }
        let base = &profile.components().data()[0];
        let mut data = Vec::with_capacity(n * n);
        for row in coeffs {
            for &c in row {
                data.push(base.iter().map(|v| v * c).collect::<Vec<_>>());
            }
        }
        let c = match profile.repr() {
            Representation::Physical => {
                let mut comps = Components::zeros(grid, Representation::Physical, n * n);
                comps.data_mut().iter_mut().zip(data).for_each(|(a, b)| *a = b);
                comps
            }
            Representation::Spectral => Components::from_spectral(grid, data)?,
        };
        Self::from_components(c)
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn dim(&self) -> usize {
        self.c.grid().dim
    }

    pub fn data(&self) -> &[Vec<Complex64>] {
        self.c.data()
    }

    pub fn values(&self, sp: &Spectral) -> Vec<Vec<f64>> {
        self.c.physical_values(sp)
    }
}

/// Samples `f` at every grid point (row-major), passing the centered coordinates.
pub fn sample(grid: &GridSpec, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut idx = vec![0usize; grid.dim];
    let mut x = vec![0.0; grid.dim];
    (0..grid.len())
        .map(|flat| {
            grid.unravel(flat, &mut idx);
            for (xi, &i) in x.iter_mut().zip(&idx) {
                *xi = grid.coord(i);
            }
            f(&x)
        })
        .collect()
}
