//! Spatial dilations `x ↦ s·x` of grid data by band-limited (trigonometric)
//! interpolation, and the scaling `a_λ(x) = λ a(λx)`.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::field::{FieldLike, VectorField};
use crate::grid::GridSpec;
use crate::spectral::Spectral;

/// Interpolation weights of the `N` samples for the point `y` (periodic
/// Dirichlet kernel with the Nyquist mode split symmetrically).
fn dirichlet_row(grid: &GridSpec, y: f64) -> Vec<f64> {
    let n = grid.points_per_axis;
    (0..n)
        .map(|j| {
            let theta = 2.0 * PI * (y - grid.coord(j)) / grid.box_length;
            let half = 0.5 * theta;
            let s = half.sin();
            if s.abs() < 1e-14 {
                // θ is a multiple of 2π; the kernel equals 1 there.
                1.0
            } else {
                (n as f64 * half).sin() * half.cos() / (s * n as f64)
            }
        })
        .collect()
}

/// Row `i` holds the weights producing `f(s·x_i)`; points with `s·x_i` outside
/// `[-L/2, L/2)` get an all-zero row.
fn dilation_matrix(grid: &GridSpec, s: f64) -> Vec<Vec<f64>> {
    let n = grid.points_per_axis;
    (0..n)
        .map(|i| {
            let y = s * grid.coord(i);
            if y < -grid.box_length / 2.0 || y >= grid.box_length / 2.0 {
                return vec![0.0; n];
            }
            let k = y / grid.spacing() + (n / 2) as f64;
            if (k - k.round()).abs() < 1e-12 {
                let mut row = vec![0.0; n];
                row[k.round() as usize] = 1.0;
                return row;
            }
            dirichlet_row(grid, y)
        })
        .collect()
}

/// `g(x) = f(s·x)` for every component of `values`.
pub fn dilate(grid: &GridSpec, values: &[Vec<f64>], s: f64) -> Vec<Vec<f64>> {
    let m = dilation_matrix(grid, s);
    let n = grid.points_per_axis;
    values
        .iter()
        .map(|comp| {
            let mut cur = comp.clone();
            for axis in 0..grid.dim {
                let stride = n.pow((grid.dim - 1 - axis) as u32);
                let block = n * stride;
                let mut next = vec![0.0; cur.len()];
                for (src, dst) in cur.chunks(block).zip(next.chunks_mut(block)) {
                    for q in 0..stride {
                        for (i, row) in m.iter().enumerate() {
                            let mut acc = 0.0;
                            for (j, &w) in row.iter().enumerate() {
                                if w != 0.0 {
                                    acc += w * src[j * stride + q];
                                }
                            }
                            dst[i * stride + q] = acc;
                        }
                    }
                }
                cur = next;
            }
            cur
        })
        .collect()
}

/// Half-extent, in cells, of the region where `|a| ≥ 10⁻³ max|a|`, per axis.
fn core_extent_cells(grid: &GridSpec, mag: &[f64]) -> f64 {
    let peak = mag.iter().copied().fold(0.0, f64::max);
    if peak == 0.0 {
        return f64::INFINITY;
    }
    let mut idx = vec![0usize; grid.dim];
    let mut lo = vec![usize::MAX; grid.dim];
    let mut hi = vec![0usize; grid.dim];
    for (flat, &m) in mag.iter().enumerate() {
        if m >= 1e-3 * peak {
            grid.unravel(flat, &mut idx);
            for d in 0..grid.dim {
                lo[d] = lo[d].min(idx[d]);
                hi[d] = hi[d].max(idx[d]);
            }
        }
    }
    (0..grid.dim).map(|d| (hi[d] - lo[d] + 1) as f64).fold(f64::INFINITY, f64::min)
}

/// `a_λ(x) = λ a(λx)`; rejects dilations that leave fewer than 8 cells
/// across the core of the data.
pub fn lambda_rescale(sp: &Spectral, a: &VectorField, lambda: f64) -> Result<VectorField> {
    sp.grid().ensure_same(a.grid())?;
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!("λ must be positive, got {lambda}")));
    }
    let values = a.values(sp);
    if lambda == 1.0 {
        return Ok(a.to_physical(sp));
    }
    let mag = crate::norms::magnitude(&values);
    let cells = core_extent_cells(sp.grid(), &mag) / lambda;
    if cells < 8.0 {
        return Err(Error::Resolution(format!(
            "rescaled data spans {cells:.1} cells; at least 8 are needed"
        )));
    }
    let mut out = dilate(sp.grid(), &values, lambda);
    for c in out.iter_mut() {
        for v in c.iter_mut() {
            *v *= lambda;
        }
    }
    VectorField::from_physical(sp.grid(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::sample;

    #[test]
    fn dilation_of_gaussian_matches_samples() {
        let g = GridSpec::new(2, 64, 16.0).unwrap();
        let f = sample(&g, |x| (-(x[0] * x[0] + 2.0 * x[1] * x[1])).exp());
        for s in [0.5, 0.7, 2.0] {
            let d = dilate(&g, std::slice::from_ref(&f), s);
            let exact = sample(&g, |x| (-(s * s) * (x[0] * x[0] + 2.0 * x[1] * x[1])).exp());
            let err = d[0].iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-9, "s={s}: {err}");
        }
    }

    #[test]
    fn identity_dilation() {
        let g = GridSpec::new(2, 16, 4.0).unwrap();
        let f: Vec<f64> = (0..g.len()).map(|i| (i as f64).sin()).collect();
        assert_eq!(dilate(&g, std::slice::from_ref(&f), 1.0)[0], f);
    }
}
