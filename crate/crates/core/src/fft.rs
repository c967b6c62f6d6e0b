use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

/// Complex n-dimensional FFT on row-major `N^n` arrays.
///
/// The forward transform is unnormalized; the inverse divides by `N^n`.
pub struct FftNd {
    n: usize,
    dim: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl FftNd {
    pub fn new(n: usize, dim: usize) -> Self {
        let mut planner = FftPlanner::new();
        FftNd {
            n,
            dim,
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        }
    }

    pub fn len(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn forward(&self, data: &mut [Complex64]) {
        self.transform(data, &*self.forward);
    }

    pub fn inverse(&self, data: &mut [Complex64]) {
        self.transform(data, &*self.inverse);
        let scale = 1.0 / self.len() as f64;
        for v in data.iter_mut() {
            *v *= scale;
        }
    }

    fn transform(&self, data: &mut [Complex64], plan: &dyn Fft<f64>) {
        assert_eq!(data.len(), self.len(), "buffer length does not match the grid");
        let n = self.n;
        let mut scratch = vec![Complex64::default(); plan.get_inplace_scratch_len()];
        // Innermost axis is contiguous.
        plan.process_with_scratch(data, &mut scratch);
        if self.dim == 1 {
            return;
        }
        let mut buf = vec![Complex64::default(); self.len()];
        for axis in (0..self.dim - 1).rev() {
            let stride = n.pow((self.dim - 1 - axis) as u32);
            let block = n * stride;
            for (outer, chunk) in data.chunks_mut(block).enumerate() {
                let lines = &mut buf[outer * block..(outer + 1) * block];
                // gather: lines[q][k] = chunk[k][q]
                for k in 0..n {
                    let row = &chunk[k * stride..(k + 1) * stride];
                    for (q, v) in row.iter().enumerate() {
                        lines[q * n + k] = *v;
                    }
                }
                plan.process_with_scratch(lines, &mut scratch);
                for k in 0..n {
                    let row = &mut chunk[k * stride..(k + 1) * stride];
                    for (q, v) in row.iter_mut().enumerate() {
                        *v = lines[q * n + k];
                    }
                }
            }
        }
    }
}
