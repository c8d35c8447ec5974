//! Square 2D FFTs built from rustfft row transforms.

use std::sync::Arc;

use num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::scalar::Real;

/// Planned forward/inverse transforms for an `n × n` row-major grid.
///
/// The inverse is normalized by `1/n²`, so `inverse(forward(x)) == x`.
#[derive(Clone)]
pub struct Fft2<T: Real> {
    n: usize,
    forward: Arc<dyn Fft<T>>,
    inverse: Arc<dyn Fft<T>>,
}

impl<T: Real> std::fmt::Debug for Fft2<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fft2").field("n", &self.n).finish()
    }
}

impl<T: Real> Fft2<T> {
    pub fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            n,
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        }
    }

    pub fn side(&self) -> usize {
        self.n
    }

    pub fn forward(&self, data: &mut [Complex<T>]) {
        self.apply(data, &self.forward);
    }

    pub fn inverse(&self, data: &mut [Complex<T>]) {
        self.apply(data, &self.inverse);
        let scale = T::one() / T::from_usize_lossy(self.n * self.n);
        for v in data.iter_mut() {
            *v = *v * scale;
        }
    }

    fn apply(&self, data: &mut [Complex<T>], plan: &Arc<dyn Fft<T>>) {
        let n = self.n;
        assert_eq!(data.len(), n * n, "fft2 buffer must be n*n");
        plan.process(data);
        let mut t = vec![Complex::new(T::zero(), T::zero()); n * n];
        transpose(data, &mut t, n);
        plan.process(&mut t);
        transpose(&t, data, n);
    }
}

fn transpose<T: Copy>(src: &[T], dst: &mut [T], n: usize) {
    const BLOCK: usize = 32;
    for rb in (0..n).step_by(BLOCK) {
        for cb in (0..n).step_by(BLOCK) {
            for r in rb..(rb + BLOCK).min(n) {
                for c in cb..(cb + BLOCK).min(n) {
                    dst[c * n + r] = src[r * n + c];
                }
            }
        }
    }
}

/// Signed frequency index of FFT bin `k` on an `n`-point grid.
#[inline]
pub fn signed_bin(k: usize, n: usize) -> isize {
    if k < n.div_ceil(2) {
        k as isize
    } else {
        k as isize - n as isize
    }
}
