//! Dense and convolution layers over row-major batches.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// He-uniform initial values, bound `√(6 / fan_in)`.
pub fn he_uniform<T: Real, R: Rng>(rng: &mut R, fan_in: usize, len: usize) -> Vec<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..len).map(|_| T::lit(rng.random_range(-bound..bound))).collect()
}

/// `y = x·W + b` with `W` stored `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T: Real> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrad<T: Real> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Real> Dense<T> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Array2::zeros((inputs, outputs)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn init<R: Rng>(rng: &mut R, inputs: usize, outputs: usize) -> Self {
        let w = he_uniform(rng, inputs, inputs * outputs);
        Self {
            weight: Array2::from_shape_vec((inputs, outputs), w).expect("shape"),
            bias: Array1::zeros(outputs),
        }
    }

    /// `out × out` identity with zero bias.
    pub fn identity(n: usize) -> Self {
        Self {
            weight: Array2::eye(n),
            bias: Array1::zeros(n),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: ArrayView2<'_, T>) -> Array2<T> {
        let mut y = x.dot(&self.weight);
        y += &self.bias;
        y
    }

    /// Parameter gradients and the input gradient.
    pub fn backward(&self, x: ArrayView2<'_, T>, dy: ArrayView2<'_, T>, need_dx: bool) -> (DenseGrad<T>, Option<Array2<T>>) {
        let grad = DenseGrad {
            weight: x.t().dot(&dy),
            bias: dy.sum_axis(Axis(0)),
        };
        let dx = need_dx.then(|| dy.dot(&self.weight.t()));
        (grad, dx)
    }

    pub fn zero_grad(&self) -> DenseGrad<T> {
        DenseGrad {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }
}

impl<T: Real> DenseGrad<T> {
    pub fn add(&mut self, other: &Self) {
        self.weight += &other.weight;
        self.bias += &other.bias;
    }

    pub fn scale(&mut self, s: T) {
        self.weight.mapv_inplace(|v| v * s);
        self.bias.mapv_inplace(|v| v * s);
    }
}

pub fn relu<T: Real>(x: &Array2<T>) -> Array2<T> {
    x.mapv(|v| if v > T::zero() { v } else { T::zero() })
}

/// Zero the gradient wherever the pre-activation was not positive.
pub fn relu_backward<T: Real>(pre: &Array2<T>, dy: &mut Array2<T>) {
    ndarray::Zip::from(dy).and(pre).for_each(|d, &p| {
        if p <= T::zero() {
            *d = T::zero();
        }
    });
}

/// Adaptive pooling bin edges `⌊k·n_in/n_out⌋`, `k = 0..=n_out`.
pub fn pool_edges(n_in: usize, n_out: usize) -> Vec<usize> {
    (0..=n_out).map(|k| k * n_in / n_out).collect()
}

/// Adaptive average pooling of one `side × side` plane to `out × out`.
pub fn adaptive_avg_pool<T: Real>(plane: &[T], side: usize, out: usize) -> Result<Vec<T>> {
    if plane.len() != side * side {
        return Err(Error::shape("adaptive_avg_pool", side * side, plane.len()));
    }
    if out == 0 || out > side {
        return Err(Error::invalid(format!("cannot pool {side} to {out}")));
    }
    let e = pool_edges(side, out);
    let mut res = Vec::with_capacity(out * out);
    for by in 0..out {
        for bx in 0..out {
            let mut s = 0.0;
            for y in e[by]..e[by + 1] {
                for x in e[bx]..e[bx + 1] {
                    s += plane[y * side + x].to_f64_lossy();
                }
            }
            let n = ((e[by + 1] - e[by]) * (e[bx + 1] - e[bx])) as f64;
            res.push(T::lit(s / n));
        }
    }
    Ok(res)
}

/// Convolution geometry (square, stride 1, "same" zero padding).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub k: usize,
    pub side: usize,
}

impl ConvShape {
    pub fn patch(&self) -> usize {
        self.in_channels * self.k * self.k
    }

    pub fn pixels(&self) -> usize {
        self.side * self.side
    }
}

/// `(C·k·k) × (side²)` patch matrix; row index `c·k² + ky·k + kx`.
pub fn im2col<T: Real>(input: &[T], s: &ConvShape) -> Array2<T> {
    let (k, n) = (s.k, s.side);
    let pad = (k / 2) as isize;
    let mut cols = Array2::zeros((s.patch(), s.pixels()));
    for c in 0..s.in_channels {
        let plane = &input[c * n * n..(c + 1) * n * n];
        for ky in 0..k {
            for kx in 0..k {
                let row = c * k * k + ky * k + kx;
                let mut dst = cols.row_mut(row);
                for y in 0..n {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= n as isize {
                        continue;
                    }
                    for x in 0..n {
                        let sx = x as isize + kx as isize - pad;
                        if sx >= 0 && sx < n as isize {
                            dst[y * n + x] = plane[sy as usize * n + sx as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add patch gradients back to the image.
pub fn col2im<T: Real>(cols: &Array2<T>, s: &ConvShape) -> Vec<T> {
    let (k, n) = (s.k, s.side);
    let pad = (k / 2) as isize;
    let mut out = vec![T::zero(); s.in_channels * n * n];
    for c in 0..s.in_channels {
        for ky in 0..k {
            for kx in 0..k {
                let src = cols.row(c * k * k + ky * k + kx);
                for y in 0..n {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= n as isize {
                        continue;
                    }
                    for x in 0..n {
                        let sx = x as isize + kx as isize - pad;
                        if sx >= 0 && sx < n as isize {
                            out[c * n * n + sy as usize * n + sx as usize] += src[y * n + x];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Cross-correlation with zero "same" padding, by nested loops.
///
/// Reference implementation for tests and the oracle pipelines.
pub fn conv2d_direct<T: Real>(input: &[T], weight: &[T], s: &ConvShape) -> Vec<T> {
    let (k, n) = (s.k, s.side);
    let pad = (k / 2) as isize;
    let mut out = vec![T::zero(); s.out_channels * n * n];
    for o in 0..s.out_channels {
        for y in 0..n {
            for x in 0..n {
                let mut acc = 0.0;
                for c in 0..s.in_channels {
                    for ky in 0..k {
                        let sy = y as isize + ky as isize - pad;
                        if sy < 0 || sy >= n as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let sx = x as isize + kx as isize - pad;
                            if sx < 0 || sx >= n as isize {
                                continue;
                            }
                            let w = weight[((o * s.in_channels + c) * k + ky) * k + kx].to_f64_lossy();
                            acc += w * input[(c * n + sy as usize) * n + sx as usize].to_f64_lossy();
                        }
                    }
                }
                out[(o * n + y) * n + x] = T::lit(acc);
            }
        }
    }
    out
}

/// 2×2 average pooling of `channels` planes of side `n` (n even).
pub fn avg_pool2<T: Real>(x: &[T], channels: usize, n: usize) -> Vec<T> {
    let h = n / 2;
    let quarter = T::lit(0.25);
    let mut out = Vec::with_capacity(channels * h * h);
    for c in 0..channels {
        let p = &x[c * n * n..(c + 1) * n * n];
        for y in 0..h {
            for xx in 0..h {
                let s = p[2 * y * n + 2 * xx] + p[2 * y * n + 2 * xx + 1] + p[(2 * y + 1) * n + 2 * xx] + p[(2 * y + 1) * n + 2 * xx + 1];
                out.push(s * quarter);
            }
        }
    }
    out
}

pub fn avg_pool2_backward<T: Real>(dy: &[T], channels: usize, n: usize) -> Vec<T> {
    let h = n / 2;
    let quarter = T::lit(0.25);
    let mut dx = vec![T::zero(); channels * n * n];
    for c in 0..channels {
        for y in 0..n {
            for x in 0..n {
                dx[c * n * n + y * n + x] = dy[c * h * h + (y / 2) * h + x / 2] * quarter;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pool_edges_for_32_to_6() {
        assert_eq!(pool_edges(32, 6), vec![0, 5, 10, 16, 21, 26, 32]);
    }

    #[test]
    fn pooling_column_ramp() {
        let plane: Vec<f64> = (0..32 * 32).map(|i| (i % 32) as f64).collect();
        let p = adaptive_avg_pool(&plane, 32, 6).unwrap();
        assert_eq!(&p[..6], &[2.0, 7.0, 12.5, 18.0, 23.0, 28.5]);
        assert!(adaptive_avg_pool(&plane, 31, 6).is_err());
    }

    #[test]
    fn im2col_gemm_matches_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = ConvShape {
            in_channels: 3,
            out_channels: 4,
            k: 5,
            side: 9,
        };
        let x: Vec<f64> = (0..3 * 81).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..4 * 75).map(|_| rng.random_range(-1.0..1.0)).collect();
        let direct = conv2d_direct(&x, &w, &s);
        let wm = Array2::from_shape_vec((4, 75), w).unwrap();
        let y = wm.dot(&im2col(&x, &s));
        for (a, b) in y.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = ConvShape {
            in_channels: 2,
            out_channels: 1,
            k: 3,
            side: 6,
        };
        let x: Vec<f64> = (0..72).map(|_| rng.random()).collect();
        let g = Array2::from_shape_fn((18, 36), |_| rng.random::<f64>());
        let lhs: f64 = (&im2col(&x, &s) * &g).sum();
        let rhs: f64 = col2im(&g, &s).iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn avg_pool2_backward_is_adjoint() {
        let x: Vec<f64> = (0..2 * 16).map(|i| (i as f64 * 0.37).sin()).collect();
        let g: Vec<f64> = (0..2 * 4).map(|i| (i as f64 * 1.1).cos()).collect();
        let lhs: f64 = avg_pool2(&x, 2, 4).iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = avg_pool2_backward(&g, 2, 4).iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
