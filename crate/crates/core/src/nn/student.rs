//! The compressed student: conv(16×3×7×7) → 6×6 average pool → ReLU →
//! fc(576→256) → ReLU → fc(256→10).
//!
//! Pooling is linear and comes before the rectifier, so the pooled
//! convolution equals the conv weights applied to bin-averaged image patches.
//! Training uses that identity: per image a `147 × 36` matrix of pooled
//! patches replaces the full `147 × 1024` patch matrix.

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{conv2d_direct, he_uniform, pool_edges, relu, relu_backward, ConvShape, Dense, DenseGrad};
use super::{IMAGE_CHANNELS, IMAGE_LEN, IMAGE_SIDE, N_CLASSES};
use crate::error::{Error, Result};
use crate::io::container::TensorFile;
use crate::kernel_bank::SignedKernelSet;
use crate::optim::{Adam, AdamConfig};
use crate::scalar::Real;

pub const N_KERNELS: usize = 16;
pub const KERNEL: usize = 7;
pub const POOL: usize = 6;
pub const POOL_BINS: usize = POOL * POOL;
pub const FEATURES: usize = N_KERNELS * POOL_BINS;
pub const HIDDEN: usize = 256;
pub const PATCH: usize = IMAGE_CHANNELS * KERNEL * KERNEL;

pub const CONV_SHAPE: ConvShape = ConvShape {
    in_channels: IMAGE_CHANNELS,
    out_channels: N_KERNELS,
    k: KERNEL,
    side: IMAGE_SIDE,
};

#[derive(Debug, Clone, PartialEq)]
pub struct StudentNetwork<T: Real> {
    /// `16 × 147`, row `k`, column `c·49 + ky·7 + kx`.
    pub conv: Array2<T>,
    pub fc1: Dense<T>,
    pub fc2: Dense<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentGrads<T: Real> {
    pub conv: Array2<T>,
    pub fc1: DenseGrad<T>,
    pub fc2: DenseGrad<T>,
}

/// Activations of the digital backend (features → logits).
#[derive(Debug, Clone)]
pub struct BackendCache<T: Real> {
    /// Signed pooled features before the rectifier, `B × 576`.
    pub features: Array2<T>,
    pub hidden_pre: Array2<T>,
    pub hidden: Array2<T>,
    pub logits: Array2<T>,
    activated: Array2<T>,
}

#[derive(Debug, Clone)]
pub struct StudentCache<T: Real> {
    /// `147 × (36·B)` pooled patches.
    patches: Array2<T>,
    pub backend: BackendCache<T>,
}

impl<T: Real> StudentNetwork<T> {
    pub fn zeros() -> Self {
        Self {
            conv: Array2::zeros((N_KERNELS, PATCH)),
            fc1: Dense::zeros(FEATURES, HIDDEN),
            fc2: Dense::zeros(HIDDEN, N_CLASSES),
        }
    }

    /// Fan-in scaled uniform weights, zero biases.
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let conv = he_uniform(&mut rng, PATCH, N_KERNELS * PATCH);
        Self {
            conv: Array2::from_shape_vec((N_KERNELS, PATCH), conv).expect("shape"),
            fc1: Dense::init(&mut rng, FEATURES, HIDDEN),
            fc2: Dense::init(&mut rng, HIDDEN, N_CLASSES),
        }
    }

    pub fn conv_kernels(&self) -> SignedKernelSet<T> {
        SignedKernelSet::new(N_KERNELS, KERNEL, self.conv.iter().copied().collect()).expect("student shape")
    }

    pub fn set_conv_kernels(&mut self, kernels: &SignedKernelSet<T>) -> Result<()> {
        if kernels.n_kernels() != N_KERNELS || kernels.k() != KERNEL {
            return Err(Error::shape(
                "student conv",
                format!("{N_KERNELS}x3x{KERNEL}x{KERNEL}"),
                format!("{}x3x{}x{}", kernels.n_kernels(), kernels.k(), kernels.k()),
            ));
        }
        self.conv = Array2::from_shape_vec((N_KERNELS, PATCH), kernels.weights().to_vec()).expect("shape");
        Ok(())
    }

    /// Full-resolution correlation maps, `16 × 32 × 32`.
    pub fn conv_maps(&self, image: &[T]) -> Vec<T> {
        conv2d_direct(image, self.conv.as_slice().expect("standard layout"), &CONV_SHAPE)
    }

    pub fn forward_batch(&self, images: &[&[T]]) -> Result<StudentCache<T>> {
        let patches = pooled_patch_batch(images)?;
        let pooled = self.conv.dot(&patches);
        let features = regroup_features(&pooled, images.len());
        Ok(StudentCache {
            patches,
            backend: self.backend_forward(features),
        })
    }

    /// Pooled pre-activation features of one image (the 576-vector).
    pub fn features(&self, image: &[T]) -> Result<Vec<T>> {
        Ok(self.forward_batch(&[image])?.backend.features.into_raw_vec_and_offset().0)
    }

    pub fn forward(&self, image: &[T]) -> Result<Vec<T>> {
        Ok(self.forward_batch(&[image])?.backend.logits.into_raw_vec_and_offset().0)
    }

    /// ReLU → fc1 → ReLU → fc2 on `B × 576` features.
    pub fn backend_forward(&self, features: Array2<T>) -> BackendCache<T> {
        let activated = relu(&features);
        let hidden_pre = self.fc1.forward(activated.view());
        let hidden = relu(&hidden_pre);
        let logits = self.fc2.forward(hidden.view());
        BackendCache {
            features,
            hidden_pre,
            hidden,
            logits,
            activated,
        }
    }

    /// Gradients of fc1/fc2 and, optionally, of the input features.
    pub fn backend_backward(
        &self,
        cache: &BackendCache<T>,
        dlogits: ArrayView2<'_, T>,
        need_dfeatures: bool,
    ) -> (DenseGrad<T>, DenseGrad<T>, Option<Array2<T>>) {
        let (g2, dh) = self.fc2.backward(cache.hidden.view(), dlogits, true);
        let mut dh = dh.expect("requested");
        relu_backward(&cache.hidden_pre, &mut dh);
        let (g1, da) = self.fc1.backward(cache.activated.view(), dh.view(), need_dfeatures);
        let dfeat = da.map(|mut da| {
            relu_backward(&cache.features, &mut da);
            da
        });
        (g1, g2, dfeat)
    }

    pub fn backward(&self, cache: &StudentCache<T>, dlogits: ArrayView2<'_, T>) -> StudentGrads<T> {
        let batch = cache.backend.features.nrows();
        let (fc1, fc2, dfeat) = self.backend_backward(&cache.backend, dlogits, true);
        let dpooled = ungroup_features(&dfeat.expect("requested"), batch);
        StudentGrads {
            conv: dpooled.dot(&cache.patches.t()),
            fc1,
            fc2,
        }
    }

    pub fn zero_grads(&self) -> StudentGrads<T> {
        StudentGrads {
            conv: Array2::zeros(self.conv.raw_dim()),
            fc1: self.fc1.zero_grad(),
            fc2: self.fc2.zero_grad(),
        }
    }

    pub fn cast<U: Real>(&self) -> StudentNetwork<U> {
        let c = |a: &Array2<T>| a.mapv(|v| U::lit(v.to_f64_lossy()));
        let d = |l: &Dense<T>| Dense {
            weight: c(&l.weight),
            bias: l.bias.mapv(|v| U::lit(v.to_f64_lossy())),
        };
        StudentNetwork {
            conv: c(&self.conv),
            fc1: d(&self.fc1),
            fc2: d(&self.fc2),
        }
    }

    pub fn to_tensors(&self, file: &mut TensorFile) -> Result<()> {
        let f = |a: &[T]| a.iter().map(|v| v.to_f64_lossy() as f32).collect::<Vec<_>>();
        file.push("student.conv", &[N_KERNELS, IMAGE_CHANNELS, KERNEL, KERNEL], f(self.conv.as_slice().unwrap()))?;
        file.push("student.fc1.weight", &[FEATURES, HIDDEN], f(self.fc1.weight.as_slice().unwrap()))?;
        file.push("student.fc1.bias", &[HIDDEN], f(self.fc1.bias.as_slice().unwrap()))?;
        file.push("student.fc2.weight", &[HIDDEN, N_CLASSES], f(self.fc2.weight.as_slice().unwrap()))?;
        file.push("student.fc2.bias", &[N_CLASSES], f(self.fc2.bias.as_slice().unwrap()))?;
        Ok(())
    }

    pub fn from_tensors(file: &TensorFile) -> Result<Self> {
        let t = |v: &[f32]| v.iter().map(|&x| T::lit(x as f64)).collect::<Vec<_>>();
        let a2 = |name: &str, r: usize, c: usize, shape: &[usize]| -> Result<Array2<T>> {
            Ok(Array2::from_shape_vec((r, c), t(file.expect(name, shape)?)).expect("checked shape"))
        };
        let a1 = |name: &str, n: usize| -> Result<ndarray::Array1<T>> { Ok(ndarray::Array1::from(t(file.expect(name, &[n])?))) };
        Ok(Self {
            conv: a2("student.conv", N_KERNELS, PATCH, &[N_KERNELS, IMAGE_CHANNELS, KERNEL, KERNEL])?,
            fc1: Dense {
                weight: a2("student.fc1.weight", FEATURES, HIDDEN, &[FEATURES, HIDDEN])?,
                bias: a1("student.fc1.bias", HIDDEN)?,
            },
            fc2: Dense {
                weight: a2("student.fc2.weight", HIDDEN, N_CLASSES, &[HIDDEN, N_CLASSES])?,
                bias: a1("student.fc2.bias", N_CLASSES)?,
            },
        })
    }
}

impl<T: Real> StudentGrads<T> {
    pub fn add(&mut self, other: &Self) {
        self.conv += &other.conv;
        self.fc1.add(&other.fc1);
        self.fc2.add(&other.fc2);
    }

    pub fn scale(&mut self, s: T) {
        self.conv.mapv_inplace(|v| v * s);
        self.fc1.scale(s);
        self.fc2.scale(s);
    }

    pub fn all_finite(&self) -> bool {
        self.conv.iter().all(|v| v.is_finite())
            && self.fc1.weight.iter().chain(&self.fc1.bias).all(|v| v.is_finite())
            && self.fc2.weight.iter().chain(&self.fc2.bias).all(|v| v.is_finite())
    }
}

/// Adam state for every student tensor.
#[derive(Debug, Clone)]
pub struct StudentOptimizer<T: Real> {
    conv: Adam<T>,
    fc1_w: Adam<T>,
    fc1_b: Adam<T>,
    fc2_w: Adam<T>,
    fc2_b: Adam<T>,
}

impl<T: Real> StudentOptimizer<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            conv: Adam::new(N_KERNELS * PATCH, config),
            fc1_w: Adam::new(FEATURES * HIDDEN, config),
            fc1_b: Adam::new(HIDDEN, config),
            fc2_w: Adam::new(HIDDEN * N_CLASSES, config),
            fc2_b: Adam::new(N_CLASSES, config),
        }
    }

    pub fn step(&mut self, net: &mut StudentNetwork<T>, g: &StudentGrads<T>) -> Result<()> {
        if !g.all_finite() {
            return Err(Error::NonFinite {
                what: "student gradient",
                iteration: self.conv.steps_taken() as usize,
            });
        }
        let s = |a: &Array2<T>| a.as_slice().expect("standard layout").to_vec();
        self.conv.step(net.conv.as_slice_mut().unwrap(), &s(&g.conv));
        self.fc1_w.step(net.fc1.weight.as_slice_mut().unwrap(), &s(&g.fc1.weight));
        self.fc1_b.step(net.fc1.bias.as_slice_mut().unwrap(), g.fc1.bias.as_slice().unwrap());
        self.fc2_w.step(net.fc2.weight.as_slice_mut().unwrap(), &s(&g.fc2.weight));
        self.fc2_b.step(net.fc2.bias.as_slice_mut().unwrap(), g.fc2.bias.as_slice().unwrap());
        Ok(())
    }
}

/// `147 × 36` bin-averaged "same"-padded patches of one planar RGB image.
pub fn pooled_patches<T: Real>(image: &[T]) -> Result<Array2<T>> {
    if image.len() != IMAGE_LEN {
        return Err(Error::shape("image", IMAGE_LEN, image.len()));
    }
    let n = IMAGE_SIDE;
    let pad = KERNEL / 2;
    let ps = n + 2 * pad;
    let edges = pool_edges(n, POOL);
    let mut out = Array2::zeros((PATCH, POOL_BINS));
    // Integral image of the zero-padded plane.
    let mut sat = vec![0.0f64; (ps + 1) * (ps + 1)];
    for c in 0..IMAGE_CHANNELS {
        sat.iter_mut().for_each(|v| *v = 0.0);
        for y in 0..ps {
            let mut row = 0.0;
            for x in 0..ps {
                let (iy, ix) = (y as isize - pad as isize, x as isize - pad as isize);
                if iy >= 0 && ix >= 0 && (iy as usize) < n && (ix as usize) < n {
                    row += image[c * n * n + iy as usize * n + ix as usize].to_f64_lossy();
                }
                sat[(y + 1) * (ps + 1) + x + 1] = sat[y * (ps + 1) + x + 1] + row;
            }
        }
        let rect = |y0: usize, y1: usize, x0: usize, x1: usize| {
            sat[y1 * (ps + 1) + x1] - sat[y0 * (ps + 1) + x1] - sat[y1 * (ps + 1) + x0] + sat[y0 * (ps + 1) + x0]
        };
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = c * KERNEL * KERNEL + ky * KERNEL + kx;
                for by in 0..POOL {
                    for bx in 0..POOL {
                        let (y0, y1) = (edges[by] + ky, edges[by + 1] + ky);
                        let (x0, x1) = (edges[bx] + kx, edges[bx + 1] + kx);
                        let area = ((y1 - y0) * (x1 - x0)) as f64;
                        out[(row, by * POOL + bx)] = T::lit(rect(y0, y1, x0, x1) / area);
                    }
                }
            }
        }
    }
    Ok(out)
}

fn pooled_patch_batch<T: Real>(images: &[&[T]]) -> Result<Array2<T>> {
    let mut out = Array2::zeros((PATCH, POOL_BINS * images.len()));
    for (b, img) in images.iter().enumerate() {
        let p = pooled_patches(img)?;
        out.slice_mut(ndarray::s![.., b * POOL_BINS..(b + 1) * POOL_BINS]).assign(&p);
    }
    Ok(out)
}

/// `16 × (36·B)` → `B × 576` (kernel-major, row-major within a kernel).
fn regroup_features<T: Real>(pooled: &Array2<T>, batch: usize) -> Array2<T> {
    let mut f = Array2::zeros((batch, FEATURES));
    for b in 0..batch {
        for k in 0..N_KERNELS {
            for j in 0..POOL_BINS {
                f[(b, k * POOL_BINS + j)] = pooled[(k, b * POOL_BINS + j)];
            }
        }
    }
    f
}

fn ungroup_features<T: Real>(features: &Array2<T>, batch: usize) -> Array2<T> {
    let mut p = Array2::zeros((N_KERNELS, POOL_BINS * batch));
    for b in 0..batch {
        for k in 0..N_KERNELS {
            for j in 0..POOL_BINS {
                p[(k, b * POOL_BINS + j)] = features[(b, k * POOL_BINS + j)];
            }
        }
    }
    p
}
