//! Signed convolution kernels, their positive/negative split, and camera-grid
//! PSF targets.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::container::{self, TensorFile, KERNEL_MAGIC};
use crate::scalar::Real;

/// Color channel order used everywhere: R, G, B.
pub const CHANNELS: usize = 3;
pub const CHANNEL_NAMES: [&str; CHANNELS] = ["R", "G", "B"];
/// Design wavelength for each channel, in channel order.
pub const CHANNEL_WAVELENGTHS: [f64; CHANNELS] = [635e-9, 532e-9, 450e-9];

/// `n_kernels × 3 × K × K` weights, kernel-major then channel then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SignedKernelSet<T: Real> {
    n_kernels: usize,
    k: usize,
    weights: Vec<T>,
}

impl<T: Real> SignedKernelSet<T> {
    pub fn new(n_kernels: usize, k: usize, weights: Vec<T>) -> Result<Self> {
        if k % 2 == 0 {
            return Err(Error::invalid(format!("kernel side must be odd, got {k}")));
        }
        if weights.len() != n_kernels * CHANNELS * k * k {
            return Err(Error::shape(
                "SignedKernelSet",
                format!("{n_kernels}x{CHANNELS}x{k}x{k}"),
                weights.len(),
            ));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::invalid("kernel weights must be finite"));
        }
        Ok(Self { n_kernels, k, weights })
    }

    /// Uniform weights in [-1, 1).
    pub fn random(n_kernels: usize, k: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = (0..n_kernels * CHANNELS * k * k)
            .map(|_| T::lit(rng.random_range(-1.0..1.0)))
            .collect();
        Self::new(n_kernels, k, weights).expect("valid shape")
    }

    pub fn n_kernels(&self) -> usize {
        self.n_kernels
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn kernel(&self, index: usize, channel: usize) -> &[T] {
        let kk = self.k * self.k;
        let start = (index * CHANNELS + channel) * kk;
        &self.weights[start..start + kk]
    }

    pub fn cast<U: Real>(&self) -> SignedKernelSet<U> {
        SignedKernelSet {
            n_kernels: self.n_kernels,
            k: self.k,
            weights: self.weights.iter().map(|w| U::lit(w.to_f64_lossy())).collect(),
        }
    }
}

/// `(max(w, 0), max(−w, 0))`; `pos − neg` reconstructs the input exactly.
pub fn split_pos_neg<T: Real>(set: &SignedKernelSet<T>) -> (SignedKernelSet<T>, SignedKernelSet<T>) {
    let pos = set.weights.iter().map(|&w| if w > T::zero() { w } else { T::zero() }).collect();
    let neg = set.weights.iter().map(|&w| if w < T::zero() { -w } else { T::zero() }).collect();
    (
        SignedKernelSet {
            weights: pos,
            ..set.clone()
        },
        SignedKernelSet {
            weights: neg,
            ..set.clone()
        },
    )
}

/// Top-left corner of the centered `K·E` block inside a `window` grid.
pub fn target_offset(window: usize, k: usize, e: usize) -> usize {
    (window - k * e) / 2
}

/// Grid index treated as the PSF origin for correlation.
pub fn target_center(window: usize, k: usize, e: usize) -> usize {
    target_offset(window, k, e) + (k * e - 1) / 2
}

/// Block-upsample one nonnegative `K × K` kernel channel by `e`, L2-normalize
/// and center it in a zero `window × window` plane.
///
/// Returns `None` for an all-zero kernel (nothing to match).
pub fn build_target<T: Real>(kernel: &[T], k: usize, e: usize, window: usize) -> Result<Option<Vec<T>>> {
    let plane = place_upsampled(kernel, k, e, window)?;
    let norm = plane.iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Ok(None);
    }
    let inv = T::lit(1.0 / norm);
    Ok(Some(plane.into_iter().map(|v| v * inv).collect()))
}

/// Unnormalized block upsampling into a centered window.
pub(crate) fn place_upsampled<T: Real>(kernel: &[T], k: usize, e: usize, window: usize) -> Result<Vec<T>> {
    if kernel.len() != k * k {
        return Err(Error::shape("build_target", k * k, kernel.len()));
    }
    if e == 0 || window < k * e {
        return Err(Error::invalid(format!("window {window} smaller than K·E = {}", k * e)));
    }
    if kernel.iter().any(|&v| v < T::zero() || !v.is_finite()) {
        return Err(Error::invalid("target kernel must be nonnegative (split before building)"));
    }
    let off = target_offset(window, k, e);
    let mut plane = vec![T::zero(); window * window];
    for r in 0..k * e {
        for c in 0..k * e {
            plane[(off + r) * window + off + c] = kernel[(r / e) * k + c / e];
        }
    }
    Ok(plane)
}

/// Per-wavelength targets for one optic, in channel order R, G, B.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignTarget<T: Real> {
    window: usize,
    planes: Vec<Option<Vec<T>>>,
}

impl<T: Real> DesignTarget<T> {
    pub fn new(window: usize, planes: Vec<Option<Vec<T>>>) -> Result<Self> {
        for p in planes.iter().flatten() {
            if p.len() != window * window {
                return Err(Error::shape("DesignTarget", window * window, p.len()));
            }
            if p.iter().any(|v| *v < T::zero()) {
                return Err(Error::invalid("targets must be nonnegative"));
            }
            let n2 = p.iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>();
            if (n2 - 1.0).abs() > 1e-4 {
                return Err(Error::invalid(format!("target plane must have unit L2 norm, got {}", n2.sqrt())));
            }
        }
        Ok(Self { window, planes })
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn channels(&self) -> usize {
        self.planes.len()
    }

    /// `None` marks a degenerate (all-zero) channel excluded from the loss.
    pub fn plane(&self, channel: usize) -> Option<&[T]> {
        self.planes[channel].as_deref()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Polarity {
    Positive,
    Negative,
}

/// `2·n` targets: positive kernels `0..n`, then negative kernels `0..n`.
#[derive(Debug, Clone, PartialEq)]
pub struct PsfTargetSet<T: Real> {
    pub k: usize,
    pub enlargement: usize,
    pub window: usize,
    pub targets: Vec<DesignTarget<T>>,
}

impl<T: Real> PsfTargetSet<T> {
    pub fn n_kernels(&self) -> usize {
        self.targets.len() / 2
    }

    /// Optic index → (kernel index, polarity).
    pub fn describe(&self, optic: usize) -> (usize, Polarity) {
        let n = self.n_kernels();
        if optic < n {
            (optic, Polarity::Positive)
        } else {
            (optic - n, Polarity::Negative)
        }
    }

    pub fn to_tensor_file(&self) -> Result<TensorFile> {
        let mut f = TensorFile::new();
        f.metadata.insert("k".into(), self.k.into());
        f.metadata.insert("enlargement".into(), self.enlargement.into());
        f.metadata.insert("window".into(), self.window.into());
        for (i, t) in self.targets.iter().enumerate() {
            let (kernel, pol) = self.describe(i);
            let tag = if pol == Polarity::Positive { "pos" } else { "neg" };
            for (c, name) in CHANNEL_NAMES.iter().enumerate() {
                if let Some(p) = t.plane(c) {
                    f.push(
                        format!("target.{tag}.{kernel:03}.{name}"),
                        &[self.window, self.window],
                        p.iter().map(|v| v.to_f64_lossy() as f32).collect(),
                    )?;
                }
            }
        }
        Ok(f)
    }

    pub fn from_tensor_file(f: &TensorFile, n_kernels: usize) -> Result<Self> {
        let meta = |key: &str| -> Result<usize> {
            f.metadata
                .get(key)
                .and_then(|v| v.as_u64())
                .map(|v| v as usize)
                .ok_or_else(|| Error::format("target checkpoint", format!("missing metadata {key}")))
        };
        let (k, enlargement, window) = (meta("k")?, meta("enlargement")?, meta("window")?);
        let mut targets = Vec::with_capacity(2 * n_kernels);
        for tag in ["pos", "neg"] {
            for kernel in 0..n_kernels {
                let planes = CHANNEL_NAMES
                    .iter()
                    .map(|name| {
                        f.get(&format!("target.{tag}.{kernel:03}.{name}"))
                            .ok()
                            .map(|(_, d)| d.iter().map(|&v| T::lit(v as f64)).collect())
                    })
                    .collect();
                targets.push(DesignTarget { window, planes });
            }
        }
        Ok(Self {
            k,
            enlargement,
            window,
            targets,
        })
    }
}

/// Split every kernel and build all `2·n` polychromatic targets.
pub fn export_targets<T: Real>(set: &SignedKernelSet<T>, e: usize, window: usize) -> Result<PsfTargetSet<T>> {
    let (pos, neg) = split_pos_neg(set);
    let mut targets = Vec::with_capacity(2 * set.n_kernels);
    for half in [&pos, &neg] {
        for j in 0..set.n_kernels {
            let planes = (0..CHANNELS)
                .map(|c| build_target(half.kernel(j, c), set.k, e, window))
                .collect::<Result<Vec<_>>>()?;
            targets.push(DesignTarget { window, planes });
        }
    }
    Ok(PsfTargetSet {
        k: set.k,
        enlargement: e,
        window,
        targets,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct KernelHeader {
    n_kernels: usize,
    channels: usize,
    k: usize,
    channel_order: String,
    layout: String,
}

/// Kernel file: manifest + little-endian `f32`, kernel/channel/row-major.
pub fn write_kernels<T: Real, W: Write>(set: &SignedKernelSet<T>, w: W) -> Result<()> {
    let header = KernelHeader {
        n_kernels: set.n_kernels,
        channels: CHANNELS,
        k: set.k,
        channel_order: "RGB".into(),
        layout: "kernel,channel,row,col".into(),
    };
    let payload = container::f32_to_le_bytes(set.weights.iter().map(|v| v.to_f64_lossy() as f32));
    container::write_container(w, &KERNEL_MAGIC, &header, &payload)
}

pub fn read_kernels<T: Real, R: BufRead>(mut r: R) -> Result<SignedKernelSet<T>> {
    const FMT: &str = "kernel file";
    let h: KernelHeader = container::read_header(&mut r, &KERNEL_MAGIC, FMT)?;
    if h.channels != CHANNELS || h.channel_order != "RGB" {
        return Err(Error::format(FMT, "only 3-channel RGB kernels are supported"));
    }
    let n = h.n_kernels * CHANNELS * h.k * h.k;
    let payload = container::read_payload(&mut r, n * 4, FMT)?;
    let weights = container::le_bytes_to_f32(&payload)
        .into_iter()
        .map(|v| T::lit(v as f64))
        .collect();
    SignedKernelSet::new(h.n_kernels, h.k, weights)
}
