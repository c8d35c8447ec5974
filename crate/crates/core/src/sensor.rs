//! Capture simulation: scene ⊛ PSF per color channel, exposure, noise,
//! crosstalk, saturation, quantization, 6×6 pooling and signed features.
//!
//! Convolution convention: the student layer is a cross-correlation, so the
//! optical image of a scene `s` through PSF `p` is computed as
//! `out[y][x] = Σ p[r][c] · s[y + r − oy][x + c − ox]`, i.e. a convolution
//! with the flipped PSF, where `(oy, ox)` is the PSF origin. With ideal PSFs
//! at `E = 1` this reproduces the digital layer exactly.

use num_complex::Complex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::Fft2;
use crate::io::container::TensorFile;
use crate::kernel_bank::{place_upsampled, split_pos_neg, target_center, SignedKernelSet, CHANNELS, CHANNEL_NAMES};
use crate::nn::layers::adaptive_avg_pool;
use crate::nn::{IMAGE_LEN, IMAGE_SIDE};
use crate::optics::IntensityMap;
use crate::scalar::Real;

pub const POOL: usize = 6;
pub const GRAY_LEVEL: f64 = 0.18;

/// Identity crosstalk.
pub const NO_CROSSTALK: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
/// 5% leakage between spectrally adjacent channels (R↔G, G↔B).
pub const ADJACENT_LEAKAGE: [[f64; 3]; 3] = [[0.95, 0.05, 0.0], [0.05, 0.90, 0.05], [0.0, 0.05, 0.95]];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorModel {
    pub pixel_pitch: f64,
    pub enlargement: usize,
    pub bit_depth: u32,
    /// Off: keep the analog value (oracle runs).
    pub quantize: bool,
    /// Off: no saturation at full scale (oracle runs).
    pub clip: bool,
    pub exposure_gain: f64,
    pub overexposure_threshold: f64,
    /// Fraction of full scale.
    pub read_noise_sigma: f64,
    /// 0 disables shot noise.
    pub shot_noise_photons_at_saturation: f64,
    /// `crosstalk[i][j]`: share of channel `j` light read by channel `i` pixels.
    pub crosstalk: [[f64; 3]; 3],
}

impl Default for SensorModel {
    fn default() -> Self {
        Self {
            pixel_pitch: 5.86e-6,
            enlargement: 2,
            bit_depth: 8,
            quantize: true,
            clip: true,
            exposure_gain: 1.0,
            overexposure_threshold: 0.01,
            read_noise_sigma: 0.0,
            shot_noise_photons_at_saturation: 0.0,
            crosstalk: NO_CROSSTALK,
        }
    }
}

impl SensorModel {
    /// Noise-free, unclipped, unquantized, unit gain.
    pub fn ideal(enlargement: usize) -> Self {
        Self {
            enlargement,
            quantize: false,
            clip: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=16).contains(&self.bit_depth) {
            return Err(Error::OutOfRange {
                what: "bit_depth",
                value: self.bit_depth as f64,
                min: 1.0,
                max: 16.0,
            });
        }
        if self.enlargement == 0 {
            return Err(Error::invalid("enlargement must be at least 1"));
        }
        let nonneg = [
            ("pixel_pitch", self.pixel_pitch),
            ("exposure_gain", self.exposure_gain),
            ("overexposure_threshold", self.overexposure_threshold),
            ("read_noise_sigma", self.read_noise_sigma),
            ("shot_noise_photons_at_saturation", self.shot_noise_photons_at_saturation),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        if self.pixel_pitch == 0.0 {
            return Err(Error::invalid("pixel_pitch must be positive"));
        }
        if self.crosstalk.iter().flatten().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::invalid("crosstalk entries must be finite and nonnegative"));
        }
        Ok(())
    }

    pub fn full_scale_code(&self) -> u32 {
        (1u32 << self.bit_depth) - 1
    }
}

/// Round-half-up code for a value already clipped to `[0, 1]`.
pub fn quantize_code(value: f64, bit_depth: u32) -> u32 {
    let levels = ((1u32 << bit_depth) - 1) as f64;
    (value * levels + 0.5).floor() as u32
}

/// Block replication of a planar `3 × 32 × 32` scene by `e`.
pub fn upsample_scene<T: Real>(scene: &[T], e: usize) -> Result<Vec<T>> {
    check_scene(scene)?;
    let n = IMAGE_SIDE;
    let s = n * e;
    let mut out = vec![T::zero(); CHANNELS * s * s];
    for c in 0..CHANNELS {
        for y in 0..s {
            for x in 0..s {
                out[(c * s + y) * s + x] = scene[(c * n + y / e) * n + x / e];
            }
        }
    }
    Ok(out)
}

fn check_scene<T: Real>(scene: &[T]) -> Result<()> {
    if scene.len() != IMAGE_LEN {
        return Err(Error::shape("scene", IMAGE_LEN, scene.len()));
    }
    if scene.iter().any(|&v| !(v >= T::zero() && v <= T::one())) {
        return Err(Error::invalid("scene values must lie in [0, 1]"));
    }
    Ok(())
}

/// One optic's per-channel PSFs on the camera grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PsfOptic<T: Real> {
    pub window: usize,
    /// Grid index aligned with the scene pixel being imaged.
    pub origin: (usize, usize),
    /// `None` for a channel with no response.
    pub planes: Vec<Option<Vec<T>>>,
}

impl<T: Real> PsfOptic<T> {
    pub fn new(window: usize, origin: (usize, usize), planes: Vec<Option<Vec<T>>>) -> Result<Self> {
        if planes.len() != CHANNELS {
            return Err(Error::shape("PsfOptic channels", CHANNELS, planes.len()));
        }
        if origin.0 >= window || origin.1 >= window {
            return Err(Error::invalid("PSF origin outside its window"));
        }
        for p in planes.iter().flatten() {
            if p.len() != window * window {
                return Err(Error::shape("PSF plane", window * window, p.len()));
            }
            if p.iter().any(|&v| !(v >= T::zero()) || !v.is_finite()) {
                return Err(Error::invalid("PSF intensities must be finite and nonnegative"));
            }
        }
        Ok(Self { window, origin, planes })
    }
}

/// `2·n` optics: positive halves `0..n`, then negative halves.
#[derive(Debug, Clone, PartialEq)]
pub struct PsfBank<T: Real> {
    pub enlargement: usize,
    pub optics: Vec<PsfOptic<T>>,
}

impl<T: Real> PsfBank<T> {
    /// Upsampled kernel halves used directly as PSFs (unnormalized), window `K·E`.
    pub fn ideal(kernels: &SignedKernelSet<T>, e: usize) -> Result<Self> {
        let (pos, neg) = split_pos_neg(kernels);
        let k = kernels.k();
        let w = k * e;
        let o = target_center(w, k, e);
        let mut optics = Vec::with_capacity(2 * kernels.n_kernels());
        for half in [&pos, &neg] {
            for j in 0..kernels.n_kernels() {
                let planes = (0..CHANNELS)
                    .map(|c| {
                        let p = place_upsampled(half.kernel(j, c), k, e, w)?;
                        Ok(p.iter().any(|&v| v > T::zero()).then_some(p))
                    })
                    .collect::<Result<Vec<_>>>()?;
                optics.push(PsfOptic::new(w, (o, o), planes)?);
            }
        }
        Ok(Self { enlargement: e, optics })
    }

    /// Simulated PSFs rescaled so each targeted channel carries the L2 norm of
    /// its ideal counterpart. Untargeted channels keep their simulated light,
    /// scaled by the mean factor of the targeted ones.
    pub fn from_simulated(kernels: &SignedKernelSet<T>, e: usize, simulated: &[Vec<IntensityMap<T>>]) -> Result<Self> {
        let n = kernels.n_kernels();
        if simulated.len() != 2 * n {
            return Err(Error::shape("simulated PSF bank", 2 * n, simulated.len()));
        }
        let (pos, neg) = split_pos_neg(kernels);
        let k = kernels.k();
        let mut optics = Vec::with_capacity(2 * n);
        for (i, sims) in simulated.iter().enumerate() {
            if sims.len() != CHANNELS {
                return Err(Error::shape("simulated PSF channels", CHANNELS, sims.len()));
            }
            let w = sims[0].side();
            let half = if i < n { &pos } else { &neg };
            let j = i % n;
            let norms: Vec<(f64, f64)> = (0..CHANNELS)
                .map(|c| {
                    let ideal = place_upsampled(half.kernel(j, c), k, e, w)?;
                    let l2 = |v: &[T]| v.iter().map(|x| x.to_f64_lossy().powi(2)).sum::<f64>().sqrt();
                    Ok((l2(&ideal), l2(sims[c].values())))
                })
                .collect::<Result<_>>()?;
            let factors: Vec<f64> = norms.iter().filter(|(i, s)| *i > 0.0 && *s > 0.0).map(|(i, s)| i / s).collect();
            let fallback = if factors.is_empty() { 0.0 } else { factors.iter().sum::<f64>() / factors.len() as f64 };
            let planes = (0..CHANNELS)
                .map(|c| {
                    let (ideal, sim) = norms[c];
                    let f = if ideal > 0.0 && sim > 0.0 { ideal / sim } else { fallback };
                    (f > 0.0).then(|| sims[c].values().iter().map(|&v| v * T::lit(f)).collect())
                })
                .collect();
            let o = target_center(w, k, e);
            optics.push(PsfOptic::new(w, (o, o), planes)?);
        }
        Ok(Self { enlargement: e, optics })
    }

    pub fn n_kernels(&self) -> usize {
        self.optics.len() / 2
    }

    pub fn to_tensor_file(&self) -> Result<TensorFile> {
        let mut f = TensorFile::new();
        f.metadata.insert("enlargement".into(), self.enlargement.into());
        f.metadata.insert("optics".into(), self.optics.len().into());
        for (i, o) in self.optics.iter().enumerate() {
            f.metadata.insert(format!("origin.{i:03}"), vec![o.origin.0, o.origin.1].into());
            for (c, p) in o.planes.iter().enumerate() {
                if let Some(p) = p {
                    f.push(
                        format!("psf.{i:03}.{}", CHANNEL_NAMES[c]),
                        &[o.window, o.window],
                        p.iter().map(|v| v.to_f64_lossy() as f32).collect(),
                    )?;
                }
            }
        }
        Ok(f)
    }

    pub fn from_tensor_file(f: &TensorFile) -> Result<Self> {
        let bad = |what: &str| Error::format("PSF bank", format!("missing or bad {what}"));
        let get = |key: &str| f.metadata.get(key).and_then(|v| v.as_u64()).map(|v| v as usize).ok_or_else(|| bad(key));
        let enlargement = get("enlargement")?;
        let count = get("optics")?;
        let mut optics = Vec::with_capacity(count);
        for i in 0..count {
            let origin: Vec<usize> = f
                .metadata
                .get(&format!("origin.{i:03}"))
                .and_then(|v| serde_json::from_value(v.clone()).ok())
                .filter(|v: &Vec<usize>| v.len() == 2)
                .ok_or_else(|| bad("origin"))?;
            let mut window = None;
            let planes = CHANNEL_NAMES
                .iter()
                .map(|name| {
                    f.get(&format!("psf.{i:03}.{name}")).ok().map(|(shape, d)| {
                        window = Some(shape[0]);
                        d.iter().map(|&v| T::lit(v as f64)).collect()
                    })
                })
                .collect();
            let window = window.ok_or_else(|| bad("optic planes"))?;
            optics.push(PsfOptic::new(window, (origin[0], origin[1]), planes)?);
        }
        Ok(Self { enlargement, optics })
    }
}

/// Smallest `2^a·3^b ≥ n`.
fn fft_size(n: usize) -> usize {
    let mut best = usize::MAX;
    let mut p2 = 1;
    while p2 < 2 * n {
        let mut v = p2;
        while v < n {
            v *= 3;
        }
        best = best.min(v);
        p2 *= 2;
    }
    best
}

/// Frequency-domain correlation engine for a fixed bank and scene size.
#[derive(Debug, Clone)]
pub struct OpticalBank<T: Real> {
    side: usize,
    n: usize,
    fft: Fft2<T>,
    /// Conjugated PSF spectra, per optic per channel.
    spectra: Vec<Vec<Option<Vec<Complex<T>>>>>,
    origins: Vec<(usize, usize)>,
}

impl<T: Real> OpticalBank<T> {
    pub fn new(bank: &PsfBank<T>) -> Self {
        let side = IMAGE_SIDE * bank.enlargement;
        let max_w = bank.optics.iter().map(|o| o.window).max().unwrap_or(1);
        let n = fft_size(side + max_w);
        let fft = Fft2::new(n);
        let spectra = bank
            .optics
            .iter()
            .map(|o| {
                o.planes
                    .iter()
                    .map(|p| {
                        p.as_ref().map(|p| {
                            let mut buf = vec![Complex::new(T::zero(), T::zero()); n * n];
                            for r in 0..o.window {
                                for c in 0..o.window {
                                    buf[r * n + c] = Complex::new(p[r * o.window + c], T::zero());
                                }
                            }
                            fft.forward(&mut buf);
                            buf.iter().map(|v| v.conj()).collect()
                        })
                    })
                    .collect()
            })
            .collect();
        Self {
            side,
            n,
            fft,
            spectra,
            origins: bank.optics.iter().map(|o| o.origin).collect(),
        }
    }

    pub fn optics(&self) -> usize {
        self.spectra.len()
    }

    /// Camera-grid side `32·E`.
    pub fn side(&self) -> usize {
        self.side
    }

    fn scene_spectra(&self, upsampled: &[T]) -> Vec<Vec<Complex<T>>> {
        let (s, n) = (self.side, self.n);
        (0..CHANNELS)
            .map(|c| {
                let mut buf = vec![Complex::new(T::zero(), T::zero()); n * n];
                for y in 0..s {
                    for x in 0..s {
                        buf[y * n + x] = Complex::new(upsampled[(c * s + y) * s + x], T::zero());
                    }
                }
                self.fft.forward(&mut buf);
                buf
            })
            .collect()
    }

    fn correlate(&self, scene: &[Complex<T>], psf: &[Complex<T>], origin: (usize, usize)) -> Vec<T> {
        let (s, n) = (self.side, self.n);
        let mut buf: Vec<Complex<T>> = scene.iter().zip(psf).map(|(a, b)| a * b).collect();
        self.fft.inverse(&mut buf);
        // Circular correlation lag m sits at output pixel m + origin.
        let mut out = vec![T::zero(); s * s];
        for y in 0..s {
            let ry = (y + n - origin.0) % n;
            for x in 0..s {
                let rx = (x + n - origin.1) % n;
                out[y * s + x] = buf[ry * n + rx].re;
            }
        }
        out
    }

    /// Per-channel camera images of one scene through every optic:
    /// `[optic][channel] → (32E)²` values; dark channels are all zero.
    pub fn convolve_scene(&self, scene: &[T], enlargement: usize) -> Result<Vec<Vec<Vec<T>>>> {
        let up = upsample_scene(scene, enlargement)?;
        if IMAGE_SIDE * enlargement != self.side {
            return Err(Error::shape("optical bank enlargement", self.side / IMAGE_SIDE, enlargement));
        }
        let specs = self.scene_spectra(&up);
        Ok(self
            .spectra
            .iter()
            .zip(&self.origins)
            .map(|(chans, &origin)| {
                chans
                    .iter()
                    .enumerate()
                    .map(|(c, p)| match p {
                        Some(p) => self.correlate(&specs[c], p, origin),
                        None => vec![T::zero(); self.side * self.side],
                    })
                    .collect()
            })
            .collect())
    }
}

/// Per-channel images of a scene through one optic, linear (zero-padded)
/// frequency-domain correlation; see the module docs for the convention.
pub fn optical_convolve<T: Real>(scene: &[T], optic: &PsfOptic<T>, enlargement: usize) -> Result<Vec<Vec<T>>> {
    let bank = PsfBank {
        enlargement,
        optics: vec![optic.clone()],
    };
    Ok(OpticalBank::new(&bank).convolve_scene(scene, enlargement)?.remove(0))
}

/// Sum of per-channel images: the monochrome convolved image `Σ fᵢ ⊛ PSFᵢ`.
pub fn sum_channels<T: Real>(channels: &[Vec<T>]) -> Vec<T> {
    let mut out = channels[0].clone();
    for ch in &channels[1..] {
        for (o, &v) in out.iter_mut().zip(ch) {
            *o += v;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Exposure {
    pub gain: f64,
    /// Set when the stack was entirely dark and the gain defaulted to 1.
    pub dark: bool,
}

/// Gain mapping the pooled mean of every pixel in the stack to 18% of full scale.
pub fn auto_expose<T: Real>(stack: &[&[T]]) -> Result<Exposure> {
    if stack.is_empty() {
        return Err(Error::invalid("auto_expose needs at least one image"));
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for img in stack {
        sum += img.iter().map(|v| v.to_f64_lossy()).sum::<f64>();
        count += img.len();
    }
    let mean = sum / count.max(1) as f64;
    if !(mean > 0.0) {
        log::warn!("auto-exposure stack is dark; using unit gain");
        return Ok(Exposure { gain: 1.0, dark: true });
    }
    Ok(Exposure {
        gain: GRAY_LEVEL / mean,
        dark: false,
    })
}

/// Per-channel sensor readout of one optic, as fractions of full scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Capture<T: Real> {
    pub channels: Vec<Vec<T>>,
    pub clipped: usize,
    pub pixels: usize,
}

impl<T: Real> Capture<T> {
    pub fn clipped_fraction(&self) -> f64 {
        self.clipped as f64 / self.pixels.max(1) as f64
    }

    pub fn overexposed(&self, threshold: f64) -> bool {
        self.clipped_fraction() > threshold
    }
}

/// gain → shot noise → read noise → crosstalk → clip → quantize.
///
/// `rng` is only drawn from when a noise source is enabled.
pub fn capture<T: Real>(channels: &[Vec<T>], model: &SensorModel, rng: &mut ChaCha8Rng) -> Capture<T> {
    let shot = model.shot_noise_photons_at_saturation;
    let read = model.read_noise_sigma;
    let mut exposed: Vec<Vec<f64>> = channels
        .iter()
        .map(|ch| {
            ch.iter()
                .map(|&v| {
                    let mut v = v.to_f64_lossy() * model.exposure_gain;
                    if shot > 0.0 {
                        let z: f64 = StandardNormal.sample(rng);
                        v += (v.max(0.0) / shot).sqrt() * z;
                    }
                    if read > 0.0 {
                        let z: f64 = StandardNormal.sample(rng);
                        v += read * z;
                    }
                    v
                })
                .collect()
        })
        .collect();
    if model.crosstalk != NO_CROSSTALK && channels.len() == CHANNELS {
        let len = exposed[0].len();
        let mut mixed = vec![vec![0.0; len]; CHANNELS];
        for (i, row) in model.crosstalk.iter().enumerate() {
            for (j, &m) in row.iter().enumerate() {
                if m != 0.0 {
                    for (o, &v) in mixed[i].iter_mut().zip(&exposed[j]) {
                        *o += m * v;
                    }
                }
            }
        }
        exposed = mixed;
    }
    let mut clipped = 0;
    let mut pixels = 0;
    let levels = model.full_scale_code() as f64;
    let out = exposed
        .into_iter()
        .map(|ch| {
            pixels += ch.len();
            ch.into_iter()
                .map(|mut v| {
                    if model.clip {
                        if v > 1.0 {
                            clipped += 1;
                        }
                        v = v.clamp(0.0, 1.0);
                    }
                    if model.quantize {
                        v = quantize_code(v.clamp(0.0, 1.0), model.bit_depth) as f64 / levels;
                    }
                    T::lit(v)
                })
                .collect()
        })
        .collect();
    Capture {
        channels: out,
        clipped,
        pixels,
    }
}

/// Average `e × e` blocks of a `(32e)²` plane down to `32 × 32`.
pub fn collapse<T: Real>(plane: &[T], e: usize) -> Result<Vec<T>> {
    let s = IMAGE_SIDE * e;
    if plane.len() != s * s {
        return Err(Error::shape("collapse", s * s, plane.len()));
    }
    let mut out = vec![0.0f64; IMAGE_SIDE * IMAGE_SIDE];
    for y in 0..s {
        for x in 0..s {
            out[(y / e) * IMAGE_SIDE + x / e] += plane[y * s + x].to_f64_lossy();
        }
    }
    let inv = 1.0 / (e * e) as f64;
    Ok(out.into_iter().map(|v| T::lit(v * inv)).collect())
}

/// Adaptive 6×6 average pooling of a `32 × 32` plane.
pub fn pool_6x6<T: Real>(plane: &[T]) -> Result<Vec<T>> {
    if plane.len() != IMAGE_SIDE * IMAGE_SIDE {
        return Err(Error::shape("pool_6x6", IMAGE_SIDE * IMAGE_SIDE, plane.len()));
    }
    adaptive_avg_pool(plane, IMAGE_SIDE, POOL)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CapturedFeatures<T: Real> {
    /// `2n × 36`: positive optics then negative optics.
    pub raw: Vec<T>,
    /// `n × 36`, kernel-major, row-major within a kernel. Also the flat vector.
    pub signed: Vec<T>,
    pub overexposed: bool,
}

impl<T: Real> CapturedFeatures<T> {
    pub fn flat(&self) -> &[T] {
        &self.signed
    }
}

pub fn assemble_features<T: Real>(pos: &[T], neg: &[T]) -> Result<CapturedFeatures<T>> {
    if pos.len() != neg.len() || pos.len() % (POOL * POOL) != 0 {
        return Err(Error::shape("assemble_features", pos.len(), neg.len()));
    }
    let signed = pos.iter().zip(neg).map(|(&p, &n)| p - n).collect();
    let mut raw = pos.to_vec();
    raw.extend_from_slice(neg);
    Ok(CapturedFeatures {
        raw,
        signed,
        overexposed: false,
    })
}

/// Full scene → 576-feature pipeline for one bank and sensor.
///
/// Reported features are divided by `gain · E²`, which makes ideal-PSF
/// features directly comparable with the digital student's pooled conv output.
#[derive(Debug, Clone)]
pub struct Encoder<T: Real> {
    bank: OpticalBank<T>,
    model: SensorModel,
    noise_seed: u64,
}

impl<T: Real> Encoder<T> {
    pub fn new(bank: &PsfBank<T>, model: SensorModel, noise_seed: u64) -> Result<Self> {
        model.validate()?;
        if bank.enlargement != model.enlargement {
            return Err(Error::invalid(format!(
                "PSF bank enlargement {} differs from sensor enlargement {}",
                bank.enlargement, model.enlargement
            )));
        }
        if bank.optics.len() % 2 != 0 {
            return Err(Error::invalid("PSF bank must hold positive and negative optics in pairs"));
        }
        Ok(Self {
            bank: OpticalBank::new(bank),
            model,
            noise_seed,
        })
    }

    pub fn model(&self) -> &SensorModel {
        &self.model
    }

    pub fn n_kernels(&self) -> usize {
        self.bank.optics() / 2
    }

    /// Fix the exposure gain by the 18% rule over the given scenes.
    pub fn calibrate_exposure(&mut self, scenes: &[&[T]]) -> Result<Exposure> {
        let e = self.model.enlargement;
        let stacks: Vec<Vec<Vec<Vec<T>>>> = scenes
            .par_iter()
            .map(|s| self.bank.convolve_scene(s, e))
            .collect::<Result<_>>()?;
        let flat: Vec<&[T]> = stacks.iter().flatten().flatten().map(|v| v.as_slice()).collect();
        let exp = auto_expose(&flat)?;
        self.model.exposure_gain = exp.gain;
        Ok(exp)
    }

    /// Encode one scene; `index` selects the noise stream.
    pub fn encode(&self, scene: &[T], index: u64) -> Result<CapturedFeatures<T>> {
        let e = self.model.enlargement;
        let images = self.bank.convolve_scene(scene, e)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.noise_seed);
        rng.set_stream(index);
        let n = self.n_kernels();
        let mut pooled = Vec::with_capacity(2 * n * POOL * POOL);
        let (mut clipped, mut pixels) = (0, 0);
        let scale = 1.0 / (self.model.exposure_gain.max(f64::MIN_POSITIVE) * (e * e) as f64);
        for optic in &images {
            let cap = capture(optic, &self.model, &mut rng);
            clipped += cap.clipped;
            pixels += cap.pixels;
            let collapsed = collapse(&sum_channels(&cap.channels), e)?;
            pooled.extend(pool_6x6(&collapsed)?.into_iter().map(|v| v * T::lit(scale)));
        }
        let half = n * POOL * POOL;
        let mut f = assemble_features(&pooled[..half], &pooled[half..])?;
        f.overexposed = clipped as f64 / pixels.max(1) as f64 > self.model.overexposure_threshold;
        Ok(f)
    }

    /// Encode scenes in parallel; noise stream `first_index + i` for scene `i`.
    pub fn encode_batch(&self, scenes: &[&[T]], first_index: u64) -> Result<Vec<CapturedFeatures<T>>> {
        scenes
            .par_iter()
            .enumerate()
            .map(|(i, s)| self.encode(s, first_index + i as u64))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn capture_examples() {
        let model = SensorModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = capture(&[vec![0.5f64]], &model, &mut rng);
        assert_eq!((c.channels[0][0] * 255.0).round() as u32, 128);
        let c = capture(&[vec![1.7f64]], &model, &mut rng);
        assert_eq!(c.channels[0][0], 1.0);
        assert_eq!(c.clipped, 1);
        let c = capture(&[vec![1.2f64; 100]], &model, &mut rng);
        assert!(c.overexposed(0.01));
    }

    #[test]
    fn quantize_rounds_half_up() {
        assert_eq!(quantize_code(0.5, 8), 128);
        assert_eq!(quantize_code(0.0, 8), 0);
        assert_eq!(quantize_code(1.0, 8), 255);
        assert_eq!(quantize_code(1.0, 1), 1);
    }

    #[test]
    fn auto_expose_examples() {
        let e = auto_expose(&[&[0.36f64; 4][..]]).unwrap();
        assert!((e.gain - 0.5).abs() < 1e-12);
        let e = auto_expose(&[&[0.1f64; 8][..], &[0.26f64; 8][..]]).unwrap();
        assert!((e.gain - 1.0).abs() < 1e-12);
        let e = auto_expose(&[&[0.0f64; 3][..]]).unwrap();
        assert!(e.dark && e.gain == 1.0);
    }

    #[test]
    fn pool_column_ramp() {
        let plane: Vec<f64> = (0..1024).map(|i| (i % 32) as f64).collect();
        let p = pool_6x6(&plane).unwrap();
        for (got, want) in p[..6].iter().zip([2.0, 7.0, 12.5, 18.0, 23.0, 28.5]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn assemble_examples() {
        let pos = vec![0.7f64; 36];
        let f = assemble_features(&pos, &[0.0; 36]).unwrap();
        assert_eq!(f.signed, pos);
        let f = assemble_features(&pos, &pos).unwrap();
        assert!(f.signed.iter().all(|&v| v == 0.0));
        let mut neg = vec![0.0f64; 36];
        neg[3] = 0.2;
        let f = assemble_features(&pos, &neg).unwrap();
        assert!((f.signed[3] - 0.5).abs() < 1e-15);
        assert!(assemble_features(&pos, &[0.0; 35]).is_err());
    }

    #[test]
    fn fft_sizes_are_smooth() {
        assert_eq!(fft_size(88), 96);
        assert_eq!(fft_size(39), 48);
        assert_eq!(fft_size(64), 64);
    }
}
