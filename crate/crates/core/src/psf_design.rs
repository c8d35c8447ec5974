//! Gradient-descent design of pillar-width maps whose simulated PSFs match
//! camera-grid targets.
//!
//! Forward model per wavelength: widths → proxy phase → unit-amplitude phase
//! mask (each logical width drives a `group × group` block of scatterers) →
//! angular spectrum propagation → intensity → centered crop → camera binning
//! → L2 normalization. Gradients are propagated back through the same chain
//! by hand; the propagation step uses the exact adjoint of the FFT transfer.

use std::io::{BufRead, Write};

use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytics::cosine_similarity;
use crate::error::{Error, Result};
use crate::io::container::{self, WIDTH_MAP_MAGIC};
use crate::kernel_bank::DesignTarget;
use crate::optics::{IntensityMap, PropagationConfig, Propagator};
use crate::optim::{Adam, AdamConfig};
use crate::scalar::Real;
use crate::scatterer::{ProxyPhaseParams, WidthRange};

pub const DEFAULT_SCATTERER_PITCH: f64 = 293e-9;
pub const DEFAULT_DISTANCE: f64 = 2.4e-3;
/// Camera pixel (5.86 µm) over scatterer pitch (293 nm).
pub const DEFAULT_BIN_FACTOR: usize = 20;

/// Logical width grid; each entry sets a `group × group` block of pillars.
#[derive(Debug, Clone, PartialEq)]
pub struct WidthMap<T: Real> {
    side: usize,
    group: usize,
    pitch: f64,
    range: WidthRange,
    widths: Vec<T>,
}

impl<T: Real> WidthMap<T> {
    pub fn new(side: usize, group: usize, pitch: f64, range: WidthRange, widths: Vec<T>) -> Result<Self> {
        if side == 0 || group == 0 {
            return Err(Error::invalid("width map side and group must be positive"));
        }
        if (side * group) % 2 != 0 {
            return Err(Error::invalid(format!("physical side {} must be even", side * group)));
        }
        if !(pitch > 0.0) || !(range.min < range.max) {
            return Err(Error::invalid("pitch must be positive and bounds ordered"));
        }
        if widths.len() != side * side {
            return Err(Error::shape("WidthMap", side * side, widths.len()));
        }
        for &w in &widths {
            range.check(w.to_f64_lossy())?;
        }
        Ok(Self {
            side,
            group,
            pitch,
            range,
            widths,
        })
    }

    pub fn uniform(side: usize, group: usize, pitch: f64, range: WidthRange, width: T) -> Result<Self> {
        Self::new(side, group, pitch, range, vec![width; side * side])
    }

    /// Mid-range widths plus seeded uniform noise of ±`noise` in sigmoid space.
    pub fn initial(side: usize, group: usize, pitch: f64, range: WidthRange, noise: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = (0..side * side)
            .map(|_| {
                let u = if noise > 0.0 { rng.random_range(-noise..noise) } else { 0.0 };
                T::lit(range.min + (range.max - range.min) * sigmoid(u))
            })
            .collect();
        Self::new(side, group, pitch, range, widths)
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn group(&self) -> usize {
        self.group
    }

    pub fn physical_side(&self) -> usize {
        self.side * self.group
    }

    pub fn pitch(&self) -> f64 {
        self.pitch
    }

    pub fn range(&self) -> WidthRange {
        self.range
    }

    pub fn widths(&self) -> &[T] {
        &self.widths
    }

    /// Replicate each logical width over its group block.
    pub fn physical_widths(&self) -> Vec<T> {
        let (n, g) = (self.physical_side(), self.group);
        let mut out = Vec::with_capacity(n * n);
        for r in 0..n {
            let row = &self.widths[(r / g) * self.side..(r / g + 1) * self.side];
            for c in 0..n {
                out.push(row[c / g]);
            }
        }
        out
    }

    /// The same physical map expressed with group 1.
    pub fn ungrouped(&self) -> Self {
        Self {
            side: self.physical_side(),
            group: 1,
            pitch: self.pitch,
            range: self.range,
            widths: self.physical_widths(),
        }
    }

    pub fn cast<U: Real>(&self) -> WidthMap<U> {
        WidthMap {
            side: self.side,
            group: self.group,
            pitch: self.pitch,
            range: self.range,
            widths: self.widths.iter().map(|w| U::lit(w.to_f64_lossy())).collect(),
        }
    }

    /// Design checkpoint: magic, JSON header, `f32` widths row-major.
    pub fn write_checkpoint<W: Write>(&self, w: W, seed: u64, iteration: usize) -> Result<()> {
        let header = CheckpointHeader {
            logical_side: self.side,
            group: self.group,
            pitch: self.pitch,
            bounds: [self.range.min, self.range.max],
            seed,
            iteration,
        };
        let payload = container::f32_to_le_bytes(self.widths.iter().map(|v| v.to_f64_lossy() as f32));
        container::write_container(w, &WIDTH_MAP_MAGIC, &header, &payload)
    }

    pub fn read_checkpoint<R: BufRead>(mut r: R) -> Result<(Self, CheckpointHeader)> {
        const FMT: &str = "design checkpoint";
        let h: CheckpointHeader = container::read_header(&mut r, &WIDTH_MAP_MAGIC, FMT)?;
        let n = h.logical_side * h.logical_side;
        let payload = container::read_payload(&mut r, n * 4, FMT)?;
        let range = WidthRange {
            min: h.bounds[0],
            max: h.bounds[1],
        };
        // f32 storage can land a hair outside the bounds.
        let widths = container::le_bytes_to_f32(&payload)
            .into_iter()
            .map(|v| T::lit((v as f64).clamp(range.min, range.max)))
            .collect();
        let map = Self::new(h.logical_side, h.group, h.pitch, range, widths)?;
        Ok((map, h))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub logical_side: usize,
    pub group: usize,
    pub pitch: f64,
    pub bounds: [f64; 2],
    pub seed: u64,
    pub iteration: usize,
}

/// Propagation and camera sampling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DesignGeometry {
    pub distance: f64,
    /// Scatterers per camera pixel along one axis.
    pub bin_factor: usize,
    pub padding: usize,
    pub band_limited: bool,
    /// Camera window side; `None` picks the largest even side that fits.
    pub window: Option<usize>,
}

impl Default for DesignGeometry {
    fn default() -> Self {
        Self {
            distance: DEFAULT_DISTANCE,
            bin_factor: DEFAULT_BIN_FACTOR,
            padding: 2,
            band_limited: true,
            window: None,
        }
    }
}

impl DesignGeometry {
    pub fn camera_window(&self, physical_side: usize) -> Result<usize> {
        if self.bin_factor == 0 {
            return Err(Error::invalid("bin factor must be positive"));
        }
        let max = physical_side / self.bin_factor;
        let w = match self.window {
            Some(w) if w <= max && w > 0 => w,
            Some(w) => {
                return Err(Error::invalid(format!(
                    "camera window {w} does not fit {physical_side} scatterers at bin factor {}",
                    self.bin_factor
                )))
            }
            None => max - max % 2,
        };
        if w == 0 {
            return Err(Error::invalid("width map too small for a single camera pixel"));
        }
        Ok(w)
    }
}

/// Per-channel forward model for one map shape.
#[derive(Debug, Clone)]
pub struct PsfSimulator<T: Real> {
    logical: usize,
    group: usize,
    physical: usize,
    bin: usize,
    window: usize,
    crop_start: usize,
    proxies: Vec<ProxyPhaseParams<T>>,
    propagators: Vec<Propagator<T>>,
}

/// L_λ per channel (`None` for degenerate targets) and the RMS combination.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignLoss {
    pub per_channel: Vec<Option<f64>>,
    pub net: f64,
}

impl<T: Real> PsfSimulator<T> {
    /// `proxies` fixes the channel order (one wavelength per channel).
    pub fn new(
        logical_side: usize,
        group: usize,
        pitch: f64,
        range: WidthRange,
        proxies: Vec<ProxyPhaseParams<T>>,
        geometry: &DesignGeometry,
    ) -> Result<Self> {
        if !(range.min < range.max) {
            return Err(Error::invalid("width bounds must be ordered"));
        }
        if !(geometry.distance > 0.0) {
            return Err(Error::invalid("propagation distance must be positive"));
        }
        if proxies.is_empty() {
            return Err(Error::invalid("at least one wavelength is required"));
        }
        let physical = logical_side * group;
        let window = geometry.camera_window(physical)?;
        let config = PropagationConfig {
            band_limited: geometry.band_limited,
            padding: geometry.padding,
        };
        let propagators = proxies
            .iter()
            .map(|p| Propagator::new(physical, T::lit(pitch), p.wavelength, T::lit(geometry.distance), config))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            logical: logical_side,
            group,
            physical,
            bin: geometry.bin_factor,
            window,
            crop_start: (physical - window * geometry.bin_factor) / 2,
            proxies,
            propagators,
        })
    }

    pub fn for_map(map: &WidthMap<T>, proxies: Vec<ProxyPhaseParams<T>>, geometry: &DesignGeometry) -> Result<Self> {
        Self::new(map.side, map.group, map.pitch, map.range, proxies, geometry)
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn channels(&self) -> usize {
        self.proxies.len()
    }

    fn check_map(&self, map: &WidthMap<T>) -> Result<()> {
        if map.side != self.logical || map.group != self.group {
            return Err(Error::shape(
                "width map",
                format!("{0}x{0} group {1}", self.logical, self.group),
                format!("{0}x{0} group {1}", map.side, map.group),
            ));
        }
        Ok(())
    }

    fn expand(&self, logical: &[T]) -> Vec<T> {
        let (n, g) = (self.physical, self.group);
        let mut out = Vec::with_capacity(n * n);
        for r in 0..n {
            let row = &logical[(r / g) * self.logical..(r / g + 1) * self.logical];
            for c in 0..n {
                out.push(row[c / g]);
            }
        }
        out
    }

    /// Phase mask and propagated field for one channel.
    fn field(&self, physical: &[T], channel: usize) -> (Vec<Complex<T>>, Vec<Complex<T>>) {
        let proxy = &self.proxies[channel];
        let mask: Vec<Complex<T>> = physical
            .iter()
            .map(|&w| {
                let phi = proxy.phase_unchecked(w);
                Complex::new(phi.cos(), phi.sin())
            })
            .collect();
        let u = self.propagators[channel].propagate(&mask);
        (mask, u)
    }

    fn binned(&self, u: &[Complex<T>]) -> Vec<T> {
        let (n, b, w, s) = (self.physical, self.bin, self.window, self.crop_start);
        let mut out = vec![T::zero(); w * w];
        for r in 0..w * b {
            let src = &u[(s + r) * n + s..(s + r) * n + s + w * b];
            let dst = &mut out[(r / b) * w..(r / b + 1) * w];
            for (c, a) in src.iter().enumerate() {
                dst[c / b] += a.norm_sqr();
            }
        }
        out
    }

    /// Unnormalized binned intensity on the camera window, per channel.
    pub fn simulate(&self, map: &WidthMap<T>) -> Result<Vec<IntensityMap<T>>> {
        self.check_map(map)?;
        let physical = self.expand(&map.widths);
        let pitch = T::lit(map.pitch * self.bin as f64);
        (0..self.channels())
            .into_par_iter()
            .map(|c| {
                let (_, u) = self.field(&physical, c);
                IntensityMap::new(self.window, self.binned(&u), pitch)
            })
            .collect()
    }

    /// Net loss and its gradient with respect to every logical width (per meter).
    pub fn loss_and_gradient(&self, map: &WidthMap<T>, target: &DesignTarget<T>) -> Result<(DesignLoss, Vec<T>)> {
        self.check_map(map)?;
        self.check_target(target)?;
        let physical = self.expand(&map.widths);
        let forward: Vec<Option<ChannelForward<T>>> = (0..self.channels())
            .into_par_iter()
            .map(|c| {
                target.plane(c).map(|t| {
                    let (mask, u) = self.field(&physical, c);
                    let binned = self.binned(&u);
                    ChannelForward::new(mask, u, binned, t)
                })
            })
            .collect();
        let per_channel: Vec<Option<f64>> = forward.iter().map(|f| f.as_ref().map(|f| f.loss)).collect();
        for (c, f) in forward.iter().enumerate() {
            if let Some(f) = f {
                if f.norm == 0.0 {
                    return Err(Error::invalid(format!("channel {c}: simulated PSF has no energy in the window")));
                }
            }
        }
        let net = net_loss(&per_channel);
        let loss = DesignLoss { per_channel, net };
        if net == 0.0 {
            return Ok((loss, vec![T::zero(); map.widths.len()]));
        }
        let grads: Vec<Vec<T>> = forward
            .par_iter()
            .enumerate()
            .filter_map(|(c, f)| f.as_ref().map(|f| (c, f)))
            .map(|(c, f)| self.backward(&physical, c, f, target.plane(c).unwrap(), f.loss / net))
            .collect();
        // Fixed channel order for the reduction.
        let mut phys_grad = vec![T::zero(); physical.len()];
        for g in &grads {
            for (a, &b) in phys_grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        Ok((loss, self.reduce_groups(&phys_grad)))
    }

    fn check_target(&self, target: &DesignTarget<T>) -> Result<()> {
        if target.window() != self.window || target.channels() != self.channels() {
            return Err(Error::shape(
                "design target",
                format!("{} channels, window {}", self.channels(), self.window),
                format!("{} channels, window {}", target.channels(), target.window()),
            ));
        }
        Ok(())
    }

    /// d(net)/d(physical width) for one channel, scaled by d(net)/d(L_c).
    fn backward(&self, physical: &[T], channel: usize, f: &ChannelForward<T>, target: &[T], scale: f64) -> Vec<T> {
        let (n, b, w, s) = (self.physical, self.bin, self.window, self.crop_start);
        // dL/dp = 2(p − t); through p = P/‖P‖.
        let g: Vec<f64> = f
            .normalized
            .iter()
            .zip(target)
            .map(|(&p, &t)| 2.0 * (p - t.to_f64_lossy()))
            .collect();
        let pg: f64 = f.normalized.iter().zip(&g).map(|(p, g)| p * g).sum();
        let d_binned: Vec<T> = f
            .normalized
            .iter()
            .zip(&g)
            .map(|(&p, &gi)| T::lit(scale * (gi - p * pg) / f.norm))
            .collect();
        // I = |U|² → G_U = 2·(dL/dI)·U, nonzero only inside the crop.
        let zero = Complex::new(T::zero(), T::zero());
        let mut g_u = vec![zero; n * n];
        let two = T::lit(2.0);
        for r in 0..w * b {
            let row = (s + r) * n + s;
            let d_row = &d_binned[(r / b) * w..(r / b + 1) * w];
            for c in 0..w * b {
                g_u[row + c] = f.field[row + c] * (two * d_row[c / b]);
            }
        }
        let g_t = self.propagators[channel].adjoint(&g_u);
        let proxy = &self.proxies[channel];
        physical
            .iter()
            .zip(&f.mask)
            .zip(&g_t)
            .map(|((&wv, t), gt)| (t.conj() * gt).im * proxy.phase_derivative(wv))
            .collect()
    }

    fn reduce_groups(&self, phys: &[T]) -> Vec<T> {
        let (n, g, m) = (self.physical, self.group, self.logical);
        let mut out = vec![T::zero(); m * m];
        for r in 0..n {
            for c in 0..n {
                out[(r / g) * m + c / g] += phys[r * n + c];
            }
        }
        out
    }
}

struct ChannelForward<T: Real> {
    mask: Vec<Complex<T>>,
    field: Vec<Complex<T>>,
    normalized: Vec<f64>,
    norm: f64,
    loss: f64,
}

impl<T: Real> ChannelForward<T> {
    fn new(mask: Vec<Complex<T>>, field: Vec<Complex<T>>, binned: Vec<T>, target: &[T]) -> Self {
        let norm = binned.iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>().sqrt();
        let inv = if norm > 0.0 { 1.0 / norm } else { 0.0 };
        let normalized: Vec<f64> = binned.iter().map(|v| v.to_f64_lossy() * inv).collect();
        let loss = normalized
            .iter()
            .zip(target)
            .map(|(p, t)| (t.to_f64_lossy() - p).powi(2))
            .sum();
        Self {
            mask,
            field,
            normalized,
            norm,
            loss,
        }
    }
}

fn net_loss(per_channel: &[Option<f64>]) -> f64 {
    per_channel.iter().flatten().map(|l| l * l).sum::<f64>().sqrt()
}

/// Σ(t − p)² per channel after normalizing each simulated map to unit L2.
pub fn design_loss<T: Real>(sims: &[IntensityMap<T>], target: &DesignTarget<T>) -> Result<DesignLoss> {
    if sims.len() != target.channels() {
        return Err(Error::shape("design_loss channels", target.channels(), sims.len()));
    }
    let mut per_channel = Vec::with_capacity(sims.len());
    for (c, sim) in sims.iter().enumerate() {
        if sim.side() != target.window() {
            return Err(Error::shape("design_loss window", target.window(), sim.side()));
        }
        per_channel.push(match target.plane(c) {
            None => None,
            Some(t) => {
                let p = normalized(sim.values())?;
                Some(p.iter().zip(t).map(|(p, t)| (t.to_f64_lossy() - p).powi(2)).sum())
            }
        });
    }
    let net = net_loss(&per_channel);
    Ok(DesignLoss { per_channel, net })
}

fn normalized<T: Real>(values: &[T]) -> Result<Vec<f64>> {
    let norm = values.iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::invalid("simulated PSF is identically zero"));
    }
    Ok(values.iter().map(|v| v.to_f64_lossy() / norm).collect())
}

/// Single-wavelength PSF of a width map on the camera window.
pub fn simulate_psf<T: Real>(
    map: &WidthMap<T>,
    proxy: &ProxyPhaseParams<T>,
    geometry: &DesignGeometry,
) -> Result<IntensityMap<T>> {
    let sim = PsfSimulator::for_map(map, vec![*proxy], geometry)?;
    Ok(sim.simulate(map)?.remove(0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DesignConfig {
    pub adam: AdamConfig,
    pub iterations: usize,
    /// Half-width of the uniform sigmoid-space noise at initialization.
    pub init_noise: f64,
    pub seed: u64,
}

impl Default for DesignConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig {
                learning_rate: 0.02,
                ..AdamConfig::default()
            },
            iterations: 1000,
            init_noise: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DesignResult<T: Real> {
    /// Best-so-far map.
    pub map: WidthMap<T>,
    pub best_iteration: usize,
    /// Per-iteration L_λ (`None` for degenerate channels).
    pub channel_loss_history: Vec<Vec<Option<f64>>>,
    pub net_history: Vec<f64>,
    /// Unit-L2 simulated PSFs of the returned map.
    pub psfs: Vec<Vec<T>>,
    /// η against the target; `None` for degenerate channels.
    pub cosine: Vec<Option<f64>>,
    pub final_loss: DesignLoss,
}

impl<T: Real> DesignResult<T> {
    pub fn best_so_far(&self) -> Vec<f64> {
        let mut best = f64::INFINITY;
        self.net_history
            .iter()
            .map(|&v| {
                best = best.min(v);
                best
            })
            .collect()
    }
}

fn sigmoid(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

/// Adam on the net loss in sigmoid space, `w = w_min + (w_max − w_min)·σ(u)`.
pub fn optimize<T: Real>(
    sim: &PsfSimulator<T>,
    init: &WidthMap<T>,
    target: &DesignTarget<T>,
    config: &DesignConfig,
) -> Result<DesignResult<T>> {
    sim.check_map(init)?;
    sim.check_target(target)?;
    let range = init.range;
    let span = range.max - range.min;
    let mut u: Vec<T> = init
        .widths
        .iter()
        .map(|w| {
            let f = ((w.to_f64_lossy() - range.min) / span).clamp(1e-9, 1.0 - 1e-9);
            T::lit((f / (1.0 - f)).ln())
        })
        .collect();
    let mut adam = Adam::new(u.len(), config.adam);
    let mut map = init.clone();
    let mut best: Option<(f64, WidthMap<T>, usize)> = None;
    let mut channel_loss_history = Vec::with_capacity(config.iterations + 1);
    let mut net_history = Vec::with_capacity(config.iterations + 1);

    for iteration in 0..=config.iterations {
        let (loss, grad_w) = sim.loss_and_gradient(&map, target)?;
        if !loss.net.is_finite() {
            return Err(Error::NonFinite {
                what: "design loss",
                iteration,
            });
        }
        if best.as_ref().is_none_or(|(b, _, _)| loss.net < *b) {
            best = Some((loss.net, map.clone(), iteration));
        }
        net_history.push(loss.net);
        channel_loss_history.push(loss.per_channel);
        if iteration == config.iterations {
            break;
        }
        let grad_u: Vec<T> = grad_w
            .iter()
            .zip(&u)
            .map(|(&g, &ui)| {
                let s = sigmoid(ui.to_f64_lossy());
                g * T::lit(span * s * (1.0 - s))
            })
            .collect();
        if grad_u.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                what: "design gradient",
                iteration,
            });
        }
        adam.step(&mut u, &grad_u);
        for (w, ui) in map.widths.iter_mut().zip(&u) {
            let f = sigmoid(ui.to_f64_lossy());
            *w = T::lit((range.min + span * f).clamp(range.min, range.max));
        }
    }

    let (_, best_map, best_iteration) = best.expect("at least one evaluation");
    let sims = sim.simulate(&best_map)?;
    let final_loss = design_loss(&sims, target)?;
    let mut psfs = Vec::with_capacity(sims.len());
    let mut cosine = Vec::with_capacity(sims.len());
    for (c, s) in sims.iter().enumerate() {
        let p = normalized(s.values())?;
        cosine.push(match target.plane(c) {
            Some(t) => Some(cosine_similarity(&p, &t.iter().map(|v| v.to_f64_lossy()).collect::<Vec<_>>())?),
            None => None,
        });
        psfs.push(p.into_iter().map(T::lit).collect());
    }
    Ok(DesignResult {
        map: best_map,
        best_iteration,
        channel_loss_history,
        net_history,
        psfs,
        cosine,
        final_loss,
    })
}

/// Designs for every optic of a target set, plus the raw simulated
/// intensities of each best map (the input expected by sensor banks).
#[derive(Debug, Clone)]
pub struct BankDesign<T: Real> {
    pub results: Vec<DesignResult<T>>,
    pub simulated: Vec<Vec<IntensityMap<T>>>,
}

impl<T: Real> BankDesign<T> {
    /// Mean η over all targeted channels of all optics.
    pub fn mean_cosine(&self) -> f64 {
        let all: Vec<f64> = self.results.iter().flat_map(|r| r.cosine.iter().flatten().copied()).collect();
        all.iter().sum::<f64>() / all.len().max(1) as f64
    }
}

/// Design one map per target, optic `i` initialized with seed `config.seed + i`.
/// Optics are designed in parallel; results do not depend on thread count.
pub fn design_bank<T: Real>(
    sim: &PsfSimulator<T>,
    pitch: f64,
    range: WidthRange,
    targets: &[DesignTarget<T>],
    config: &DesignConfig,
) -> Result<BankDesign<T>> {
    let done: Vec<(DesignResult<T>, Vec<IntensityMap<T>>)> = targets
        .par_iter()
        .enumerate()
        .map(|(i, target)| {
            let init = WidthMap::initial(sim.logical, sim.group, pitch, range, config.init_noise, config.seed.wrapping_add(i as u64))?;
            let result = optimize(sim, &init, target, config)?;
            log::info!("optic {i}: eta {:?} after {} iterations", result.cosine, config.iterations);
            let raw = sim.simulate(&result.map)?;
            Ok((result, raw))
        })
        .collect::<Result<_>>()?;
    let (results, simulated) = done.into_iter().unzip();
    Ok(BankDesign { results, simulated })
}

/// Widths whose proxy phase best matches each requested phase modulo 2π
/// (dense search over the fabricable range).
pub fn widths_for_phase<T: Real>(proxy: &ProxyPhaseParams<T>, range: &WidthRange, phases: &[f64]) -> Vec<T> {
    const SAMPLES: usize = 4096;
    let table: Vec<(f64, f64)> = (0..SAMPLES)
        .map(|i| {
            let w = range.min + (range.max - range.min) * i as f64 / (SAMPLES - 1) as f64;
            (w, proxy.phase_unchecked(T::lit(w)).to_f64_lossy())
        })
        .collect();
    phases
        .iter()
        .map(|&target| {
            let mut best = (f64::INFINITY, range.min);
            for &(w, phi) in &table {
                let d = (phi - target).rem_euclid(std::f64::consts::TAU);
                let d = d.min(std::f64::consts::TAU - d);
                if d < best.0 {
                    best = (d, w);
                }
            }
            T::lit(best.1)
        })
        .collect()
}
