//! Scalar fields, band-limited angular spectrum propagation and detection.

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::fft::{signed_bin, Fft2};
use crate::scalar::{sum_f64, Real};

/// Square, even-sided grid of complex amplitudes sampled at `pitch`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexField<T: Real> {
    side: usize,
    amplitudes: Vec<Complex<T>>,
    pitch: T,
    wavelength: T,
}

impl<T: Real> ComplexField<T> {
    pub fn new(side: usize, amplitudes: Vec<Complex<T>>, pitch: T, wavelength: T) -> Result<Self> {
        if side == 0 || side % 2 != 0 {
            return Err(Error::invalid(format!("field side must be even and positive, got {side}")));
        }
        if amplitudes.len() != side * side {
            return Err(Error::shape("ComplexField", format!("{side}x{side}"), amplitudes.len()));
        }
        if !(pitch > T::zero()) || !(wavelength > T::zero()) {
            return Err(Error::invalid("pitch and wavelength must be positive"));
        }
        Ok(Self {
            side,
            amplitudes,
            pitch,
            wavelength,
        })
    }

    pub fn plane_wave(side: usize, pitch: T, wavelength: T) -> Result<Self> {
        Self::new(
            side,
            vec![Complex::new(T::one(), T::zero()); side * side],
            pitch,
            wavelength,
        )
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn pitch(&self) -> T {
        self.pitch
    }

    pub fn wavelength(&self) -> T {
        self.wavelength
    }

    pub fn amplitudes(&self) -> &[Complex<T>] {
        &self.amplitudes
    }

    pub fn into_amplitudes(self) -> Vec<Complex<T>> {
        self.amplitudes
    }

    /// Σ|a|², accumulated in `f64`.
    pub fn power(&self) -> f64 {
        self.amplitudes.iter().map(|a| a.norm_sqr().to_f64_lossy()).sum()
    }
}

/// Nonnegative irradiance on a square grid.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityMap<T: Real> {
    side: usize,
    values: Vec<T>,
    pitch: T,
}

impl<T: Real> IntensityMap<T> {
    pub fn new(side: usize, values: Vec<T>, pitch: T) -> Result<Self> {
        if values.len() != side * side {
            return Err(Error::shape("IntensityMap", format!("{side}x{side}"), values.len()));
        }
        if values.iter().any(|v| !(*v >= T::zero())) {
            return Err(Error::invalid("intensity values must be finite and nonnegative"));
        }
        Ok(Self { side, values, pitch })
    }

    pub(crate) fn new_unchecked(side: usize, values: Vec<T>, pitch: T) -> Self {
        debug_assert_eq!(values.len(), side * side);
        Self { side, values, pitch }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn pitch(&self) -> T {
        self.pitch
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn total(&self) -> f64 {
        sum_f64(self.values.iter().copied())
    }

    pub fn at(&self, row: usize, col: usize) -> T {
        self.values[row * self.side + col]
    }
}

/// Propagation knobs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PropagationConfig {
    /// Zero spatial frequencies beyond the sampling-aliasing bound.
    pub band_limited: bool,
    /// Padded FFT grid = `padding × side` (1 disables padding).
    pub padding: usize,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        Self {
            band_limited: true,
            padding: 2,
        }
    }
}

/// Precomputed angular-spectrum transfer function for one geometry.
///
/// Reused across iterations of an optimizer; `propagate` and `adjoint`
/// only read `self`, so one instance can serve several threads.
#[derive(Debug, Clone)]
pub struct Propagator<T: Real> {
    side: usize,
    padded: usize,
    fft: Fft2<T>,
    transfer: Vec<Complex<T>>,
}

impl<T: Real> Propagator<T> {
    /// `distance` may be negative here (back-propagation); the public
    /// [`asm_propagate`] entry point rejects negative distances.
    pub fn new(side: usize, pitch: T, wavelength: T, distance: T, config: PropagationConfig) -> Result<Self> {
        if side == 0 {
            return Err(Error::invalid("empty grid"));
        }
        if config.padding == 0 {
            return Err(Error::invalid("padding factor must be at least 1"));
        }
        if !(pitch > T::zero()) || !(wavelength > T::zero()) {
            return Err(Error::invalid("pitch and wavelength must be positive"));
        }
        let padded = side * config.padding;
        let transfer = transfer_function(
            padded,
            pitch.to_f64_lossy(),
            wavelength.to_f64_lossy(),
            distance.to_f64_lossy(),
            config.band_limited,
        );
        Ok(Self {
            side,
            padded,
            fft: Fft2::new(padded),
            transfer: transfer
                .into_iter()
                .map(|h| Complex::new(T::lit(h.re), T::lit(h.im)))
                .collect(),
        })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn padded_side(&self) -> usize {
        self.padded
    }

    /// Number of transfer-function samples that pass (nonzero).
    pub fn passband_count(&self) -> usize {
        self.transfer.iter().filter(|h| h.norm_sqr() > T::zero()).count()
    }

    pub fn propagate(&self, field: &[Complex<T>]) -> Vec<Complex<T>> {
        self.apply(field, false)
    }

    /// Adjoint of [`Self::propagate`]; back-propagates a field gradient.
    pub fn adjoint(&self, grad: &[Complex<T>]) -> Vec<Complex<T>> {
        self.apply(grad, true)
    }

    fn apply(&self, field: &[Complex<T>], conjugate: bool) -> Vec<Complex<T>> {
        let (n, p) = (self.side, self.padded);
        assert_eq!(field.len(), n * n, "field size does not match propagator");
        let off = (p - n) / 2;
        let mut buf = vec![Complex::new(T::zero(), T::zero()); p * p];
        for r in 0..n {
            buf[(r + off) * p + off..(r + off) * p + off + n].copy_from_slice(&field[r * n..(r + 1) * n]);
        }
        self.fft.forward(&mut buf);
        if conjugate {
            for (v, h) in buf.iter_mut().zip(&self.transfer) {
                *v = *v * h.conj();
            }
        } else {
            for (v, h) in buf.iter_mut().zip(&self.transfer) {
                *v = *v * *h;
            }
        }
        self.fft.inverse(&mut buf);
        let mut out = Vec::with_capacity(n * n);
        for r in 0..n {
            out.extend_from_slice(&buf[(r + off) * p + off..(r + off) * p + off + n]);
        }
        out
    }
}

/// Transfer function `exp(i·2π·z·√(λ⁻² − fx² − fy²))` on an `n × n` FFT grid.
fn transfer_function(n: usize, pitch: f64, wavelength: f64, distance: f64, band_limited: bool) -> Vec<Complex<f64>> {
    let df = 1.0 / (n as f64 * pitch);
    let inv_l2 = 1.0 / (wavelength * wavelength);
    let extent = n as f64 * pitch;
    let f_limit = 1.0 / (wavelength * (1.0 + (2.0 * distance / extent).powi(2)).sqrt());
    let two_pi_z = 2.0 * std::f64::consts::PI * distance;
    let mut h = Vec::with_capacity(n * n);
    for ky in 0..n {
        let fy = signed_bin(ky, n) as f64 * df;
        for kx in 0..n {
            let fx = signed_bin(kx, n) as f64 * df;
            let arg = inv_l2 - fx * fx - fy * fy;
            let evanescent = arg < 0.0 && distance != 0.0;
            let clipped = band_limited && (fx.abs() >= f_limit || fy.abs() >= f_limit);
            if evanescent || clipped {
                h.push(Complex::new(0.0, 0.0));
            } else {
                h.push(Complex::from_polar(1.0, two_pi_z * arg.max(0.0).sqrt()));
            }
        }
    }
    h
}

/// Propagate `field` forward by `distance` meters.
pub fn asm_propagate<T: Real>(field: &ComplexField<T>, distance: T, config: PropagationConfig) -> Result<ComplexField<T>> {
    if !(distance >= T::zero()) {
        return Err(Error::OutOfRange {
            what: "distance",
            value: distance.to_f64_lossy(),
            min: 0.0,
            max: f64::INFINITY,
        });
    }
    propagate_signed(field, distance, config)
}

pub(crate) fn propagate_signed<T: Real>(field: &ComplexField<T>, distance: T, config: PropagationConfig) -> Result<ComplexField<T>> {
    let prop = Propagator::new(field.side, field.pitch, field.wavelength, distance, config)?;
    let out = prop.propagate(&field.amplitudes);
    ComplexField::new(field.side, out, field.pitch, field.wavelength)
}

/// `|a|²` elementwise.
pub fn intensity<T: Real>(field: &ComplexField<T>) -> IntensityMap<T> {
    IntensityMap::new_unchecked(
        field.side,
        field.amplitudes.iter().map(|a| a.norm_sqr()).collect(),
        field.pitch,
    )
}

/// Sum `factor × factor` blocks; pitch scales by `factor`.
pub fn bin_to_sensor<T: Real>(map: &IntensityMap<T>, factor: usize) -> Result<IntensityMap<T>> {
    let values = bin_sum(&map.values, map.side, factor)?;
    Ok(IntensityMap::new_unchecked(
        map.side / factor,
        values,
        map.pitch * T::from_usize_lossy(factor),
    ))
}

pub(crate) fn bin_sum<T: Real>(values: &[T], side: usize, factor: usize) -> Result<Vec<T>> {
    if factor == 0 || side % factor != 0 {
        return Err(Error::invalid(format!("grid side {side} not divisible by bin factor {factor}")));
    }
    let out_side = side / factor;
    let mut out = vec![T::zero(); out_side * out_side];
    for r in 0..side {
        let orow = (r / factor) * out_side;
        for c in 0..side {
            out[orow + c / factor] += values[r * side + c];
        }
    }
    Ok(out)
}
