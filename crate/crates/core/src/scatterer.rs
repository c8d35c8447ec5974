//! Pillar-width → phase proxy model and its fit to tabulated scatterer data.
//!
//! The proxy for one wavelength is
//!
//! ```text
//! φ(w) = 2π·n_eff·L/λ + A·exp((w − B)² / C) − f0
//! ```
//!
//! with `f0` pinned so that `φ(w_ref) = 0`. `C < 0` gives a bump-shaped
//! correction, `C > 0` a well. Because of the pin, the waveguide term is a
//! constant that cancels: `n_eff` does not influence φ and cannot be
//! recovered from relative phase data.

use std::io::{Read, Write};

use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

pub const DEFAULT_PILLAR_HEIGHT: f64 = 800e-9;

/// The three design wavelengths (B, G, R) in meters.
pub const DESIGN_WAVELENGTHS: [f64; 3] = [450e-9, 532e-9, 635e-9];

/// Fabricable pillar-width interval in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WidthRange {
    pub min: f64,
    pub max: f64,
}

impl Default for WidthRange {
    fn default() -> Self {
        Self {
            min: 60e-9,
            max: 250e-9,
        }
    }
}

impl WidthRange {
    pub fn contains(&self, w: f64) -> bool {
        w >= self.min && w <= self.max
    }

    pub fn check(&self, w: f64) -> Result<()> {
        if self.contains(w) {
            Ok(())
        } else {
            Err(Error::OutOfRange {
                what: "pillar width",
                value: w,
                min: self.min,
                max: self.max,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProxyPhaseParams<T: Real> {
    pub wavelength: T,
    pub n_eff: T,
    pub height: T,
    /// Gaussian amplitude `A` (radians).
    pub amplitude: T,
    /// Gaussian center `B` (meters).
    pub center: T,
    /// Gaussian width parameter `C` (square meters, either sign).
    pub width_param: T,
    /// Offset `f0` (radians).
    pub offset: T,
}

impl<T: Real> ProxyPhaseParams<T> {
    /// Build parameters with `f0` chosen so that `φ(w_ref) = 0`.
    pub fn pinned(wavelength: T, n_eff: T, height: T, amplitude: T, center: T, width_param: T, w_ref: T) -> Result<Self> {
        if !(height > T::zero()) || !(n_eff >= T::one()) || !(wavelength > T::zero()) {
            return Err(Error::invalid("proxy requires L > 0, n_eff >= 1, wavelength > 0"));
        }
        if width_param == T::zero() {
            return Err(Error::invalid("Gaussian width parameter C must be nonzero"));
        }
        let mut p = Self {
            wavelength,
            n_eff,
            height,
            amplitude,
            center,
            width_param,
            offset: T::zero(),
        };
        p.offset = p.raw(w_ref);
        Ok(p)
    }

    pub fn cast<U: Real>(&self) -> ProxyPhaseParams<U> {
        let c = |v: T| U::lit(v.to_f64_lossy());
        ProxyPhaseParams {
            wavelength: c(self.wavelength),
            n_eff: c(self.n_eff),
            height: c(self.height),
            amplitude: c(self.amplitude),
            center: c(self.center),
            width_param: c(self.width_param),
            offset: c(self.offset),
        }
    }

    fn waveguide_term(&self) -> T {
        T::TAU() * self.n_eff * self.height / self.wavelength
    }

    fn gaussian(&self, w: T) -> T {
        let d = w - self.center;
        (d * d / self.width_param).exp()
    }

    fn raw(&self, w: T) -> T {
        self.waveguide_term() + self.amplitude * self.gaussian(w)
    }

    /// φ(w) without range checking.
    #[inline]
    pub fn phase_unchecked(&self, w: T) -> T {
        self.raw(w) - self.offset
    }

    /// dφ/dw (radians per meter).
    #[inline]
    pub fn phase_derivative(&self, w: T) -> T {
        let d = w - self.center;
        self.amplitude * self.gaussian(w) * (d + d) / self.width_param
    }
}

/// φ(w), rejecting widths outside the fabricable range.
pub fn proxy_phase<T: Real>(params: &ProxyPhaseParams<T>, w: T, range: &WidthRange) -> Result<T> {
    range.check(w.to_f64_lossy())?;
    Ok(params.phase_unchecked(w))
}

/// Tabulated relative phase and amplitude transmittance versus width.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseLookupTable {
    widths: Vec<f64>,
    wavelengths: Vec<f64>,
    /// `phase[k][i]`: wavelength `k`, width `i`.
    phase: Vec<Vec<f64>>,
    transmission: Vec<Vec<f64>>,
}

impl PhaseLookupTable {
    pub fn new(widths: Vec<f64>, wavelengths: Vec<f64>, phase: Vec<Vec<f64>>, transmission: Vec<Vec<f64>>) -> Result<Self> {
        if widths.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid("table widths must be strictly increasing"));
        }
        if phase.len() != wavelengths.len() || transmission.len() != wavelengths.len() {
            return Err(Error::shape("PhaseLookupTable", wavelengths.len(), phase.len()));
        }
        for (p, t) in phase.iter().zip(&transmission) {
            if p.len() != widths.len() || t.len() != widths.len() {
                return Err(Error::shape("PhaseLookupTable row", widths.len(), p.len().min(t.len())));
            }
            if t.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::invalid("transmission must lie in [0, 1]"));
            }
        }
        Ok(Self {
            widths,
            wavelengths,
            phase,
            transmission,
        })
    }

    pub fn widths(&self) -> &[f64] {
        &self.widths
    }

    pub fn wavelengths(&self) -> &[f64] {
        &self.wavelengths
    }

    pub fn phase(&self, wavelength: f64) -> Result<&[f64]> {
        Ok(&self.phase[self.channel(wavelength)?])
    }

    pub fn transmission(&self, wavelength: f64) -> Result<&[f64]> {
        Ok(&self.transmission[self.channel(wavelength)?])
    }

    fn channel(&self, wavelength: f64) -> Result<usize> {
        self.wavelengths
            .iter()
            .position(|&l| (l - wavelength).abs() <= 1e-6 * wavelength)
            .ok_or_else(|| Error::invalid(format!("wavelength {wavelength:e} not in table")))
    }

    /// Parse `width_nm,phase_450,phase_532,phase_635,trans_450,trans_532,trans_635`.
    pub fn from_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let expected = CSV_HEADER;
        if headers.iter().map(str::trim).ne(expected.iter().copied()) {
            return Err(Error::format(
                "lookup-table CSV",
                format!("expected header {}", expected.join(",")),
            ));
        }
        let mut widths = Vec::new();
        let mut phase = vec![Vec::new(); 3];
        let mut trans = vec![Vec::new(); 3];
        for (line, record) in rdr.records().enumerate() {
            let record = record?;
            let vals: Vec<f64> = record
                .iter()
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::format("lookup-table CSV", format!("row {}: {e}", line + 2)))?;
            if vals.len() != 7 {
                return Err(Error::format("lookup-table CSV", format!("row {} has {} fields", line + 2, vals.len())));
            }
            widths.push(vals[0] * 1e-9);
            for k in 0..3 {
                phase[k].push(vals[1 + k]);
                trans[k].push(vals[4 + k]);
            }
        }
        Self::new(widths, DESIGN_WAVELENGTHS.to_vec(), phase, trans)
    }

    pub fn to_csv<W: Write>(&self, writer: W) -> Result<()> {
        if self.wavelengths.len() != 3 {
            return Err(Error::invalid("CSV format holds exactly three wavelengths"));
        }
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(CSV_HEADER)?;
        for i in 0..self.widths.len() {
            let mut row = vec![format!("{:.6}", self.widths[i] * 1e9)];
            row.extend((0..3).map(|k| format!("{:.12}", self.phase[k][i])));
            row.extend((0..3).map(|k| format!("{:.12}", self.transmission[k][i])));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

const CSV_HEADER: [&str; 7] = [
    "width_nm",
    "phase_450",
    "phase_532",
    "phase_635",
    "trans_450",
    "trans_532",
    "trans_635",
];

/// Remove 2π jumps between consecutive samples.
pub fn unwrap_phase(phase: &[f64]) -> Vec<f64> {
    let tau = std::f64::consts::TAU;
    let mut out = Vec::with_capacity(phase.len());
    let mut shift = 0.0;
    for (i, &p) in phase.iter().enumerate() {
        if i > 0 {
            let d = p - phase[i - 1];
            shift -= tau * ((d + std::f64::consts::PI) / tau).floor();
        }
        out.push(p + shift);
    }
    out
}

fn interp(xs: &[f64], ys: &[f64], x: f64) -> Option<f64> {
    if xs.is_empty() || x < xs[0] || x > xs[xs.len() - 1] {
        return None;
    }
    let i = xs.partition_point(|&v| v <= x);
    if i == 0 {
        return Some(ys[0]);
    }
    if i >= xs.len() {
        return Some(ys[xs.len() - 1]);
    }
    let (x0, x1) = (xs[i - 1], xs[i]);
    let t = (x - x0) / (x1 - x0);
    Some(ys[i - 1] + t * (ys[i] - ys[i - 1]))
}

/// Linearly interpolated amplitude transmittance.
pub fn transmission_at(table: &PhaseLookupTable, wavelength: f64, w: f64) -> Result<f64> {
    let t = table.transmission(wavelength)?;
    interp(&table.widths, t, w).ok_or_else(|| Error::OutOfRange {
        what: "pillar width",
        value: w,
        min: table.widths[0],
        max: table.widths[table.widths.len() - 1],
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub height: f64,
    /// Carried into the result unchanged (see module docs).
    pub n_eff: f64,
    pub max_iterations: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            height: DEFAULT_PILLAR_HEIGHT,
            n_eff: 1.9,
            max_iterations: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProxyFit {
    pub params: ProxyPhaseParams<f64>,
    pub rms_residual: f64,
    /// RMS residual at the Levenberg–Marquardt starting point.
    pub initial_rms: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Least-squares fit of `(A, B, C)` to one wavelength column.
///
/// Phases are unwrapped and matched up to a constant. A coarse grid over
/// `(B, C)` with closed-form amplitude and offset seeds a Levenberg–Marquardt
/// refinement that only accepts improving steps. The returned parameters are
/// pinned at `w_ref`; `rms_residual` is measured before pinning.
pub fn fit_proxy(table: &PhaseLookupTable, wavelength: f64, w_ref: f64, opts: &FitOptions) -> Result<ProxyFit> {
    let raw = table.phase(wavelength)?;
    if raw.len() < 6 {
        return Err(Error::invalid(format!("fit needs at least 6 rows, table has {}", raw.len())));
    }
    // Solver phases have an arbitrary reference, so a constant offset `k` is
    // fitted alongside (A, B, C) and dropped when the result is pinned.
    let target = unwrap_phase(raw);
    // Work in nanometers for conditioning.
    let xs: Vec<f64> = table.widths.iter().map(|w| w * 1e9).collect();
    let model = GaussianModel { xs: &xs };

    let (lo, hi) = (xs[0], xs[xs.len() - 1]);
    let span = (hi - lo).max(1.0);
    let mean = target.iter().sum::<f64>() / target.len() as f64;
    let flat = [0.0, 0.5 * (lo + hi), -span * span, mean];
    // The landscape has several basins (a bump and a dip can both fit a
    // monotone curve), so the best (C, A) for every B and sign of C is
    // refined and the overall winner kept.
    let mut seeds = vec![(model.cost(&flat, &target), flat)];
    for bi in 0..=40 {
        let b = lo - span + 3.0 * span * bi as f64 / 40.0;
        for sign in [-1.0, 1.0] {
            let mut best: Option<(f64, [f64; 4])> = None;
            for ci in 0..24 {
                let c = sign * (span / 20.0).powi(2) * (400.0f64).powf(ci as f64 / 23.0);
                if let Some((a, k, cost)) = model.best_linear(b, c, &target) {
                    if best.is_none_or(|(bc, _)| cost < bc) {
                        best = Some((cost, [a, b, c, k]));
                    }
                }
            }
            seeds.extend(best);
        }
    }
    let initial_cost = seeds.iter().map(|s| s.0).fold(f64::INFINITY, f64::min);

    let (mut cost, mut theta, mut iterations, mut converged) = (f64::INFINITY, flat, 0, false);
    for &(c0, th0) in &seeds {
        let (c, th, it, conv) = levenberg_marquardt(&model, &target, th0, c0, opts.max_iterations);
        iterations = iterations.max(it);
        if c < cost {
            (cost, theta, converged) = (c, th, conv);
        }
    }

    let n = xs.len() as f64;
    let params = ProxyPhaseParams::pinned(
        wavelength,
        opts.n_eff,
        opts.height,
        theta[0],
        theta[1] * 1e-9,
        theta[2] * 1e-18,
        w_ref,
    )?;
    Ok(ProxyFit {
        params,
        rms_residual: (cost / n).sqrt(),
        initial_rms: (initial_cost / n).sqrt(),
        iterations,
        converged,
    })
}

fn levenberg_marquardt(
    model: &GaussianModel<'_>,
    target: &[f64],
    mut theta: [f64; 4],
    mut cost: f64,
    max_iterations: usize,
) -> (f64, [f64; 4], usize, bool) {
    let mut mu = 1e-3;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iterations {
        iterations += 1;
        if cost <= 1e-30 {
            converged = true;
            break;
        }
        let (jtj, jtr) = model.normal_equations(&theta, target);
        let mut accepted = false;
        for _ in 0..30 {
            let mut m = jtj;
            for d in 0..4 {
                m[(d, d)] += mu * jtj[(d, d)].max(1e-12);
            }
            let Some(step) = m.lu().solve(&(-jtr)) else {
                mu *= 10.0;
                continue;
            };
            let cand = [theta[0] + step[0], theta[1] + step[1], theta[2] + step[2], theta[3] + step[3]];
            let cand_cost = model.cost(&cand, target);
            if cand_cost.is_finite() && cand_cost < cost {
                let rel = (cost - cand_cost) / cost.max(1e-300);
                theta = cand;
                cost = cand_cost;
                mu = (mu / 3.0).max(1e-15);
                accepted = true;
                if rel < 1e-14 {
                    converged = true;
                }
                break;
            }
            mu *= 4.0;
        }
        if !accepted {
            // No improving step at any damping: stationary to working precision.
            converged = true;
        }
        if converged {
            break;
        }
    }
    (cost, theta, iterations, converged)
}

/// `A·exp((x − B)² / C) + k` over widths in nanometers.
struct GaussianModel<'a> {
    xs: &'a [f64],
}

impl GaussianModel<'_> {
    /// Closed-form (A, k) for fixed (B, C).
    fn best_linear(&self, b: f64, c: f64, target: &[f64]) -> Option<(f64, f64, f64)> {
        let n = self.xs.len() as f64;
        let g: Vec<f64> = self.xs.iter().map(|&x| ((x - b).powi(2) / c).exp()).collect();
        let sg: f64 = g.iter().sum();
        let sgg: f64 = g.iter().map(|v| v * v).sum();
        let st: f64 = target.iter().sum();
        let sgt: f64 = g.iter().zip(target).map(|(g, t)| g * t).sum();
        let det = n * sgg - sg * sg;
        if !det.is_finite() || det <= 1e-12 * n * sgg {
            return None;
        }
        let a = (n * sgt - sg * st) / det;
        let k = (st - a * sg) / n;
        let cost = self.cost(&[a, b, c, k], target);
        cost.is_finite().then_some((a, k, cost))
    }

    fn cost(&self, th: &[f64; 4], target: &[f64]) -> f64 {
        self.xs
            .iter()
            .zip(target)
            .map(|(&x, t)| (th[0] * ((x - th[1]).powi(2) / th[2]).exp() + th[3] - t).powi(2))
            .sum()
    }

    fn normal_equations(&self, th: &[f64; 4], target: &[f64]) -> (Matrix4<f64>, Vector4<f64>) {
        let [a, b, c, k] = *th;
        let mut jtj = Matrix4::zeros();
        let mut jtr = Vector4::zeros();
        for (&x, t) in self.xs.iter().zip(target) {
            let d = x - b;
            let e = (d * d / c).exp();
            let j = Vector4::new(e, a * e * (-2.0 * d / c), a * e * (-d * d / (c * c)), 1.0);
            let r = a * e + k - t;
            jtj += j * j.transpose();
            jtr += j * r;
        }
        (jtj, jtr)
    }
}

/// Refractive index of silicon nitride from a two-term Cauchy model.
pub fn silicon_nitride_index(wavelength: f64) -> f64 {
    let nm = wavelength * 1e9;
    1.98 + 9300.0 / (nm * nm)
}

/// Synthetic lookup table for 800 nm silicon nitride pillars on a 293 nm lattice.
///
/// Phase follows an area-weighted effective index of the pillar cell,
/// referenced to the narrowest width and wrapped into (−π, π] like raw solver
/// output. Transmission is a smooth ripple inside [0.86, 0.98]. Resonances
/// are not modeled.
pub fn synthetic_sin_table() -> PhaseLookupTable {
    let period = 293e-9;
    let widths: Vec<f64> = (0..=95).map(|i| (60.0 + 2.0 * i as f64) * 1e-9).collect();
    let mut phase = Vec::new();
    let mut trans = Vec::new();
    for &lambda in &DESIGN_WAVELENGTHS {
        let n = silicon_nitride_index(lambda);
        let n_eff = |w: f64| {
            let ff = (w / period).powi(2);
            (ff * n * n + (1.0 - ff)).sqrt()
        };
        let base = n_eff(widths[0]);
        let col: Vec<f64> = widths
            .iter()
            .map(|&w| {
                let p = std::f64::consts::TAU * DEFAULT_PILLAR_HEIGHT * (n_eff(w) - base) / lambda;
                wrap_to_pi(p)
            })
            .collect();
        let t: Vec<f64> = widths
            .iter()
            .map(|&w| 0.92 + 0.06 * (std::f64::consts::TAU * w * 1.9 / lambda).cos())
            .collect();
        phase.push(col);
        trans.push(t);
    }
    PhaseLookupTable::new(widths, DESIGN_WAVELENGTHS.to_vec(), phase, trans).expect("synthetic table is well formed")
}

fn wrap_to_pi(p: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    let r = p - tau * (p / tau).round();
    if r <= -std::f64::consts::PI {
        r + tau
    } else {
        r
    }
}

/// Fit all three wavelength columns of a table.
pub fn fit_all(table: &PhaseLookupTable, w_ref: f64, opts: &FitOptions) -> Result<Vec<ProxyFit>> {
    table.wavelengths().iter().map(|&l| fit_proxy(table, l, w_ref, opts)).collect()
}

/// Proxies reordered to match `wavelengths` (within 1 nm).
pub fn proxies_for(fits: &[ProxyFit], wavelengths: &[f64]) -> Result<Vec<ProxyPhaseParams<f64>>> {
    wavelengths
        .iter()
        .map(|&l| {
            fits.iter()
                .find(|f| (f.params.wavelength - l).abs() < 1e-9)
                .map(|f| f.params)
                .ok_or_else(|| Error::invalid(format!("no proxy fit for wavelength {:.0} nm", l * 1e9)))
        })
        .collect()
}
