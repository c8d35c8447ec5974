//! Evaluation metrics, PCA, MAC accounting and the energy model.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// η = ⟨a, b⟩ / (‖a‖·‖b‖), accumulated in `f64`.
pub fn cosine_similarity<T: Real>(a: &[T], b: &[T]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine_similarity", a.len(), b.len()));
    }
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.to_f64_lossy(), y.to_f64_lossy());
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return Err(Error::invalid("cosine similarity of an all-zero map"));
    }
    Ok(ab / (aa.sqrt() * bb.sqrt()))
}

/// Row = true label, column = prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub n_classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn at(&self, label: usize, predicted: usize) -> u64 {
        self.counts[label * self.n_classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n_classes).map(|i| self.at(i, i)).sum()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.trace() as f64 / total as f64
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["label".to_string()];
        header.extend((0..self.n_classes).map(|j| format!("pred_{j}")));
        out.write_record(&header)?;
        for i in 0..self.n_classes {
            let mut row = vec![i.to_string()];
            row.extend((0..self.n_classes).map(|j| self.at(i, j).to_string()));
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }
}

pub fn confusion_matrix(predictions: &[usize], labels: &[usize], n_classes: usize) -> Result<ConfusionMatrix> {
    if predictions.len() != labels.len() {
        return Err(Error::shape("confusion_matrix", labels.len(), predictions.len()));
    }
    let mut counts = vec![0u64; n_classes * n_classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        if p >= n_classes || l >= n_classes {
            return Err(Error::OutOfRange {
                what: "class index",
                value: p.max(l) as f64,
                min: 0.0,
                max: (n_classes - 1) as f64,
            });
        }
        counts[l * n_classes + p] += 1;
    }
    Ok(ConfusionMatrix { n_classes, counts })
}

/// Per-class 2-D Gaussian summary in PC space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEllipse {
    pub label: usize,
    pub count: usize,
    pub mean: [f64; 2],
    /// Row-major 2×2 covariance.
    pub covariance: [f64; 4],
    /// Mahalanobis radius enclosing 95% of a 2-D Gaussian: √χ²₂(0.95).
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `dims` unit directions, each of length `d`.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    pub explained_variance_ratio: Vec<f64>,
    /// `n × dims`, row-major.
    pub projections: Vec<f64>,
    /// Number of directions actually found (≤ dims); the rest are zero.
    pub rank: usize,
    pub ellipses: Vec<ClassEllipse>,
}

/// χ²₂ 95% quantile = −2 ln 0.05.
pub const CHI2_2DOF_95: f64 = 5.991464547107979;

/// Top principal directions by power iteration with deflation.
pub fn pca_project<T: Real>(features: &[Vec<T>], labels: &[usize], dims: usize) -> Result<Pca> {
    let n = features.len();
    if n < dims + 1 {
        return Err(Error::invalid(format!("PCA needs at least {} samples, got {n}", dims + 1)));
    }
    if labels.len() != n {
        return Err(Error::shape("pca_project labels", n, labels.len()));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::invalid("ragged feature vectors"));
    }
    let mut mean = vec![0.0; d];
    for f in features {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v.to_f64_lossy();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered: Vec<Vec<f64>> = features
        .iter()
        .map(|f| f.iter().zip(&mean).map(|(v, m)| v.to_f64_lossy() - m).collect())
        .collect();
    let mut cov = vec![0.0; d * d];
    for x in &centered {
        for i in 0..d {
            if x[i] == 0.0 {
                continue;
            }
            let row = &mut cov[i * d..(i + 1) * d];
            for (c, &xj) in row.iter_mut().zip(x) {
                *c += x[i] * xj;
            }
        }
    }
    let denom = (n - 1) as f64;
    cov.iter_mut().for_each(|c| *c /= denom);
    let total_var: f64 = (0..d).map(|i| cov[i * d + i]).sum();

    let mut components = Vec::with_capacity(dims);
    let mut eigenvalues = Vec::with_capacity(dims);
    let mut rank = 0;
    let mut work = cov.clone();
    for k in 0..dims {
        let (lambda, v) = power_iteration(&work, d, k as u64);
        if lambda <= 1e-12 * total_var.max(f64::MIN_POSITIVE) {
            components.push(vec![0.0; d]);
            eigenvalues.push(0.0);
            continue;
        }
        rank += 1;
        for i in 0..d {
            for j in 0..d {
                work[i * d + j] -= lambda * v[i] * v[j];
            }
        }
        components.push(v);
        eigenvalues.push(lambda);
    }
    let explained_variance_ratio = eigenvalues
        .iter()
        .map(|l| if total_var > 0.0 { l / total_var } else { 0.0 })
        .collect();
    let mut projections = Vec::with_capacity(n * dims);
    for x in &centered {
        for c in &components {
            projections.push(x.iter().zip(c).map(|(a, b)| a * b).sum());
        }
    }
    let ellipses = if dims >= 2 {
        class_ellipses(&projections, dims, labels)
    } else {
        Vec::new()
    };
    Ok(Pca {
        mean,
        components,
        eigenvalues,
        explained_variance_ratio,
        projections,
        rank,
        ellipses,
    })
}

/// Dominant eigenpair of a symmetric PSD matrix; sign fixed so the
/// largest-magnitude entry is positive.
fn power_iteration(m: &[f64], d: usize, salt: u64) -> (f64, Vec<f64>) {
    // Deterministic, non-degenerate start vector.
    let mut v: Vec<f64> = (0..d)
        .map(|i| 1.0 + ((i as u64 * 2654435761 + salt * 40503) % 1000) as f64 / 1000.0)
        .collect();
    normalize(&mut v);
    let mut lambda = 0.0;
    for _ in 0..5000 {
        let mut w = vec![0.0; d];
        for i in 0..d {
            w[i] = m[i * d..(i + 1) * d].iter().zip(&v).map(|(a, b)| a * b).sum();
        }
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return (0.0, v);
        }
        w.iter_mut().for_each(|x| *x /= norm);
        let diff = w.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = w;
        let converged = (norm - lambda).abs() <= 1e-15 * norm && diff < 1e-13;
        lambda = norm;
        if converged {
            break;
        }
    }
    // Rayleigh quotient for the final estimate.
    let mut mv = vec![0.0; d];
    for i in 0..d {
        mv[i] = m[i * d..(i + 1) * d].iter().zip(&v).map(|(a, b)| a * b).sum();
    }
    let lambda = v.iter().zip(&mv).map(|(a, b)| a * b).sum();
    let pivot = v.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
    if pivot < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    (lambda, v)
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

fn class_ellipses(proj: &[f64], dims: usize, labels: &[usize]) -> Vec<ClassEllipse> {
    let n_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut out = Vec::new();
    for label in 0..n_classes {
        let pts: Vec<[f64; 2]> = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == label)
            .map(|(i, _)| [proj[i * dims], proj[i * dims + 1]])
            .collect();
        if pts.is_empty() {
            continue;
        }
        let m = pts.len() as f64;
        let mean = [
            pts.iter().map(|p| p[0]).sum::<f64>() / m,
            pts.iter().map(|p| p[1]).sum::<f64>() / m,
        ];
        let mut cov = [0.0; 4];
        if pts.len() > 1 {
            for p in &pts {
                let (a, b) = (p[0] - mean[0], p[1] - mean[1]);
                cov[0] += a * a;
                cov[1] += a * b;
                cov[3] += b * b;
            }
            let den = m - 1.0;
            cov = [cov[0] / den, cov[1] / den, cov[1] / den, cov[3] / den];
        }
        out.push(ClassEllipse {
            label,
            count: pts.len(),
            mean,
            covariance: cov,
            scale: CHI2_2DOF_95.sqrt(),
        });
    }
    out
}

/// `pc1,pc2,label` rows.
pub fn write_pca_csv<W: Write>(pca: &Pca, labels: &[usize], w: W) -> Result<()> {
    let dims = pca.components.len();
    if dims < 2 {
        return Err(Error::invalid("PCA CSV needs two components"));
    }
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["pc1", "pc2", "label"])?;
    for (i, &l) in labels.iter().enumerate() {
        out.write_record([
            format!("{:.9e}", pca.projections[i * dims]),
            format!("{:.9e}", pca.projections[i * dims + 1]),
            l.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layer {
    Conv {
        name: String,
        c_in: u64,
        c_out: u64,
        k: u64,
        h_out: u64,
        w_out: u64,
    },
    Dense {
        name: String,
        inputs: u64,
        outputs: u64,
        /// Listed but not counted toward the inference total.
        excluded: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub layer: String,
    pub formula: String,
    pub macs: u64,
    pub excluded: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacLedger {
    pub architecture: String,
    pub entries: Vec<LedgerEntry>,
    pub total: u64,
}

impl MacLedger {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["layer", "formula", "macs"])?;
        for e in &self.entries {
            let layer = if e.excluded { format!("{}*", e.layer) } else { e.layer.clone() };
            out.write_record([layer, e.formula.clone(), e.macs.to_string()])?;
        }
        out.write_record(["total".to_string(), self.architecture.clone(), self.total.to_string()])?;
        out.flush()?;
        Ok(())
    }
}

pub fn count_macs(architecture: &str, layers: &[Layer]) -> MacLedger {
    let entries: Vec<LedgerEntry> = layers
        .iter()
        .map(|l| match l {
            Layer::Conv {
                name,
                c_in,
                c_out,
                k,
                h_out,
                w_out,
            } => LedgerEntry {
                layer: name.clone(),
                formula: format!("{c_in}x{c_out}x{k}x{k}x{h_out}x{w_out}"),
                macs: c_in * c_out * k * k * h_out * w_out,
                excluded: false,
            },
            Layer::Dense {
                name,
                inputs,
                outputs,
                excluded,
            } => LedgerEntry {
                layer: name.clone(),
                formula: format!("{inputs}x{outputs}"),
                macs: inputs * outputs,
                excluded: *excluded,
            },
        })
        .collect();
    let total = entries.iter().filter(|e| !e.excluded).map(|e| e.macs).sum();
    MacLedger {
        architecture: architecture.to_string(),
        entries,
        total,
    }
}

fn conv(name: &str, c_in: u64, c_out: u64, k: u64, hw: u64) -> Layer {
    Layer::Conv {
        name: name.into(),
        c_in,
        c_out,
        k,
        h_out: hw,
        w_out: hw,
    }
}

fn dense(name: &str, inputs: u64, outputs: u64) -> Layer {
    Layer::Dense {
        name: name.into(),
        inputs,
        outputs,
        excluded: false,
    }
}

/// AlexNet rows exactly as tabulated (no stride or padding re-derivation).
pub fn alexnet_layers() -> Vec<Layer> {
    vec![
        conv("conv1", 3, 64, 11, 224),
        conv("conv2", 64, 192, 5, 55),
        conv("conv3", 192, 384, 5, 27),
        conv("conv4", 384, 256, 3, 13),
        conv("conv5", 256, 256, 3, 6),
        dense("fc1", 9216, 4096),
        dense("fc2", 4096, 1024),
        dense("fc3", 1024, 10),
    ]
}

pub fn compressed_layers() -> Vec<Layer> {
    vec![conv("conv1", 3, 16, 7, 32), dense("fc1", 576, 256), dense("fc2", 256, 10)]
}

/// Digital part of the hybrid network; the calibration layer is listed but
/// excluded because it folds into fc1.
pub fn hybrid_layers() -> Vec<Layer> {
    vec![
        Layer::Dense {
            name: "calibration".into(),
            inputs: 576,
            outputs: 576,
            excluded: true,
        },
        dense("fc1", 576, 256),
        dense("fc2", 256, 10),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyModel {
    pub camera_power_w: f64,
    pub frame_rate_fps: f64,
    pub sensor_width_px: u64,
    pub sensor_height_px: u64,
    pub energy_per_mac_j: f64,
}

impl Default for EnergyModel {
    fn default() -> Self {
        Self {
            camera_power_w: 3.4,
            frame_rate_fps: 50.70,
            sensor_width_px: 1936,
            sensor_height_px: 1216,
            energy_per_mac_j: 1e-12,
        }
    }
}

impl EnergyModel {
    pub fn validate(&self) -> Result<()> {
        let ok = self.camera_power_w > 0.0
            && self.frame_rate_fps > 0.0
            && self.sensor_width_px > 0
            && self.sensor_height_px > 0
            && self.energy_per_mac_j > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("energy model parameters must be positive"))
        }
    }

    pub fn energy_per_pixel_j(&self) -> f64 {
        self.camera_power_w / (self.frame_rate_fps * (self.sensor_width_px * self.sensor_height_px) as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyEstimate {
    pub pixels_read: u64,
    pub macs: u64,
    pub sensor_j: f64,
    pub compute_j: f64,
}

pub fn energy_estimate(ledger: &MacLedger, pixels_read: u64, model: &EnergyModel) -> Result<EnergyEstimate> {
    model.validate()?;
    if pixels_read == 0 {
        return Err(Error::invalid("pixel count must be positive"));
    }
    Ok(EnergyEstimate {
        pixels_read,
        macs: ledger.total,
        sensor_j: model.energy_per_pixel_j() * pixels_read as f64,
        compute_j: ledger.total as f64 * model.energy_per_mac_j,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_examples() {
        assert!((cosine_similarity(&[1.0, 1.0, 0.0], &[1.0f64, 0.0, 0.0]).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0f64, 2.0]).unwrap(), 0.0);
        assert!((cosine_similarity(&[0.3f32, 0.4], &[0.3, 0.4]).unwrap() - 1.0).abs() < 1e-7);
        assert!(cosine_similarity(&[0.0f64; 3], &[1.0; 3]).is_err());
        assert!(cosine_similarity(&[1.0f64; 3], &[1.0; 2]).is_err());
    }

    #[test]
    fn confusion_examples() {
        let m = confusion_matrix(&[0, 1, 0], &[0, 1, 1], 2).unwrap();
        assert_eq!(m.counts, vec![1, 0, 1, 1]);
        let all_zero = confusion_matrix(&[0; 5], &[0, 1, 2, 1, 0], 3).unwrap();
        assert!((0..3).all(|i| all_zero.at(i, 1) == 0 && all_zero.at(i, 2) == 0));
        assert!(confusion_matrix(&[3], &[0], 3).is_err());
    }

    #[test]
    fn table_totals() {
        assert_eq!(count_macs("alexnet", &alexnet_layers()).total, 3_651_368_960);
        assert_eq!(count_macs("compressed", &compressed_layers()).total, 2_558_464);
        let h = count_macs("hybrid", &hybrid_layers());
        assert_eq!(h.total, 150_016);
        assert!(h.entries[0].excluded && h.entries[0].macs == 331_776);
    }

    #[test]
    fn energy_per_pixel() {
        let e = EnergyModel::default().energy_per_pixel_j();
        assert!((e - 28.49e-9).abs() < 0.01e-9);
    }
}
