//! Encoded-feature dataset file: JSON header (counts, kernel count, bit
//! depth, noise seed, exposure, overexposure list), then one record per
//! image of little-endian `f32` features followed by a label byte.

use std::io::{BufRead, Write};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::container::{read_header, read_payload, write_container, FEATURE_MAGIC};
use crate::error::{Error, Result};
use crate::nn::N_CLASSES;
use crate::scalar::Real;

const FORMAT: &str = "feature dataset";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureHeader {
    pub count: usize,
    pub n_kernels: usize,
    pub feature_len: usize,
    /// `None` for digital (student) features.
    pub bit_depth: Option<u32>,
    pub noise_seed: u64,
    pub exposure_gain: f64,
    /// Indices of images flagged as overexposed.
    pub overexposed: Vec<usize>,
    pub provenance: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    pub header: FeatureHeader,
    /// `count × feature_len`, row-major.
    pub features: Vec<f32>,
    pub labels: Vec<u8>,
}

impl FeatureDataset {
    pub fn new(header: FeatureHeader, features: Vec<f32>, labels: Vec<u8>) -> Result<Self> {
        if header.feature_len == 0 || features.len() != header.count * header.feature_len {
            return Err(Error::shape("feature rows", header.count * header.feature_len, features.len()));
        }
        if labels.len() != header.count {
            return Err(Error::shape("feature labels", header.count, labels.len()));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= N_CLASSES) {
            return Err(Error::format(FORMAT, format!("label {l} out of range")));
        }
        if let Some(&i) = header.overexposed.iter().find(|&&i| i >= header.count) {
            return Err(Error::format(FORMAT, format!("overexposure index {i} out of range")));
        }
        Ok(Self { header, features, labels })
    }

    pub fn len(&self) -> usize {
        self.header.count
    }

    pub fn is_empty(&self) -> bool {
        self.header.count == 0
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.header.feature_len;
        &self.features[i * d..(i + 1) * d]
    }

    /// Indices not on the overexposure list, ascending.
    pub fn included(&self) -> Vec<usize> {
        let mut skip = vec![false; self.len()];
        for &i in &self.header.overexposed {
            skip[i] = true;
        }
        (0..self.len()).filter(|&i| !skip[i]).collect()
    }

    /// Selected rows as a matrix, with their labels.
    pub fn matrix<T: Real>(&self, indices: &[usize]) -> (Array2<T>, Vec<u8>) {
        let d = self.header.feature_len;
        let m = Array2::from_shape_fn((indices.len(), d), |(r, c)| T::lit(self.row(indices[r])[c] as f64));
        (m, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn write<W: Write>(&self, w: W) -> Result<()> {
        let d = self.header.feature_len;
        let mut payload = Vec::with_capacity(self.len() * (4 * d + 1));
        for i in 0..self.len() {
            for v in self.row(i) {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            payload.push(self.labels[i]);
        }
        write_container(w, &FEATURE_MAGIC, &self.header, &payload)
    }

    pub fn read<R: BufRead>(mut r: R) -> Result<Self> {
        let header: FeatureHeader = read_header(&mut r, &FEATURE_MAGIC, FORMAT)?;
        let d = header.feature_len;
        if d == 0 {
            return Err(Error::format(FORMAT, "zero-length feature rows"));
        }
        let record = 4 * d + 1;
        let len = header
            .count
            .checked_mul(record)
            .ok_or_else(|| Error::format(FORMAT, "record count overflows"))?;
        let payload = read_payload(&mut r, len, FORMAT)?;
        let mut features = Vec::with_capacity(header.count * d);
        let mut labels = Vec::with_capacity(header.count);
        for rec in payload.chunks_exact(record) {
            features.extend(rec[..4 * d].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])));
            labels.push(rec[4 * d]);
        }
        Self::new(header, features, labels)
    }
}
