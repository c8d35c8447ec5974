//! End-to-end steps shared by the command-line tool and the acceptance runs:
//! proxy fitting, bank design, encoding datasets into feature files, and
//! digital reference features.

use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::config::PipelineConfig;
use crate::io::dataset::LabeledImageSet;
use crate::io::features::{FeatureDataset, FeatureHeader};
use crate::kernel_bank::{export_targets, SignedKernelSet};
use crate::nn::student::{StudentNetwork, FEATURES};
use crate::psf_design::{design_bank, BankDesign, PsfSimulator};
use crate::scalar::Real;
use crate::scatterer::{fit_all, proxies_for, synthetic_sin_table, FitOptions, PhaseLookupTable, ProxyFit};
use crate::sensor::{Encoder, Exposure, PsfBank, SensorModel};

/// Number of leading training scenes used to fix the exposure gain.
pub const EXPOSURE_SCENES: usize = 64;
/// Noise streams of test images start here; train image `i` uses stream `i`.
pub const TEST_STREAM_BASE: u64 = 1 << 32;

pub fn phase_table(path: Option<&Path>) -> Result<PhaseLookupTable> {
    match path {
        Some(p) => PhaseLookupTable::from_csv(std::fs::File::open(p)?),
        None => Ok(synthetic_sin_table()),
    }
}

/// Proxy fits for every wavelength of the table.
pub fn fit_proxies(config: &PipelineConfig) -> Result<Vec<ProxyFit>> {
    let table = phase_table(config.optics.phase_table.as_deref())?;
    fit_all(&table, config.optics.w_ref, &FitOptions::default())
}

pub fn simulator(config: &PipelineConfig, fits: &[ProxyFit]) -> Result<PsfSimulator<f64>> {
    let o = &config.optics;
    PsfSimulator::new(
        o.logical_side,
        o.group,
        o.scatterer_pitch,
        o.width_range(),
        proxies_for(fits, &o.wavelengths)?,
        &config.geometry,
    )
}

/// Design all `2·n` optics for `kernels` at the sensor's enlargement and
/// assemble the norm-matched bank.
pub fn design_psf_bank(
    config: &PipelineConfig,
    fits: &[ProxyFit],
    kernels: &SignedKernelSet<f64>,
) -> Result<(BankDesign<f64>, PsfBank<f64>)> {
    let sim = simulator(config, fits)?;
    let e = config.sensor.enlargement;
    let targets = export_targets(kernels, e, sim.window())?;
    let design = design_bank(&sim, config.optics.scatterer_pitch, config.optics.width_range(), &targets.targets, &config.design)?;
    let bank = PsfBank::from_simulated(kernels, e, &design.simulated)?;
    Ok((design, bank))
}

pub fn scenes<T: Real>(set: &LabeledImageSet) -> Vec<Vec<T>> {
    (0..set.len()).map(|i| set.images_as(i)).collect()
}

/// The student's pre-rectifier 576-features for every image.
pub fn digital_features<T: Real>(student: &StudentNetwork<T>, set: &LabeledImageSet) -> Result<Array2<T>> {
    let idx: Vec<usize> = (0..set.len()).collect();
    let chunks: Vec<Array2<T>> = idx
        .par_chunks(256)
        .map(|chunk| {
            let imgs: Vec<Vec<T>> = chunk.iter().map(|&i| set.images_as(i)).collect();
            let refs: Vec<&[T]> = imgs.iter().map(|v| v.as_slice()).collect();
            Ok(student.forward_batch(&refs)?.backend.features)
        })
        .collect::<Result<_>>()?;
    let mut out = Array2::zeros((set.len(), FEATURES));
    let mut row = 0;
    for c in chunks {
        let n = c.nrows();
        out.slice_mut(ndarray::s![row..row + n, ..]).assign(&c);
        row += n;
    }
    Ok(out)
}

fn encode_set(encoder: &Encoder<f64>, set: &LabeledImageSet, first_stream: u64, exposure: &Exposure, seed: u64) -> Result<FeatureDataset> {
    let imgs = scenes::<f64>(set);
    let refs: Vec<&[f64]> = imgs.iter().map(|v| v.as_slice()).collect();
    let captured = encoder.encode_batch(&refs, first_stream)?;
    let overexposed: Vec<usize> = captured.iter().enumerate().filter(|(_, c)| c.overexposed).map(|(i, _)| i).collect();
    let features: Vec<f32> = captured.iter().flat_map(|c| c.flat().iter().map(|&v| v as f32)).collect();
    let model = encoder.model();
    let header = FeatureHeader {
        count: set.len(),
        n_kernels: encoder.n_kernels(),
        feature_len: FEATURES,
        bit_depth: model.quantize.then_some(model.bit_depth),
        noise_seed: seed,
        exposure_gain: exposure.gain,
        overexposed,
        provenance: set.provenance.clone(),
    };
    FeatureDataset::new(header, features, set.labels.clone())
}

/// Encode both splits with one exposure gain, fixed on the first training scenes.
pub fn encode_splits(
    bank: &PsfBank<f64>,
    model: &SensorModel,
    noise_seed: u64,
    train: &LabeledImageSet,
    test: &LabeledImageSet,
) -> Result<(FeatureDataset, FeatureDataset, Exposure)> {
    if train.is_empty() {
        return Err(Error::invalid("cannot fix exposure without training scenes"));
    }
    let mut encoder = Encoder::new(bank, model.clone(), noise_seed)?;
    let calib = scenes::<f64>(&train.take(EXPOSURE_SCENES.min(train.len())));
    let refs: Vec<&[f64]> = calib.iter().map(|v| v.as_slice()).collect();
    let exposure = encoder.calibrate_exposure(&refs)?;
    let tr = encode_set(&encoder, train, 0, &exposure, noise_seed)?;
    let te = encode_set(&encoder, test, TEST_STREAM_BASE, &exposure, noise_seed)?;
    Ok((tr, te, exposure))
}

/// Digital features of `set` restricted to the rows a feature file keeps,
/// after checking that the file was encoded from the same images.
pub fn aligned_digital<T: Real>(student: &StudentNetwork<T>, set: &LabeledImageSet, features: &FeatureDataset) -> Result<Array2<T>> {
    if set.len() != features.len() || set.labels != features.labels {
        return Err(Error::invalid(format!(
            "feature file ({} records) does not match the dataset ({} images)",
            features.len(),
            set.len()
        )));
    }
    let keep = features.included();
    digital_features(student, &set.subset(&keep))
}
