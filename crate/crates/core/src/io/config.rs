//! Pipeline configuration (TOML). Every section has defaults; unknown keys are
//! rejected so that typos never pass silently.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::dataset::{cifar10_dir_files, load_cifar10_files, load_image_folder, LabeledImageSet};
use super::synthetic::{self, Family};
use crate::adapt::{CalibrationConfig, TransferConfig};
use crate::analytics::EnergyModel;
use crate::distill::{KdConfig, TeacherConfig};
use crate::error::{Error, Result};
use crate::kernel_bank::CHANNEL_WAVELENGTHS;
use crate::nn::student::{KERNEL, N_KERNELS};
use crate::psf_design::{DesignConfig, DesignGeometry, DEFAULT_SCATTERER_PITCH};
use crate::scatterer::WidthRange;
use crate::sensor::SensorModel;

/// Environment variables consulted, in order, for the CIFAR-10 directory.
pub const DATA_DIR_VARS: [&str; 2] = ["METACONV_DATA_DIR", "CIFAR10_DIR"];

/// Largest logical map side allowed without the paper-scale switch.
pub const DESK_MAX_LOGICAL_SIDE: usize = 512;
pub const PAPER_LOGICAL_SIDE: usize = 1600;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scale {
    #[default]
    Desk,
    Paper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    /// CIFAR-10 binary batches in `dir` (or the directory named by the environment).
    Cifar10,
    /// `dir/train/<class>/*.ppm` and `dir/test/<class>/*.ppm`.
    ImageFolder,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub dir: Option<PathBuf>,
    pub family: Family,
    pub train_count: usize,
    pub test_count: usize,
    /// Seed of the synthetic generator (train uses `seed`, test `seed + 1`).
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Cifar10,
            dir: None,
            family: Family::Shapes,
            train_count: 10_000,
            test_count: 10_000,
            seed: 1,
        }
    }
}

impl DataConfig {
    pub fn synthetic(family: Family, train_count: usize, test_count: usize, seed: u64) -> Self {
        Self {
            source: DataSource::Synthetic,
            dir: None,
            family,
            train_count,
            test_count,
            seed,
        }
    }

    fn resolve_dir(&self) -> Result<PathBuf> {
        if let Some(d) = &self.dir {
            return Ok(d.clone());
        }
        DATA_DIR_VARS
            .iter()
            .find_map(|v| std::env::var_os(v).map(PathBuf::from))
            .ok_or_else(|| {
                Error::invalid(format!(
                    "no data directory: set data.dir, or {}, or use source = \"synthetic\"",
                    DATA_DIR_VARS.join(" / ")
                ))
            })
    }

    /// Train and test splits, truncated to the configured counts. Asking for
    /// more records than the source holds is an error, never a silent cut.
    pub fn load(&self) -> Result<(LabeledImageSet, LabeledImageSet)> {
        let (train, test) = match self.source {
            DataSource::Synthetic => {
                return Ok((
                    synthetic::generate(self.family, self.train_count, self.seed),
                    synthetic::generate(self.family, self.test_count, self.seed.wrapping_add(1)),
                ))
            }
            DataSource::Cifar10 => {
                let dir = self.resolve_dir()?;
                let (train_files, test_file) = cifar10_dir_files(&dir)
                    .ok_or_else(|| Error::invalid(format!("{} does not hold CIFAR-10 binary batches", dir.display())))?;
                (load_cifar10_files(&train_files)?, load_cifar10_files(&[test_file])?)
            }
            DataSource::ImageFolder => {
                let dir = self.resolve_dir()?;
                let (train, train_classes) = load_image_folder(&dir.join("train"))?;
                let (test, test_classes) = load_image_folder(&dir.join("test"))?;
                if train_classes != test_classes {
                    return Err(Error::invalid("train and test folders list different classes"));
                }
                (train, test)
            }
        };
        for (name, set, want) in [("train", &train, self.train_count), ("test", &test, self.test_count)] {
            if set.len() < want {
                return Err(Error::invalid(format!("{name} split holds {} images, {want} requested", set.len())));
            }
        }
        Ok((train.take(self.train_count), test.take(self.test_count)))
    }

    fn validate(&self, what: &str) -> Result<()> {
        if self.train_count == 0 || self.test_count == 0 {
            return Err(Error::invalid(format!("{what}: image counts must be positive")));
        }
        Ok(())
    }
}

/// Metasurface and proxy-fit parameters shared by `design` and `fit-proxy`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OpticsConfig {
    /// Channel wavelengths in R, G, B order (meters).
    pub wavelengths: [f64; 3],
    pub scatterer_pitch: f64,
    pub logical_side: usize,
    /// Scatterers per logical width along one axis.
    pub group: usize,
    pub width_min: f64,
    pub width_max: f64,
    /// Reference width at which the proxy phase is pinned to zero.
    pub w_ref: f64,
    /// CSV phase table (`width_m`, then per-wavelength phase and transmission
    /// columns); a built-in synthetic table is used when absent.
    pub phase_table: Option<PathBuf>,
}

impl Default for OpticsConfig {
    fn default() -> Self {
        let range = WidthRange::default();
        Self {
            wavelengths: CHANNEL_WAVELENGTHS,
            scatterer_pitch: DEFAULT_SCATTERER_PITCH,
            logical_side: 256,
            group: 2,
            width_min: range.min,
            width_max: range.max,
            w_ref: 60e-9,
            phase_table: None,
        }
    }
}

impl OpticsConfig {
    pub fn width_range(&self) -> WidthRange {
        WidthRange {
            min: self.width_min,
            max: self.width_max,
        }
    }
}

/// Kernel-bank shape; fixed by the student architecture and checked here.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelCounts {
    pub n_kernels: usize,
    pub k: usize,
}

impl Default for KernelCounts {
    fn default() -> Self {
        Self { n_kernels: N_KERNELS, k: KERNEL }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Master seed; `--seed` overrides it and every stage seed.
    pub seed: u64,
    pub scale: Scale,
    pub data: DataConfig,
    /// Second dataset for transfer learning.
    pub transfer_data: DataConfig,
    pub optics: OpticsConfig,
    pub geometry: DesignGeometry,
    pub kernels: KernelCounts,
    pub sensor: SensorModel,
    pub design: DesignConfig,
    pub distill: KdConfig,
    pub teacher: TeacherConfig,
    pub calibration: CalibrationConfig,
    pub transfer: TransferConfig,
    pub energy: EnergyModel,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scale: Scale::Desk,
            data: DataConfig::default(),
            transfer_data: DataConfig {
                source: DataSource::Synthetic,
                family: Family::Textures,
                train_count: 5_000,
                test_count: 2_000,
                seed: 3,
                ..DataConfig::default()
            },
            optics: OpticsConfig::default(),
            geometry: DesignGeometry::default(),
            kernels: KernelCounts::default(),
            sensor: SensorModel::default(),
            design: DesignConfig {
                iterations: 300,
                ..DesignConfig::default()
            },
            distill: KdConfig::default(),
            teacher: TeacherConfig::default(),
            calibration: CalibrationConfig::default(),
            transfer: TransferConfig::default(),
            energy: EnergyModel::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::format("pipeline config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::format("pipeline config", e.to_string()))
    }

    /// Set the master seed and every stage seed from it.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.design.seed = seed;
        self.distill.seed = seed;
        self.teacher.seed = seed;
        self.calibration.seed = seed;
        self.transfer.seed = seed;
    }

    /// Switch scale; paper scale also selects the full-size logical map.
    pub fn set_scale(&mut self, scale: Scale) {
        self.scale = scale;
        if scale == Scale::Paper {
            self.optics.logical_side = PAPER_LOGICAL_SIDE;
        }
    }

    pub fn validate(&self) -> Result<()> {
        let o = &self.optics;
        let positive = o.wavelengths.iter().all(|&l| l > 0.0)
            && o.scatterer_pitch > 0.0
            && o.logical_side > 0
            && o.group > 0
            && o.width_min > 0.0
            && o.width_min < o.width_max
            && self.geometry.distance > 0.0
            && self.geometry.bin_factor > 0;
        if !positive {
            return Err(Error::invalid("geometry must be positive and width bounds ordered"));
        }
        if o.logical_side > DESK_MAX_LOGICAL_SIDE && self.scale != Scale::Paper {
            return Err(Error::invalid(format!(
                "a {0}x{0} logical map needs --paper-scale (desk limit {DESK_MAX_LOGICAL_SIDE})",
                o.logical_side
            )));
        }
        if self.kernels != KernelCounts::default() {
            return Err(Error::invalid(format!(
                "the student network fixes {N_KERNELS} kernels of side {KERNEL}, config asks for {} of side {}",
                self.kernels.n_kernels, self.kernels.k
            )));
        }
        self.data.validate("data")?;
        self.transfer_data.validate("transfer_data")?;
        self.sensor.validate()?;
        self.distill.validate()?;
        self.energy.validate()?;
        Ok(())
    }
}
