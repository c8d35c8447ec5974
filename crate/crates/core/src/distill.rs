//! Knowledge distillation: blended label and temperature losses, the
//! desk-scale teacher trainer, and the teacher-logits file.

use std::io::{Read, Write};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::container::TEACHER_MAGIC;
use crate::io::dataset::LabeledImageSet;
use crate::nn::student::{StudentGrads, StudentNetwork, StudentOptimizer};
use crate::nn::teacher::{TeacherNetwork, TeacherOptimizer};
use crate::nn::{argmax, cross_entropy, log_softmax_f64, N_CLASSES};
use crate::optim::AdamConfig;
use crate::scalar::Real;

/// Images per parallel work unit; gradients are summed unit by unit in order.
pub const CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KdConfig {
    pub alpha: f64,
    pub tau: f64,
    /// Multiply the temperature term by τ².
    pub tau_squared: bool,
    /// Evaluate the label term at temperature τ as well.
    pub student_at_tau: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub validation_fraction: f64,
    pub adam: AdamConfig,
}

impl Default for KdConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            tau: 4.0,
            tau_squared: false,
            student_at_tau: false,
            epochs: 15,
            batch_size: 64,
            seed: 0,
            validation_fraction: 0.1,
            adam: AdamConfig {
                learning_rate: 2e-3,
                ..AdamConfig::default()
            },
        }
    }
}

impl KdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::OutOfRange {
                what: "alpha",
                value: self.alpha,
                min: 0.0,
                max: 1.0,
            });
        }
        if !(self.tau > 0.0) {
            return Err(Error::invalid(format!("tau must be positive, got {}", self.tau)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::invalid("epochs and batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::invalid("validation_fraction must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Loss for one sample and its gradient with respect to the student logits.
pub fn kd_loss<T: Real>(student: &[T], teacher: Option<&[T]>, label: u8, cfg: &KdConfig) -> Result<(f64, Vec<f64>)> {
    let n = student.len();
    if label as usize >= n {
        return Err(Error::invalid(format!("label {label} out of range for {n} classes")));
    }
    let mut grad = vec![0.0; n];
    let mut loss = 0.0;
    if cfg.alpha > 0.0 {
        let t = if cfg.student_at_tau { cfg.tau } else { 1.0 };
        let logp = log_softmax_f64(student, t);
        loss += cfg.alpha * -logp[label as usize];
        for (k, g) in grad.iter_mut().enumerate() {
            let y = if k == label as usize { 1.0 } else { 0.0 };
            *g += cfg.alpha * (logp[k].exp() - y) / t;
        }
    }
    if cfg.alpha < 1.0 {
        let teacher = teacher.ok_or_else(|| Error::invalid("alpha < 1 needs teacher logits"))?;
        if teacher.len() != n {
            return Err(Error::shape("teacher logits", n, teacher.len()));
        }
        let tau = cfg.tau;
        let w = (1.0 - cfg.alpha) * if cfg.tau_squared { tau * tau } else { 1.0 };
        let logq = log_softmax_f64(teacher, tau);
        let logp = log_softmax_f64(student, tau);
        let kl: f64 = logq.iter().zip(&logp).map(|(lq, lp)| lq.exp() * (lq - lp)).sum();
        loss += w * kl.max(0.0);
        for k in 0..n {
            grad[k] += w * (logp[k].exp() - logq[k].exp()) / tau;
        }
    }
    Ok((loss, grad))
}

/// Mean KD loss over a batch and `dL/dlogits` (already divided by the batch size).
pub fn kd_batch<T: Real>(logits: &Array2<T>, teacher: Option<&[Vec<f32>]>, labels: &[u8], cfg: &KdConfig) -> Result<(f64, Array2<T>)> {
    let b = logits.nrows();
    let mut total = 0.0;
    let mut grad = Array2::zeros(logits.raw_dim());
    let tvec: Option<Vec<Vec<T>>> = teacher.map(|t| t.iter().map(|r| r.iter().map(|&v| T::lit(v as f64)).collect()).collect());
    for i in 0..b {
        let row: Vec<T> = logits.row(i).to_vec();
        let (l, g) = kd_loss(&row, tvec.as_ref().map(|t| t[i].as_slice()), labels[i], cfg)?;
        total += l;
        for (k, gk) in g.into_iter().enumerate() {
            grad[(i, k)] = T::lit(gk / b as f64);
        }
    }
    Ok((total / b as f64, grad))
}

/// Teacher logits aligned with a dataset, one row per image.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherLogits {
    pub n_classes: usize,
    pub rows: Vec<Vec<f32>>,
}

impl TeacherLogits {
    pub fn new(n_classes: usize, rows: Vec<Vec<f32>>) -> Result<Self> {
        if rows.iter().any(|r| r.len() != n_classes) {
            return Err(Error::invalid("teacher logit rows must all have n_classes entries"));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("teacher logits must be finite"));
        }
        Ok(Self { n_classes, rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Magic, `u32` count, `u32` classes, then little-endian `f32` rows.
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&TEACHER_MAGIC)?;
        w.write_all(&(self.rows.len() as u32).to_le_bytes())?;
        w.write_all(&(self.n_classes as u32).to_le_bytes())?;
        for r in &self.rows {
            for v in r {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let bad = |m: String| Error::format("teacher logits", m);
        let mut magic = [0u8; 16];
        r.read_exact(&mut magic).map_err(|_| bad("file shorter than magic".into()))?;
        if magic != TEACHER_MAGIC {
            return Err(bad("bad magic bytes".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word).map_err(|_| bad("missing count".into()))?;
        let count = u32::from_le_bytes(word) as usize;
        r.read_exact(&mut word).map_err(|_| bad("missing class count".into()))?;
        let classes = u32::from_le_bytes(word) as usize;
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        if payload.len() != count * classes * 4 {
            return Err(bad(format!("payload {} bytes, expected {}", payload.len(), count * classes * 4)));
        }
        let vals: Vec<f32> = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let rows = if classes == 0 { vec![Vec::new(); count] } else { vals.chunks(classes).map(|c| c.to_vec()).collect() };
        Self::new(classes, rows)
    }
}

/// Seeded train/validation split: `(train, validation)` index lists.
pub fn split_indices(n: usize, validation_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_5A17);
    idx.shuffle(&mut rng);
    let n_val = (n as f64 * validation_fraction).round() as usize;
    let val = idx.split_off(n - n_val);
    (idx, val)
}

fn epoch_order(indices: &[usize], seed: u64, epoch: usize) -> Vec<usize> {
    let mut order = indices.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    order.shuffle(&mut rng);
    order
}

fn batch_images<T: Real>(data: &LabeledImageSet, idx: &[usize]) -> Vec<Vec<T>> {
    idx.iter().map(|&i| data.images_as(i)).collect()
}

pub fn predict_student<T: Real>(net: &StudentNetwork<T>, data: &LabeledImageSet) -> Result<Vec<usize>> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let preds: Vec<Vec<usize>> = idx
        .par_chunks(256)
        .map(|chunk| {
            let imgs = batch_images::<T>(data, chunk);
            let refs: Vec<&[T]> = imgs.iter().map(|v| v.as_slice()).collect();
            let c = net.forward_batch(&refs)?;
            Ok(c.backend.logits.rows().into_iter().map(|r| argmax(r.as_slice().expect("row"))).collect())
        })
        .collect::<Result<_>>()?;
    Ok(preds.into_iter().flatten().collect())
}

pub fn accuracy(preds: &[usize], labels: &[u8]) -> f64 {
    let hits = preds.iter().zip(labels).filter(|(p, l)| **p == **l as usize).count();
    hits as f64 / labels.len().max(1) as f64
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epoch_loss: Vec<f64>,
    pub validation_accuracy: Vec<f64>,
    pub best_epoch: usize,
}

/// Minimize the blended loss over the student's parameters with Adam.
///
/// Returns the checkpoint with the best validation accuracy (the last epoch
/// when no validation split is requested).
pub fn distill_train<T: Real>(
    data: &LabeledImageSet,
    teacher: Option<&TeacherLogits>,
    cfg: &KdConfig,
    init: StudentNetwork<T>,
) -> Result<(StudentNetwork<T>, TrainHistory)> {
    cfg.validate()?;
    let teacher = if cfg.alpha < 1.0 {
        let t = teacher.ok_or_else(|| Error::invalid("alpha < 1 needs teacher logits"))?;
        if t.len() != data.len() || t.n_classes != N_CLASSES {
            return Err(Error::invalid(format!(
                "teacher logits ({} x {}) misaligned with dataset ({} x {N_CLASSES})",
                t.len(),
                t.n_classes,
                data.len()
            )));
        }
        Some(t)
    } else {
        None
    };
    let (train_idx, val_idx) = split_indices(data.len(), cfg.validation_fraction, cfg.seed);
    let val_set = data.subset(&val_idx);
    let mut net = init;
    let mut opt = StudentOptimizer::new(cfg.adam);
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, StudentNetwork<T>)> = None;
    for epoch in 0..cfg.epochs {
        let order = epoch_order(&train_idx, cfg.seed, epoch);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for batch in order.chunks(cfg.batch_size) {
            let b = batch.len();
            let parts: Vec<(f64, StudentGrads<T>)> = batch
                .par_chunks(CHUNK)
                .map(|chunk| {
                    let imgs = batch_images::<T>(data, chunk);
                    let refs: Vec<&[T]> = imgs.iter().map(|v| v.as_slice()).collect();
                    let cache = net.forward_batch(&refs)?;
                    let labels: Vec<u8> = chunk.iter().map(|&i| data.labels[i]).collect();
                    let trows: Option<Vec<Vec<f32>>> = teacher.map(|t| chunk.iter().map(|&i| t.rows[i].clone()).collect());
                    let (l, mut g) = kd_batch(&cache.backend.logits, trows.as_deref(), &labels, cfg)?;
                    // kd_batch averages over the chunk; rescale to the batch.
                    let s = T::lit(chunk.len() as f64 / b as f64);
                    g.mapv_inplace(|v| v * s);
                    Ok((l * chunk.len() as f64, net.backward(&cache, g.view())))
                })
                .collect::<Result<_>>()?;
            let mut grads = net.zero_grads();
            let mut loss = 0.0;
            for (l, g) in &parts {
                loss += l;
                grads.add(g);
            }
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    what: "distillation loss",
                    iteration: history.epoch_loss.len(),
                });
            }
            opt.step(&mut net, &grads)?;
            loss_sum += loss / b as f64;
            batches += 1;
        }
        history.epoch_loss.push(loss_sum / batches.max(1) as f64);
        let val_acc = if val_set.is_empty() {
            f64::NAN
        } else {
            accuracy(&predict_student(&net, &val_set)?, &val_set.labels)
        };
        history.validation_accuracy.push(val_acc);
        log::info!("epoch {epoch}: loss {:.4}, validation accuracy {val_acc:.4}", history.epoch_loss[epoch]);
        let better = match &best {
            None => true,
            Some((b, _)) => val_set.is_empty() || val_acc > *b,
        };
        if better {
            best = Some((val_acc, net.clone()));
            history.best_epoch = epoch;
        }
    }
    Ok((best.expect("at least one epoch").1, history))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

pub fn teacher_logits<T: Real>(net: &TeacherNetwork<T>, data: &LabeledImageSet) -> Result<TeacherLogits> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let rows: Vec<Vec<Vec<f32>>> = idx
        .par_chunks(128)
        .map(|chunk| {
            let imgs = batch_images::<T>(data, chunk);
            let refs: Vec<&[T]> = imgs.iter().map(|v| v.as_slice()).collect();
            let c = net.forward_batch(&refs)?;
            Ok(c.logits.rows().into_iter().map(|r| r.iter().map(|v| v.to_f64_lossy() as f32).collect()).collect())
        })
        .collect::<Result<_>>()?;
    TeacherLogits::new(N_CLASSES, rows.into_iter().flatten().collect())
}

/// Train the desk-scale teacher with cross-entropy and export its logits for
/// every image of `data`.
pub fn train_teacher<T: Real>(data: &LabeledImageSet, cfg: &TeacherConfig) -> Result<(TeacherNetwork<T>, TeacherLogits, Vec<f64>)> {
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::invalid("epochs and batch_size must be positive"));
    }
    let mut net = TeacherNetwork::<T>::init(cfg.seed);
    let mut opt = TeacherOptimizer::new(&net, cfg.adam);
    let all: Vec<usize> = (0..data.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = epoch_order(&all, cfg.seed, epoch);
        let (mut sum, mut count) = (0.0, 0);
        for batch in order.chunks(cfg.batch_size) {
            let imgs = batch_images::<T>(data, batch);
            let refs: Vec<&[T]> = imgs.iter().map(|v| v.as_slice()).collect();
            let cache = net.forward_batch(&refs)?;
            let labels: Vec<u8> = batch.iter().map(|&i| data.labels[i]).collect();
            let (loss, g) = cross_entropy(cache.logits.as_slice().expect("standard layout"), N_CLASSES, &labels)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    what: "teacher loss",
                    iteration: epoch,
                });
            }
            let g = Array2::from_shape_vec((batch.len(), N_CLASSES), g).expect("shape");
            let grads = net.backward(&cache, g.view());
            opt.step(&mut net, &grads)?;
            sum += loss;
            count += 1;
        }
        losses.push(sum / count.max(1) as f64);
        log::info!("teacher epoch {epoch}: loss {:.4}", losses[epoch]);
    }
    let logits = teacher_logits(&net, data)?;
    Ok((net, logits, losses))
}

pub fn teacher_accuracy<T: Real>(net: &TeacherNetwork<T>, data: &LabeledImageSet) -> Result<f64> {
    let l = teacher_logits(net, data)?;
    let preds: Vec<usize> = l.rows.iter().map(|r| argmax(r)).collect();
    Ok(accuracy(&preds, &data.labels))
}
