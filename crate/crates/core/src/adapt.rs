//! Calibration of optical features onto the frozen digital backend, and
//! transfer-learning heads trained between the frozen frontend and backend.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::container::TensorFile;
use crate::nn::layers::{relu, relu_backward, Dense, DenseGrad};
use crate::nn::student::{StudentNetwork, FEATURES};
use crate::nn::{argmax, cross_entropy, N_CLASSES};
use crate::optim::{AdamConfig, AdamGroup};
use crate::scalar::Real;

/// Affine `d → d` map on the signed feature vector, applied before the
/// backend's rectifier.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationLayer<T: Real> {
    pub layer: Dense<T>,
}

impl<T: Real> CalibrationLayer<T> {
    pub fn identity(dim: usize) -> Self {
        Self {
            layer: Dense::identity(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.layer.inputs()
    }

    pub fn apply(&self, features: ArrayView2<'_, T>) -> Array2<T> {
        self.layer.forward(features)
    }

    /// The single linear map `x ↦ (x·Wc + bc)·W + b` equal to this layer
    /// followed by `next`, i.e. the calibration folded into `next`.
    pub fn fold_into(&self, next: &Dense<T>) -> Dense<T> {
        Dense {
            weight: self.layer.weight.dot(&next.weight),
            bias: self.layer.bias.dot(&next.weight) + &next.bias,
        }
    }

    pub fn to_tensors(&self, file: &mut TensorFile) -> Result<()> {
        let d = self.dim();
        let f = |a: &[T]| a.iter().map(|v| v.to_f64_lossy() as f32).collect::<Vec<_>>();
        file.push("calibration.weight", &[d, d], f(self.layer.weight.as_slice().expect("standard layout")))?;
        file.push("calibration.bias", &[d], f(self.layer.bias.as_slice().expect("standard layout")))?;
        Ok(())
    }

    pub fn from_tensors(file: &TensorFile) -> Result<Self> {
        let (shape, w) = file.get("calibration.weight")?;
        if shape.len() != 2 || shape[0] != shape[1] {
            return Err(Error::format("calibration checkpoint", "weight must be square"));
        }
        let d = shape[0];
        let t = |v: &[f32]| v.iter().map(|&x| T::lit(x as f64)).collect::<Vec<_>>();
        Ok(Self {
            layer: Dense {
                weight: Array2::from_shape_vec((d, d), t(w)).expect("checked shape"),
                bias: Array1::from(t(file.expect("calibration.bias", &[d])?)),
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    /// Share of the aligned pairs used for fitting.
    pub fraction: f64,
    pub seed: u64,
    pub max_iterations: usize,
    /// Stop once the relative residual norm of the normal equations falls below this.
    pub tolerance: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            fraction: 0.2,
            seed: 0,
            max_iterations: 400,
            tolerance: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub samples: usize,
    pub identity_loss: f64,
    /// Mean squared discrepancy after each iteration.
    pub loss_history: Vec<f64>,
    pub iterations: usize,
}

/// Seeded sample of `⌈fraction·n⌉` indices, in ascending order.
pub fn sample_fraction(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("fraction must lie in (0, 1], got {fraction}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    idx.truncate(((n as f64 * fraction).ceil() as usize).clamp(1, n.max(1)));
    idx.sort_unstable();
    Ok(idx)
}

/// Least-squares calibration `optical·W + b ≈ digital`, solved by conjugate
/// gradients on the normal equations starting from the identity map.
///
/// Conjugate gradients on this quadratic lower the loss at every iteration,
/// so the returned map never does worse than identity on the fitted sample.
pub fn fit_calibration<T: Real>(
    optical: &Array2<T>,
    digital: &Array2<T>,
    cfg: &CalibrationConfig,
) -> Result<(CalibrationLayer<T>, CalibrationReport)> {
    if optical.dim() != digital.dim() || optical.ncols() == 0 {
        return Err(Error::shape(
            "calibration pairs",
            format!("{:?}", digital.dim()),
            format!("{:?}", optical.dim()),
        ));
    }
    let (n, d) = optical.dim();
    let idx = sample_fraction(n, cfg.fraction, cfg.seed)?;
    let m = idx.len();
    // Augmented design matrix [x, 1].
    let mut x = Array2::<f64>::ones((m, d + 1));
    let mut y = Array2::<f64>::zeros((m, d));
    for (r, &i) in idx.iter().enumerate() {
        x.slice_mut(s![r, ..d]).assign(&optical.row(i).mapv(|v| v.to_f64_lossy()));
        y.row_mut(r).assign(&digital.row(i).mapv(|v| v.to_f64_lossy()));
    }
    let gram = x.t().dot(&x);
    let b = x.t().dot(&y);
    let yy: f64 = y.iter().map(|v| v * v).sum();
    let scale = 1.0 / (m * d) as f64;

    let mut w = Array2::<f64>::zeros((d + 1, d));
    for i in 0..d {
        w[(i, i)] = 1.0;
    }
    let mut r = &b - &gram.dot(&w);
    // loss = (tr(Wᵀ G W) − 2 tr(Wᵀ B) + ‖Y‖²)/(m·d), with G·W = B − R.
    let loss_of = |w: &Array2<f64>, r: &Array2<f64>| ((-(w * &(&b + r)).sum()) + yy).max(0.0) * scale;
    let identity_loss = loss_of(&w, &r);
    let b_norm = b.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let mut p = r.clone();
    let mut rr: Array1<f64> = (&r * &r).sum_axis(Axis(0));
    let mut history = Vec::new();
    let mut iterations = 0;
    for _ in 0..cfg.max_iterations {
        if rr.sum().sqrt() / b_norm <= cfg.tolerance {
            break;
        }
        let gp = gram.dot(&p);
        let pgp = (&p * &gp).sum_axis(Axis(0));
        let alpha = Array1::from_shape_fn(d, |j| if pgp[j] > 0.0 { rr[j] / pgp[j] } else { 0.0 });
        w += &(&p * &alpha);
        r -= &(&gp * &alpha);
        let rr_new = (&r * &r).sum_axis(Axis(0));
        let beta = Array1::from_shape_fn(d, |j| if rr[j] > 0.0 { rr_new[j] / rr[j] } else { 0.0 });
        p = &r + &(&p * &beta);
        rr = rr_new;
        iterations += 1;
        history.push(loss_of(&w, &r));
    }
    let layer = Dense {
        weight: w.slice(s![..d, ..]).mapv(T::lit),
        bias: w.row(d).mapv(T::lit),
    };
    Ok((
        CalibrationLayer { layer },
        CalibrationReport {
            samples: m,
            identity_loss,
            loss_history: history,
            iterations,
        },
    ))
}

/// Frozen backend logits for (optionally calibrated) signed features.
pub fn hybrid_logits<T: Real>(student: &StudentNetwork<T>, calibration: Option<&CalibrationLayer<T>>, features: &Array2<T>) -> Array2<T> {
    let f = match calibration {
        Some(c) => c.apply(features.view()),
        None => features.clone(),
    };
    student.backend_forward(f).logits
}

pub fn predictions<T: Real>(logits: &Array2<T>) -> Vec<usize> {
    logits.rows().into_iter().map(|r| argmax(&r.to_vec())).collect()
}

/// One or two fully connected layers mapping features to features.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferHead<T: Real> {
    pub layers: Vec<Dense<T>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferConfig {
    /// 1 or 2.
    pub layers: usize,
    /// Hidden width of the two-layer head.
    pub hidden: usize,
    /// Weight of the feature-matching term.
    pub alpha: f64,
    /// Weight of the label term.
    pub beta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            layers: 1,
            hidden: FEATURES,
            alpha: 1.0,
            beta: 1.0,
            epochs: 30,
            batch_size: 64,
            seed: 0,
            adam: AdamConfig {
                learning_rate: 1e-3,
                ..AdamConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct HeadCache<T: Real> {
    inputs: Vec<Array2<T>>,
    pre: Vec<Array2<T>>,
    pub output: Array2<T>,
}

impl<T: Real> TransferHead<T> {
    /// Identity-initialized head (the hidden layer of a two-layer head is
    /// identity when square, fan-in uniform otherwise).
    pub fn new(cfg: &TransferConfig, dim: usize) -> Result<Self> {
        match cfg.layers {
            1 => Ok(Self {
                layers: vec![Dense::identity(dim)],
            }),
            2 => {
                if cfg.hidden == dim {
                    Ok(Self {
                        layers: vec![Dense::identity(dim), Dense::identity(dim)],
                    })
                } else {
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                    Ok(Self {
                        layers: vec![Dense::init(&mut rng, dim, cfg.hidden), Dense::init(&mut rng, cfg.hidden, dim)],
                    })
                }
            }
            n => Err(Error::invalid(format!("transfer head supports 1 or 2 layers, got {n}"))),
        }
    }

    pub fn forward(&self, x: ArrayView2<'_, T>) -> HeadCache<T> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for (i, l) in self.layers.iter().enumerate() {
            let z = l.forward(h.view());
            inputs.push(h);
            h = if i + 1 < self.layers.len() { relu(&z) } else { z.clone() };
            pre.push(z);
        }
        HeadCache { inputs, pre, output: h }
    }

    pub fn backward(&self, cache: &HeadCache<T>, dout: Array2<T>) -> Vec<DenseGrad<T>> {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut d = dout;
        for (i, l) in self.layers.iter().enumerate().rev() {
            if i + 1 < self.layers.len() {
                relu_backward(&cache.pre[i], &mut d);
            }
            let (g, dx) = l.backward(cache.inputs[i].view(), d.view(), i > 0);
            grads.push(g);
            if let Some(dx) = dx {
                d = dx;
            }
        }
        grads.reverse();
        grads
    }

    fn param_lens(&self) -> Vec<usize> {
        self.layers.iter().flat_map(|l| [l.weight.len(), l.bias.len()]).collect()
    }

    pub fn to_tensors(&self, file: &mut TensorFile) -> Result<()> {
        let f = |a: &[T]| a.iter().map(|v| v.to_f64_lossy() as f32).collect::<Vec<_>>();
        for (i, l) in self.layers.iter().enumerate() {
            file.push(format!("transfer.{i}.weight"), &[l.inputs(), l.outputs()], f(l.weight.as_slice().expect("standard layout")))?;
            file.push(format!("transfer.{i}.bias"), &[l.outputs()], f(l.bias.as_slice().expect("standard layout")))?;
        }
        Ok(())
    }

    pub fn from_tensors(file: &TensorFile) -> Result<Self> {
        let t = |v: &[f32]| v.iter().map(|&x| T::lit(x as f64)).collect::<Vec<_>>();
        let mut layers = Vec::new();
        while let Ok((shape, w)) = file.get(&format!("transfer.{}.weight", layers.len())) {
            if shape.len() != 2 {
                return Err(Error::format("transfer checkpoint", "weight must be 2-D"));
            }
            let (i, o) = (shape[0], shape[1]);
            let b = file.expect(&format!("transfer.{}.bias", layers.len()), &[o])?;
            layers.push(Dense {
                weight: Array2::from_shape_vec((i, o), t(w)).expect("checked shape"),
                bias: Array1::from(t(b)),
            });
        }
        if layers.is_empty() {
            return Err(Error::format("transfer checkpoint", "no transfer layers"));
        }
        Ok(Self { layers })
    }
}

/// `(α·L_feature + β·L_label, dL/dlogit-path)` for one batch; returns the
/// loss and the head gradients. The student is read-only.
pub fn transfer_loss_and_grad<T: Real>(
    head: &TransferHead<T>,
    student: &StudentNetwork<T>,
    optical: &Array2<T>,
    digital: &Array2<T>,
    labels: &[u8],
    cfg: &TransferConfig,
) -> Result<(f64, Vec<DenseGrad<T>>)> {
    let b = optical.nrows();
    let cache = head.forward(optical.view());
    let out = &cache.output;
    let d = out.ncols();
    let diff = out - digital;
    let feat_loss = diff.iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>() / (b * d) as f64;
    let mut dout = diff.mapv(|v| v * T::lit(2.0 * cfg.alpha / (b * d) as f64));
    let mut loss = cfg.alpha * feat_loss;
    if cfg.beta > 0.0 {
        let bc = student.backend_forward(out.clone());
        let (ce, g) = cross_entropy(bc.logits.as_slice().expect("standard layout"), N_CLASSES, labels)?;
        let g = Array2::from_shape_vec((b, N_CLASSES), g).expect("shape").mapv(|v| v * T::lit(cfg.beta));
        let (_, _, df) = student.backend_backward(&bc, g.view(), true);
        dout += &df.expect("requested");
        loss += cfg.beta * ce;
    }
    Ok((loss, head.backward(&cache, dout)))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TransferHistory {
    pub epoch_loss: Vec<f64>,
}

/// Train only the head; the student's parameters are never written.
pub fn transfer_fit<T: Real>(
    optical: &Array2<T>,
    digital: &Array2<T>,
    labels: &[u8],
    student: &StudentNetwork<T>,
    cfg: &TransferConfig,
) -> Result<(TransferHead<T>, TransferHistory)> {
    if optical.dim() != digital.dim() || optical.nrows() != labels.len() {
        return Err(Error::shape(
            "transfer pairs",
            format!("{:?} / {} labels", digital.dim(), labels.len()),
            format!("{:?}", optical.dim()),
        ));
    }
    if optical.ncols() != student.fc1.inputs() {
        return Err(Error::shape("transfer features", student.fc1.inputs(), optical.ncols()));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::invalid("epochs and batch_size must be positive"));
    }
    let mut head = TransferHead::new(cfg, optical.ncols())?;
    let mut opt = AdamGroup::new(&head.param_lens(), cfg.adam);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let mut history = TransferHistory::default();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0, 0);
        for batch in order.chunks(cfg.batch_size) {
            let xo = optical.select(Axis(0), batch);
            let xd = digital.select(Axis(0), batch);
            let lb: Vec<u8> = batch.iter().map(|&i| labels[i]).collect();
            let (loss, grads) = transfer_loss_and_grad(&head, student, &xo, &xd, &lb, cfg)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    what: "transfer loss",
                    iteration: epoch,
                });
            }
            let params: Vec<&mut [T]> = head
                .layers
                .iter_mut()
                .flat_map(|l| [l.weight.as_slice_mut().expect("standard layout"), l.bias.as_slice_mut().expect("standard layout")])
                .collect();
            let gs: Vec<&[T]> = grads
                .iter()
                .flat_map(|g| [g.weight.as_slice().expect("standard layout"), g.bias.as_slice().expect("standard layout")])
                .collect();
            opt.step(params, gs);
            sum += loss;
            count += 1;
        }
        history.epoch_loss.push(sum / count.max(1) as f64);
    }
    Ok((head, history))
}

pub fn transfer_logits<T: Real>(head: &TransferHead<T>, student: &StudentNetwork<T>, optical: &Array2<T>) -> Array2<T> {
    student.backend_forward(head.forward(optical.view()).output).logits
}
