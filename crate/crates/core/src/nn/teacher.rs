//! Desk-scale teacher: three conv(3×3)+ReLU+avgpool(2) blocks with 16, 32
//! and 64 channels, then fc(1024→128) → ReLU → fc(128→10).

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::layers::{avg_pool2, avg_pool2_backward, col2im, he_uniform, im2col, relu, relu_backward, ConvShape, Dense, DenseGrad};
use super::{IMAGE_CHANNELS, IMAGE_LEN, IMAGE_SIDE, N_CLASSES};
use crate::error::{Error, Result};
use crate::io::container::TensorFile;
use crate::optim::{AdamConfig, AdamGroup};
use crate::scalar::Real;

pub const CHANNELS: [usize; 4] = [IMAGE_CHANNELS, 16, 32, 64];
pub const FLAT: usize = 64 * 4 * 4;
pub const HIDDEN: usize = 128;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T: Real> {
    pub shape: ConvShape,
    /// `out × (in·k·k)`.
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherNetwork<T: Real> {
    pub convs: Vec<ConvLayer<T>>,
    pub fc1: Dense<T>,
    pub fc2: Dense<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherGrads<T: Real> {
    pub convs: Vec<(Array2<T>, Array1<T>)>,
    pub fc1: DenseGrad<T>,
    pub fc2: DenseGrad<T>,
}

struct ImageCache<T: Real> {
    cols: Vec<Array2<T>>,
    pre: Vec<Array2<T>>,
}

pub struct TeacherCache<T: Real> {
    images: Vec<ImageCache<T>>,
    flat: Array2<T>,
    hidden_pre: Array2<T>,
    hidden: Array2<T>,
    pub logits: Array2<T>,
}

fn conv_shapes() -> Vec<ConvShape> {
    (0..3)
        .map(|i| ConvShape {
            in_channels: CHANNELS[i],
            out_channels: CHANNELS[i + 1],
            k: 3,
            side: IMAGE_SIDE >> i,
        })
        .collect()
}

impl<T: Real> TeacherNetwork<T> {
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let convs = conv_shapes()
            .into_iter()
            .map(|s| ConvLayer {
                shape: s,
                weight: Array2::from_shape_vec((s.out_channels, s.patch()), he_uniform(&mut rng, s.patch(), s.out_channels * s.patch()))
                    .expect("shape"),
                bias: Array1::zeros(s.out_channels),
            })
            .collect();
        Self {
            convs,
            fc1: Dense::init(&mut rng, FLAT, HIDDEN),
            fc2: Dense::init(&mut rng, HIDDEN, N_CLASSES),
        }
    }

    fn forward_image(&self, image: &[T]) -> (ImageCache<T>, Vec<T>) {
        let mut x = image.to_vec();
        let mut cache = ImageCache {
            cols: Vec::with_capacity(3),
            pre: Vec::with_capacity(3),
        };
        for layer in &self.convs {
            let cols = im2col(&x, &layer.shape);
            let mut pre = layer.weight.dot(&cols);
            pre += &layer.bias.view().insert_axis(Axis(1));
            let act = relu(&pre);
            x = avg_pool2(act.as_slice().expect("standard layout"), layer.shape.out_channels, layer.shape.side);
            cache.cols.push(cols);
            cache.pre.push(pre);
        }
        (cache, x)
    }

    pub fn forward_batch(&self, images: &[&[T]]) -> Result<TeacherCache<T>> {
        if let Some(bad) = images.iter().find(|i| i.len() != IMAGE_LEN) {
            return Err(Error::shape("teacher input", IMAGE_LEN, bad.len()));
        }
        let per: Vec<(ImageCache<T>, Vec<T>)> = images.par_iter().map(|img| self.forward_image(img)).collect();
        let mut flat = Array2::zeros((images.len(), FLAT));
        let mut caches = Vec::with_capacity(images.len());
        for (b, (c, f)) in per.into_iter().enumerate() {
            flat.row_mut(b).assign(&ndarray::ArrayView1::from(&f));
            caches.push(c);
        }
        let hidden_pre = self.fc1.forward(flat.view());
        let hidden = relu(&hidden_pre);
        let logits = self.fc2.forward(hidden.view());
        Ok(TeacherCache {
            images: caches,
            flat,
            hidden_pre,
            hidden,
            logits,
        })
    }

    pub fn forward(&self, image: &[T]) -> Result<Vec<T>> {
        Ok(self.forward_batch(&[image])?.logits.into_raw_vec_and_offset().0)
    }

    pub fn backward(&self, cache: &TeacherCache<T>, dlogits: ArrayView2<'_, T>) -> TeacherGrads<T> {
        let (fc2, dh) = self.fc2.backward(cache.hidden.view(), dlogits, true);
        let mut dh = dh.expect("requested");
        relu_backward(&cache.hidden_pre, &mut dh);
        let (fc1, dflat) = self.fc1.backward(cache.flat.view(), dh.view(), true);
        let dflat = dflat.expect("requested");

        let per: Vec<Vec<(Array2<T>, Array1<T>)>> = cache
            .images
            .par_iter()
            .enumerate()
            .map(|(b, ic)| {
                let mut dy: Vec<T> = dflat.row(b).to_vec();
                let mut grads = Vec::with_capacity(3);
                for (l, layer) in self.convs.iter().enumerate().rev() {
                    let s = layer.shape;
                    let dact = avg_pool2_backward(&dy, s.out_channels, s.side);
                    let mut dpre = Array2::from_shape_vec((s.out_channels, s.pixels()), dact).expect("shape");
                    relu_backward(&ic.pre[l], &mut dpre);
                    let dw = dpre.dot(&ic.cols[l].t());
                    let db = dpre.sum_axis(Axis(1));
                    if l > 0 {
                        dy = col2im(&layer.weight.t().dot(&dpre), &s);
                    }
                    grads.push((dw, db));
                }
                grads.reverse();
                grads
            })
            .collect();
        let mut convs: Vec<(Array2<T>, Array1<T>)> = self
            .convs
            .iter()
            .map(|c| (Array2::zeros(c.weight.raw_dim()), Array1::zeros(c.bias.raw_dim())))
            .collect();
        for g in &per {
            for (acc, (dw, db)) in convs.iter_mut().zip(g) {
                acc.0 += dw;
                acc.1 += db;
            }
        }
        TeacherGrads { convs, fc1, fc2 }
    }

    pub fn cast<U: Real>(&self) -> TeacherNetwork<U> {
        let c2 = |a: &Array2<T>| a.mapv(|v| U::lit(v.to_f64_lossy()));
        let c1 = |a: &Array1<T>| a.mapv(|v| U::lit(v.to_f64_lossy()));
        TeacherNetwork {
            convs: self
                .convs
                .iter()
                .map(|c| ConvLayer {
                    shape: c.shape,
                    weight: c2(&c.weight),
                    bias: c1(&c.bias),
                })
                .collect(),
            fc1: Dense {
                weight: c2(&self.fc1.weight),
                bias: c1(&self.fc1.bias),
            },
            fc2: Dense {
                weight: c2(&self.fc2.weight),
                bias: c1(&self.fc2.bias),
            },
        }
    }

    fn param_lens(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.convs.iter().flat_map(|c| [c.weight.len(), c.bias.len()]).collect();
        v.extend([self.fc1.weight.len(), self.fc1.bias.len(), self.fc2.weight.len(), self.fc2.bias.len()]);
        v
    }

    fn params_mut(&mut self) -> Vec<&mut [T]> {
        let mut v: Vec<&mut [T]> = Vec::new();
        for c in &mut self.convs {
            v.push(c.weight.as_slice_mut().expect("standard layout"));
            v.push(c.bias.as_slice_mut().expect("standard layout"));
        }
        v.push(self.fc1.weight.as_slice_mut().expect("standard layout"));
        v.push(self.fc1.bias.as_slice_mut().expect("standard layout"));
        v.push(self.fc2.weight.as_slice_mut().expect("standard layout"));
        v.push(self.fc2.bias.as_slice_mut().expect("standard layout"));
        v
    }

    pub fn to_tensors(&self, file: &mut TensorFile) -> Result<()> {
        let f = |a: &[T]| a.iter().map(|v| v.to_f64_lossy() as f32).collect::<Vec<_>>();
        for (i, c) in self.convs.iter().enumerate() {
            let s = c.shape;
            file.push(format!("teacher.conv{}.weight", i + 1), &[s.out_channels, s.in_channels, s.k, s.k], f(c.weight.as_slice().unwrap()))?;
            file.push(format!("teacher.conv{}.bias", i + 1), &[s.out_channels], f(c.bias.as_slice().unwrap()))?;
        }
        file.push("teacher.fc1.weight", &[FLAT, HIDDEN], f(self.fc1.weight.as_slice().unwrap()))?;
        file.push("teacher.fc1.bias", &[HIDDEN], f(self.fc1.bias.as_slice().unwrap()))?;
        file.push("teacher.fc2.weight", &[HIDDEN, N_CLASSES], f(self.fc2.weight.as_slice().unwrap()))?;
        file.push("teacher.fc2.bias", &[N_CLASSES], f(self.fc2.bias.as_slice().unwrap()))?;
        Ok(())
    }

    pub fn from_tensors(file: &TensorFile) -> Result<Self> {
        let t = |v: &[f32]| v.iter().map(|&x| T::lit(x as f64)).collect::<Vec<_>>();
        let mut net = Self::init(0);
        for (i, c) in net.convs.iter_mut().enumerate() {
            let s = c.shape;
            let w = file.expect(&format!("teacher.conv{}.weight", i + 1), &[s.out_channels, s.in_channels, s.k, s.k])?;
            c.weight = Array2::from_shape_vec((s.out_channels, s.patch()), t(w)).expect("checked shape");
            c.bias = Array1::from(t(file.expect(&format!("teacher.conv{}.bias", i + 1), &[s.out_channels])?));
        }
        net.fc1.weight = Array2::from_shape_vec((FLAT, HIDDEN), t(file.expect("teacher.fc1.weight", &[FLAT, HIDDEN])?)).expect("checked shape");
        net.fc1.bias = Array1::from(t(file.expect("teacher.fc1.bias", &[HIDDEN])?));
        net.fc2.weight = Array2::from_shape_vec((HIDDEN, N_CLASSES), t(file.expect("teacher.fc2.weight", &[HIDDEN, N_CLASSES])?)).expect("checked shape");
        net.fc2.bias = Array1::from(t(file.expect("teacher.fc2.bias", &[N_CLASSES])?));
        Ok(net)
    }
}

impl<T: Real> TeacherGrads<T> {
    fn slices(&self) -> Vec<&[T]> {
        let mut v: Vec<&[T]> = Vec::new();
        for (w, b) in &self.convs {
            v.push(w.as_slice().expect("standard layout"));
            v.push(b.as_slice().expect("standard layout"));
        }
        v.push(self.fc1.weight.as_slice().expect("standard layout"));
        v.push(self.fc1.bias.as_slice().expect("standard layout"));
        v.push(self.fc2.weight.as_slice().expect("standard layout"));
        v.push(self.fc2.bias.as_slice().expect("standard layout"));
        v
    }

    pub fn all_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone)]
pub struct TeacherOptimizer<T: Real> {
    group: AdamGroup<T>,
}

impl<T: Real> TeacherOptimizer<T> {
    pub fn new(net: &TeacherNetwork<T>, config: AdamConfig) -> Self {
        Self {
            group: AdamGroup::new(&net.param_lens(), config),
        }
    }

    pub fn step(&mut self, net: &mut TeacherNetwork<T>, grads: &TeacherGrads<T>) -> Result<()> {
        if !grads.all_finite() {
            return Err(Error::NonFinite {
                what: "teacher gradient",
                iteration: self.group.steps_taken() as usize,
            });
        }
        self.group.step(net.params_mut(), grads.slices());
        Ok(())
    }
}
