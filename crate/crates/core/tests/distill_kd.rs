use metaconv::distill::{
    accuracy, distill_train, kd_batch, kd_loss, predict_student, teacher_logits, train_teacher, KdConfig, TeacherConfig,
    TeacherLogits,
};
use metaconv::io::dataset::LabeledImageSet;
use metaconv::nn::student::{StudentNetwork, FEATURES, HIDDEN, N_KERNELS, PATCH};
use metaconv::nn::{IMAGE_LEN, N_CLASSES};
use metaconv::optim::AdamConfig;
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn ln_softmax(z: &[f64], t: f64) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = z.iter().map(|v| ((v - m) / t).exp()).sum();
    z.iter().map(|v| (v - m) / t - s.ln()).collect()
}

#[test]
fn blended_loss_matches_direct_evaluation() {
    let mut s = [0.0; 10];
    s[0] = 1.0;
    let mut t = [0.0; 10];
    t[1] = 1.0;
    let cfg = KdConfig {
        alpha: 0.5,
        tau: 2.0,
        tau_squared: false,
        ..KdConfig::default()
    };
    let (l, _) = kd_loss(&s, Some(&t), 0, &cfg).unwrap();
    // CE at T=1: −ln(e/(e+9)).
    let e = 1f64.exp();
    let ce = -(e / (e + 9.0)).ln();
    // KL at τ=2 with q from the teacher and p from the student.
    let (eh, zq, zp) = (0.5f64.exp(), 0.5f64.exp() + 9.0, 0.5f64.exp() + 9.0);
    let q: Vec<f64> = (0..10).map(|k| if k == 1 { eh / zq } else { 1.0 / zq }).collect();
    let p: Vec<f64> = (0..10).map(|k| if k == 0 { eh / zp } else { 1.0 / zp }).collect();
    let kl: f64 = q.iter().zip(&p).map(|(a, b)| a * (a / b).ln()).sum();
    assert!((l - (0.5 * ce + 0.5 * kl)).abs() < 1e-12, "{l} vs {}", 0.5 * ce + 0.5 * kl);
    let scaled = KdConfig { tau_squared: true, ..cfg };
    let (l, _) = kd_loss(&s, Some(&t), 0, &scaled).unwrap();
    assert!((l - (0.5 * ce + 2.0 * kl)).abs() < 1e-12);
}

#[test]
fn logit_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (alpha, tau_squared, student_at_tau) in [(0.5, false, false), (0.0, true, false), (0.3, false, true), (1.0, false, false)] {
        let cfg = KdConfig {
            alpha,
            tau: 3.0,
            tau_squared,
            student_at_tau,
            ..KdConfig::default()
        };
        let s: Vec<f64> = (0..10).map(|_| rng.random_range(-3.0..3.0)).collect();
        let t: Vec<f64> = (0..10).map(|_| rng.random_range(-3.0..3.0)).collect();
        let label = rng.random_range(0..10u8);
        let (_, g) = kd_loss(&s, Some(&t), label, &cfg).unwrap();
        for k in 0..10 {
            let h = 1e-6;
            let mut sp = s.clone();
            sp[k] += h;
            let mut sm = s.clone();
            sm[k] -= h;
            let fd = (kd_loss(&sp, Some(&t), label, &cfg).unwrap().0 - kd_loss(&sm, Some(&t), label, &cfg).unwrap().0) / (2.0 * h);
            let rel = (g[k] - fd).abs() / g[k].abs().max(fd.abs()).max(1e-3);
            assert!(rel <= 1e-6, "alpha {alpha}: coord {k} analytic {} fd {fd}", g[k]);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loss_is_nonnegative_and_shift_invariant(
        s in prop::collection::vec(-8.0f64..8.0, 10),
        t in prop::collection::vec(-8.0f64..8.0, 10),
        label in 0u8..10,
        alpha in 0.0f64..=1.0,
        tau in 0.5f64..8.0,
        shift_s in -50.0f64..50.0,
        shift_t in -50.0f64..50.0,
    ) {
        let cfg = KdConfig { alpha, tau, ..KdConfig::default() };
        let (l, _) = kd_loss(&s, Some(&t), label, &cfg).unwrap();
        prop_assert!(l >= 0.0);
        let s2: Vec<f64> = s.iter().map(|v| v + shift_s).collect();
        let t2: Vec<f64> = t.iter().map(|v| v + shift_t).collect();
        let (l2, _) = kd_loss(&s2, Some(&t2), label, &cfg).unwrap();
        prop_assert!((l - l2).abs() <= 1e-9 * l.max(1.0));
        // Independent evaluation of the blended loss.
        let lp = ln_softmax(&s, 1.0);
        let lq = ln_softmax(&t, tau);
        let lpt = ln_softmax(&s, tau);
        let kl: f64 = lq.iter().zip(&lpt).map(|(a, b)| a.exp() * (a - b)).sum();
        let want = alpha * -lp[label as usize] + (1.0 - alpha) * kl;
        prop_assert!((l - want).abs() <= 1e-9 * want.max(1.0));
    }
}

fn random_set(n: usize, seed: u64) -> LabeledImageSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = (0..n * IMAGE_LEN).map(|_| rng.random::<f32>()).collect();
    let labels = (0..n).map(|_| rng.random_range(0..10u8)).collect();
    LabeledImageSet::new(images, labels, "random").unwrap()
}

/// Red-dominant images are class 0, blue-dominant class 1.
fn separable_blobs(n: usize, seed: u64) -> LabeledImageSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n * IMAGE_LEN);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = (i % 2) as u8;
        let (cx, cy) = (rng.random_range(8.0..24.0), rng.random_range(8.0..24.0));
        let mut img = vec![0.0f32; IMAGE_LEN];
        for y in 0..32 {
            for x in 0..32 {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                let v = (-d2 / 30.0).exp() as f32;
                let ch = if label == 0 { 0 } else { 2 };
                img[ch * 1024 + y * 32 + x] = v;
                img[1024 + y * 32 + x] = 0.2 * rng.random::<f32>();
            }
        }
        images.extend(img);
        labels.push(label);
    }
    LabeledImageSet::new(images, labels, "blobs").unwrap()
}

#[test]
fn teacher_fits_separable_blobs() {
    let data = separable_blobs(200, 3);
    let cfg = TeacherConfig {
        epochs: 5,
        batch_size: 16,
        seed: 4,
        ..TeacherConfig::default()
    };
    let (net, logits, _) = train_teacher::<f32>(&data, &cfg).unwrap();
    assert_eq!(logits.len(), data.len());
    let preds: Vec<usize> = logits.rows.iter().map(|r| metaconv::nn::argmax(r)).collect();
    let acc = accuracy(&preds, &data.labels);
    assert!(acc >= 0.99, "train accuracy {acc}");
    let (_, again, _) = train_teacher::<f32>(&data, &cfg).unwrap();
    let bits = |t: &TeacherLogits| t.rows.iter().flatten().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&logits), bits(&again));
    assert_eq!(teacher_logits(&net, &data).unwrap(), logits);
}

#[test]
fn alpha_one_ignores_the_teacher_bit_for_bit() {
    let data = random_set(96, 5);
    let cfg = KdConfig {
        alpha: 1.0,
        epochs: 2,
        batch_size: 32,
        seed: 6,
        ..KdConfig::default()
    };
    let junk = TeacherLogits::new(N_CLASSES, vec![vec![3.0; N_CLASSES]; 96]).unwrap();
    let (a, ha) = distill_train::<f32>(&data, None, &cfg, StudentNetwork::init(7)).unwrap();
    let (b, hb) = distill_train::<f32>(&data, Some(&junk), &cfg, StudentNetwork::init(7)).unwrap();
    assert_eq!(a, b);
    assert_eq!(ha, hb);
}

#[test]
fn misaligned_teacher_is_rejected() {
    let data = random_set(10, 1);
    let short = TeacherLogits::new(N_CLASSES, vec![vec![0.0; N_CLASSES]; 9]).unwrap();
    let cfg = KdConfig::default();
    assert!(distill_train::<f32>(&data, Some(&short), &cfg, StudentNetwork::init(0)).is_err());
    assert!(distill_train::<f32>(&data, None, &cfg, StudentNetwork::init(0)).is_err());
}

#[test]
fn student_teacher_fixed_point_has_zero_loss() {
    let data = random_set(32, 2);
    let net = StudentNetwork::<f64>::init(3);
    let imgs: Vec<Vec<f64>> = (0..32).map(|i| data.images_as(i)).collect();
    let refs: Vec<&[f64]> = imgs.iter().map(|v| v.as_slice()).collect();
    let logits = net.forward_batch(&refs).unwrap().backend.logits;
    let rows: Vec<Vec<f32>> = logits.rows().into_iter().map(|r| r.iter().map(|&v| v as f32).collect()).collect();
    let cfg = KdConfig {
        alpha: 0.0,
        ..KdConfig::default()
    };
    let (l, _) = kd_batch(&logits, Some(&rows), &data.labels, &cfg).unwrap();
    assert!(l < 1e-9, "loss {l}");
}

#[test]
fn blended_loss_gradients_through_student_match_finite_differences() {
    let data = random_set(3, 9);
    let mut net = StudentNetwork::<f64>::init(10);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    net.fc1.bias.mapv_inplace(|_| rng.random_range(-0.2..0.2));
    let teacher: Vec<Vec<f32>> = (0..3).map(|_| (0..10).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let cfg = KdConfig {
        alpha: 0.4,
        tau: 3.0,
        ..KdConfig::default()
    };
    let imgs: Vec<Vec<f64>> = (0..3).map(|i| data.images_as(i)).collect();
    let refs: Vec<&[f64]> = imgs.iter().map(|v| v.as_slice()).collect();
    let loss = |n: &StudentNetwork<f64>| {
        let c = n.forward_batch(&refs).unwrap();
        kd_batch(&c.backend.logits, Some(&teacher), &data.labels, &cfg).unwrap().0
    };
    let cache = net.forward_batch(&refs).unwrap();
    let (_, g) = kd_batch(&cache.backend.logits, Some(&teacher), &data.labels, &cfg).unwrap();
    let grads = net.backward(&cache, g.view());
    let sizes = [N_KERNELS * PATCH, FEATURES * HIDDEN, HIDDEN, HIDDEN * N_CLASSES, N_CLASSES];
    let (mut checked, mut tries) = (0, 0);
    while checked < 110 && tries < 2000 {
        tries += 1;
        let t = tries % 5;
        let i = rng.random_range(0..sizes[t]);
        let a = match t {
            0 => grads.conv.as_slice().unwrap()[i],
            1 => grads.fc1.weight.as_slice().unwrap()[i],
            2 => grads.fc1.bias[i],
            3 => grads.fc2.weight.as_slice().unwrap()[i],
            _ => grads.fc2.bias[i],
        };
        if a.abs() <= 1e-8 {
            continue;
        }
        let h = 1e-5;
        let bump = |n: &mut StudentNetwork<f64>, d: f64| match t {
            0 => n.conv.as_slice_mut().unwrap()[i] += d,
            1 => n.fc1.weight.as_slice_mut().unwrap()[i] += d,
            2 => n.fc1.bias[i] += d,
            3 => n.fc2.weight.as_slice_mut().unwrap()[i] += d,
            _ => n.fc2.bias[i] += d,
        };
        let mut p = net.clone();
        bump(&mut p, h);
        let plus = loss(&p);
        bump(&mut p, -2.0 * h);
        let fd = (plus - loss(&p)) / (2.0 * h);
        let rel = (a - fd).abs() / a.abs().max(fd.abs());
        assert!(rel <= 1e-4, "tensor {t} index {i}: analytic {a} fd {fd}");
        checked += 1;
    }
    assert!(checked >= 100);
}

#[test]
fn distillation_learns_separable_data() {
    let data = separable_blobs(300, 12);
    let cfg = KdConfig {
        alpha: 1.0,
        epochs: 4,
        batch_size: 32,
        validation_fraction: 0.2,
        adam: AdamConfig {
            learning_rate: 3e-3,
            ..AdamConfig::default()
        },
        ..KdConfig::default()
    };
    let (net, h) = distill_train::<f32>(&data, None, &cfg, StudentNetwork::init(1)).unwrap();
    assert_eq!(h.validation_accuracy.len(), 4);
    assert_eq!(h.validation_accuracy[h.best_epoch], h.validation_accuracy.iter().cloned().fold(0.0, f64::max));
    let acc = accuracy(&predict_student(&net, &data).unwrap(), &data.labels);
    assert!(acc >= 0.95, "accuracy {acc}");
    let _ = Array2::<f32>::zeros((1, 1));
}
