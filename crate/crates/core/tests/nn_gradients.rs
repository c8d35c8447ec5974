use metaconv::nn::student::{StudentNetwork, FEATURES, HIDDEN, N_KERNELS, PATCH};
use metaconv::nn::teacher::TeacherNetwork;
use metaconv::nn::{cross_entropy, IMAGE_LEN, N_CLASSES};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn images(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let imgs = (0..n).map(|_| (0..IMAGE_LEN).map(|_| rng.random::<f64>()).collect()).collect();
    let labels = (0..n).map(|_| rng.random_range(0..N_CLASSES as u8)).collect();
    (imgs, labels)
}

fn student_loss(net: &StudentNetwork<f64>, imgs: &[Vec<f64>], labels: &[u8]) -> f64 {
    let refs: Vec<&[f64]> = imgs.iter().map(|v| v.as_slice()).collect();
    let cache = net.forward_batch(&refs).unwrap();
    cross_entropy(cache.backend.logits.as_slice().unwrap(), N_CLASSES, labels).unwrap().0
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs())
}

/// Picks a tensor by index and returns a mutable reference to one entry.
fn student_entry<'a>(net: &'a mut StudentNetwork<f64>, tensor: usize, i: usize) -> &'a mut f64 {
    match tensor {
        0 => &mut net.conv.as_slice_mut().unwrap()[i],
        1 => &mut net.fc1.weight.as_slice_mut().unwrap()[i],
        2 => &mut net.fc1.bias[i],
        3 => &mut net.fc2.weight.as_slice_mut().unwrap()[i],
        _ => &mut net.fc2.bias[i],
    }
}

#[test]
fn student_gradients_match_central_differences() {
    let mut net = StudentNetwork::<f64>::init(5);
    // Mixed-sign biases so some rectifier units are dead and some alive.
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    net.fc1.bias.mapv_inplace(|_| rng.random_range(-0.2..0.2));
    let (imgs, labels) = images(4, 7);
    let refs: Vec<&[f64]> = imgs.iter().map(|v| v.as_slice()).collect();
    let cache = net.forward_batch(&refs).unwrap();
    let (_, g) = cross_entropy(cache.backend.logits.as_slice().unwrap(), N_CLASSES, &labels).unwrap();
    let dlogits = Array2::from_shape_vec((4, N_CLASSES), g).unwrap();
    let grads = net.backward(&cache, dlogits.view());

    let sizes = [N_KERNELS * PATCH, FEATURES * HIDDEN, HIDDEN, HIDDEN * N_CLASSES, N_CLASSES];
    let analytic = |t: usize, i: usize| match t {
        0 => grads.conv.as_slice().unwrap()[i],
        1 => grads.fc1.weight.as_slice().unwrap()[i],
        2 => grads.fc1.bias[i],
        3 => grads.fc2.weight.as_slice().unwrap()[i],
        _ => grads.fc2.bias[i],
    };
    let h = 1e-5;
    let mut checked = 0;
    let mut tries = 0;
    while checked < 120 && tries < 2000 {
        tries += 1;
        let t = tries % 5;
        let i = rng.random_range(0..sizes[t]);
        let a = analytic(t, i);
        if a.abs() <= 1e-8 {
            continue;
        }
        let mut p = net.clone();
        *student_entry(&mut p, t, i) += h;
        let plus = student_loss(&p, &imgs, &labels);
        *student_entry(&mut p, t, i) -= 2.0 * h;
        let minus = student_loss(&p, &imgs, &labels);
        let fd = (plus - minus) / (2.0 * h);
        assert!(rel_err(a, fd) <= 1e-4, "tensor {t} index {i}: analytic {a} fd {fd}");
        checked += 1;
    }
    assert!(checked >= 100, "checked {checked}");
}

#[test]
fn fc2_bias_gradient_of_logit_sum_is_ones() {
    let net = StudentNetwork::<f64>::init(1);
    let (imgs, _) = images(1, 2);
    let cache = net.forward_batch(&[imgs[0].as_slice()]).unwrap();
    let g = net.backward(&cache, Array2::ones((1, N_CLASSES)).view());
    assert!(g.fc2.bias.iter().all(|&v| v == 1.0));
}

#[test]
fn dead_rectifier_passes_no_gradient() {
    let mut net = StudentNetwork::<f64>::init(1);
    net.fc1.bias[17] = -1e6;
    let (imgs, _) = images(2, 3);
    let refs: Vec<&[f64]> = imgs.iter().map(|v| v.as_slice()).collect();
    let cache = net.forward_batch(&refs).unwrap();
    let g = net.backward(&cache, Array2::ones((2, N_CLASSES)).view());
    assert_eq!(g.fc1.bias[17], 0.0);
    assert!(g.fc1.weight.column(17).iter().all(|&v| v == 0.0));
}

#[test]
fn centered_delta_kernel_traces_linear_path() {
    // One kernel is a delta on the red channel; fc1 routes its first pooled
    // bin to hidden unit 0 and fc2 reads that unit into logit 0.
    let mut net = StudentNetwork::<f64>::zeros();
    net.conv[(0, 3 * 7 + 3)] = 1.0;
    net.fc1.weight[(0, 0)] = 1.0;
    net.fc2.weight[(0, 0)] = 2.0;
    for c in [0.1, 0.4, 0.9] {
        let img = vec![c; IMAGE_LEN];
        let logits = net.forward(&img).unwrap();
        assert!((logits[0] - 2.0 * c).abs() < 1e-12);
        assert!(logits[1..].iter().all(|&v| v == 0.0));
    }
}

#[test]
fn forward_is_bit_deterministic() {
    let net = StudentNetwork::<f32>::init(9);
    let img: Vec<f32> = (0..IMAGE_LEN).map(|i| (i % 17) as f32 / 17.0).collect();
    assert_eq!(net.forward(&img).unwrap(), net.forward(&img).unwrap());
}

fn teacher_entry(net: &mut TeacherNetwork<f64>, tensor: usize, i: usize) -> &mut f64 {
    match tensor {
        0..=5 => {
            let c = &mut net.convs[tensor / 2];
            if tensor % 2 == 0 {
                &mut c.weight.as_slice_mut().unwrap()[i]
            } else {
                &mut c.bias[i]
            }
        }
        6 => &mut net.fc1.weight.as_slice_mut().unwrap()[i],
        7 => &mut net.fc1.bias[i],
        8 => &mut net.fc2.weight.as_slice_mut().unwrap()[i],
        _ => &mut net.fc2.bias[i],
    }
}

#[test]
fn teacher_gradients_match_central_differences() {
    let mut net = TeacherNetwork::<f64>::init(11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for c in &mut net.convs {
        c.bias.mapv_inplace(|_| rng.random_range(-0.05..0.05));
    }
    let (imgs, labels) = images(2, 13);
    let refs: Vec<&[f64]> = imgs.iter().map(|v| v.as_slice()).collect();
    let loss = |n: &TeacherNetwork<f64>| {
        let c = n.forward_batch(&refs).unwrap();
        cross_entropy(c.logits.as_slice().unwrap(), N_CLASSES, &labels).unwrap().0
    };
    let cache = net.forward_batch(&refs).unwrap();
    let (_, g) = cross_entropy(cache.logits.as_slice().unwrap(), N_CLASSES, &labels).unwrap();
    let grads = net.backward(&cache, Array2::from_shape_vec((2, N_CLASSES), g).unwrap().view());
    let analytic = |t: usize, i: usize| match t {
        0..=5 => {
            let (w, b) = &grads.convs[t / 2];
            if t % 2 == 0 {
                w.as_slice().unwrap()[i]
            } else {
                b[i]
            }
        }
        6 => grads.fc1.weight.as_slice().unwrap()[i],
        7 => grads.fc1.bias[i],
        8 => grads.fc2.weight.as_slice().unwrap()[i],
        _ => grads.fc2.bias[i],
    };
    let sizes: Vec<usize> = (0..10)
        .map(|t| match t {
            0..=5 if t % 2 == 0 => net.convs[t / 2].weight.len(),
            0..=5 => net.convs[t / 2].bias.len(),
            6 => net.fc1.weight.len(),
            7 => net.fc1.bias.len(),
            8 => net.fc2.weight.len(),
            _ => net.fc2.bias.len(),
        })
        .collect();
    let h = 1e-5;
    let (mut checked, mut tries) = (0, 0);
    while checked < 110 && tries < 3000 {
        tries += 1;
        let t = tries % 10;
        let i = rng.random_range(0..sizes[t]);
        let a = analytic(t, i);
        if a.abs() <= 1e-8 {
            continue;
        }
        let mut p = net.clone();
        *teacher_entry(&mut p, t, i) += h;
        let plus = loss(&p);
        *teacher_entry(&mut p, t, i) -= 2.0 * h;
        let fd = (plus - loss(&p)) / (2.0 * h);
        assert!(rel_err(a, fd) <= 1e-4, "tensor {t} index {i}: analytic {a} fd {fd}");
        checked += 1;
    }
    assert!(checked >= 100, "checked {checked}");
}
