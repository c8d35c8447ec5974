//! Acceptance runs for the ten headline criteria. Prints one PASS/FAIL line
//! per criterion. `ACCEPTANCE_ONLY=3,5` restricts the run to a subset.
//!
//! CIFAR-10 is read from `METACONV_DATA_DIR` or `CIFAR10_DIR` when present;
//! otherwise the synthetic Shapes family stands in. Criterion 7 is defined on
//! CIFAR-10 only; without it the surrogate numbers are printed and the
//! criterion is reported as FAIL (blocked), which does not fail the process.
//! Any other FAIL exits non-zero.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use metaconv::adapt::{
    fit_calibration, hybrid_logits, predictions, transfer_fit, transfer_logits, transfer_loss_and_grad, CalibrationConfig,
    TransferConfig, TransferHead,
};
use metaconv::analytics::{alexnet_layers, compressed_layers, cosine_similarity, count_macs, energy_estimate, hybrid_layers, EnergyModel};
use metaconv::distill::{
    accuracy, distill_train, kd_batch, predict_student, train_teacher, KdConfig, TeacherConfig,
};
use metaconv::io::config::DataConfig;
use metaconv::io::dataset::LabeledImageSet;
use metaconv::io::synthetic::{generate, Family};
use metaconv::kernel_bank::{export_targets, DesignTarget, SignedKernelSet, CHANNEL_WAVELENGTHS};
use metaconv::nn::student::{StudentNetwork, FEATURES, HIDDEN, N_KERNELS, PATCH};
use metaconv::nn::{cross_entropy, N_CLASSES};
use metaconv::optics::{asm_propagate, intensity, ComplexField, PropagationConfig};
use metaconv::pipeline::{aligned_digital, encode_splits, scenes};
use metaconv::psf_design::{design_bank, optimize, DesignConfig, DesignGeometry, PsfSimulator, WidthMap};
use metaconv::scatterer::{fit_all, proxies_for, synthetic_sin_table, FitOptions, ProxyFit, WidthRange};
use metaconv::sensor::{Encoder, PsfBank, SensorModel};
use ndarray::Array2;
use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PITCH: f64 = 293e-9;

#[derive(Clone, Copy, PartialEq)]
enum Status {
    Pass,
    Fail,
    /// Fails only because the environment lacks a required input.
    Blocked,
}

struct Outcome {
    status: Status,
    detail: String,
}

impl Outcome {
    fn check(ok: bool, detail: String) -> Self {
        let status = if ok { Status::Pass } else { Status::Fail };
        Self { status, detail }
    }
}

/// Data and models shared by the later criteria.
struct Shared {
    cifar: Option<(LabeledImageSet, LabeledImageSet)>,
    student: Option<(StudentNetwork<f64>, f64)>,
    fits: Option<Vec<ProxyFit>>,
    designed: Option<PsfBank<f64>>,
}

impl Shared {
    /// 10k/10k CIFAR-10 when available, else the Shapes surrogate.
    fn data(&self) -> (LabeledImageSet, LabeledImageSet, &'static str) {
        match &self.cifar {
            Some((tr, te)) => (tr.clone(), te.clone(), "CIFAR-10"),
            None => (generate(Family::Shapes, 10_000, 1), generate(Family::Shapes, 2_000, 2), "Shapes surrogate"),
        }
    }

    /// Student trained without a teacher, and its digital test accuracy.
    fn student(&mut self) -> (StudentNetwork<f64>, f64) {
        if self.student.is_none() {
            let (train, test, _) = self.data();
            let cfg = KdConfig {
                alpha: 1.0,
                epochs: 10,
                ..KdConfig::default()
            };
            let (net, _) = distill_train::<f32>(&train, None, &cfg, StudentNetwork::init(0)).unwrap();
            let acc = accuracy(&predict_student(&net, &test).unwrap(), &test.labels);
            self.student = Some((net.cast::<f64>(), acc));
        }
        self.student.clone().unwrap()
    }

    fn fits(&mut self) -> Vec<ProxyFit> {
        self.fits
            .get_or_insert_with(|| fit_all(&synthetic_sin_table(), 60e-9, &FitOptions::default()).unwrap())
            .clone()
    }
}

fn mild_noise() -> SensorModel {
    SensorModel {
        enlargement: 1,
        read_noise_sigma: 0.002,
        shot_noise_photons_at_saturation: 20_000.0,
        ..SensorModel::default()
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn c1() -> Outcome {
    let a = count_macs("alexnet", &alexnet_layers());
    let c = count_macs("compressed", &compressed_layers());
    let h = count_macs("hybrid", &hybrid_layers());
    let cal_listed = h.entries.iter().any(|e| e.layer == "calibration" && e.excluded && e.macs == 576 * 576);
    let exact = a.total == 3_651_368_960 && c.total == 2_558_464 && h.total == 150_016;
    let r = [
        (a.total as f64 / c.total as f64, 1400.0),
        (c.total as f64 / h.total as f64, 17.0),
        (a.total as f64 / h.total as f64, 24000.0),
    ];
    let ratios_ok = r.iter().all(|(got, want)| rel(*got, *want) <= 0.02);
    Outcome::check(
        exact && cal_listed && ratios_ok,
        format!(
            "totals {}/{}/{}, ratios {:.0}/{:.1}/{:.0}, calibration listed and excluded: {cal_listed}",
            a.total, c.total, h.total, r[0].0, r[1].0, r[2].0
        ),
    )
}

fn c2() -> Outcome {
    let m = EnergyModel::default();
    let digital = energy_estimate(&count_macs("alexnet", &alexnet_layers()), 32 * 32, &m).unwrap();
    let hybrid = energy_estimate(&count_macs("hybrid", &hybrid_layers()), 32 * 6 * 6, &m).unwrap();
    let px = m.energy_per_pixel_j();
    let ok = rel(px, 28.5e-9) <= 0.05
        && rel(digital.sensor_j, 29.1e-6) <= 0.02
        && rel(hybrid.sensor_j, 32.8e-6) <= 0.02
        && rel(hybrid.compute_j, 150e-9) <= 0.02
        && rel(digital.compute_j, 3.65e-3) <= 0.02;
    Outcome::check(
        ok,
        format!(
            "pixel {:.2} nJ, sensor {:.1}/{:.1} uJ, compute {:.0} nJ / {:.3} mJ",
            px * 1e9,
            digital.sensor_j * 1e6,
            hybrid.sensor_j * 1e6,
            hybrid.compute_j * 1e9,
            digital.compute_j * 1e3
        ),
    )
}

fn c3(shared: &mut Shared) -> Outcome {
    let (student, _) = shared.student();
    let (_, test, source) = shared.data();
    let test = test.take(1000);
    let bank = PsfBank::ideal(&student.conv_kernels(), 1).unwrap();
    let enc = Encoder::new(&bank, SensorModel::ideal(1), 0).unwrap();
    let imgs = scenes::<f64>(&test);
    let (mut agree, mut worst) = (0, f64::INFINITY);
    for (i, s) in imgs.iter().enumerate() {
        let optical = enc.encode(s, i as u64).unwrap();
        let digital = student.features(s).unwrap();
        worst = worst.min(cosine_similarity(optical.flat(), &digital).unwrap());
        let hybrid = hybrid_logits(&student, None, &Array2::from_shape_vec((1, FEATURES), optical.flat().to_vec()).unwrap());
        if predictions(&hybrid)[0] == argmax(&student.forward(s).unwrap()) {
            agree += 1;
        }
    }
    let frac = agree as f64 / imgs.len() as f64;
    Outcome::check(
        frac >= 0.99 && worst >= 0.999,
        format!("{source}: argmax agreement {:.2}% on {} images, min cosine {worst:.6}", frac * 100.0, imgs.len()),
    )
}

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b })
}

/// Central differences on `coords` random coordinates with non-negligible
/// analytic gradient; returns (checked, worst relative error).
fn fd_suite(
    seed: u64,
    len: usize,
    coords: usize,
    step: f64,
    analytic: impl Fn(usize) -> f64,
    loss: impl Fn(usize, f64) -> f64,
) -> (usize, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut checked, mut worst) = (0, 0.0f64);
    for _ in 0..coords * 50 {
        if checked == coords {
            break;
        }
        let i = rng.random_range(0..len);
        let a = analytic(i);
        if a.abs() <= 1e-8 {
            continue;
        }
        let fd = (loss(i, step) - loss(i, -step)) / (2.0 * step);
        worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()));
        checked += 1;
    }
    (checked, worst)
}

/// Flat view over the student's five parameter tensors.
fn student_param(net: &mut StudentNetwork<f64>, i: usize) -> &mut f64 {
    let sizes = [N_KERNELS * PATCH, FEATURES * HIDDEN, HIDDEN, HIDDEN * N_CLASSES, N_CLASSES];
    let (mut t, mut i) = (0, i);
    while i >= sizes[t] {
        i -= sizes[t];
        t += 1;
    }
    match t {
        0 => &mut net.conv.as_slice_mut().unwrap()[i],
        1 => &mut net.fc1.weight.as_slice_mut().unwrap()[i],
        2 => &mut net.fc1.bias[i],
        3 => &mut net.fc2.weight.as_slice_mut().unwrap()[i],
        _ => &mut net.fc2.bias[i],
    }
}

fn student_grad_flat(net: &StudentNetwork<f64>, dlogits: &Array2<f64>, refs: &[&[f64]]) -> Vec<f64> {
    let cache = net.forward_batch(refs).unwrap();
    let g = net.backward(&cache, dlogits.view());
    [g.conv.as_slice().unwrap(), g.fc1.weight.as_slice().unwrap(), g.fc1.bias.as_slice().unwrap(), g.fc2.weight.as_slice().unwrap(), g.fc2.bias.as_slice().unwrap()]
        .concat()
}

fn c4(shared: &mut Shared) -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    let mut record = |name: &str, (checked, worst): (usize, f64)| {
        ok &= checked >= 100 && worst <= 1e-4;
        lines.push(format!("{name} {checked} coords worst {worst:.1e}"));
    };

    // psf-design: loss gradient with respect to the scatterer widths.
    let fits = shared.fits();
    let proxies = proxies_for(&fits, &CHANNEL_WAVELENGTHS).unwrap();
    let geometry = DesignGeometry {
        distance: 40e-6,
        bin_factor: 4,
        ..DesignGeometry::default()
    };
    let range = WidthRange::default();
    let map = WidthMap::<f64>::initial(32, 2, PITCH, range, 1.5, 17).unwrap();
    let sim = PsfSimulator::for_map(&map, proxies, &geometry).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w = sim.window();
    let planes = (0..3)
        .map(|_| {
            let v: Vec<f64> = (0..w * w).map(|_| rng.random::<f64>()).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            Some(v.into_iter().map(|x| x / n).collect())
        })
        .collect();
    let target = DesignTarget::new(w, planes).unwrap();
    let (_, grad) = sim.loss_and_gradient(&map, &target).unwrap();
    let width_loss = |i: usize, d: f64| {
        let mut widths = map.widths().to_vec();
        widths[i] += d;
        let m = WidthMap::new(32, 2, PITCH, range, widths).unwrap();
        sim.loss_and_gradient(&m, &target).unwrap().0.net
    };
    record("psf-design", fd_suite(1, grad.len(), 100, 1e-12, |i| grad[i], width_loss));

    // nn-core: cross-entropy through the student.
    let mut net = StudentNetwork::<f64>::init(5);
    net.fc1.bias.mapv_inplace(|_| rng.random_range(-0.2..0.2));
    let imgs: Vec<Vec<f64>> = (0..4).map(|_| (0..3 * 32 * 32).map(|_| rng.random::<f64>()).collect()).collect();
    let refs: Vec<&[f64]> = imgs.iter().map(|v| v.as_slice()).collect();
    let labels = [3u8, 0, 7, 9];
    let ce = |n: &StudentNetwork<f64>| {
        let c = n.forward_batch(&refs).unwrap();
        cross_entropy(c.backend.logits.as_slice().unwrap(), N_CLASSES, &labels).unwrap()
    };
    let (_, g) = ce(&net);
    let grad = student_grad_flat(&net, &Array2::from_shape_vec((4, N_CLASSES), g).unwrap(), &refs);
    let bumped = |i: usize, d: f64| {
        let mut p = net.clone();
        *student_param(&mut p, i) += d;
        ce(&p).0
    };
    record("nn-core", fd_suite(2, grad.len(), 100, 1e-5, |i| grad[i], bumped));

    // distill: blended loss against fixed teacher logits.
    let teacher: Vec<Vec<f32>> = (0..4).map(|_| (0..N_CLASSES).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let kd = KdConfig {
        alpha: 0.4,
        tau: 3.0,
        ..KdConfig::default()
    };
    let kd_loss = |n: &StudentNetwork<f64>| {
        let c = n.forward_batch(&refs).unwrap();
        kd_batch(&c.backend.logits, Some(&teacher), &labels, &kd).unwrap()
    };
    let (_, g) = kd_loss(&net);
    let grad = student_grad_flat(&net, &g, &refs);
    let bumped = |i: usize, d: f64| {
        let mut p = net.clone();
        *student_param(&mut p, i) += d;
        kd_loss(&p).0
    };
    record("distill", fd_suite(3, grad.len(), 100, 1e-5, |i| grad[i], bumped));

    // adapt: transfer head through the frozen backend.
    let cfg = TransferConfig {
        layers: 2,
        hidden: 64,
        alpha: 0.7,
        beta: 0.4,
        ..TransferConfig::default()
    };
    let mut head = TransferHead::<f64>::new(&cfg, FEATURES).unwrap();
    for l in &mut head.layers {
        l.weight.mapv_inplace(|v| v + rng.random_range(-0.02..0.02));
        l.bias.mapv_inplace(|_| rng.random_range(-0.1..0.1));
    }
    let optical = Array2::from_shape_simple_fn((4, FEATURES), || rng.random_range(-1.0..1.0));
    let digital = Array2::from_shape_simple_fn((4, FEATURES), || rng.random_range(-1.0..1.0));
    let (_, grads) = transfer_loss_and_grad(&head, &net, &optical, &digital, &labels, &cfg).unwrap();
    let flat: Vec<f64> = grads
        .iter()
        .flat_map(|g| g.weight.iter().chain(g.bias.iter()).copied().collect::<Vec<_>>())
        .collect();
    let locate = |i: usize| {
        let mut i = i;
        for (li, l) in head.layers.iter().enumerate() {
            if i < l.weight.len() {
                return (li, false, i);
            }
            i -= l.weight.len();
            if i < l.bias.len() {
                return (li, true, i);
            }
            i -= l.bias.len();
        }
        unreachable!()
    };
    let bumped = |i: usize, d: f64| {
        let (li, bias, j) = locate(i);
        let mut h = head.clone();
        if bias {
            h.layers[li].bias[j] += d;
        } else {
            h.layers[li].weight.as_slice_mut().unwrap()[j] += d;
        }
        transfer_loss_and_grad(&h, &net, &optical, &digital, &labels, &cfg).unwrap().0
    };
    record("adapt", fd_suite(4, flat.len(), 100, 1e-5, |i| flat[i], bumped));

    Outcome::check(ok, lines.join("; "))
}

fn beam_radius(field: &ComplexField<f64>) -> f64 {
    let n = field.side();
    let map = intensity(field);
    let (mut m0, mut m2) = (0.0, 0.0);
    for r in 0..n {
        for c in 0..n {
            let x = (c as f64 - n as f64 / 2.0) * field.pitch();
            m0 += map.at(r, c);
            m2 += map.at(r, c) * x * x;
        }
    }
    2.0 * (m2 / m0).sqrt()
}

fn c5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 64;
    let wavelength = 633e-9;
    let amps: Vec<Complex<f64>> = (0..n * n).map(|_| Complex::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
    let field = ComplexField::new(n, amps, wavelength, wavelength).unwrap();
    let open = PropagationConfig {
        band_limited: false,
        padding: 1,
    };
    let out = asm_propagate(&field, 50e-6, open).unwrap();
    let energy = rel(out.power(), field.power());

    let same = asm_propagate(&field, 0.0, PropagationConfig { band_limited: false, padding: 2 }).unwrap();
    let scale = field.power().sqrt();
    let identity = same.amplitudes().iter().zip(field.amplitudes()).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max) / scale;

    let wavelength = 532e-9;
    let w0 = 20.0 * wavelength;
    let z_r = std::f64::consts::PI * w0 * w0 / wavelength;
    let n = 256;
    let amps = (0..n * n)
        .map(|i| {
            let x = ((i % n) as f64 - n as f64 / 2.0) * wavelength;
            let y = ((i / n) as f64 - n as f64 / 2.0) * wavelength;
            Complex::new((-(x * x + y * y) / (w0 * w0)).exp(), 0.0)
        })
        .collect();
    let beam = ComplexField::new(n, amps, wavelength, wavelength).unwrap();
    let far = asm_propagate(&beam, z_r, PropagationConfig::default()).unwrap();
    let expansion = rel(beam_radius(&far), w0 * 2f64.sqrt());
    Outcome::check(
        energy <= 1e-9 && identity <= 1e-12 && expansion <= 0.02,
        format!("energy drift {energy:.1e}, z=0 deviation {identity:.1e}, beam radius error {:.2}%", expansion * 100.0),
    )
}

fn c6(shared: &mut Shared) -> Outcome {
    let fits = shared.fits();
    let geometry = DesignGeometry::default();
    let (logical, e) = (256, 2);
    let kernels = SignedKernelSet::<f64>::random(1, 7, 7);
    let window = geometry.camera_window(logical * 2).unwrap();
    let targets = export_targets(&kernels, e, window).unwrap();
    let cfg = DesignConfig {
        iterations: 300,
        ..DesignConfig::default()
    };
    let init = WidthMap::initial(logical, 2, PITCH, WidthRange::default(), 0.05, 1).unwrap();
    let rgb = proxies_for(&fits, &CHANNEL_WAVELENGTHS).unwrap();

    let green = DesignTarget::new(window, vec![Some(targets.targets[0].plane(1).unwrap().to_vec())]).unwrap();
    let sim = PsfSimulator::new(logical, 2, PITCH, WidthRange::default(), vec![rgb[1]], &geometry).unwrap();
    let single = optimize(&sim, &init, &green, &cfg).unwrap().cosine[0].unwrap();

    let sim = PsfSimulator::new(logical, 2, PITCH, WidthRange::default(), rgb, &geometry).unwrap();
    let joint = optimize(&sim, &init, &targets.targets[0], &cfg).unwrap().cosine.into_iter().flatten().collect::<Vec<f64>>();
    let mean = joint.iter().sum::<f64>() / joint.len() as f64;
    Outcome::check(
        single >= 0.85 && mean >= 0.6,
        format!(
            "{logical}x{logical} logical, E={e}, {} iterations: single-wavelength eta {single:.3}, R/G/B eta {:.3}/{:.3}/{:.3} (mean {mean:.3})",
            cfg.iterations, joint[0], joint[1], joint[2]
        ),
    )
}

fn c7(shared: &mut Shared) -> Outcome {
    let (train, test, source) = shared.data();
    let t = Instant::now();
    let tc = TeacherConfig {
        epochs: 10,
        ..TeacherConfig::default()
    };
    let (_, logits, _) = train_teacher::<f32>(&train, &tc).unwrap();
    let teacher_time = t.elapsed();
    let (mut kd, mut plain) = (Vec::new(), Vec::new());
    for seed in 0..3 {
        for (alpha, teacher, out) in [(0.5, Some(&logits), &mut kd), (1.0, None, &mut plain)] {
            let cfg = KdConfig {
                alpha,
                seed,
                ..KdConfig::default()
            };
            let (net, _) = distill_train::<f32>(&train, teacher, &cfg, StudentNetwork::init(seed)).unwrap();
            out.push(accuracy(&predict_student(&net, &test).unwrap(), &test.labels) * 100.0);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (kd_mean, plain_mean) = (mean(&kd), mean(&plain));
    let kd_ok = kd_mean >= plain_mean - 1.0;
    let detail = format!(
        "{source}: KD {kd:.2?} mean {kd_mean:.2}, no teacher {plain:.2?} mean {plain_mean:.2} (teacher {teacher_time:.0?}); \
         published full-scale accuracies (75.90% distilled student, 76.59% compressed CNN) use the full teacher \
         and full training data and are not reproducible at desk scale"
    );
    if shared.cifar.is_some() {
        return Outcome::check(kd_mean >= 55.0 && kd_ok, detail);
    }
    let verdict = if kd_ok { "holds" } else { "does not hold" };
    Outcome {
        status: Status::Blocked,
        detail: format!("CIFAR-10 not found, criterion not evaluated; on the surrogate the KD clause {verdict}. {detail}"),
    }
}

fn c8(shared: &mut Shared) -> Outcome {
    let (student, digital) = shared.student();
    let (train, test, source) = shared.data();
    let fits = shared.fits();
    let proxies = proxies_for(&fits, &CHANNEL_WAVELENGTHS).unwrap();
    let geometry = DesignGeometry::default();
    let sim = PsfSimulator::new(128, 2, PITCH, WidthRange::default(), proxies, &geometry).unwrap();
    let kernels = student.conv_kernels();
    let targets = export_targets(&kernels, 1, sim.window()).unwrap();
    let cfg = DesignConfig {
        iterations: 150,
        ..DesignConfig::default()
    };
    let design = design_bank(&sim, PITCH, WidthRange::default(), &targets.targets, &cfg).unwrap();
    let bank = PsfBank::from_simulated(&kernels, 1, &design.simulated).unwrap();
    let (ftr, fte, exposure) = encode_splits(&bank, &mild_noise(), 5, &train, &test).unwrap();
    shared.designed = Some(bank);

    let (otr, _) = ftr.matrix::<f64>(&ftr.included());
    let (ote, labels) = fte.matrix::<f64>(&fte.included());
    let dtr = aligned_digital(&student, &train, &ftr).unwrap();
    let nocal = accuracy(&predictions(&hybrid_logits(&student, None, &ote)), &labels) * 100.0;
    let (cal, _) = fit_calibration(&otr, &dtr, &CalibrationConfig::default()).unwrap();
    let withcal = accuracy(&predictions(&hybrid_logits(&student, Some(&cal), &ote)), &labels) * 100.0;
    let digital = digital * 100.0;
    Outcome::check(
        withcal >= digital - 5.0 && withcal >= nocal + 5.0,
        format!(
            "{source}: designed bank mean eta {:.3}, 8-bit, gain {:.3}: no calibration {nocal:.2}%, calibrated {withcal:.2}%, digital {digital:.2}%",
            design.mean_cosine(),
            exposure.gain
        ),
    )
}

fn c9(shared: &mut Shared) -> Outcome {
    let (student, _) = shared.student();
    let bank = match &shared.designed {
        Some(b) => b.clone(),
        None => PsfBank::ideal(&student.conv_kernels(), 1).unwrap(),
    };
    let which = if shared.designed.is_some() { "designed" } else { "ideal" };
    let train = generate(Family::Textures, 5000, 3);
    let test = generate(Family::Textures, 2000, 4);
    let (ftr, fte, _) = encode_splits(&bank, &mild_noise(), 5, &train, &test).unwrap();
    let (otr, ltr) = ftr.matrix::<f64>(&ftr.included());
    let (ote, lte) = fte.matrix::<f64>(&fte.included());
    let dtr = aligned_digital(&student, &train, &ftr).unwrap();
    let base = accuracy(&predictions(&hybrid_logits(&student, None, &ote)), &lte) * 100.0;
    let (head, _) = transfer_fit(&otr, &dtr, &ltr, &student, &TransferConfig::default()).unwrap();
    let tuned = accuracy(&predictions(&transfer_logits(&head, &student, &ote)), &lte) * 100.0;
    Outcome::check(
        tuned >= base + 10.0,
        format!("Textures surrogate, {which} bank: frozen baseline {base:.2}%, transfer head {tuned:.2}%"),
    )
}

const TINY_CONFIG: &str = r#"
[data]
source = "synthetic"
train_count = 200
test_count = 100

[transfer_data]
source = "synthetic"
family = "textures"
train_count = 150
test_count = 60

[optics]
logical_side = 80

[sensor]
enlargement = 1
read_noise_sigma = 0.002

[design]
iterations = 2

[distill]
epochs = 1

[teacher]
epochs = 1

[transfer]
epochs = 2
"#;

/// Every subcommand in dependency order, each writing to its own directory.
fn run_chain(root: &Path, config: &Path, threads: &str) -> Result<String, String> {
    let o = |d: &str| root.join(d);
    let p = |d: &str, f: &str| root.join(d).join(f).to_string_lossy().into_owned();
    let steps: Vec<(&str, Vec<String>)> = vec![
        ("config", vec!["config".into()]),
        ("macs", vec!["macs".into()]),
        ("energy", vec!["energy".into()]),
        ("proxy", vec!["fit-proxy".into()]),
        ("data", vec!["synth-data".into()]),
        ("tdata", vec!["synth-data".into(), "--transfer".into()]),
        ("teacher", vec!["teacher".into()]),
        ("distill", vec!["distill".into(), "--teacher-logits".into(), p("teacher", "teacher_logits.bin")]),
        ("design", vec!["design".into(), "--student".into(), p("distill", "student.tensors")]),
        ("ideal", vec!["design".into(), "--ideal".into(), "--student".into(), p("distill", "student.tensors")]),
        ("encode", vec!["encode".into(), "--bank".into(), p("design", "psf_bank.tensors")]),
        ("tencode", vec!["encode".into(), "--transfer".into(), "--bank".into(), p("design", "psf_bank.tensors")]),
        (
            "calibrate",
            vec!["calibrate".into(), "--student".into(), p("distill", "student.tensors"), "--features".into(), p("encode", "features_train.bin")],
        ),
        (
            "transfer",
            vec![
                "transfer".into(),
                "--student".into(),
                p("distill", "student.tensors"),
                "--features".into(),
                p("tencode", "transfer_features_train.bin"),
                "--test-features".into(),
                p("tencode", "transfer_features_test.bin"),
            ],
        ),
        ("eval_digital", vec!["eval".into(), "--student".into(), p("distill", "student.tensors")]),
        (
            "eval_calibrated",
            vec![
                "eval".into(),
                "--student".into(),
                p("distill", "student.tensors"),
                "--features".into(),
                p("encode", "features_test.bin"),
                "--calibration".into(),
                p("calibrate", "calibration.tensors"),
            ],
        ),
        (
            "eval_transfer",
            vec![
                "eval".into(),
                "--student".into(),
                p("distill", "student.tensors"),
                "--features".into(),
                p("tencode", "transfer_features_test.bin"),
                "--transfer".into(),
                p("transfer", "transfer.tensors"),
            ],
        ),
    ];
    let mut stdout = String::new();
    for (dir, args) in steps {
        let out = Command::new(env!("CARGO_BIN_EXE_metaconv"))
            .arg("--config")
            .arg(config)
            .args(["--seed", "11", "--threads", threads, "--output"])
            .arg(o(dir))
            .args(&args)
            .env_remove("RUST_LOG")
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("{dir}: {}", String::from_utf8_lossy(&out.stderr)));
        }
        if dir == "config" {
            stdout.push_str(&String::from_utf8_lossy(&out.stdout));
        }
    }
    Ok(stdout)
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    files
}

fn c10() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("tiny.toml");
    std::fs::write(&config, TINY_CONFIG).unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let runs = run_chain(&a, &config, "1").and_then(|sa| run_chain(&b, &config, "2").map(|sb| (sa, sb)));
    let (sa, sb) = match runs {
        Ok(s) => s,
        Err(e) => return Outcome::check(false, format!("subcommand failed: {e}")),
    };
    let (ta, tb) = (tree(&a), tree(&b));
    let differing: Vec<String> = ta
        .keys()
        .chain(tb.keys())
        .filter(|k| ta.get(*k) != tb.get(*k))
        .map(|k| k.display().to_string())
        .collect();
    Outcome::check(
        sa == sb && differing.is_empty() && ta.len() > 40,
        format!("{} artifacts from 12 subcommands compared byte for byte across runs (1 and 2 threads); differing: {differing:?}", ta.len()),
    )
}

type Criterion = Box<dyn Fn(&mut Shared) -> Outcome>;

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let mut shared = Shared {
        cifar: DataConfig::default().load().ok(),
        student: None,
        fits: None,
        designed: None,
    };
    let criteria: Vec<(usize, &str, Criterion)> = vec![
        (1, "MAC ledger", Box::new(|_| c1())),
        (2, "energy model", Box::new(|_| c2())),
        (3, "oracle equivalence", Box::new(c3)),
        (4, "gradient suites", Box::new(c4)),
        (5, "wave-optics properties", Box::new(|_| c5())),
        (6, "desk-scale PSF design", Box::new(c6)),
        (7, "desk-scale distillation", Box::new(c7)),
        (8, "calibration recovery", Box::new(c8)),
        (9, "transfer learning", Box::new(c9)),
        (10, "determinism", Box::new(|_| c10())),
    ];
    let mut failed = Vec::new();
    for (id, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let t = Instant::now();
        let outcome = run(&mut shared);
        let tag = match outcome.status {
            Status::Pass => "PASS".to_string(),
            Status::Fail => "FAIL".to_string(),
            Status::Blocked => "FAIL (blocked by environment)".to_string(),
        };
        println!("criterion {id:>2} {tag}: {name}: {} [{:.1?}]", outcome.detail, t.elapsed());
        if outcome.status == Status::Fail {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        println!("failing criteria: {failed:?}");
        std::process::exit(1);
    }
}
