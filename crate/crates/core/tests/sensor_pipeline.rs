use metaconv::analytics::cosine_similarity;
use metaconv::kernel_bank::SignedKernelSet;
use metaconv::nn::student::StudentNetwork;
use metaconv::nn::IMAGE_LEN;
use metaconv::sensor::{
    capture, optical_convolve, sum_channels, Encoder, PsfBank, PsfOptic, SensorModel, ADJACENT_LEAKAGE,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_scene(rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..IMAGE_LEN).map(|_| rng.random()).collect()
}

fn random_psf(w: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..w * w).map(|_| rng.random()).collect()
}

/// Nested-loop correlation with zero padding outside the scene.
fn brute_force(scene: &[f64], n: usize, psf: &[f64], w: usize, origin: (usize, usize)) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            let mut acc = 0.0;
            for r in 0..w {
                for c in 0..w {
                    let sy = y as isize + r as isize - origin.0 as isize;
                    let sx = x as isize + c as isize - origin.1 as isize;
                    if sy >= 0 && sx >= 0 && (sy as usize) < n && (sx as usize) < n {
                        acc += psf[r * w + c] * scene[sy as usize * n + sx as usize];
                    }
                }
            }
            out[y * n + x] = acc;
        }
    }
    out
}

#[test]
fn frequency_domain_matches_spatial_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    // An 8×8 lit patch inside the 32×32 frame, touching the border so that
    // wraparound would show up.
    let mut scene = vec![0.0; IMAGE_LEN];
    for c in 0..3 {
        for y in 0..8 {
            for x in 0..8 {
                scene[c * 1024 + y * 32 + x] = rng.random();
            }
        }
    }
    let psf = random_psf(4, &mut rng);
    let optic = PsfOptic::new(4, (1, 2), vec![Some(psf.clone()), None, None]).unwrap();
    let out = optical_convolve(&scene, &optic, 1).unwrap();
    let want = brute_force(&scene[..1024], 32, &psf, 4, (1, 2));
    let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for (a, b) in out[0].iter().zip(&want) {
        assert!((a - b).abs() <= 1e-10 * scale);
    }
    assert!(out[1].iter().all(|&v| v == 0.0));
}

#[test]
fn single_lit_pixel_returns_flipped_psf() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let psf = random_psf(5, &mut rng);
    let optic = PsfOptic::new(5, (2, 2), vec![Some(psf.clone()), Some(random_psf(5, &mut rng)), None]).unwrap();
    let mut scene = vec![0.0; IMAGE_LEN];
    scene[10 * 32 + 20] = 0.6;
    let e = 2;
    let out = optical_convolve(&scene, &optic, e).unwrap();
    let s = 64;
    // The lit scene pixel covers camera block rows 20..22, cols 40..42.
    for y in 0..s {
        for x in 0..s {
            let mut want = 0.0;
            for by in 20..22 {
                for bx in 40..42 {
                    let (r, c) = (by as isize - y as isize + 2, bx as isize - x as isize + 2);
                    if (0..5).contains(&r) && (0..5).contains(&c) {
                        want += 0.6 * psf[r as usize * 5 + c as usize];
                    }
                }
            }
            assert!((out[0][y * s + x] - want).abs() < 1e-12, "({y}, {x})");
        }
    }
    assert!(out[1].iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn convolution_is_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let optic = PsfOptic::new(6, (2, 3), (0..3).map(|_| Some(random_psf(6, &mut rng))).collect()).unwrap();
    let (s1, s2) = (random_scene(&mut rng), random_scene(&mut rng));
    let mix: Vec<f64> = s1.iter().zip(&s2).map(|(a, b)| 0.3 * a + 0.5 * b).collect();
    let (a, b, m) = (
        sum_channels(&optical_convolve(&s1, &optic, 1).unwrap()),
        sum_channels(&optical_convolve(&s2, &optic, 1).unwrap()),
        sum_channels(&optical_convolve(&mix, &optic, 1).unwrap()),
    );
    for i in 0..m.len() {
        assert!((m[i] - (0.3 * a[i] + 0.5 * b[i])).abs() < 1e-12);
    }
}

#[test]
fn ideal_psfs_reproduce_student_features() {
    let net = StudentNetwork::<f64>::init(21);
    let kernels = net.conv_kernels();
    let bank = PsfBank::ideal(&kernels, 1).unwrap();
    let enc = Encoder::new(&bank, SensorModel::ideal(1), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for i in 0..100 {
        let scene = random_scene(&mut rng);
        let optical = enc.encode(&scene, i).unwrap();
        let digital = net.features(&scene).unwrap();
        let cos = cosine_similarity(optical.flat(), &digital).unwrap();
        assert!(cos >= 0.999, "scene {i}: cosine {cos}");
        // Layout is shared entry by entry, not only up to a permutation.
        for (a, b) in optical.flat().iter().zip(&digital) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn rectify_then_pool_would_break_the_oracle() {
    let net = StudentNetwork::<f64>::init(4);
    let bank = PsfBank::ideal(&net.conv_kernels(), 1).unwrap();
    let enc = Encoder::new(&bank, SensorModel::ideal(1), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let scene = random_scene(&mut rng);
    let optical = enc.encode(&scene, 0).unwrap();
    let maps = net.conv_maps(&scene);
    let relu_maps: Vec<f64> = maps.iter().map(|v| v.max(0.0)).collect();
    let mut pooled = Vec::new();
    for k in 0..16 {
        pooled.extend(metaconv::sensor::pool_6x6(&relu_maps[k * 1024..(k + 1) * 1024]).unwrap());
    }
    let max_dev = optical
        .flat()
        .iter()
        .zip(&pooled)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(max_dev > 1e-3);
}

#[test]
fn noisy_encoding_is_reproducible_per_seed() {
    let kernels = SignedKernelSet::<f64>::random(4, 7, 9);
    let bank = PsfBank::ideal(&kernels, 2).unwrap();
    let model = SensorModel {
        read_noise_sigma: 0.01,
        shot_noise_photons_at_saturation: 5000.0,
        crosstalk: ADJACENT_LEAKAGE,
        ..SensorModel::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let scenes: Vec<Vec<f64>> = (0..3).map(|_| random_scene(&mut rng)).collect();
    let refs: Vec<&[f64]> = scenes.iter().map(|s| s.as_slice()).collect();
    let mut a = Encoder::new(&bank, model.clone(), 77).unwrap();
    let gain = a.calibrate_exposure(&refs).unwrap().gain;
    assert!(gain > 0.0);
    let mut b = Encoder::new(&bank, model.clone(), 77).unwrap();
    b.calibrate_exposure(&refs).unwrap();
    let fa = a.encode_batch(&refs, 0).unwrap();
    let fb = b.encode_batch(&refs, 0).unwrap();
    assert_eq!(fa, fb);
    // A different image index draws different noise.
    assert_ne!(a.encode(&scenes[0], 1).unwrap(), fa[0]);
    let mut c = Encoder::new(&bank, model, 78).unwrap();
    c.calibrate_exposure(&refs).unwrap();
    assert_ne!(c.encode(&scenes[0], 0).unwrap(), fa[0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn capture_is_monotone_without_noise(a in 0.0f64..2.0, b in 0.0f64..2.0, bits in 1u32..=16) {
        let model = SensorModel { bit_depth: bits, ..SensorModel::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (lo, hi) = (a.min(b), a.max(b));
        let c = capture(&[vec![lo, hi]], &model, &mut rng);
        prop_assert!(c.channels[0][0] <= c.channels[0][1]);
    }

    #[test]
    fn pooling_commutes_with_positive_scaling(scale in 0.01f64..100.0, seed in 0u64..100) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plane: Vec<f64> = (0..1024).map(|_| rng.random()).collect();
        let scaled: Vec<f64> = plane.iter().map(|v| v * scale).collect();
        let p = metaconv::sensor::pool_6x6(&plane).unwrap();
        let q = metaconv::sensor::pool_6x6(&scaled).unwrap();
        for (x, y) in p.iter().zip(&q) {
            prop_assert!((x * scale - y).abs() <= 1e-12 * y.abs().max(1.0));
        }
    }
}
