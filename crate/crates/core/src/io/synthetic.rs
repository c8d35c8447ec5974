//! Procedurally generated 10-class 32×32 image sets used when no real dataset
//! is supplied. Every image is a pure function of `(seed, index)`.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::LabeledImageSet;
use crate::nn::{IMAGE_LEN, IMAGE_SIDE, N_CLASSES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    /// Five silhouettes, each solid or striped, on clutter.
    Shapes,
    /// Ten periodic and radial texture types.
    Textures,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Shapes => "shapes",
            Family::Textures => "textures",
        }
    }
}

/// `n` images with labels cycling through the classes in a seeded order.
pub fn generate(family: Family, n: usize, seed: u64) -> LabeledImageSet {
    let mut images = Vec::with_capacity(n * IMAGE_LEN);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64 + 1);
        let label = rng.random_range(0..N_CLASSES);
        let img = match family {
            Family::Shapes => shape_image(label, &mut rng),
            Family::Textures => texture_image(label, &mut rng),
        };
        // Stored at byte precision so a CIFAR-format round trip is lossless.
        images.extend(img.into_iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as f32 / 255.0));
        labels.push(label as u8);
    }
    LabeledImageSet::new(images, labels, format!("synthetic:{}:seed={seed}:n={n}", family.name())).expect("valid by construction")
}

fn random_color<R: Rng>(rng: &mut R) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

/// Mix `fg` over `bg` by per-pixel coverage, then add noise.
fn compose<R: Rng>(coverage: &[f64], fg: [f64; 3], bg: &[f64], rng: &mut R, sigma: f64) -> Vec<f64> {
    let n = IMAGE_SIDE * IMAGE_SIDE;
    let noise = Normal::new(0.0, sigma).expect("valid sigma");
    let mut out = vec![0.0; IMAGE_LEN];
    for c in 0..3 {
        for p in 0..n {
            let a = coverage[p];
            out[c * n + p] = a * fg[c] + (1.0 - a) * bg[c * n + p] + noise.sample(rng);
        }
    }
    out
}

/// Smooth two-color gradient background.
fn background<R: Rng>(rng: &mut R) -> Vec<f64> {
    let (a, b) = (random_color(rng), random_color(rng));
    let theta: f64 = rng.random_range(0.0..2.0 * PI);
    let n = IMAGE_SIDE;
    let mut out = vec![0.0; IMAGE_LEN];
    for y in 0..n {
        for x in 0..n {
            let t = 0.5 + ((x as f64 - 15.5) * theta.cos() + (y as f64 - 15.5) * theta.sin()) / 44.0;
            for c in 0..3 {
                out[c * n * n + y * n + x] = a[c] * (1.0 - t) + b[c] * t;
            }
        }
    }
    out
}

/// 2×2 supersampled coverage of an indicator on pixel centers.
fn coverage(inside: impl Fn(f64, f64) -> bool) -> Vec<f64> {
    let n = IMAGE_SIDE;
    let mut out = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            let mut hits = 0;
            for (dy, dx) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                if inside(x as f64 + dx, y as f64 + dy) {
                    hits += 1;
                }
            }
            out[y * n + x] = hits as f64 / 4.0;
        }
    }
    out
}

fn shape_image<R: Rng>(label: usize, rng: &mut R) -> Vec<f64> {
    let shape = label % 5;
    let striped = label >= 5;
    let cx = 16.0 + rng.random_range(-3.0..3.0);
    let cy = 16.0 + rng.random_range(-3.0..3.0);
    let r = rng.random_range(8.0..11.0);
    let rot: f64 = rng.random_range(0.0..2.0 * PI);
    let stripe_period = rng.random_range(3.0..5.0);
    let stripe_dir: f64 = rng.random_range(0.0..PI);
    let inside_shape = move |x: f64, y: f64| {
        let (dx, dy) = (x - cx, y - cy);
        let (u, v) = (dx * rot.cos() + dy * rot.sin(), -dx * rot.sin() + dy * rot.cos());
        match shape {
            0 => dx * dx + dy * dy <= r * r,
            1 => u.abs() <= r * 0.8 && v.abs() <= r * 0.8,
            2 => {
                // Equilateral triangle of circumradius r.
                (0..3).all(|k| {
                    let a = rot + k as f64 * 2.0 * PI / 3.0;
                    dx * a.cos() + dy * a.sin() <= r * 0.5
                })
            }
            3 => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r)
            }
            _ => (u.abs() <= r && v.abs() <= r * 0.3) || (v.abs() <= r && u.abs() <= r * 0.3),
        }
    };
    let cov = coverage(|x, y| {
        inside_shape(x, y) && (!striped || ((x * stripe_dir.cos() + y * stripe_dir.sin()) / stripe_period).rem_euclid(1.0) < 0.5)
    });
    let mut bg = background(rng);
    // Label-independent distractor blobs.
    let n = IMAGE_SIDE;
    for _ in 0..rng.random_range(0..=2) {
        let (bx, by, br) = (rng.random_range(0.0..32.0), rng.random_range(0.0..32.0), rng.random_range(1.5..3.5));
        let col = random_color(rng);
        let blob = coverage(|x, y| (x - bx).powi(2) + (y - by).powi(2) <= br * br);
        for c in 0..3 {
            for p in 0..n * n {
                bg[c * n * n + p] = blob[p] * col[c] + (1.0 - blob[p]) * bg[c * n * n + p];
            }
        }
    }
    let fg = contrasting_color(&bg, rng);
    compose(&cov, fg, &bg, rng, 0.04)
}

fn luminance(c: [f64; 3]) -> f64 {
    0.3 * c[0] + 0.59 * c[1] + 0.11 * c[2]
}

/// Rejection-sample a color whose luminance differs from the mean background by at least 0.3.
fn contrasting_color<R: Rng>(bg: &[f64], rng: &mut R) -> [f64; 3] {
    let n = (IMAGE_SIDE * IMAGE_SIDE) as f64;
    let mean = [0, 1, 2].map(|c| bg[c * IMAGE_SIDE * IMAGE_SIDE..(c + 1) * IMAGE_SIDE * IMAGE_SIDE].iter().sum::<f64>() / n);
    let target = luminance(mean);
    loop {
        let c = random_color(rng);
        if (luminance(c) - target).abs() >= 0.3 {
            return c;
        }
    }
}

fn texture_image<R: Rng>(label: usize, rng: &mut R) -> Vec<f64> {
    let period = rng.random_range(4.0..8.0);
    let phase = rng.random_range(0.0..1.0);
    let jitter: f64 = rng.random_range(-0.15..0.15);
    let cx = 16.0 + rng.random_range(-6.0..6.0);
    let cy = 16.0 + rng.random_range(-6.0..6.0);
    let blobs: Vec<(f64, f64, f64)> = (0..6)
        .map(|_| (rng.random_range(0.0..32.0), rng.random_range(0.0..32.0), rng.random_range(2.0..5.0)))
        .collect();
    let grating = move |x: f64, y: f64, angle: f64| {
        let a = angle + jitter;
        ((x * a.cos() + y * a.sin()) / period + phase).rem_euclid(1.0) < 0.5
    };
    let cov = coverage(|x, y| match label {
        0 => grating(x, y, 0.0),
        1 => grating(x, y, PI / 2.0),
        2 => grating(x, y, PI / 4.0),
        3 => grating(x, y, 3.0 * PI / 4.0),
        4 => grating(x, y, 0.0) ^ grating(x, y, PI / 2.0),
        5 => {
            let (u, v) = ((x / period + phase).rem_euclid(1.0) - 0.5, (y / period + phase).rem_euclid(1.0) - 0.5);
            u * u + v * v < 0.09
        }
        6 => (((x - cx).hypot(y - cy)) / period + phase).rem_euclid(1.0) < 0.5,
        7 => ((y - cy).atan2(x - cx) / (2.0 * PI) * 8.0 + phase).rem_euclid(1.0) < 0.5,
        8 => blobs.iter().any(|&(bx, by, br)| (x - bx).hypot(y - by) < br),
        _ => {
            let t = (x * (1.0 + jitter) + y * jitter) / 32.0;
            ((t * 3.0 + phase).rem_euclid(1.0)) < t
        }
    });
    let bg = background(rng);
    let fg = random_color(rng);
    compose(&cov, fg, &bg, rng, 0.06)
}
