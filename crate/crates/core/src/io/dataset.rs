//! Labeled 32×32 RGB image sets: CIFAR-10 binary batches and folders of
//! binary PPM images.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::nn::{IMAGE_LEN, IMAGE_SIDE, N_CLASSES};

pub const CIFAR_RECORD: usize = 1 + IMAGE_LEN;
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

/// Planar R, G, B images in `[0, 1]` with one label byte each.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImageSet {
    pub images: Vec<f32>,
    pub labels: Vec<u8>,
    pub provenance: String,
    /// Files that could not be read (image folders only).
    pub skipped: Vec<String>,
}

impl LabeledImageSet {
    pub fn new(images: Vec<f32>, labels: Vec<u8>, provenance: impl Into<String>) -> Result<Self> {
        if images.len() != labels.len() * IMAGE_LEN {
            return Err(Error::shape("LabeledImageSet", labels.len() * IMAGE_LEN, images.len()));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= N_CLASSES) {
            return Err(Error::invalid(format!("label {l} out of range")));
        }
        Ok(Self {
            images,
            labels,
            provenance: provenance.into(),
            skipped: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.images[i * IMAGE_LEN..(i + 1) * IMAGE_LEN]
    }

    pub fn image_refs(&self) -> Vec<&[f32]> {
        self.images.chunks_exact(IMAGE_LEN).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut images = Vec::with_capacity(indices.len() * IMAGE_LEN);
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Self {
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            provenance: format!("{} [subset of {}]", self.provenance, indices.len()),
            skipped: self.skipped.clone(),
        }
    }

    /// First `n` records (all if fewer).
    pub fn take(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let mut s = self.subset(&idx);
        s.provenance = format!("{} [first {}]", self.provenance, idx.len());
        s
    }

    pub fn images_as<T: crate::Real>(&self, i: usize) -> Vec<T> {
        self.image(i).iter().map(|&v| T::lit(v as f64)).collect()
    }

    /// CIFAR-10 binary records; pixels rounded to bytes.
    pub fn write_cifar<W: Write>(&self, mut w: W) -> Result<()> {
        let mut rec = vec![0u8; CIFAR_RECORD];
        for i in 0..self.len() {
            rec[0] = self.labels[i];
            for (b, &v) in rec[1..].iter_mut().zip(self.image(i)) {
                *b = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
            w.write_all(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Parse CIFAR-10 binary records from memory.
pub fn parse_cifar10(bytes: &[u8], provenance: impl Into<String>) -> Result<LabeledImageSet> {
    if bytes.len() % CIFAR_RECORD != 0 {
        let whole = bytes.len() / CIFAR_RECORD;
        return Err(Error::format(
            "CIFAR-10 batch",
            format!(
                "{} bytes is not a multiple of {CIFAR_RECORD}; trailing partial record starts at offset {}",
                bytes.len(),
                whole * CIFAR_RECORD
            ),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n * IMAGE_LEN);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] as usize >= N_CLASSES {
            return Err(Error::format(
                "CIFAR-10 batch",
                format!("label {} at record {i} (offset {})", rec[0], i * CIFAR_RECORD),
            ));
        }
        labels.push(rec[0]);
        images.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    LabeledImageSet::new(images, labels, provenance)
}

pub fn load_cifar10(path: &Path) -> Result<LabeledImageSet> {
    let bytes = fs::read(path)?;
    parse_cifar10(&bytes, format!("cifar10:{}", path.display()))
}

/// Concatenate several batch files in order.
pub fn load_cifar10_files(paths: &[PathBuf]) -> Result<LabeledImageSet> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for p in paths {
        let s = load_cifar10(p)?;
        images.extend(s.images);
        labels.extend(s.labels);
    }
    let names: Vec<String> = paths.iter().map(|p| p.display().to_string()).collect();
    LabeledImageSet::new(images, labels, format!("cifar10:{}", names.join("+")))
}

/// Directory holding the standard `data_batch_*.bin` / `test_batch.bin` files.
pub fn cifar10_dir_files(dir: &Path) -> Option<(Vec<PathBuf>, PathBuf)> {
    let train: Vec<PathBuf> = CIFAR_TRAIN_FILES.iter().map(|f| dir.join(f)).collect();
    let test = dir.join(CIFAR_TEST_FILE);
    (train[0].is_file() && test.is_file()).then(|| (train.into_iter().filter(|p| p.is_file()).collect(), test))
}

/// Binary PPM (`P6`, maxval ≤ 255): width, height and RGB bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB.
    pub data: Vec<u8>,
}

pub fn parse_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let bad = |m: &str| Error::format("PPM", m.to_string());
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P6" {
        return Err(bad("not a binary P6 file"));
    }
    let num = |s: String| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let width = num(token()?)?;
    let height = num(token()?)?;
    let maxval = num(token()?)?;
    if width == 0 || height == 0 || maxval == 0 || maxval > 255 {
        return Err(bad("unsupported dimensions or maxval"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let start = pos + 1;
    let len = width * height * 3;
    if bytes.len() < start + len {
        return Err(bad("raster shorter than header declares"));
    }
    let mut data = bytes[start..start + len].to_vec();
    if maxval != 255 {
        for b in &mut data {
            *b = ((*b as usize * 255 + maxval / 2) / maxval).min(255) as u8;
        }
    }
    Ok(RgbImage { width, height, data })
}

pub fn write_ppm<W: Write>(img: &RgbImage, mut w: W) -> Result<()> {
    write!(w, "P6\n{} {}\n255\n", img.width, img.height)?;
    w.write_all(&img.data)?;
    w.flush()?;
    Ok(())
}

/// Overlap weights of output cells `[i·n/m, (i+1)·n/m)` on unit input cells.
fn area_weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| {
            let (a, b) = (i as f64 * scale, (i + 1) as f64 * scale);
            let mut w = Vec::new();
            let mut j = a.floor() as usize;
            while (j as f64) < b && j < n_in {
                let overlap = (b.min(j as f64 + 1.0) - a.max(j as f64)).max(0.0);
                if overlap > 0.0 {
                    w.push((j, overlap / scale));
                }
                j += 1;
            }
            w
        })
        .collect()
}

/// Area-average resize to `side × side`, returned planar in `[0, 1]`.
pub fn resize_area(img: &RgbImage, side: usize) -> Vec<f32> {
    let wx = area_weights(img.width, side);
    let wy = area_weights(img.height, side);
    let mut out = vec![0.0f32; 3 * side * side];
    for c in 0..3 {
        for (oy, ry) in wy.iter().enumerate() {
            for (ox, rx) in wx.iter().enumerate() {
                let mut acc = 0.0;
                for &(y, a) in ry {
                    for &(x, b) in rx {
                        acc += a * b * img.data[(y * img.width + x) * 3 + c] as f64;
                    }
                }
                out[(c * side + oy) * side + ox] = (acc / 255.0) as f32;
            }
        }
    }
    out
}

/// Class subdirectories (sorted names → labels) of `.ppm` files.
pub fn load_image_folder(root: &Path) -> Result<(LabeledImageSet, Vec<String>)> {
    let mut classes: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    classes.sort();
    if classes.is_empty() || classes.len() > N_CLASSES {
        return Err(Error::invalid(format!(
            "{} holds {} class folders; expected 1..={N_CLASSES}",
            root.display(),
            classes.len()
        )));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut skipped = Vec::new();
    let mut sizes = std::collections::BTreeSet::new();
    for (label, dir) in classes.iter().enumerate() {
        let mut files: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        for f in files {
            match fs::read(&f).map_err(Error::from).and_then(|b| parse_ppm(&b)) {
                Ok(img) => {
                    sizes.insert((img.width, img.height));
                    images.extend(resize_area(&img, IMAGE_SIDE));
                    labels.push(label as u8);
                }
                Err(e) => {
                    log::warn!("skipping {}: {e}", f.display());
                    skipped.push(f.display().to_string());
                }
            }
        }
    }
    let names = classes
        .iter()
        .map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default())
        .collect();
    let sizes: Vec<String> = sizes.iter().map(|(w, h)| format!("{w}x{h}")).collect();
    let mut set = LabeledImageSet::new(
        images,
        labels,
        format!("image-folder:{} (source sizes {})", root.display(), sizes.join(",")),
    )?;
    set.skipped = skipped;
    Ok((set, names))
}

/// 16-bit binary PGM of a nonnegative plane, scaled so its maximum is 65535.
pub fn write_pgm<W: Write>(plane: &[f64], side: usize, mut w: W) -> Result<()> {
    if plane.len() != side * side {
        return Err(Error::shape("PGM plane", side * side, plane.len()));
    }
    let max = plane.iter().cloned().fold(0.0, f64::max);
    write!(w, "P5\n{side} {side}\n65535\n")?;
    for &v in plane {
        let q = if max > 0.0 { (v.max(0.0) / max * 65535.0).round() as u16 } else { 0 };
        w.write_all(&q.to_be_bytes())?;
    }
    w.flush()?;
    Ok(())
}
