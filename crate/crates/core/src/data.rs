//! Labeled image sets: the synthetic shapes generator, CIFAR-10 binary
//! ingestion and the on-disk dataset archive.
//!
//! Archives reuse the CIFAR-10 record layout (one label byte followed by
//! the R, G and B planes as bytes), generalized to `S×S` images, next to a
//! small `dataset.json` describing the image size and class names.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid_param, Error, Result};
use crate::tensor::Tensor;

pub const SHAPE_CLASSES: [&str; 4] = ["circle", "square", "triangle", "cross"];

pub const CIFAR10_CLASSES: [&str; 10] = [
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
];

/// Bytes per CIFAR-10 record: one label plus 3×32×32 pixels.
pub const CIFAR10_RECORD: usize = 3073;
pub const CIFAR10_TEST_COUNT: usize = 10_000;

const NOISE_SIGMA: f64 = 0.05;

/// Square RGB images in `[0, 1]`, stored channel-major, with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    image_size: usize,
    class_names: Vec<String>,
    pixels: Vec<f32>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(image_size: usize, class_names: Vec<String>, pixels: Vec<f32>, labels: Vec<usize>) -> Result<Self> {
        let per = 3 * image_size * image_size;
        if image_size == 0 || pixels.len() != per * labels.len() {
            return Err(Error::InvalidInput(format!(
                "{} pixels cannot hold {} images of {image_size}×{image_size}×3",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(y) = labels.iter().find(|&&y| y >= class_names.len()) {
            return Err(Error::InvalidInput(format!("label {y} out of range")));
        }
        Ok(Self {
            image_size,
            class_names,
            pixels,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn image_len(&self) -> usize {
        3 * self.image_size * self.image_size
    }

    /// `[3, S, S]`.
    pub fn image_shape(&self) -> [usize; 3] {
        [3, self.image_size, self.image_size]
    }

    pub fn batch_shape(&self, n: usize) -> Vec<usize> {
        vec![n, 3, self.image_size, self.image_size]
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let per = self.image_len();
        &self.pixels[i * per..(i + 1) * per]
    }

    pub fn image_tensor(&self, i: usize) -> Tensor<f32> {
        Tensor::from_parts(self.image_shape().to_vec(), self.image(i).to_vec())
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut pixels = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        Self {
            image_size: self.image_size,
            class_names: self.class_names.clone(),
            pixels,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Indices of the held-out split: every `every`-th image, starting at
    /// index `every - 1`.
    pub fn holdout_indices(&self, every: usize) -> Vec<usize> {
        (0..self.len()).filter(|i| every > 0 && i % every == every - 1).collect()
    }

    /// Deterministic `(train, test)` split; see [`Dataset::holdout_indices`].
    pub fn split_holdout(&self, every: usize) -> (Self, Self) {
        let test = self.holdout_indices(every);
        let train: Vec<usize> = (0..self.len()).filter(|i| !(every > 0 && i % every == every - 1)).collect();
        (self.subset(&train), self.subset(&test))
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.class_names.len()];
        for &y in &self.labels {
            h[y] += 1;
        }
        h
    }
}

/// Seeded synthetic dataset of four filled shapes on random backgrounds.
///
/// Images are interleaved by class (`circle, square, triangle, cross,
/// circle, …`). Each has a uniform random background, one shape with random
/// center, scale and a color far from the background, and additive Gaussian
/// noise with σ = 0.05, clipped to `[0, 1]`.
pub fn generate_shapes_dataset(seed: u64, count_per_class: usize, image_size: usize) -> Result<Dataset> {
    if image_size < 16 {
        return Err(invalid_param("image_size", "must be at least 16"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    let classes = SHAPE_CLASSES.len();
    let per = 3 * image_size * image_size;
    let mut pixels = Vec::with_capacity(count_per_class * classes * per);
    let mut labels = Vec::with_capacity(count_per_class * classes);
    for _ in 0..count_per_class {
        for class in 0..classes {
            render_shape(&mut rng, &noise, class, image_size, &mut pixels);
            labels.push(class);
        }
    }
    Dataset::new(
        image_size,
        SHAPE_CLASSES.iter().map(|s| s.to_string()).collect(),
        pixels,
        labels,
    )
}

fn render_shape(rng: &mut ChaCha8Rng, noise: &Normal<f64>, class: usize, size: usize, out: &mut Vec<f32>) {
    let s = size as f64;
    let bg: [f64; 3] = [rng.random(), rng.random(), rng.random()];
    let fg = loop {
        let c: [f64; 3] = [rng.random(), rng.random(), rng.random()];
        let d2: f64 = c.iter().zip(&bg).map(|(a, b)| (a - b).powi(2)).sum();
        if d2 >= 0.36 {
            break c;
        }
    };
    let cx = rng.random_range(0.3 * s..0.7 * s);
    let cy = rng.random_range(0.3 * s..0.7 * s);
    let r = rng.random_range(0.2 * s..0.32 * s);

    let inside = |x: f64, y: f64| -> bool {
        let (dx, dy) = (x - cx, y - cy);
        match class {
            0 => dx * dx + dy * dy <= r * r,
            1 => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
            2 => {
                let top = cy - r;
                let bottom = cy + 0.7 * r;
                y >= top && y <= bottom && dx.abs() <= (y - top) / (bottom - top) * r
            }
            _ => {
                let arm = r / 3.5;
                (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
            }
        }
    };

    let start = out.len();
    out.resize(start + 3 * size * size, 0.0);
    for y in 0..size {
        for x in 0..size {
            let color = if inside(x as f64 + 0.5, y as f64 + 0.5) { &fg } else { &bg };
            for ch in 0..3 {
                let v = color[ch] + noise.sample(rng);
                out[start + (ch * size + y) * size + x] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
}

/// Parses CIFAR-style records of `1 + 3·S·S` bytes.
pub fn parse_records(bytes: &[u8], image_size: usize, classes: usize) -> Result<(Vec<f32>, Vec<usize>)> {
    let record = 1 + 3 * image_size * image_size;
    if bytes.is_empty() || bytes.len() % record != 0 {
        return Err(Error::Format(format!(
            "{} bytes is not a whole number of {record}-byte records",
            bytes.len()
        )));
    }
    let count = bytes.len() / record;
    let mut pixels = Vec::with_capacity(count * (record - 1));
    let mut labels = Vec::with_capacity(count);
    for (i, rec) in bytes.chunks_exact(record).enumerate() {
        let y = rec[0] as usize;
        if y >= classes {
            return Err(Error::Format(format!("record {i}: label {y} out of range")));
        }
        labels.push(y);
        pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok((pixels, labels))
}

fn encode_records(data: &Dataset) -> Vec<u8> {
    let per = data.image_len();
    let mut bytes = Vec::with_capacity(data.len() * (per + 1));
    for i in 0..data.len() {
        bytes.push(data.label(i) as u8);
        bytes.extend(data.image(i).iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    bytes
}

/// Loads the CIFAR-10 test set (`test_batch.bin`) from `dir`. Class names
/// come from `batches.meta.txt` when present.
pub fn load_cifar10(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let bytes = fs::read(dir.join("test_batch.bin"))?;
    if bytes.len() != CIFAR10_RECORD * CIFAR10_TEST_COUNT {
        return Err(Error::Format(format!(
            "test_batch.bin holds {} bytes, expected {} records of {CIFAR10_RECORD} bytes",
            bytes.len(),
            CIFAR10_TEST_COUNT
        )));
    }
    let names = match fs::read_to_string(dir.join("batches.meta.txt")) {
        Ok(text) => text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect(),
        Err(_) => CIFAR10_CLASSES.iter().map(|s| s.to_string()).collect::<Vec<_>>(),
    };
    let (pixels, labels) = parse_records(&bytes, 32, names.len())?;
    Dataset::new(32, names, pixels, labels)
}

#[derive(Debug, Serialize, Deserialize)]
struct ArchiveMeta {
    image_size: usize,
    class_names: Vec<String>,
    count: usize,
}

/// Writes `dataset.json` and `images.bin` into `dir`. Pixels are quantized
/// to 8 bits.
pub fn save_dataset(data: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let meta = ArchiveMeta {
        image_size: data.image_size,
        class_names: data.class_names.clone(),
        count: data.len(),
    };
    fs::write(dir.join("dataset.json"), serde_json::to_vec_pretty(&meta)?)?;
    fs::write(dir.join("images.bin"), encode_records(data))?;
    Ok(())
}

/// Loads a dataset archive, or a CIFAR-10 directory when `dataset.json` is
/// absent.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let meta_path = dir.join("dataset.json");
    if !meta_path.exists() {
        return load_cifar10(dir);
    }
    let meta: ArchiveMeta = serde_json::from_slice(&fs::read(meta_path)?)
        .map_err(|e| Error::Format(format!("dataset.json: {e}")))?;
    let bytes = fs::read(dir.join("images.bin"))?;
    if meta.count == 0 {
        if !bytes.is_empty() {
            return Err(Error::Format("images.bin should be empty".into()));
        }
        return Dataset::new(meta.image_size, meta.class_names, vec![], vec![]);
    }
    let (pixels, labels) = parse_records(&bytes, meta.image_size, meta.class_names.len())?;
    if labels.len() != meta.count {
        return Err(Error::Format(format!(
            "dataset.json declares {} images, images.bin holds {}",
            meta.count,
            labels.len()
        )));
    }
    Dataset::new(meta.image_size, meta.class_names, pixels, labels)
}
