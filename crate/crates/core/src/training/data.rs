//! Labelled image sets stored as two TNSR files and the synthetic sets used
//! by the test suites.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor, Dtype, Tensor};

pub const IMAGES_FILE: &str = "images.tnsr";
pub const LABELS_FILE: &str = "labels.tnsr";

/// Images `[N, C, H, W]` with one label in `0..class_count` per image.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if images.ndim() != 4 {
            return Err(Error::shape("dataset images", images.shape(), &[labels.len(), 0, 0, 0]));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::shape("dataset labels", &[labels.len()], &images.shape()[..1]));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::LabelOutOfRange { label, classes: class_count });
        }
        Ok(Dataset { images, labels, class_count })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]` of one image.
    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Images and labels at `indices`, in that order.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let per: usize = self.image_shape().iter().product();
        let src = self.images.data();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&src[i * per..(i + 1) * per]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        let t = Tensor::new(shape, data).expect("gathered extent matches shape");
        (t, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// Writes `images.tnsr` and `labels.tnsr` into `dir`, creating it.
    pub fn save(&self, dir: impl AsRef<Path>, dtype: Dtype) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        write_tensor(dir.join(IMAGES_FILE), &self.images, dtype)?;
        let labels = Tensor::new(vec![self.len()], self.labels.iter().map(|&l| l as f64).collect())?;
        write_tensor(dir.join(LABELS_FILE), &labels, Dtype::F64)
    }
}

/// Reads a dataset directory. Labels must be non-negative integers; the class
/// count is one more than the largest label unless `class_count` is given.
pub fn load_dataset(dir: impl AsRef<Path>, class_count: Option<usize>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let images = read_tensor(dir.join(IMAGES_FILE))?;
    let raw = read_tensor(dir.join(LABELS_FILE))?;
    if raw.ndim() != 1 {
        return Err(Error::Format(format!("labels must be a vector, got shape {:?}", raw.shape())));
    }
    let labels = raw
        .data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && v < u32::MAX as f64 {
                Ok(v as usize)
            } else {
                Err(Error::Format(format!("label {v} is not a non-negative integer")))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let classes = class_count.unwrap_or_else(|| labels.iter().max().map_or(1, |m| m + 1));
    Dataset::new(images, labels, classes)
}

/// Returns a mirrored copy of `images` `[N, C, H, W]` along the width axis
/// for the samples where `flip[n]` holds.
pub fn flip_horizontal(images: &Tensor, flip: &[bool]) -> Tensor {
    let s = images.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let mut out = images.clone();
    let src = images.data();
    let dst = out.data_mut();
    for (n, _) in flip.iter().enumerate().filter(|(_, f)| **f) {
        for row in 0..c * h {
            let base = (n * c * h + row) * w;
            for x in 0..w {
                dst[base + x] = src[base + w - 1 - x];
            }
        }
    }
    out
}

/// Two classes separated by the sign of their projection on a fixed positive
/// template: `x = s * (0.6 + 0.4 * p) + noise` with `|noise| < 0.5` and
/// `s = -1, +1` by class. The template has positive entries, so pixel sums
/// separate the classes with margin.
pub fn separable_two_class(count: usize, channels: usize, size: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let template: Vec<f64> = (0..channels * size * size).map(|_| rng.random::<f64>()).collect();
    let per = template.len();
    let mut data = Vec::with_capacity(count * per);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let label = i % 2;
        let s = if label == 0 { -1.0 } else { 1.0 };
        for p in &template {
            data.push(s * (0.6 + 0.4 * p) + rng.random_range(-0.49..0.49));
        }
        labels.push(label);
    }
    Dataset::new(Tensor::new(vec![count, channels, size, size], data)?, labels, 2)
}

/// Four oriented textures: horizontal stripes, vertical stripes, diagonal
/// stripes and a checkerboard, each with random phase, frequency within a
/// band, amplitude and additive noise. Every channel shows the same pattern
/// at its own random gain.
pub fn texture_four_class(count: usize, channels: usize, size: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per = channels * size * size;
    let mut data = Vec::with_capacity(count * per);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let label = i % 4;
        // Period between 3 and 5 pixels keeps every class resolvable on 8x8.
        let k = 2.0 * PI / rng.random_range(3.0..5.0);
        let (px, py) = (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI));
        let amp = rng.random_range(0.7..1.3);
        for _ in 0..channels {
            let gain = rng.random_range(0.5..1.5);
            for y in 0..size {
                for x in 0..size {
                    let (xf, yf) = (x as f64, y as f64);
                    let v = match label {
                        0 => (k * yf + py).sin(),
                        1 => (k * xf + px).sin(),
                        2 => (k * (xf + yf) / 2f64.sqrt() + px).sin(),
                        _ => (k * xf + px).sin() * (k * yf + py).sin(),
                    };
                    data.push(gain * amp * v + rng.random_range(-0.8..0.8));
                }
            }
        }
        labels.push(label);
    }
    Dataset::new(Tensor::new(vec![count, channels, size, size], data)?, labels, 4)
}
