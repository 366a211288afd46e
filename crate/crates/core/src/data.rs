//! Image datasets: a deterministic synthetic generator and a small raw
//! binary format.
//!
//! On disk a dataset is a directory with three files:
//!
//! * `meta`: `key value` lines for `count`, `channels`, `height`, `width`, `classes`
//! * `images.bin`: `count·channels·height·width` unsigned bytes, image-major, CHW
//! * `labels.bin`: `count` unsigned bytes

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::init::{seeded, substream};
use crate::tensor::{Scalar, Tensor};

/// Pixel normalization applied when batching: `(p/255 − 0.5) / 0.25`.
const PIXEL_MEAN: f64 = 0.5;
const PIXEL_STD: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub count: usize,
    pub size: usize,
    pub seed: u64,
    /// Standard deviation of the per-pixel noise relative to the class pattern.
    pub noise: f64,
}

impl SynthSpec {
    /// Parses `classes,n,hw,seed`.
    pub fn parse(text: &str) -> Result<Self> {
        let parts: Vec<&str> = text.split(',').map(str::trim).collect();
        if parts.len() != 4 {
            return Err(Error::Config(format!(
                "synthetic dataset spec `{text}` must be classes,n,hw,seed"
            )));
        }
        let num = |s: &str| -> Result<u64> {
            s.parse()
                .map_err(|_| Error::Config(format!("`{s}` in synthetic dataset spec is not an integer")))
        };
        let spec = Self {
            classes: num(parts[0])? as usize,
            count: num(parts[1])? as usize,
            size: num(parts[2])? as usize,
            seed: num(parts[3])?,
            noise: DEFAULT_NOISE,
        };
        if spec.classes < 2 || spec.classes > 256 || spec.count == 0 || spec.size == 0 {
            return Err(Error::Config(format!(
                "synthetic dataset needs 2..=256 classes and positive n, hw; got `{text}`"
            )));
        }
        Ok(spec)
    }
}

pub const DEFAULT_NOISE: f64 = 1.0;

impl Dataset {
    /// Class-conditional smooth colour patterns plus per-pixel Gaussian noise
    /// and a random brightness gain.
    pub fn synthetic(spec: &SynthSpec) -> Self {
        let (c, hw) = (3, spec.size);
        let plane = hw * hw;
        let mut rng = substream(spec.seed, 0xDA7A);
        let templates: Vec<Vec<f64>> = (0..spec.classes)
            .map(|_| {
                let raw: Vec<f64> = (0..c * plane).map(|_| StandardNormal.sample(&mut rng)).collect();
                smooth(&raw, c, hw)
            })
            .collect();
        let mut images = Vec::with_capacity(spec.count * c * plane);
        let mut labels = Vec::with_capacity(spec.count);
        for _ in 0..spec.count {
            let class = rng.random_range(0..spec.classes);
            let gain: f64 = rng.random_range(0.6..1.4);
            for &t in &templates[class] {
                let z: f64 = StandardNormal.sample(&mut rng);
                let v = 128.0 + 40.0 * (gain * t + spec.noise * z);
                images.push(v.round().clamp(0.0, 255.0) as u8);
            }
            labels.push(class as u8);
        }
        Self {
            channels: c,
            height: hw,
            width: hw,
            classes: spec.classes,
            images,
            labels,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut images = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Self {
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> Self {
        Self {
            channels: self.channels,
            height: self.height,
            width: self.width,
            classes: self.classes,
            images: Vec::new(),
            labels: Vec::new(),
        }
    }

    /// Contiguous train / recalibration / evaluation splits (60/15/25).
    pub fn split(&self) -> Splits {
        let n = self.len();
        let train_end = n * 60 / 100;
        let recal_end = train_end + n * 15 / 100;
        let range = |a: usize, b: usize| self.subset(&(a..b).collect::<Vec<_>>());
        Splits {
            train: range(0, train_end),
            recalibration: range(train_end, recal_end),
            evaluation: range(recal_end, n),
        }
    }

    /// Normalized N×C×H×W batch of the given images.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let per = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend(self.image(i).iter().map(|&p| pixel::<T>(p)));
        }
        let x = Tensor::new(&[indices.len(), self.channels, self.height, self.width], data)
            .expect("batch shape matches image data");
        (x, indices.iter().map(|&i| self.labels[i] as usize).collect())
    }

    /// As [`batch`](Self::batch) with a random pad-1 crop and horizontal flip
    /// per image.
    pub fn augmented_batch<T: Scalar>(
        &self,
        indices: &[usize],
        aug: Augment,
        rng: &mut impl Rng,
    ) -> (Tensor<T>, Vec<usize>) {
        let (c, h, w) = (self.channels, self.height, self.width);
        let mut data = Vec::with_capacity(indices.len() * c * h * w);
        for &i in indices {
            let img = self.image(i);
            let (dy, dx) = if aug.crop {
                (rng.random_range(0..3) as isize - 1, rng.random_range(0..3) as isize - 1)
            } else {
                (0, 0)
            };
            let flip = aug.flip && rng.random_bool(0.5);
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let sx = if flip { w - 1 - x } else { x } as isize + dx;
                        let sy = y as isize + dy;
                        let v = if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                            // padding at the dataset mean
                            T::zero()
                        } else {
                            pixel(img[(ch * h + sy as usize) * w + sx as usize])
                        };
                        data.push(v);
                    }
                }
            }
        }
        let x = Tensor::new(&[indices.len(), c, h, w], data).expect("batch shape matches image data");
        (x, indices.iter().map(|&i| self.labels[i] as usize).collect())
    }

    /// Index batches over the whole set in order; the last may be short.
    pub fn sequential_batches(&self, batch_size: usize) -> Vec<Vec<usize>> {
        (0..self.len())
            .collect::<Vec<_>>()
            .chunks(batch_size.max(1))
            .map(<[usize]>::to_vec)
            .collect()
    }

    /// Shuffled full batches for one epoch; a trailing remainder smaller than
    /// two images is dropped because batch statistics need at least two.
    pub fn shuffled_batches(&self, batch_size: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(rng);
        order
            .chunks(batch_size.max(1))
            .filter(|c| c.len() >= 2)
            .map(<[usize]>::to_vec)
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = format!(
            "count {}\nchannels {}\nheight {}\nwidth {}\nclasses {}\n",
            self.len(),
            self.channels,
            self.height,
            self.width,
            self.classes
        );
        for (name, bytes) in [
            ("meta", meta.as_bytes()),
            ("images.bin", &self.images[..]),
            ("labels.bin", &self.labels[..]),
        ] {
            let path = dir.join(name);
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            let path = dir.join(name);
            fs::read(&path).map_err(|e| Error::io(&path, e))
        };
        let meta = String::from_utf8(read("meta")?)
            .map_err(|_| Error::Data(format!("{}/meta is not UTF-8", dir.display())))?;
        let mut fields = std::collections::BTreeMap::new();
        for (lineno, line) in meta.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut it = line.split_whitespace();
            let (Some(key), Some(value), None) = (it.next(), it.next(), it.next()) else {
                return Err(Error::Data(format!("meta line {}: expected `key value`", lineno + 1)));
            };
            let value: usize = value
                .parse()
                .map_err(|_| Error::Data(format!("meta line {}: `{value}` is not an integer", lineno + 1)))?;
            fields.insert(key.to_string(), value);
        }
        let get = |k: &str| {
            fields
                .get(k)
                .copied()
                .ok_or_else(|| Error::Data(format!("meta is missing `{k}`")))
        };
        let ds = Self {
            channels: get("channels")?,
            height: get("height")?,
            width: get("width")?,
            classes: get("classes")?,
            images: read("images.bin")?,
            labels: read("labels.bin")?,
        };
        let count = get("count")?;
        if ds.labels.len() != count || ds.images.len() != count * ds.image_len() {
            return Err(Error::Data(format!(
                "dataset files hold {} labels and {} image bytes, meta declares {count} images of {} bytes",
                ds.labels.len(),
                ds.images.len(),
                ds.image_len()
            )));
        }
        if let Some(&bad) = ds.labels.iter().find(|&&l| l as usize >= ds.classes) {
            return Err(Error::Data(format!("label {bad} outside {} classes", ds.classes)));
        }
        Ok(ds)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Augment {
    pub crop: bool,
    pub flip: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: Dataset,
    pub recalibration: Dataset,
    pub evaluation: Dataset,
}

fn pixel<T: Scalar>(p: u8) -> T {
    T::of((p as f64 / 255.0 - PIXEL_MEAN) / PIXEL_STD)
}

/// 3×3 box blur per channel with edge clamping, rescaled to unit variance.
fn smooth(raw: &[f64], c: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; raw.len()];
    for ch in 0..c {
        for y in 0..hw {
            for x in 0..hw {
                let mut acc = 0.0;
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let sy = (y as isize + dy).clamp(0, hw as isize - 1) as usize;
                        let sx = (x as isize + dx).clamp(0, hw as isize - 1) as usize;
                        acc += raw[(ch * hw + sy) * hw + sx];
                    }
                }
                out[(ch * hw + y) * hw + x] = acc / 9.0;
            }
        }
    }
    let var = out.iter().map(|v| v * v).sum::<f64>() / out.len() as f64;
    let s = var.sqrt().max(1e-12);
    out.iter().map(|v| v / s).collect()
}

/// Deterministic shuffle of a seed, used where a fixed probe order is needed.
pub fn probe_indices(n: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded(seed));
    order.truncate(count.min(n));
    order
}
